"""Shared parameter sets.

Two workhorse configurations appear throughout the suite:

* ``flat``     -- one risky asset, hedgeable salary risk only.  The classical
                  fixed-horizon rule is well defined here.
* ``showcase`` -- same market plus an unhedgeable salary component, the
                  setting used by the forward-criterion experiments.

Both are small enough to hand-check every derived constant:
sigma = 0.2, mu = 0.08 so the market price of risk is 0.4 exactly.
"""

import pytest

from dcpension import ModelParams, PreferenceSpec, Schedule
from dcpension.model import POWER_RATIO


def _sched(value):
    return value if isinstance(value, Schedule) else Schedule.constant(value)


def make_params(
    *,
    rate=0.03,
    mu=(0.08,),
    sigma=((0.2,),),
    salary_growth=0.02,
    sy1=(0.08,),
    sy2=(0.0,),
    contribution=0.1,
    w0=1.0,
    y0=1.0,
):
    """Build a ModelParams without going through TOML; Schedules pass through."""
    return ModelParams(
        n_assets=len(mu),
        n_extra=len(sy2),
        rate=_sched(rate),
        excess_return=_sched(tuple(mu)),
        volatility=_sched(tuple(tuple(row) for row in sigma)),
        salary_growth=_sched(salary_growth),
        salary_vol_hedgeable=_sched(tuple(sy1)),
        salary_vol_unhedgeable=_sched(tuple(sy2)),
        contribution=_sched(contribution),
        initial_fund=w0,
        initial_salary=y0,
    )


@pytest.fixture(scope="session")
def flat_params():
    return make_params()


@pytest.fixture(scope="session")
def showcase_params():
    return make_params(sy2=(0.05,))


@pytest.fixture(scope="session")
def showcase_pref():
    return PreferenceSpec(
        family=POWER_RATIO,
        gamma=0.6,
        vol_hedgeable=(0.0,),
        vol_unhedgeable=(0.2,),
        beta=(0.25,),
    )
