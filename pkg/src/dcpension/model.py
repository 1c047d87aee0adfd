"""Market, salary and preference primitives for the accumulation model.

The model tracks a defined-contribution pension fund W alongside the member's
salary Y.  A fixed fraction p of salary flows into the fund, which is invested
in n risky assets (excess returns mu, volatility matrix sigma against the
hedgeable Brownian factors) plus the cash account.  Salary has hedgeable and
unhedgeable volatility loadings, so the natural state variable for the ratio
preferences is X = W / Y.

Everything time-varying is a :class:`Schedule`: a right-continuous,
piecewise-constant path.  Deterministic scheduling keeps simulated paths
reproducible and lets the engine pre-resolve coefficients per grid segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "ValidationError",
    "Schedule",
    "MarketCoeffs",
    "ModelParams",
    "PreferenceSpec",
    "POWER_RATIO",
    "EXP_RATIO",
    "POWER_WEALTH",
    "EXP_WEALTH",
    "FAMILIES",
    "RATIO_FAMILIES",
    "WEALTH_FAMILIES",
    "market_price_of_risk",
    "coefficients_at",
    "alpha_from_beta",
]

# Largest condition number accepted for the asset volatility matrix before
# the market price of risk is considered numerically meaningless.
CONDITION_LIMIT = 1.0e12

POWER_RATIO = "power-ratio"
EXP_RATIO = "exp-ratio"
POWER_WEALTH = "power-wealth"
EXP_WEALTH = "exp-wealth"

RATIO_FAMILIES = (POWER_RATIO, EXP_RATIO)
WEALTH_FAMILIES = (POWER_WEALTH, EXP_WEALTH)
FAMILIES = RATIO_FAMILIES + WEALTH_FAMILIES


class ValidationError(ValueError):
    """Raised when parameters or inputs fail semantic validation."""


ScheduleValue = Union[float, tuple]


def _canonical_value(value) -> ScheduleValue:
    """Normalise a schedule value to a float, tuple, or tuple-of-tuples."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        out = float(value)
        if not math.isfinite(out):
            raise ValidationError(f"schedule value {value!r} is not finite")
        return out
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        vals = arr.tolist()
    elif arr.ndim == 2:
        vals = [tuple(row) for row in arr.tolist()]
    else:
        raise ValidationError(
            f"schedule values must be scalars, vectors or matrices, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("schedule value contains non-finite entries")
    return tuple(vals)


def _value_shape(value: ScheduleValue) -> tuple[int, ...]:
    if isinstance(value, float):
        return ()
    if value and isinstance(value[0], tuple):
        return (len(value), len(value[0]))
    return (len(value),)


@dataclass(frozen=True)
class Schedule:
    """Right-continuous piecewise-constant coefficient path.

    ``values[i]`` applies on ``[breakpoints[i], breakpoints[i+1])``; the last
    value extends to infinity.  The first breakpoint must be 0.0 so a lookup
    is defined for every t >= 0.  Values may be scalars, vectors or matrices,
    but every piece must share one shape.
    """

    breakpoints: tuple[float, ...]
    values: tuple[ScheduleValue, ...]

    def __post_init__(self):
        bps = tuple(float(b) for b in self.breakpoints)
        vals = tuple(_canonical_value(v) for v in self.values)
        if len(bps) == 0:
            raise ValidationError("schedule needs at least one piece")
        if len(bps) != len(vals):
            raise ValidationError(
                f"schedule has {len(bps)} breakpoints but {len(vals)} values"
            )
        if bps[0] != 0.0:
            raise ValidationError(f"first breakpoint must be 0.0, got {bps[0]}")
        if any(not math.isfinite(b) for b in bps):
            raise ValidationError("breakpoints must be finite")
        if any(b1 <= b0 for b0, b1 in zip(bps, bps[1:])):
            raise ValidationError(f"breakpoints must be strictly increasing: {bps}")
        shapes = {_value_shape(v) for v in vals}
        if len(shapes) > 1:
            raise ValidationError(f"schedule pieces have mixed shapes: {shapes}")
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "values", vals)

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant(cls, value) -> "Schedule":
        return cls((0.0,), (value,))

    @classmethod
    def step(cls, before, after, at: float) -> "Schedule":
        """A single switch from ``before`` to ``after`` at time ``at``."""
        if at <= 0.0:
            raise ValidationError(f"switch time must be positive, got {at}")
        return cls((0.0, float(at)), (before, after))

    # -- queries -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return _value_shape(self.values[0])

    @property
    def is_constant(self) -> bool:
        return len(self.values) == 1

    def segment_index(self, t: float) -> int:
        """Index of the piece in force at time t (right-continuous lookup).

        Times within 1e-9 *below* a breakpoint are snapped onto it, so grid
        times carrying float fuzz resolve onto the intended segment.
        """
        if t < -1e-9:
            raise ValidationError(f"schedule queried at negative time {t}")
        idx = 0
        for i, b in enumerate(self.breakpoints):
            if t >= b - 1e-9:
                idx = i
            else:
                break
        return idx

    def value_at(self, t: float) -> ScheduleValue:
        return self.values[self.segment_index(t)]

    def array_at(self, t: float) -> np.ndarray:
        """Value at t as a read-only float array (0-d for scalar pieces)."""
        arr = np.asarray(self.value_at(t), dtype=float)
        arr.flags.writeable = False
        return arr

    def breakpoints_in(self, t0: float, t1: float) -> tuple[float, ...]:
        """Breakpoints strictly inside the open interval (t0, t1)."""
        return tuple(b for b in self.breakpoints if t0 < b < t1)


def as_schedule(value) -> Schedule:
    """Coerce a raw scalar/vector/matrix or an existing Schedule."""
    if isinstance(value, Schedule):
        return value
    return Schedule.constant(value)


# ---------------------------------------------------------------------------
# Market parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    """Full coefficient set for the fund/salary system.

    Attributes:
        n_assets: number of risky assets (dimension of the hedgeable factor).
        n_extra: dimension of the unhedgeable salary factor (may be 0).
        rate: riskless short rate r.
        excess_return: asset excess returns mu, shape (n,).
        volatility: asset volatility matrix sigma, shape (n, n); row i holds
            asset i's loadings on the hedgeable Brownian components.
        salary_growth: salary excess drift (salary drift is r + this).
        salary_vol_hedgeable: sigma^{Y,1}, shape (n,).
        salary_vol_unhedgeable: sigma^{Y,2}, shape (m,).
        contribution: contribution rate p (fraction of salary, >= 0).
        initial_fund: W(0).
        initial_salary: Y(0) > 0.
    """

    n_assets: int
    n_extra: int
    rate: Schedule
    excess_return: Schedule
    volatility: Schedule
    salary_growth: Schedule
    salary_vol_hedgeable: Schedule
    salary_vol_unhedgeable: Schedule
    contribution: Schedule
    initial_fund: float = 1.0
    initial_salary: float = 1.0

    def __post_init__(self):
        n, m = self.n_assets, self.n_extra
        if n < 1:
            raise ValidationError(f"need at least one risky asset, got {n}")
        if m < 0:
            raise ValidationError(f"unhedgeable dimension must be >= 0, got {m}")
        for name in (
            "rate",
            "excess_return",
            "volatility",
            "salary_growth",
            "salary_vol_hedgeable",
            "salary_vol_unhedgeable",
            "contribution",
        ):
            object.__setattr__(self, name, as_schedule(getattr(self, name)))
        expectations = {
            "rate": (),
            "excess_return": (n,),
            "volatility": (n, n),
            "salary_growth": (),
            "salary_vol_hedgeable": (n,),
            "salary_vol_unhedgeable": (m,),
            "contribution": (),
        }
        for name, want in expectations.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValidationError(
                    f"{name} has shape {got}, expected {want} for n={n}, m={m}"
                )
        for t in self.contribution.breakpoints:
            if float(np.min(self.contribution.array_at(t))) < 0.0:
                raise ValidationError("contribution rate must be non-negative")
        if self.initial_salary <= 0.0:
            raise ValidationError(
                f"initial salary must be positive, got {self.initial_salary}"
            )
        if self.initial_fund < 0.0:
            raise ValidationError(
                f"initial fund must be non-negative, got {self.initial_fund}"
            )
        # Fail fast on singular volatility anywhere on the schedule.
        for t in self.volatility.breakpoints:
            market_price_of_risk(self, t)

    @property
    def initial_ratio(self) -> float:
        return self.initial_fund / self.initial_salary

    def all_breakpoints(self, t0: float, t1: float) -> tuple[float, ...]:
        """Sorted union of every coefficient breakpoint inside (t0, t1)."""
        out: set[float] = set()
        for name in (
            "rate",
            "excess_return",
            "volatility",
            "salary_growth",
            "salary_vol_hedgeable",
            "salary_vol_unhedgeable",
            "contribution",
        ):
            out.update(getattr(self, name).breakpoints_in(t0, t1))
        return tuple(sorted(out))


@dataclass(frozen=True)
class MarketCoeffs:
    """Coefficients in force at one instant, resolved to arrays."""

    t: float
    rate: float
    excess_return: np.ndarray
    volatility: np.ndarray
    price_of_risk: np.ndarray
    salary_growth: float
    salary_vol_hedgeable: np.ndarray
    salary_vol_unhedgeable: np.ndarray
    contribution: float

    @property
    def n(self) -> int:
        return self.excess_return.shape[0]

    @property
    def m(self) -> int:
        return self.salary_vol_unhedgeable.shape[0]


def market_price_of_risk(params: ModelParams, t: float = 0.0) -> np.ndarray:
    """Solve sigma(t) lam = mu(t) for the market price of risk lam.

    Raises:
        ValidationError: if the volatility matrix at t has condition number
            above ``CONDITION_LIMIT`` (treated as non-invertible).
    """
    sigma = params.volatility.array_at(t)
    mu = params.excess_return.array_at(t)
    cond = np.linalg.cond(sigma)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise ValidationError(
            f"volatility matrix at t={t} is ill-conditioned (cond={cond:.3e})"
        )
    lam = np.linalg.solve(sigma, mu)
    lam.flags.writeable = False
    return lam


def coefficients_at(params: ModelParams, t: float) -> MarketCoeffs:
    """Resolve every market/salary coefficient in force at time t."""
    return MarketCoeffs(
        t=t,
        rate=float(params.rate.array_at(t)),
        excess_return=params.excess_return.array_at(t),
        volatility=params.volatility.array_at(t),
        price_of_risk=market_price_of_risk(params, t),
        salary_growth=float(params.salary_growth.array_at(t)),
        salary_vol_hedgeable=params.salary_vol_hedgeable.array_at(t),
        salary_vol_unhedgeable=params.salary_vol_unhedgeable.array_at(t),
        contribution=float(params.contribution.array_at(t)),
    )


def alpha_from_beta(params: ModelParams, beta, t: float = 0.0) -> float:
    """Drift of the zero-intercept benchmark ratio with volatility pick beta.

    The benchmark ratio process driven by the portfolio with hedgeable
    volatility beta has linear drift coefficient

        alpha = (lam - sy1)' beta + lam' sy1 + |sy2|^2 - salary_growth,

    which makes the identity alpha - (lam - sy1)' beta independent of beta.
    """
    c = coefficients_at(params, t)
    beta_arr = np.asarray(beta, dtype=float)
    if beta_arr.shape != (c.n,):
        raise ValidationError(
            f"beta has shape {beta_arr.shape}, expected ({c.n},)"
        )
    lam = c.price_of_risk
    sy1 = c.salary_vol_hedgeable
    sy2 = c.salary_vol_unhedgeable
    return float(
        (lam - sy1) @ beta_arr
        + lam @ sy1
        + sy2 @ sy2
        - c.salary_growth
    )


# ---------------------------------------------------------------------------
# Preference specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreferenceSpec:
    """Parameters of a forward performance criterion.

    Families:
        ``power-ratio`` / ``exp-ratio``: criteria over the fund-to-salary
        ratio, floored by a benchmark ratio process with volatility ``beta``.
        ``power-wealth`` / ``exp-wealth``: criteria over discounted-style
        wealth, floored by the value of contributions invested in a fixed
        benchmark portfolio ``benchmark_weights``.

    ``vol_hedgeable``/``vol_unhedgeable`` (theta picks) are the preference's
    own volatility loadings; zero picks recover time-monotone criteria.
    """

    family: str
    gamma: float
    vol_hedgeable: Schedule
    vol_unhedgeable: Schedule
    beta: Schedule | None = None
    benchmark_weights: Schedule | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(
                f"unknown preference family {self.family!r}; pick one of {FAMILIES}"
            )
        if self.family in (POWER_RATIO, POWER_WEALTH):
            if not 0.0 < self.gamma < 1.0:
                raise ValidationError(
                    f"power families need 0 < gamma < 1, got {self.gamma}"
                )
        else:
            if self.gamma <= 0.0:
                raise ValidationError(
                    f"exponential families need gamma > 0, got {self.gamma}"
                )
        object.__setattr__(self, "vol_hedgeable", as_schedule(self.vol_hedgeable))
        object.__setattr__(self, "vol_unhedgeable", as_schedule(self.vol_unhedgeable))
        if self.family in RATIO_FAMILIES:
            if self.beta is None:
                raise ValidationError(f"{self.family} requires beta")
            object.__setattr__(self, "beta", as_schedule(self.beta))
        else:
            if self.benchmark_weights is None:
                raise ValidationError(f"{self.family} requires benchmark_weights")
            object.__setattr__(
                self, "benchmark_weights", as_schedule(self.benchmark_weights)
            )

    @property
    def is_power(self) -> bool:
        return self.family in (POWER_RATIO, POWER_WEALTH)

    @property
    def is_ratio(self) -> bool:
        return self.family in RATIO_FAMILIES

    def validate_against(self, params: ModelParams) -> None:
        """Check dimension compatibility with a model parameter set."""
        n, m = params.n_assets, params.n_extra
        if self.vol_hedgeable.shape != (n,):
            raise ValidationError(
                f"vol_hedgeable has shape {self.vol_hedgeable.shape}, expected ({n},)"
            )
        if self.vol_unhedgeable.shape != (m,):
            raise ValidationError(
                f"vol_unhedgeable has shape {self.vol_unhedgeable.shape}, expected ({m},)"
            )
        if self.beta is not None and self.beta.shape != (n,):
            raise ValidationError(
                f"beta has shape {self.beta.shape}, expected ({n},)"
            )
        if (
            self.benchmark_weights is not None
            and self.benchmark_weights.shape != (n,)
        ):
            raise ValidationError(
                f"benchmark_weights has shape {self.benchmark_weights.shape}, expected ({n},)"
            )
