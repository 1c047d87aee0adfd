"""Property-based invariants.

These are the structural facts the closed forms promise for *all* admissible
inputs, not just the hand-checked points: linearity of the benchmark drift
in beta, positivity and monotonicity of the capitalisation factor, convexity
of the forward rules, and floor-respecting positivity of the exact scheme.
"""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from dcpension import (
    NoiseBlock,
    Schedule,
    SystemSpec,
    TimeGrid,
    alpha_from_beta,
    annuity_factor,
    annuity_factor_switch,
    evaluate_utility,
    market_price_of_risk,
    optimal_policy,
    simulate_systems,
)
from dcpension.preferences import FieldContext
from conftest import make_params

finite = st.floats(allow_nan=False, allow_infinity=False)
rates = st.floats(min_value=-0.5, max_value=0.5)
horizons = st.floats(min_value=0.01, max_value=40.0)


# ---------------------------------------------------------------------------
# Market identities
# ---------------------------------------------------------------------------


@given(beta=st.floats(min_value=-2.0, max_value=2.0))
def test_benchmark_drift_is_affine_in_beta(beta):
    params = make_params(sy2=(0.05,))
    base = alpha_from_beta(params, (0.0,))
    got = alpha_from_beta(params, (beta,))
    # alpha(beta) - alpha(0) = (lam - sy1) . beta, with lam - sy1 = 0.32
    assert got - base == pytest.approx(0.32 * beta, abs=1e-12)


@given(
    s11=st.floats(min_value=0.05, max_value=0.6),
    s21=st.floats(min_value=-0.3, max_value=0.3),
    s22=st.floats(min_value=0.05, max_value=0.6),
    m1=st.floats(min_value=-0.2, max_value=0.2),
    m2=st.floats(min_value=-0.2, max_value=0.2),
)
def test_price_of_risk_solves_the_market(s11, s21, s22, m1, m2):
    sigma = ((s11, 0.0), (s21, s22))
    params = make_params(mu=(m1, m2), sigma=sigma, sy1=(0.05, 0.0))
    lam = market_price_of_risk(params, 0.0)
    residual = np.array(sigma) @ lam - np.array([m1, m2])
    assert float(np.max(np.abs(residual))) < 1e-10


# ---------------------------------------------------------------------------
# Capitalisation factor
# ---------------------------------------------------------------------------


@given(rate=rates, horizon=horizons)
def test_annuity_factor_positive(rate, horizon):
    assert annuity_factor(rate, horizon) > 0.0


@given(rate=rates, h1=horizons, h2=horizons)
def test_annuity_factor_monotone_in_horizon(rate, h1, h2):
    assume(abs(h1 - h2) > 1e-9)
    lo, hi = sorted((h1, h2))
    assert annuity_factor(rate, lo) < annuity_factor(rate, hi)


@given(rate=st.floats(min_value=-1e-6, max_value=1e-6), horizon=horizons)
def test_annuity_factor_continuous_at_zero_rate(rate, horizon):
    # |F(k, h) - h| <= |k| h^2 e^{|k| h} -- tiny rates cannot move F much
    bound = abs(rate) * horizon**2 * math.exp(abs(rate) * horizon) + 1e-9
    assert abs(annuity_factor(rate, horizon) - horizon) <= bound


@given(rate=rates, switch=st.floats(min_value=0.0, max_value=40.0),
       horizon=horizons)
def test_switch_with_equal_rates_collapses(rate, switch, horizon):
    plain = annuity_factor(rate, horizon)
    assert annuity_factor_switch(rate, rate, switch, horizon) == pytest.approx(
        plain, rel=1e-12, abs=5e-13
    )


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@given(
    values=st.lists(st.floats(min_value=-1.0, max_value=1.0), min_size=1,
                    max_size=5),
    query=st.floats(min_value=0.0, max_value=30.0),
)
def test_schedule_lookup_matches_linear_scan(values, query):
    breakpoints = tuple(float(5 * k) for k in range(len(values)))
    sched = Schedule(breakpoints=breakpoints, values=tuple(values))
    expected = values[0]
    for b, v in zip(breakpoints, values):
        if query >= b - 1e-9:
            expected = v
    assert sched.value_at(query) == expected


# ---------------------------------------------------------------------------
# Forward rules
# ---------------------------------------------------------------------------


@given(x=st.floats(min_value=1e-3, max_value=1e3),
       frac=st.floats(min_value=0.0, max_value=1.0))
def test_power_rule_stays_between_its_legs(showcase_params, showcase_pref, x, frac):
    from dcpension import coefficients_at

    rule = optimal_policy(showcase_pref)
    consts = rule.segment_constants(coefficients_at(showcase_params, 0.0))
    z = frac * x
    w = rule.weights_from(consts, 0.0, {"x": np.array([x]), "z": np.array([z])})
    lo, hi = sorted((1.65, 4.4))
    assert lo - 1e-9 <= w[0, 0] <= hi + 1e-9


@given(scale=st.floats(min_value=0.1, max_value=3.0))
def test_myopic_scaling_is_linear_off_the_floor(showcase_params, showcase_pref,
                                                scale):
    from dcpension import coefficients_at

    rule = optimal_policy(showcase_pref, myopic_scale=scale)
    consts = rule.segment_constants(coefficients_at(showcase_params, 0.0))
    w = rule.weights_from(consts, 0.0,
                          {"x": np.array([1.0]), "z": np.array([0.0])})
    assert w[0, 0] == pytest.approx(scale * 4.4, rel=1e-12)


# ---------------------------------------------------------------------------
# Utility fields
# ---------------------------------------------------------------------------


@given(
    x1=st.floats(min_value=0.1, max_value=50.0),
    x2=st.floats(min_value=0.1, max_value=50.0),
    v=st.floats(min_value=-2.0, max_value=2.0),
)
def test_power_utility_is_increasing(showcase_pref, x1, x2, v):
    assume(abs(x1 - x2) > 1e-9)
    ctx = FieldContext(t=0.0, floor=0.0, v=v, tolerance=1.0 / 0.6)
    lo, hi = sorted((x1, x2))
    assert evaluate_utility(showcase_pref, ctx, lo) < evaluate_utility(
        showcase_pref, ctx, hi
    )


# ---------------------------------------------------------------------------
# Exact scheme positivity
# ---------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31 - 1))
def test_exact_route_never_touches_the_floor(showcase_params, showcase_pref, seed):
    grid = TimeGrid.from_rate(0.0, 1.0, 12)
    noise = NoiseBlock.from_seed(seed, grid, 8, 1, 1)
    res = simulate_systems(
        [SystemSpec("o", showcase_params, optimal_policy(showcase_pref),
                    pref=showcase_pref)],
        noise, checkpoints=[0.5, 1.0], record=True,
    )["o"]
    assert np.all(res.series["x"] > res.series["z"])
    assert np.all(res.series["xt"] > 0.0)
