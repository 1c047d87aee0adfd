"""Utility fields: closed forms, drift compensators, and the dual route.

Every closed-form quantity here is checked against either hand arithmetic
(the parameter sets are chosen so the numbers are exact) or a finite
difference of the field itself.  ``analytic_drift`` and ``spde_drift`` are
two independent routes to the same number and must agree to float precision;
collapsing them into one would defeat the point of the check.
"""

import dataclasses

import numpy as np
import pytest

from dcpension import (
    DOMAIN_VIOLATED,
    AdmissibilityError,
    FieldContext,
    PreferenceSpec,
    analytic_drift,
    benchmark_drift,
    coefficients_at,
    evaluate_utility,
    field_evaluation,
    optimal_policy,
    preference_drift,
    spde_drift,
    spde_policy,
    utility_curve,
)
from dcpension.preferences import utility_from_states
from dcpension.model import EXP_RATIO, EXP_WEALTH, POWER_RATIO, POWER_WEALTH


@pytest.fixture
def exp_pref(showcase_pref):
    return dataclasses.replace(showcase_pref, family=EXP_RATIO)


@pytest.fixture
def wealth_power_pref():
    return PreferenceSpec(family=POWER_WEALTH, gamma=0.6,
                          vol_hedgeable=(0.0,), vol_unhedgeable=(0.2,),
                          benchmark_weights=(1.0,))


@pytest.fixture
def wealth_exp_pref(wealth_power_pref):
    return dataclasses.replace(wealth_power_pref, family=EXP_WEALTH)


def ctx0(**kw):
    defaults = dict(t=0.0, floor=0.0, v=0.0, tolerance=1.0 / 0.6)
    defaults.update(kw)
    return FieldContext(**defaults)


# ---------------------------------------------------------------------------
# Closed-form values at t = 0
# ---------------------------------------------------------------------------


def test_power_utility_initial_value(showcase_pref):
    # x^gamma / gamma at v = 0, floor = 0:  1 / 0.6
    assert evaluate_utility(showcase_pref, ctx0(), 1.0) == pytest.approx(
        1.0 / 0.6, abs=1e-14
    )


def test_exp_utility_initial_value(exp_pref):
    # -exp(-x / Gamma) at Gamma = 1/gamma:  -e^{-0.6}
    assert evaluate_utility(exp_pref, ctx0(), 1.0) == pytest.approx(
        -0.5488116360940264, abs=1e-14
    )


def test_power_utility_domain(showcase_pref):
    assert evaluate_utility(showcase_pref, ctx0(), 0.0) is DOMAIN_VIOLATED
    assert evaluate_utility(showcase_pref, ctx0(), -1.0) is DOMAIN_VIOLATED
    assert evaluate_utility(showcase_pref, ctx0(floor=2.0), 1.5) is DOMAIN_VIOLATED


def test_exp_utility_defined_below_floor(exp_pref):
    # the exponential criterion has full support
    val = evaluate_utility(exp_pref, ctx0(), -3.0)
    assert val is not DOMAIN_VIOLATED
    assert val < -1.0


def test_utility_curve_renders_minus_inf_below_floor(showcase_pref):
    xs = np.array([-1.0, 0.0, 0.5, 1.0])
    curve = utility_curve(showcase_pref, ctx0(floor=0.5), xs)
    assert np.all(np.isneginf(curve[:3]))
    assert np.isfinite(curve[3])


def test_utility_from_states_matches_pointwise(showcase_pref):
    cushion = np.array([0.5, 1.0, 2.0])
    v = np.array([0.0, -0.1, 0.2])
    got = utility_from_states(showcase_pref, cushion, v)
    for i in range(3):
        want = evaluate_utility(showcase_pref, ctx0(v=float(v[i])), float(cushion[i]))
        assert got[i] == pytest.approx(want, rel=1e-14)


def test_utility_from_states_rejects_floor_breach(showcase_pref):
    with pytest.raises(AdmissibilityError, match="floor"):
        utility_from_states(showcase_pref, np.array([1.0, -0.2]), np.zeros(2))


# ---------------------------------------------------------------------------
# Drift compensators
# ---------------------------------------------------------------------------


def test_benchmark_drift_values(showcase_params, showcase_pref, wealth_exp_pref):
    # ratio families: alpha(beta) = 0.0945 for beta = 0.25
    assert benchmark_drift(showcase_params, showcase_pref) == pytest.approx(
        0.0945, abs=1e-12
    )
    minus = dataclasses.replace(showcase_pref, beta=(-0.25,))
    assert benchmark_drift(showcase_params, minus) == pytest.approx(
        -0.0655, abs=1e-12
    )
    # wealth families: benchmark growth = pi~ . sigma lam + r = 0.08 + 0.03
    assert benchmark_drift(showcase_params, wealth_exp_pref) == pytest.approx(
        0.11, abs=1e-12
    )


def test_preference_drift_frozen_values(
    showcase_params, showcase_pref, exp_pref, wealth_power_pref, wealth_exp_pref
):
    # hand values for the showcase market (sigma=.2, mu=.08, sy1=.08,
    # sy2=.05, muY=.02, r=.03) with gamma=.6, theta=(0,.2):
    #
    # power-ratio:  optimal cushion loading xi = 0.8, growth a = 0.2705
    #   v = -gamma a + gamma (xi^2 + sy2^2)/2 - (gamma xi + th1)^2/2
    #       - (th2 - gamma sy2)^2/2
    #     = -0.16230 + 0.19275 - 0.11520 - 0.01445 = -0.0992
    # exp-ratio:    ((lam - sy1 - beta)^2 - th2^2)/2 = (0.0049 - 0.04)/2
    # power-wealth: -r gamma - gamma (lam + th1)^2 / (2 (1-gamma)) - |th|^2/2
    #     = -0.018 - 0.12 - 0.02 = -0.158
    # exp-wealth:   ((lam - sigma' pi~)^2 - th2^2)/2 = (0.04 - 0.04)/2 = 0
    cases = [
        (showcase_pref, -0.0992),
        (exp_pref, -0.01755),
        (wealth_power_pref, -0.158),
        (wealth_exp_pref, 0.0),
    ]
    for pref, expected in cases:
        assert preference_drift(showcase_params, pref) == pytest.approx(
            expected, abs=1e-12
        ), pref.family


# ---------------------------------------------------------------------------
# Field derivatives
# ---------------------------------------------------------------------------


def central_diffs(pref, ctx, x, h):
    up = evaluate_utility(pref, ctx, x + h)
    dn = evaluate_utility(pref, ctx, x - h)
    mid = evaluate_utility(pref, ctx, x)
    ux = (up - dn) / (2.0 * h)
    uxx = (up - 2.0 * mid + dn) / (h * h)
    return ux, uxx


@pytest.mark.parametrize("x", [0.7, 1.0, 3.2])
def test_field_derivatives_match_finite_differences(
    showcase_params, showcase_pref, exp_pref, x
):
    for pref in (showcase_pref, exp_pref):
        ev = field_evaluation(showcase_params, pref, ctx0(v=-0.05), np.array([x]))
        ux, uxx = central_diffs(pref, ctx0(v=-0.05), x, 1e-5 * max(1.0, x))
        assert ev.u_x[0] == pytest.approx(ux, rel=1e-6)
        assert ev.u_xx[0] == pytest.approx(uxx, rel=1e-4)


def test_field_derivative_signs(showcase_params, showcase_pref):
    ev = field_evaluation(showcase_params, showcase_pref, ctx0(),
                          np.array([0.5, 1.0, 4.0]))
    assert np.all(ev.u_x > 0.0)   # more cushion is better
    assert np.all(ev.u_xx < 0.0)  # and concavely so


# ---------------------------------------------------------------------------
# Dual route: pointwise identity against the closed form
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("family_fixture", [
    "showcase_pref", "exp_pref", "wealth_power_pref", "wealth_exp_pref",
])
def test_spde_drift_agrees_with_analytic(request, showcase_params, family_fixture):
    pref = request.getfixturevalue(family_fixture)
    ctx = ctx0(t=1.5, floor=0.4, v=-0.12, tolerance=2.1, salary=1.3)
    xs = np.array([0.9, 1.7, 5.0])
    ev = field_evaluation(showcase_params, pref, ctx, xs)
    lhs = spde_drift(ev)
    rhs = analytic_drift(showcase_params, pref, ctx, xs)
    scale = np.maximum(1.0, np.abs(ev.u))
    assert np.max(np.abs(lhs - rhs) / scale) < 1e-12


@pytest.mark.parametrize("family_fixture", [
    "showcase_pref", "exp_pref", "wealth_power_pref", "wealth_exp_pref",
])
def test_spde_policy_agrees_with_direct_rule(request, showcase_params, family_fixture):
    pref = request.getfixturevalue(family_fixture)
    ctx = ctx0(t=0.0, floor=0.4, v=0.0, tolerance=2.1, salary=1.3)
    xs = np.array([0.9, 1.7, 5.0])
    ev = field_evaluation(showcase_params, pref, ctx, xs)
    rule = optimal_policy(pref)
    consts = rule.segment_constants(coefficients_at(showcase_params, 0.0))
    states = {"x": xs, "z": np.full(3, ctx.floor), "gamma": np.full(3, ctx.tolerance)}
    direct = rule.weights_from(consts, 0.0, states)
    np.testing.assert_allclose(spde_policy(ev), direct, atol=1e-12)
