"""Portfolio rules: capitalisation factors, baseline mixes, forward and
classical policies.

The capitalisation factor tests use scipy quadrature as an independent
oracle: F(k, h) = integral_0^h exp(k s) ds, and for the anticipated-switch
variant the piecewise continuation of the same integrand.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from dcpension import (
    PreferenceSpec,
    ValidationError,
    annuity_factor,
    annuity_factor_switch,
    backward_policy,
    baseline_weights,
    coefficients_at,
    optimal_policy,
)
from dcpension.model import EXP_RATIO, EXP_WEALTH, POWER_RATIO, POWER_WEALTH
from dcpension.strategies import (
    BackwardCrraPolicy,
    ConstantMixPolicy,
    ForwardExpPolicy,
    ForwardPowerPolicy,
    WealthExpPolicy,
    WealthPowerPolicy,
)
from conftest import make_params


def quad_factor(rate, horizon):
    val, err = quad(lambda s: math.exp(rate * s), 0.0, horizon, epsabs=1e-13)
    assert err < 1e-11
    return val


def quad_factor_switch(rate_before, rate_after, switch_in, horizon):
    def integrand(s):
        if s <= switch_in:
            return math.exp(rate_before * s)
        return math.exp(rate_before * switch_in + rate_after * (s - switch_in))

    val, err = quad(integrand, 0.0, horizon, points=[switch_in],
                    epsabs=1e-13, limit=200)
    assert err < 1e-11
    return val


# ---------------------------------------------------------------------------
# Capitalisation factors
# ---------------------------------------------------------------------------


def test_annuity_factor_against_quadrature():
    for rate in (-0.2, -0.012, -1e-5, 0.0, 1e-5, 0.038, 0.2):
        for horizon in (0.5, 5.0, 20.0):
            assert annuity_factor(rate, horizon) == pytest.approx(
                quad_factor(rate, horizon), abs=1e-10
            )


def test_annuity_factor_frozen_value():
    # net rate for the single-asset market: muY - lam * sy1 = 0.02 - 0.032
    # F(-0.012, 20) = (1 - exp(-0.24)) / 0.012
    assert annuity_factor(-0.012, 20.0) == pytest.approx(
        17.781011577787215, abs=1e-12
    )


def test_annuity_factor_switch_frozen_value():
    # integrate through a growth revision from k=-0.012 to k=0.038 at year 10
    assert annuity_factor_switch(-0.012, 0.038, 10.0, 20.0) == pytest.approx(
        20.213024570463567, abs=1e-12
    )


def test_annuity_factor_switch_against_quadrature():
    for k1, k2, s in ((-0.012, 0.038, 10.0), (0.05, -0.03, 2.5), (0.0, 0.04, 7.0)):
        assert annuity_factor_switch(k1, k2, s, 20.0) == pytest.approx(
            quad_factor_switch(k1, k2, s, 20.0), abs=1e-10
        )


def test_annuity_factor_zero_rate_is_horizon():
    assert annuity_factor(0.0, 20.0) == 20.0
    assert annuity_factor(0.0, 7.25) == 7.25


def test_annuity_factor_continuous_through_zero_rate():
    # the (e^{kh}-1)/k form degenerates at k=0; the implementation must not
    assert abs(annuity_factor(1e-9, 20.0) - 20.0) < 1e-6
    assert abs(annuity_factor(-1e-9, 20.0) - 20.0) < 1e-6
    assert abs(annuity_factor(1e-9, 20.0) - annuity_factor(-1e-9, 20.0)) < 1e-6


def test_annuity_factor_switch_degenerates_to_plain():
    # same rate on both sides
    assert annuity_factor_switch(-0.012, -0.012, 10.0, 20.0) == pytest.approx(
        annuity_factor(-0.012, 20.0), abs=5e-13
    )
    # switch after the horizon: the second regime never applies
    assert annuity_factor_switch(-0.012, 0.038, 25.0, 20.0) == pytest.approx(
        annuity_factor(-0.012, 20.0), abs=5e-13
    )
    # switch already past: only the second regime applies
    assert annuity_factor_switch(-0.012, 0.038, 0.0, 20.0) == pytest.approx(
        annuity_factor(0.038, 20.0), abs=5e-13
    )


def test_annuity_factor_positive_and_monotone():
    assert annuity_factor(-0.5, 3.0) > 0.0
    assert annuity_factor(-0.012, 5.0) < annuity_factor(-0.012, 10.0)
    assert annuity_factor(-0.012, 20.0) < annuity_factor(0.038, 20.0)


# ---------------------------------------------------------------------------
# Baseline mixes
# ---------------------------------------------------------------------------


def test_baseline_weights_values(showcase_params):
    # pihat = (sy1 + beta) / sigma
    assert baseline_weights(showcase_params, (0.25,))[0] == pytest.approx(
        1.65, abs=1e-12
    )
    assert baseline_weights(showcase_params, (-0.25,))[0] == pytest.approx(
        -0.85, abs=1e-12
    )


def test_baseline_weights_zero_beta_is_pure_hedge(showcase_params):
    assert baseline_weights(showcase_params, (0.0,))[0] == pytest.approx(
        0.4, abs=1e-14
    )


# ---------------------------------------------------------------------------
# Classical fixed-horizon rule
# ---------------------------------------------------------------------------


def weights_at(policy, params, t, x):
    consts = policy.segment_constants(coefficients_at(params, t))
    return policy.weights_from(consts, t, {"x": np.atleast_1d(float(x))})[0, 0]


def test_backward_committed_weights_hand_value(flat_params):
    rule = backward_policy(flat_params, 0.6, 20.0)
    # pi = sy1/sigma + (lam - sy1)/(sigma (1-gamma)) * (1 + p F / x)
    #    = 0.4 + 4.0 * (1 + 0.1 * 17.781011577787215)
    expected = 0.4 + 4.0 * (1.0 + 0.1 * 17.781011577787215)
    assert weights_at(rule, flat_params, 0.0, 1.0) == pytest.approx(
        expected, abs=1e-12
    )


def test_backward_weights_shrink_to_merton_mix(flat_params):
    # as x -> infinity the contribution term vanishes: hedge + slope = 4.4
    rule = backward_policy(flat_params, 0.6, 20.0)
    assert weights_at(rule, flat_params, 0.0, 1e12) == pytest.approx(4.4, abs=1e-9)


def test_backward_weights_decrease_with_wealth(flat_params):
    rule = backward_policy(flat_params, 0.6, 20.0)
    pis = [weights_at(rule, flat_params, 0.0, x) for x in (0.5, 1.0, 2.0, 8.0)]
    assert all(a > b for a, b in zip(pis, pis[1:]))


def test_backward_anticipating_holds_more_before_an_upward_revision(flat_params):
    committed = backward_policy(flat_params, 0.6, 20.0)
    anticipating = backward_policy(
        flat_params, 0.6, 20.0, switch_at=10.0, switch_growth=0.07, anticipate=True
    )
    # growth revision 0.02 -> 0.07 raises the capitalised-contribution factor
    assert anticipating.annuity_at(0.0) == pytest.approx(
        20.213024570463567, abs=1e-12
    )
    for t in (0.0, 4.0, 9.5):
        assert weights_at(anticipating, flat_params, t, 1.0) > weights_at(
            committed, flat_params, t, 1.0
        )


def test_backward_adaptive_matches_committed_until_switch(flat_params):
    committed = backward_policy(flat_params, 0.6, 20.0)
    adaptive = backward_policy(
        flat_params, 0.6, 20.0, switch_at=10.0, switch_growth=0.07, anticipate=False
    )
    for t in (0.0, 5.0, 9.9):
        assert adaptive.annuity_at(t) == committed.annuity_at(t)
    # after the switch the adaptive rule re-capitalises at the new rate
    k2 = 0.07 - 0.4 * 0.08
    assert adaptive.annuity_at(12.0) == pytest.approx(
        annuity_factor(k2, 8.0), abs=1e-12
    )


def test_backward_anticipating_factor_continuous_at_switch(flat_params):
    anticipating = backward_policy(
        flat_params, 0.6, 20.0, switch_at=10.0, switch_growth=0.07, anticipate=True
    )
    k2 = 0.07 - 0.032
    left = anticipating.annuity_at(10.0 - 1e-9)
    assert left == pytest.approx(annuity_factor(k2, 10.0 + 1e-9), abs=1e-6)


def test_backward_policy_validation(flat_params):
    with pytest.raises(ValidationError):
        backward_policy(flat_params, 1.2, 20.0)
    with pytest.raises(ValidationError):
        backward_policy(flat_params, 0.6, -1.0)
    with pytest.raises(ValidationError):
        BackwardCrraPolicy(gamma=0.6, horizon=20.0, sigma=0.2, lam=0.4,
                           salary_vol=0.08, rate_base=-0.012, switch_at=10.0)
    with pytest.raises(ValidationError):
        BackwardCrraPolicy(gamma=0.6, horizon=20.0, sigma=0.2, lam=0.4,
                           salary_vol=0.08, rate_base=-0.012, anticipate=True)


def test_backward_policy_single_asset_only():
    params = make_params(mu=(0.08, 0.04), sigma=((0.2, 0.0), (0.0, 0.25)),
                         sy1=(0.08, 0.0))
    rule = backward_policy(make_params(), 0.6, 20.0)
    with pytest.raises(ValidationError):
        rule.segment_constants(coefficients_at(params, 0.0))


# ---------------------------------------------------------------------------
# Forward rules
# ---------------------------------------------------------------------------


def forward_weights(policy, params, t, states):
    consts = policy.segment_constants(coefficients_at(params, t))
    arrays = {k: np.atleast_1d(float(v)) for k, v in states.items()}
    return policy.weights_from(consts, t, arrays)[0, 0]


def test_power_rule_interpolates_baseline_and_myopic(showcase_params, showcase_pref):
    rule = optimal_policy(showcase_pref)
    assert isinstance(rule, ForwardPowerPolicy)
    # floor at zero: pure myopic (lam - gamma sy1)/(sigma (1 - gamma)) = 4.4
    assert forward_weights(rule, showcase_params, 0.0, {"x": 1.0, "z": 0.0}) == (
        pytest.approx(4.4, abs=1e-12)
    )
    # on the floor: the baseline mix 1.65
    assert forward_weights(rule, showcase_params, 0.0, {"x": 1.0, "z": 1.0}) == (
        pytest.approx(1.65, abs=1e-12)
    )
    # halfway: the convex combination
    assert forward_weights(rule, showcase_params, 0.0, {"x": 2.0, "z": 1.0}) == (
        pytest.approx(0.5 * 1.65 + 0.5 * 4.4, abs=1e-12)
    )


def test_power_rule_myopic_scale_only_scales_the_myopic_leg(
    showcase_params, showcase_pref
):
    scaled = optimal_policy(showcase_pref, myopic_scale=1.5)
    on_floor = forward_weights(scaled, showcase_params, 0.0, {"x": 1.0, "z": 1.0})
    off_floor = forward_weights(scaled, showcase_params, 0.0, {"x": 1.0, "z": 0.0})
    assert on_floor == pytest.approx(1.65, abs=1e-12)
    assert off_floor == pytest.approx(1.5 * 4.4, abs=1e-12)


def test_exp_rule_hand_value(showcase_params, showcase_pref):
    import dataclasses

    pref = dataclasses.replace(showcase_pref, family=EXP_RATIO)
    rule = optimal_policy(pref)
    assert isinstance(rule, ForwardExpPolicy)
    # pihat + (Gamma/x) ((lam + theta1)/sigma - pihat); at Gamma/x = 1/2:
    # 1.65 + 0.5 (2.0 - 1.65) = 1.825
    got = forward_weights(rule, showcase_params, 0.0, {"x": 2.0, "gamma": 1.0})
    assert got == pytest.approx(1.825, abs=1e-12)


def test_wealth_power_rule_hand_values(showcase_params):
    pref = PreferenceSpec(family=POWER_WEALTH, gamma=0.6,
                          vol_hedgeable=(0.0,), vol_unhedgeable=(0.2,),
                          benchmark_weights=(1.0,))
    rule = optimal_policy(pref)
    assert isinstance(rule, WealthPowerPolicy)
    # (lam + theta1)/(sigma (1 - gamma)) = 0.4 / 0.08 = 5.0 off the floor
    assert forward_weights(rule, showcase_params, 0.0, {"x": 1.0, "z": 0.0}) == (
        pytest.approx(5.0, abs=1e-12)
    )
    assert forward_weights(rule, showcase_params, 0.0, {"x": 2.0, "z": 1.0}) == (
        pytest.approx(3.0, abs=1e-12)
    )


def test_wealth_exp_rule_hand_value(showcase_params):
    pref = PreferenceSpec(family=EXP_WEALTH, gamma=0.6,
                          vol_hedgeable=(0.0,), vol_unhedgeable=(0.2,),
                          benchmark_weights=(1.0,))
    rule = optimal_policy(pref)
    assert isinstance(rule, WealthExpPolicy)
    # benchmark + (Gamma/w)(risky - benchmark) = 1 + 0.5 (2 - 1)
    assert forward_weights(rule, showcase_params, 0.0, {"x": 2.0, "gamma": 1.0}) == (
        pytest.approx(1.5, abs=1e-12)
    )


def test_optimal_policy_dispatch(showcase_pref):
    import dataclasses

    assert isinstance(optimal_policy(showcase_pref), ForwardPowerPolicy)
    exp_pref = dataclasses.replace(showcase_pref, family=EXP_RATIO)
    assert isinstance(optimal_policy(exp_pref), ForwardExpPolicy)


def test_policies_are_pure(showcase_params, showcase_pref):
    # same inputs, same outputs -- no hidden state between calls
    rule = optimal_policy(showcase_pref)
    a = forward_weights(rule, showcase_params, 0.0, {"x": 1.3, "z": 0.4})
    b = forward_weights(rule, showcase_params, 0.0, {"x": 1.3, "z": 0.4})
    assert a == b


def test_constant_mix_shape_check(showcase_params):
    rule = ConstantMixPolicy(weights_vec=(0.5, 0.5))
    with pytest.raises(ValidationError):
        rule.segment_constants(coefficients_at(showcase_params, 0.0))
