"""Portfolio rules for the accumulation problem.

A policy maps (time, current state) to portfolio weights on the n risky
assets.  Policies are immutable and pure: the same inputs always produce the
same weights, and simulation never mutates them.  The simulation engine
resolves market coefficients once per schedule segment and hands them to the
policy via :meth:`segment_constants`, so the per-step work stays vectorised
over paths.

Conventions for the state mapping passed to ``weights_from``:

==========  =========================================================
key         meaning
==========  =========================================================
``x``       main controlled state: fund/salary ratio X, or wealth W
            for the wealth-based policies
``z``       floor state: benchmark ratio Z, or contribution value
            for the wealth-based policies
``gamma``   risk-tolerance process of the exponential criteria
==========  =========================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import (
    MarketCoeffs,
    ModelParams,
    PreferenceSpec,
    Schedule,
    ValidationError,
    as_schedule,
    coefficients_at,
    EXP_RATIO,
    EXP_WEALTH,
    POWER_RATIO,
    POWER_WEALTH,
)

__all__ = [
    "annuity_factor",
    "annuity_factor_switch",
    "baseline_weights",
    "BaselinePolicy",
    "ConstantMixPolicy",
    "BackwardCrraPolicy",
    "ForwardPowerPolicy",
    "ForwardExpPolicy",
    "WealthPowerPolicy",
    "WealthExpPolicy",
    "backward_policy",
    "optimal_policy",
]

# Below this rate the annuity factor is the horizon itself (the exact limit);
# inside the transition band a 3-term expansion avoids 0/0 amplification.
_RATE_FLOOR = 1.0e-10
_TAYLOR_BAND = 1.0e-6


def annuity_factor(rate: float, horizon: float) -> float:
    """Deterministic capitalisation factor ``int_0^h exp(rate * s) ds``.

    This is the value, per unit contribution rate, of contributions paid
    continuously over ``horizon`` years when the contribution flow grows at
    net rate ``rate``.  The map is continuous through rate = 0:

    * ``|rate| < 1e-10``       -> exact limit ``horizon``
    * ``|rate * horizon| < 1e-6`` -> 3-term Taylor expansion
    * otherwise               -> ``expm1(rate * horizon) / rate``
    """
    if horizon < 0.0:
        raise ValidationError(f"annuity horizon must be >= 0, got {horizon}")
    if horizon == 0.0:
        return 0.0
    if abs(rate) < _RATE_FLOOR:
        return horizon
    u = rate * horizon
    if abs(u) < _TAYLOR_BAND:
        return horizon * (1.0 + u / 2.0 + u * u / 6.0)
    return math.expm1(u) / rate


def annuity_factor_switch(
    rate_before: float,
    rate_after: float,
    switch_in: float,
    horizon: float,
) -> float:
    """Annuity factor when the growth rate switches after ``switch_in`` years.

    Evaluates ``int_0^h exp(g(s)) ds`` with ``g`` accruing at ``rate_before``
    for the first ``switch_in`` years and ``rate_after`` thereafter.  With
    ``switch_in <= 0`` the switch is already past; with ``switch_in >=
    horizon`` it never happens.
    """
    if horizon < 0.0:
        raise ValidationError(f"annuity horizon must be >= 0, got {horizon}")
    if switch_in >= horizon:
        return annuity_factor(rate_before, horizon)
    if switch_in <= 0.0:
        return annuity_factor(rate_after, horizon)
    head = annuity_factor(rate_before, switch_in)
    tail = annuity_factor(rate_after, horizon - switch_in)
    # below the rate floor the plain factor treats the rate as exactly zero;
    # the compounding weight must agree or the two forms drift apart
    weight = 1.0 if abs(rate_before) < _RATE_FLOOR else math.exp(rate_before * switch_in)
    return head + weight * tail


def _solve_sigma_t(sigma: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Solve sigma' w = vec for portfolio weights w."""
    return np.linalg.solve(sigma.T, vec)


def baseline_weights(params: ModelParams, beta, t: float = 0.0) -> np.ndarray:
    """Weights replicating hedgeable salary risk plus an extra pick beta.

    Solves sigma' pi = sigma_y1 + beta.  This is the portfolio whose wealth
    ratio has zero sensitivity to the fund's starting point: contributions
    invested this way form the natural floor/benchmark process.
    """
    c = coefficients_at(params, t)
    beta_arr = np.asarray(beta, dtype=float)
    if beta_arr.shape != (c.n,):
        raise ValidationError(f"beta has shape {beta_arr.shape}, expected ({c.n},)")
    return _solve_sigma_t(c.volatility, c.salary_vol_hedgeable + beta_arr)


def _broadcast(weights: np.ndarray, n_paths: int) -> np.ndarray:
    return np.broadcast_to(weights, (n_paths, weights.shape[0]))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantMixPolicy:
    """Fixed weights, rebalanced continuously."""

    weights_vec: tuple[float, ...]

    kind = "constant"
    required_states = ("x",)

    def __post_init__(self):
        object.__setattr__(
            self, "weights_vec", tuple(float(w) for w in np.atleast_1d(self.weights_vec))
        )

    def segment_constants(self, coeffs: MarketCoeffs):
        vec = np.asarray(self.weights_vec, dtype=float)
        if vec.shape != (coeffs.n,):
            raise ValidationError(
                f"constant mix has {vec.shape[0]} weights for {coeffs.n} assets"
            )
        return vec

    def weights_from(self, consts, t: float, states: Mapping[str, np.ndarray]) -> np.ndarray:
        return _broadcast(consts, states["x"].shape[0])


@dataclass(frozen=True)
class BaselinePolicy:
    """Salary-replicating portfolio with extra volatility pick ``beta``.

    Under this rule the fund-to-salary ratio follows the same linear dynamics
    as the preference floor; running it from a zero fund reproduces the floor
    itself.
    """

    beta: Schedule

    kind = "baseline"
    required_states = ("x",)

    def __post_init__(self):
        object.__setattr__(self, "beta", as_schedule(self.beta))

    def segment_constants(self, coeffs: MarketCoeffs):
        beta = self.beta.array_at(coeffs.t)
        return _solve_sigma_t(coeffs.volatility, coeffs.salary_vol_hedgeable + beta)

    def weights_from(self, consts, t, states) -> np.ndarray:
        return _broadcast(consts, states["x"].shape[0])


@dataclass(frozen=True)
class BackwardCrraPolicy:
    """Classical CRRA rule optimised to a fixed retirement date.

    Single risky asset.  The rule holds the salary-hedge component plus a
    CRRA-scaled bet whose size grows with the capitalised value of future
    contributions ``p * F(t) / x``:

        pi(t, x) = sy1/sigma + (lam - sy1)/(sigma (1 - gamma)) * (1 + p F(t) / x)

    ``F`` capitalises contributions between t and the horizon at net rate
    ``salary_growth - lam * sy1``.  An anticipated change of salary growth at
    ``switch_at`` is handled three ways:

    * ``switch_at is None``: single-regime factor throughout (the rule is
      committed to today's rate);
    * ``anticipate=False``: the factor uses whichever rate is in force at
      the current time, ignoring the future change until it happens;
    * ``anticipate=True``: the factor integrates through the change, i.e.
      the rule knows the revision date in advance.
    """

    gamma: float
    horizon: float
    sigma: float
    lam: float
    salary_vol: float
    rate_base: float
    switch_at: float | None = None
    rate_after: float | None = None
    anticipate: bool = False

    kind = "backward"
    required_states = ("x",)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"backward rule needs 0 < gamma < 1, got {self.gamma}")
        if self.horizon <= 0.0:
            raise ValidationError(f"horizon must be positive, got {self.horizon}")
        if (self.switch_at is None) != (self.rate_after is None):
            raise ValidationError("switch_at and rate_after must be given together")
        if self.anticipate and self.switch_at is None:
            raise ValidationError("anticipate=True needs a switch to anticipate")

    def annuity_at(self, t: float) -> float:
        """Capitalisation factor for contributions over [t, horizon]."""
        remaining = self.horizon - t
        if self.switch_at is None:
            return annuity_factor(self.rate_base, remaining)
        if self.anticipate:
            return annuity_factor_switch(
                self.rate_base, self.rate_after, self.switch_at - t, remaining
            )
        rate = self.rate_after if t >= self.switch_at else self.rate_base
        return annuity_factor(rate, remaining)

    def segment_constants(self, coeffs: MarketCoeffs):
        if coeffs.n != 1:
            raise ValidationError("backward rule supports a single risky asset")
        return float(coeffs.contribution)

    def weights_from(self, consts, t, states) -> np.ndarray:
        p = consts
        x = states["x"]
        hedge = self.salary_vol / self.sigma
        slope = (self.lam - self.salary_vol) / (self.sigma * (1.0 - self.gamma))
        pi = hedge + slope * (1.0 + p * self.annuity_at(t) / x)
        return pi[:, None]


def backward_policy(
    params: ModelParams,
    gamma: float,
    horizon: float,
    *,
    switch_at: float | None = None,
    switch_growth: float | None = None,
    anticipate: bool = False,
) -> BackwardCrraPolicy:
    """Build a backward CRRA rule from model parameters.

    Requires a single risky asset and time-constant market coefficients
    (the closed-form annuity factor assumes them).  ``switch_growth`` is the
    salary growth rate after an anticipated revision at ``switch_at``.
    """
    if params.n_assets != 1:
        raise ValidationError("backward rule supports a single risky asset")
    for name in ("excess_return", "volatility", "salary_vol_hedgeable", "contribution"):
        if not getattr(params, name).is_constant:
            raise ValidationError(
                f"backward rule needs a constant {name} schedule"
            )
    c = coefficients_at(params, 0.0)
    lam = float(c.price_of_risk[0])
    sy1 = float(c.salary_vol_hedgeable[0])
    sigma = float(c.volatility[0, 0])
    rate_base = float(c.salary_growth) - lam * sy1
    rate_after = None
    if switch_growth is not None:
        rate_after = float(switch_growth) - lam * sy1
    return BackwardCrraPolicy(
        gamma=gamma,
        horizon=horizon,
        sigma=sigma,
        lam=lam,
        salary_vol=sy1,
        rate_base=rate_base,
        switch_at=switch_at,
        rate_after=rate_after,
        anticipate=anticipate,
    )


@dataclass(frozen=True)
class ForwardPowerPolicy:
    """Optimal rule of the power criterion on the fund-to-salary ratio.

    A state-dependent mix of the baseline portfolio and the myopic growth
    portfolio, weighted by how much of the ratio sits at the floor:

        pi(t, X, Z) = (Z/X) pihat + (1 - Z/X) myopic

    ``myopic_scale`` rescales the myopic component; 1.0 is optimal, other
    values give admissible but sub-optimal rules used for stress checks.
    """

    gamma: float
    vol_hedgeable: Schedule
    beta: Schedule
    myopic_scale: float = 1.0

    kind = "forward-power"
    required_states = ("x", "z")

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"power rule needs 0 < gamma < 1, got {self.gamma}")
        object.__setattr__(self, "vol_hedgeable", as_schedule(self.vol_hedgeable))
        object.__setattr__(self, "beta", as_schedule(self.beta))

    def segment_constants(self, coeffs: MarketCoeffs):
        theta1 = self.vol_hedgeable.array_at(coeffs.t)
        beta = self.beta.array_at(coeffs.t)
        sy1 = coeffs.salary_vol_hedgeable
        pihat = _solve_sigma_t(coeffs.volatility, sy1 + beta)
        myopic = self.myopic_scale * _solve_sigma_t(
            coeffs.volatility,
            (coeffs.price_of_risk - self.gamma * sy1 + theta1) / (1.0 - self.gamma),
        )
        return pihat, myopic

    def weights_from(self, consts, t, states) -> np.ndarray:
        pihat, myopic = consts
        frac = states["z"] / states["x"]
        return myopic + frac[:, None] * (pihat - myopic)


@dataclass(frozen=True)
class ForwardExpPolicy:
    """Optimal rule of the exponential criterion on the ratio.

    Invests the risk-tolerance fraction in the growth portfolio and the rest
    in the baseline:

        pi(t, X, Gamma) = (Gamma/X) risky + (1 - Gamma/X) pihat
    """

    gamma: float
    vol_hedgeable: Schedule
    beta: Schedule
    myopic_scale: float = 1.0

    kind = "forward-exp"
    required_states = ("x", "gamma")

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ValidationError(f"exponential rule needs gamma > 0, got {self.gamma}")
        object.__setattr__(self, "vol_hedgeable", as_schedule(self.vol_hedgeable))
        object.__setattr__(self, "beta", as_schedule(self.beta))

    def segment_constants(self, coeffs: MarketCoeffs):
        theta1 = self.vol_hedgeable.array_at(coeffs.t)
        beta = self.beta.array_at(coeffs.t)
        pihat = _solve_sigma_t(
            coeffs.volatility, coeffs.salary_vol_hedgeable + beta
        )
        risky = self.myopic_scale * _solve_sigma_t(
            coeffs.volatility, coeffs.price_of_risk + theta1
        )
        return pihat, risky

    def weights_from(self, consts, t, states) -> np.ndarray:
        pihat, risky = consts
        frac = states["gamma"] / states["x"]
        return pihat + frac[:, None] * (risky - pihat)


@dataclass(frozen=True)
class WealthPowerPolicy:
    """Optimal rule of the power criterion on wealth.

    The floor is the running value of contributions invested in a fixed
    benchmark portfolio; above it, wealth goes into the myopic portfolio:

        pi(t, W, C) = (C/W) benchmark + (1 - C/W) myopic
    """

    gamma: float
    vol_hedgeable: Schedule
    benchmark: Schedule
    myopic_scale: float = 1.0

    kind = "wealth-power"
    required_states = ("x", "z")

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"power rule needs 0 < gamma < 1, got {self.gamma}")
        object.__setattr__(self, "vol_hedgeable", as_schedule(self.vol_hedgeable))
        object.__setattr__(self, "benchmark", as_schedule(self.benchmark))

    def segment_constants(self, coeffs: MarketCoeffs):
        theta1 = self.vol_hedgeable.array_at(coeffs.t)
        bench = self.benchmark.array_at(coeffs.t)
        myopic = self.myopic_scale * _solve_sigma_t(
            coeffs.volatility,
            (coeffs.price_of_risk + theta1) / (1.0 - self.gamma),
        )
        return np.asarray(bench, dtype=float), myopic

    def weights_from(self, consts, t, states) -> np.ndarray:
        bench, myopic = consts
        frac = states["z"] / states["x"]
        return myopic + frac[:, None] * (bench - myopic)


@dataclass(frozen=True)
class WealthExpPolicy:
    """Optimal rule of the exponential criterion on wealth."""

    gamma: float
    vol_hedgeable: Schedule
    benchmark: Schedule
    myopic_scale: float = 1.0

    kind = "wealth-exp"
    required_states = ("x", "gamma")

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ValidationError(f"exponential rule needs gamma > 0, got {self.gamma}")
        object.__setattr__(self, "vol_hedgeable", as_schedule(self.vol_hedgeable))
        object.__setattr__(self, "benchmark", as_schedule(self.benchmark))

    def segment_constants(self, coeffs: MarketCoeffs):
        theta1 = self.vol_hedgeable.array_at(coeffs.t)
        bench = np.asarray(self.benchmark.array_at(coeffs.t), dtype=float)
        risky = self.myopic_scale * _solve_sigma_t(
            coeffs.volatility, coeffs.price_of_risk + theta1
        )
        return bench, risky

    def weights_from(self, consts, t, states) -> np.ndarray:
        bench, risky = consts
        frac = states["gamma"] / states["x"]
        return bench + frac[:, None] * (risky - bench)


def optimal_policy(pref: PreferenceSpec, myopic_scale: float = 1.0):
    """The optimal portfolio rule for a preference specification."""
    if pref.family == POWER_RATIO:
        return ForwardPowerPolicy(
            gamma=pref.gamma,
            vol_hedgeable=pref.vol_hedgeable,
            beta=pref.beta,
            myopic_scale=myopic_scale,
        )
    if pref.family == EXP_RATIO:
        return ForwardExpPolicy(
            gamma=pref.gamma,
            vol_hedgeable=pref.vol_hedgeable,
            beta=pref.beta,
            myopic_scale=myopic_scale,
        )
    if pref.family == POWER_WEALTH:
        return WealthPowerPolicy(
            gamma=pref.gamma,
            vol_hedgeable=pref.vol_hedgeable,
            benchmark=pref.benchmark_weights,
            myopic_scale=myopic_scale,
        )
    if pref.family == EXP_WEALTH:
        return WealthExpPolicy(
            gamma=pref.gamma,
            vol_hedgeable=pref.vol_hedgeable,
            benchmark=pref.benchmark_weights,
            myopic_scale=myopic_scale,
        )
    raise ValidationError(f"unknown preference family {pref.family!r}")
