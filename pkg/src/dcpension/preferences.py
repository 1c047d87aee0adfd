"""Forward performance criteria: utility fields, drifts and consistency checks.

A criterion is a random field U(x, t).  Its realised shape at time t is fixed
by a handful of auxiliary states bundled in :class:`FieldContext`: the floor
process, the risk-tolerance process of the exponential families, and the
accumulated preference factor V.  The field must satisfy a drift identity:
at every interior point, the dt-coefficient of t -> U(x, t) equals an
expression in the field's x-derivatives and volatility structure.  Two
independent evaluation routes for that drift are provided:

* :func:`spde_drift` evaluates the generic identity from the field's
  derivatives and the floor-process coefficients;
* :func:`analytic_drift` evaluates the per-family closed form.

Agreement of the two (and of :func:`spde_policy` with the closed-form rules
in :mod:`dcpension.strategies`) is the consistency check run by the
verification suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ModelParams,
    PreferenceSpec,
    ValidationError,
    alpha_from_beta,
    coefficients_at,
    EXP_RATIO,
    EXP_WEALTH,
    POWER_RATIO,
    POWER_WEALTH,
)

__all__ = [
    "DOMAIN_VIOLATED",
    "AdmissibilityError",
    "FieldContext",
    "preference_drift",
    "benchmark_drift",
    "evaluate_utility",
    "utility_curve",
    "volatility_fields",
    "field_evaluation",
    "spde_drift",
    "analytic_drift",
    "spde_policy",
]


class AdmissibilityError(RuntimeError):
    """A path or sample left the domain of a power-family criterion."""


class _DomainViolated:
    """Sentinel for utility evaluations below the floor.

    The power criteria assign value -infinity below the floor.  Instead of
    feeding an arithmetic ``-inf`` into downstream statistics (where it would
    silently poison means), scalar evaluation returns this sentinel and
    aggregation raises :class:`AdmissibilityError`.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DOMAIN_VIOLATED"

    def __bool__(self) -> bool:
        return False


DOMAIN_VIOLATED = _DomainViolated()


@dataclass(frozen=True)
class FieldContext:
    """Realised auxiliary states pinning down the field at one instant.

    Attributes:
        t: evaluation time.
        floor: floor state -- benchmark ratio Z_t for the ratio families,
            contribution value for the wealth families.
        v: accumulated preference factor V_t.
        tolerance: risk-tolerance state of the exponential families
            (None for power families).
        salary: salary level Y_t; needed by the wealth families, whose
            contribution flow is p * Y.
    """

    t: float
    floor: float
    v: float = 0.0
    tolerance: float | None = None
    salary: float | None = None

    def require_tolerance(self) -> float:
        if self.tolerance is None or self.tolerance <= 0.0:
            raise ValidationError(
                f"exponential families need a positive tolerance state, got {self.tolerance}"
            )
        return self.tolerance

    def require_salary(self) -> float:
        if self.salary is None or self.salary <= 0.0:
            raise ValidationError(
                f"wealth families need a positive salary state, got {self.salary}"
            )
        return self.salary


# ---------------------------------------------------------------------------
# Deterministic drift rates
# ---------------------------------------------------------------------------


def benchmark_drift(params: ModelParams, pref: PreferenceSpec, t: float = 0.0) -> float:
    """Linear drift coefficient of the preference's floor/tolerance process.

    Ratio families: ``alpha_from_beta`` at the preference's beta.  Wealth
    families: the analogous rate lam' beta_tilde + r of the benchmark
    portfolio value, with beta_tilde = sigma' benchmark_weights.
    """
    if pref.is_ratio:
        return alpha_from_beta(params, pref.beta.array_at(t), t)
    c = coefficients_at(params, t)
    beta_t = c.volatility.T @ pref.benchmark_weights.array_at(t)
    return float(c.price_of_risk @ beta_t + c.rate)


def preference_drift(params: ModelParams, pref: PreferenceSpec, t: float = 0.0) -> float:
    """dt-coefficient of the preference factor V for the given family.

    These rates make the criterion a martingale along its optimal rule; they
    depend only on market coefficients and the preference's volatility picks.
    """
    c = coefficients_at(params, t)
    lam = c.price_of_risk
    th1 = pref.vol_hedgeable.array_at(t)
    th2 = pref.vol_unhedgeable.array_at(t)
    g = pref.gamma
    if pref.family == POWER_RATIO:
        sy1 = c.salary_vol_hedgeable
        sy2 = c.salary_vol_unhedgeable
        core = lam - g * sy1 + th1
        return float(
            -0.5 * g * (1.0 + g) * (sy1 @ sy1 + sy2 @ sy2)
            - 0.5 * g * (core @ core) / (1.0 - g)
            + g * (th1 @ sy1 + th2 @ sy2 + c.salary_growth)
            - 0.5 * (th1 @ th1 + th2 @ th2)
        )
    if pref.family == EXP_RATIO:
        sy1 = c.salary_vol_hedgeable
        beta = pref.beta.array_at(t)
        core = lam - sy1 + th1 - beta
        return float(0.5 * (core @ core - th1 @ th1 - th2 @ th2))
    if pref.family == POWER_WEALTH:
        core = lam + th1
        return float(
            -c.rate * g
            - 0.5 * g * (core @ core) / (1.0 - g)
            - 0.5 * (th1 @ th1 + th2 @ th2)
        )
    if pref.family == EXP_WEALTH:
        beta_t = c.volatility.T @ pref.benchmark_weights.array_at(t)
        core = lam + th1 - beta_t
        return float(0.5 * (core @ core - th1 @ th1 - th2 @ th2))
    raise ValidationError(f"unknown preference family {pref.family!r}")


# ---------------------------------------------------------------------------
# Field evaluation
# ---------------------------------------------------------------------------


def evaluate_utility(pref: PreferenceSpec, ctx: FieldContext, x: float):
    """Field value U(x, t) for one point; sentinel below a power floor."""
    if pref.is_power:
        cushion = x - ctx.floor
        if cushion <= 0.0:
            return DOMAIN_VIOLATED
        return (cushion ** pref.gamma) / pref.gamma * np.exp(ctx.v)
    tol = ctx.require_tolerance()
    return float(-np.exp(-(x - ctx.floor) / tol + ctx.v))


def utility_curve(pref: PreferenceSpec, ctx: FieldContext, xs) -> np.ndarray:
    """Field values on a grid; power values below the floor render as -inf.

    The numeric ``-inf`` here is a file/plot rendering of the domain
    violation, not a value meant for aggregation -- use
    :func:`evaluate_utility` and handle :data:`DOMAIN_VIOLATED` for that.
    """
    xs = np.asarray(xs, dtype=float)
    if pref.is_power:
        cushion = xs - ctx.floor
        out = np.full(xs.shape, -np.inf)
        ok = cushion > 0.0
        out[ok] = (cushion[ok] ** pref.gamma) / pref.gamma * np.exp(ctx.v)
        return out
    tol = ctx.require_tolerance()
    return -np.exp(-(xs - ctx.floor) / tol + ctx.v)


def utility_from_states(pref: PreferenceSpec, cushion: np.ndarray, v: np.ndarray,
                        tolerance: np.ndarray | None = None) -> np.ndarray:
    """Vectorised field evaluation from simulated states.

    ``cushion`` is x - floor.  Power families require it strictly positive;
    any violation raises :class:`AdmissibilityError` (the sampled field value
    would be -infinity, which has no meaningful sample mean).
    """
    if pref.is_power:
        bad = ~(cushion > 0.0)
        if np.any(bad):
            raise AdmissibilityError(
                f"{int(bad.sum())} of {cushion.size} paths at or below the floor; "
                "power-family utility is -infinity there"
            )
        return (cushion ** pref.gamma) / pref.gamma * np.exp(v)
    if tolerance is None:
        raise ValidationError("exponential families need the tolerance state")
    return -np.exp(-cushion / tolerance + v)


def volatility_fields(params: ModelParams, pref: PreferenceSpec,
                      ctx: FieldContext, x) -> tuple[np.ndarray, np.ndarray]:
    """Volatility fields (a1, a2) of the criterion at (x, t).

    a1 loads on the hedgeable factor, a2 on the unhedgeable one.  Shapes are
    (N, n) and (N, m) for N sample points.
    """
    ev = field_evaluation(params, pref, ctx, x)
    return ev.a1, ev.a2


@dataclass(frozen=True)
class FieldEvaluation:
    """Field values, x-derivatives and floor-process data at sample points.

    The floor translation and its (nu, kappa1, kappa2) coefficients, together
    with the effective market vector fields, are exactly what the generic
    drift identity consumes.  For the exponential families the field is used
    untranslated (the floor randomness lives inside U itself), so
    ``translation`` is 0 and the kappa's vanish.
    """

    x: np.ndarray
    u: np.ndarray
    u_x: np.ndarray
    u_xx: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    grad_a1: np.ndarray
    grad_a2: np.ndarray
    translation: float
    nu: float
    kappa1: np.ndarray
    kappa2: np.ndarray
    lam: np.ndarray
    sy1: np.ndarray
    sy2: np.ndarray
    mu_y: float
    contribution: float
    sigma: np.ndarray


def field_evaluation(params: ModelParams, pref: PreferenceSpec,
                     ctx: FieldContext, x) -> FieldEvaluation:
    """Evaluate the field and everything the drift identity needs at (x, t)."""
    pref.validate_against(params)
    c = coefficients_at(params, ctx.t)
    lam = c.price_of_risk
    th1 = pref.vol_hedgeable.array_at(ctx.t)
    th2 = pref.vol_unhedgeable.array_at(ctx.t)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    g = pref.gamma
    ev = np.exp(ctx.v)

    if pref.family in (POWER_RATIO, POWER_WEALTH):
        cushion = xs - ctx.floor
        if np.any(cushion <= 0.0):
            raise AdmissibilityError(
                "power-family field evaluated at or below the floor"
            )
        u = cushion ** g / g * ev
        u_x = cushion ** (g - 1.0) * ev
        u_xx = (g - 1.0) * cushion ** (g - 2.0) * ev
        a1 = u[:, None] * th1
        a2 = u[:, None] * th2
        grad_a1 = u_x[:, None] * th1
        grad_a2 = u_x[:, None] * th2
    else:
        tol = ctx.require_tolerance()
        u = -np.exp(-(xs - ctx.floor) / tol + ctx.v)
        u_x = -u / tol
        u_xx = u / (tol * tol)
        if pref.family == EXP_RATIO:
            hedge_pick = pref.beta.array_at(ctx.t)
            unhedge_load = -c.salary_vol_unhedgeable
        else:
            hedge_pick = c.volatility.T @ pref.benchmark_weights.array_at(ctx.t)
            unhedge_load = np.zeros(params.n_extra)
        ratio = xs / tol
        a1 = u[:, None] * (th1 + ratio[:, None] * hedge_pick)
        a2 = u[:, None] * (th2 + ratio[:, None] * unhedge_load)
        grad_a1 = u_x[:, None] * (th1 + ratio[:, None] * hedge_pick) \
            + (u / tol)[:, None] * hedge_pick
        grad_a2 = u_x[:, None] * (th2 + ratio[:, None] * unhedge_load) \
            + (u / tol)[:, None] * unhedge_load

    # Floor-process coefficients and effective market fields per family.
    if pref.family == POWER_RATIO:
        beta = pref.beta.array_at(ctx.t)
        alpha = alpha_from_beta(params, beta, ctx.t)
        translation = ctx.floor
        nu = c.contribution + ctx.floor * alpha
        kappa1 = ctx.floor * beta
        kappa2 = -ctx.floor * c.salary_vol_unhedgeable
        lam_eff, sy1_eff, sy2_eff = lam, c.salary_vol_hedgeable, c.salary_vol_unhedgeable
        mu_y_eff, p_eff = c.salary_growth, c.contribution
    elif pref.family == EXP_RATIO:
        translation, nu = 0.0, 0.0
        kappa1 = np.zeros(params.n_assets)
        kappa2 = np.zeros(params.n_extra)
        lam_eff, sy1_eff, sy2_eff = lam, c.salary_vol_hedgeable, c.salary_vol_unhedgeable
        mu_y_eff, p_eff = c.salary_growth, c.contribution
    elif pref.family == POWER_WEALTH:
        beta_t = c.volatility.T @ pref.benchmark_weights.array_at(ctx.t)
        alpha_w = float(lam @ beta_t + c.rate)
        salary = ctx.require_salary()
        translation = ctx.floor
        nu = c.contribution * salary + ctx.floor * alpha_w
        kappa1 = ctx.floor * beta_t
        kappa2 = np.zeros(params.n_extra)
        lam_eff = lam
        sy1_eff = np.zeros(params.n_assets)
        sy2_eff = np.zeros(params.n_extra)
        mu_y_eff, p_eff = -c.rate, c.contribution * salary
    else:  # EXP_WEALTH
        salary = ctx.require_salary()
        translation, nu = 0.0, 0.0
        kappa1 = np.zeros(params.n_assets)
        kappa2 = np.zeros(params.n_extra)
        lam_eff = lam
        sy1_eff = np.zeros(params.n_assets)
        sy2_eff = np.zeros(params.n_extra)
        mu_y_eff, p_eff = -c.rate, c.contribution * salary

    return FieldEvaluation(
        x=xs, u=u, u_x=u_x, u_xx=u_xx,
        a1=a1, a2=a2, grad_a1=grad_a1, grad_a2=grad_a2,
        translation=float(translation), nu=float(nu),
        kappa1=np.asarray(kappa1, dtype=float),
        kappa2=np.asarray(kappa2, dtype=float),
        lam=lam, sy1=sy1_eff, sy2=sy2_eff,
        mu_y=float(mu_y_eff), contribution=float(p_eff),
        sigma=c.volatility,
    )


# ---------------------------------------------------------------------------
# Drift identity: generic and closed-form routes
# ---------------------------------------------------------------------------


def spde_drift(ev: FieldEvaluation) -> np.ndarray:
    """Required dt-coefficient of the field via the generic identity.

    Evaluated from the translated field's derivatives, the floor-process
    coefficients (nu, kappa1, kappa2) and the effective market fields.  For
    an exponential family the translation is zero, so x below is the raw
    state.
    """
    x = ev.x
    load2 = x[:, None] * ev.sy2 + ev.kappa2          # (N, m)
    excess = ev.lam - ev.sy1
    gross = float(ev.lam @ ev.sy1 + ev.sy2 @ ev.sy2) - ev.mu_y
    lin = ev.contribution - ev.nu + float(excess @ ev.kappa1) + x * gross
    sq = ev.grad_a1 + excess * ev.u_x[:, None]       # (N, n)
    return (
        np.einsum("ij,ij->i", load2, ev.grad_a2)
        - 0.5 * np.einsum("ij,ij->i", load2, load2) * ev.u_xx
        - ev.u_x * lin
        + 0.5 * np.einsum("ij,ij->i", sq, sq) / ev.u_xx
    )


def analytic_drift(params: ModelParams, pref: PreferenceSpec,
                   ctx: FieldContext, x) -> np.ndarray:
    """Required field drift via the per-family closed form.

    Independent of :func:`spde_drift`: the power families reduce to
    U * (v + |th|^2 / 2), the exponential families to an explicit polynomial
    in x / tolerance.  Used as the second route of the consistency check.
    """
    c = coefficients_at(params, ctx.t)
    lam = c.price_of_risk
    th1 = pref.vol_hedgeable.array_at(ctx.t)
    th2 = pref.vol_unhedgeable.array_at(ctx.t)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    rate = preference_drift(params, pref, ctx.t)
    picks = float(th1 @ th1 + th2 @ th2)

    if pref.is_power:
        cushion = xs - ctx.floor
        if np.any(cushion <= 0.0):
            raise AdmissibilityError(
                "power-family field evaluated at or below the floor"
            )
        u = cushion ** pref.gamma / pref.gamma * np.exp(ctx.v)
        return u * (rate + 0.5 * picks)

    tol = ctx.require_tolerance()
    u = -np.exp(-(xs - ctx.floor) / tol + ctx.v)
    ratio = xs / tol
    if pref.family == EXP_RATIO:
        beta = pref.beta.array_at(ctx.t)
        sy2 = c.salary_vol_unhedgeable
        alpha = alpha_from_beta(params, beta, ctx.t)
        load = float(beta @ beta + sy2 @ sy2)
        cross = float(beta @ th1 - sy2 @ th2)
        flow = c.contribution / tol
    else:
        beta = c.volatility.T @ pref.benchmark_weights.array_at(ctx.t)
        alpha = float(lam @ beta + c.rate)
        load = float(beta @ beta)
        cross = float(beta @ th1)
        flow = c.contribution * ctx.require_salary() / tol
    base = rate + 0.5 * picks
    return u * (
        base + flow + ratio * (cross + alpha - load) + 0.5 * ratio * ratio * load
    )


def spde_policy(ev: FieldEvaluation) -> np.ndarray:
    """Optimal weights implied by the drift identity's first-order condition.

    Solves sigma' pi = sy1 - (grad a1 + (lam - sy1) U_x - kappa1 U_xx) / (x U_xx)
    at each sample point.  The x here is the raw controlled state (ratio or
    wealth), i.e. translation + cushion.
    """
    excess = ev.lam - ev.sy1
    numer = ev.grad_a1 + excess * ev.u_x[:, None] - ev.kappa1 * ev.u_xx[:, None]
    rhs = ev.sy1 - numer / (ev.x * ev.u_xx)[:, None]
    return np.linalg.solve(ev.sigma.T, rhs.T).T
