"""Path simulation for the fund/salary system under a portfolio rule.

Scheme selection
----------------
Each state is advanced by the strongest scheme its dynamics admit on a
piecewise-constant coefficient segment:

* *geometric* states (salary, the cushion of the power criteria, the
  risk-tolerance process) take exact stochastic-exponential steps;
* *linear* states with constant inflow (the benchmark/floor processes) take
  a variation-of-constants step whose deterministic part is exact;
* the normalised cushion of the exponential criteria is arithmetic Brownian
  motion and is advanced exactly;
* the controlled ratio/wealth under an arbitrary rule falls back to
  Euler-Maruyama.

The exact steps make distributional checks (martingale tests in particular)
free of discretisation bias; the Euler route exists for rules without
special structure and for scheme-consistency tests.

Noise
-----
One Philox counter stream per path: stream i of seed s is
``Philox(key=s).jumped(i)``, i.e. streams sit 2^128 counter strides apart.
A path consumes ``steps * (n + m)`` standard normals in step-major order,
so any path can be regenerated from ``(seed, path_index)`` alone, on any
worker, in any chunking of the path range.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields as dataclass_fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import (
    ModelParams,
    PreferenceSpec,
    Schedule,
    ValidationError,
    coefficients_at,
    EXP_RATIO,
    EXP_WEALTH,
    POWER_RATIO,
    POWER_WEALTH,
)
from .preferences import AdmissibilityError, utility_from_states, preference_drift
from .strategies import BaselinePolicy

__all__ = [
    "GRID_TOL",
    "TimeGrid",
    "GridAlignmentError",
    "SimulationBlowUpError",
    "ReplayError",
    "stream_for_path",
    "NoiseBlock",
    "SystemSpec",
    "Snapshot",
    "SystemResult",
    "simulate_systems",
    "simulate_path",
    "simulate_baseline_ratio",
    "simulate_fund_salary_euler",
    "trajectory_rows",
    "write_trajectory_csv",
]

# Absolute tolerance for matching instants (breakpoints, checkpoints) to grid
# times.  Inside this fuzz a time is *the* grid point.
GRID_TOL = 1.0e-9


class GridAlignmentError(ValidationError):
    """A coefficient breakpoint falls between grid points."""


class SimulationBlowUpError(RuntimeError):
    """A simulated state became non-finite (step too coarse or rule explosive)."""


class ReplayError(ValidationError):
    """A replay file does not match the requested grid or dimensions."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [t_start, t_end] with ``steps`` intervals."""

    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        if not (self.t_end > self.t_start):
            raise ValidationError(
                f"grid needs t_end > t_start, got [{self.t_start}, {self.t_end}]"
            )
        if self.steps < 1:
            raise ValidationError(f"grid needs at least one step, got {self.steps}")

    @classmethod
    def from_rate(cls, t_start: float, t_end: float, steps_per_year: int) -> "TimeGrid":
        """Grid with an integer number of equal steps per year."""
        if steps_per_year < 1:
            raise ValidationError(f"steps_per_year must be >= 1, got {steps_per_year}")
        span = t_end - t_start
        raw = span * steps_per_year
        steps = round(raw)
        if steps < 1 or abs(raw - steps) > 1e-6:
            raise ValidationError(
                f"horizon {span} does not hold an integer number of steps "
                f"at {steps_per_year}/year"
            )
        return cls(t_start, t_end, steps)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of an instant; errors if t is not a grid time."""
        k = round((t - self.t_start) / self.dt)
        if k < 0 or k > self.steps or abs(self.t_start + k * self.dt - t) > GRID_TOL:
            raise GridAlignmentError(
                f"time {t} is not on the grid [{self.t_start}, {self.t_end}] "
                f"with {self.steps} steps"
            )
        return k

    def check_alignment(self, breakpoints: Sequence[float], what: str = "coefficient") -> None:
        """Refuse breakpoints that fall strictly between grid times."""
        for b in breakpoints:
            if b <= self.t_start + GRID_TOL or b >= self.t_end - GRID_TOL:
                continue
            k = round((b - self.t_start) / self.dt)
            if abs(self.t_start + k * self.dt - b) > GRID_TOL:
                raise GridAlignmentError(
                    f"{what} breakpoint at t={b} does not fall on the simulation "
                    f"grid (dt={self.dt}); align the grid or the schedule"
                )


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


def stream_for_path(seed: int, path_index: int) -> np.random.Generator:
    """The independent generator for one path.

    Streams are Philox counter blocks keyed by the run seed and advanced
    ``path_index`` jumps of 2^128 states, so they never overlap and depend
    only on ``(seed, path_index)``.
    """
    if path_index < 0:
        raise ValidationError(f"path index must be >= 0, got {path_index}")
    bitgen = np.random.Philox(key=int(seed))
    if path_index:
        bitgen = bitgen.jumped(path_index)
    return np.random.Generator(bitgen)


@dataclass(frozen=True)
class NoiseBlock:
    """Brownian increments for a block of paths on one grid.

    ``dB1`` has shape (paths, steps, n) and ``dB2`` (paths, steps, m); each
    increment is N(0, dt).  ``first_path`` records which stream index row 0
    corresponds to, purely for bookkeeping.
    """

    grid: TimeGrid
    dB1: np.ndarray
    dB2: np.ndarray
    first_path: int = 0

    def __post_init__(self):
        if self.dB1.ndim != 3 or self.dB2.ndim != 3:
            raise ValidationError("noise arrays must have shape (paths, steps, dim)")
        if self.dB1.shape[1] != self.grid.steps or self.dB2.shape[1] != self.grid.steps:
            raise ValidationError(
                f"noise has {self.dB1.shape[1]} steps, grid has {self.grid.steps}"
            )
        if self.dB1.shape[0] != self.dB2.shape[0]:
            raise ValidationError("dB1 and dB2 disagree on the number of paths")

    @property
    def paths(self) -> int:
        return self.dB1.shape[0]

    @property
    def n(self) -> int:
        return self.dB1.shape[2]

    @property
    def m(self) -> int:
        return self.dB2.shape[2]

    @classmethod
    def from_seed(cls, seed: int, grid: TimeGrid, paths: int, n: int, m: int,
                  first_path: int = 0) -> "NoiseBlock":
        """Draw increments for paths ``first_path .. first_path + paths - 1``.

        Each path's stream emits its ``steps x (n + m)`` standard normals in
        step-major order; columns split as n hedgeable then m unhedgeable.
        """
        steps = grid.steps
        root_dt = math.sqrt(grid.dt)
        dB1 = np.empty((paths, steps, n))
        dB2 = np.empty((paths, steps, m))
        for i in range(paths):
            z = stream_for_path(seed, first_path + i).standard_normal((steps, n + m))
            dB1[i] = z[:, :n] * root_dt
            dB2[i] = z[:, n:] * root_dt
        return cls(grid=grid, dB1=dB1, dB2=dB2, first_path=first_path)

    @classmethod
    def deterministic_trend(cls, grid: TimeGrid, slope1, slope2) -> "NoiseBlock":
        """A single noiseless path whose 'Brownian' factors move linearly.

        Factor j of B1 follows slope1[j] * t (an increment of slope1[j] * dt
        per step), likewise B2; slopes of zero give flat factors.  Used for
        deterministic scenario runs.
        """
        s1 = np.atleast_1d(np.asarray(slope1, dtype=float))
        s2 = np.atleast_1d(np.asarray(slope2, dtype=float))
        dB1 = np.tile(s1 * grid.dt, (1, grid.steps, 1))
        dB2 = np.tile(s2 * grid.dt, (1, grid.steps, 1))
        return cls(grid=grid, dB1=dB1, dB2=dB2)

    def save_csv(self, file, path_index: int = 0) -> None:
        """Write one path's increments as CSV (replay format).

        Columns: t (interval start), dB1_1..dB1_n, dB2_1..dB2_m.
        """
        times = self.grid.times()
        with open(file, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["t"]
                + [f"dB1_{j + 1}" for j in range(self.n)]
                + [f"dB2_{j + 1}" for j in range(self.m)]
            )
            for k in range(self.grid.steps):
                row = [repr(float(times[k]))]
                row += [repr(float(v)) for v in self.dB1[path_index, k]]
                row += [repr(float(v)) for v in self.dB2[path_index, k]]
                w.writerow(row)

    @classmethod
    def load_csv(cls, file, grid: TimeGrid, n: int, m: int) -> "NoiseBlock":
        """Load a single replay path, validating shape against the grid."""
        with open(file, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ReplayError(f"replay file {file} is empty") from None
            want = (
                ["t"]
                + [f"dB1_{j + 1}" for j in range(n)]
                + [f"dB2_{j + 1}" for j in range(m)]
            )
            if header != want:
                raise ReplayError(
                    f"replay header mismatch in {file}: expected {want}, found {header}"
                )
            rows = [row for row in reader if row]
        if len(rows) != grid.steps:
            raise ReplayError(
                f"replay file {file} has {len(rows)} increments, grid needs {grid.steps}"
            )
        times = grid.times()
        dB1 = np.empty((1, grid.steps, n))
        dB2 = np.empty((1, grid.steps, m))
        for k, row in enumerate(rows):
            t = float(row[0])
            if abs(t - times[k]) > GRID_TOL:
                raise ReplayError(
                    f"replay row {k} starts at t={t}, grid expects {times[k]}"
                )
            vals = [float(v) for v in row[1:]]
            dB1[0, k] = vals[:n]
            dB2[0, k] = vals[n:]
        return cls(grid=grid, dB1=dB1, dB2=dB2)


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemSpec:
    """One simulated system: parameters, a rule, optionally a criterion."""

    label: str
    params: ModelParams
    policy: object
    pref: PreferenceSpec | None = None
    force_euler: bool = False
    track_salary: bool = False


@dataclass(frozen=True)
class Snapshot:
    """States, weights and (if a criterion is attached) utilities at a time."""

    t: float
    states: dict
    weights: np.ndarray
    utility: np.ndarray | None


@dataclass
class SystemResult:
    label: str
    route: str
    checkpoints: dict
    series: dict | None = None
    strategy: np.ndarray | None = None
    grid: TimeGrid | None = None


def _phi1(z: float) -> float:
    """(exp(z) - 1) / z, stable through z = 0."""
    if abs(z) < 1.0e-8:
        return 1.0 + z / 2.0 + z * z / 6.0
    return math.expm1(z) / z


def _schedules_of(obj) -> list[Schedule]:
    """All Schedule-typed fields on a dataclass instance."""
    out = []
    try:
        flds = dataclass_fields(obj)
    except TypeError:
        return out
    for f in flds:
        v = getattr(obj, f.name)
        if isinstance(v, Schedule):
            out.append(v)
    return out


def _route_of(spec: SystemSpec) -> str:
    kind = getattr(spec.policy, "kind", None)
    if kind in ("backward", "constant"):
        return "euler"
    if kind == "baseline":
        return "linear"
    if kind == "forward-power":
        return "euler" if spec.force_euler else "power-exact"
    if kind == "forward-exp":
        return "euler" if spec.force_euler else "exp-exact"
    if kind == "wealth-power":
        return "wealth-power"
    if kind == "wealth-exp":
        return "wealth-exp"
    raise ValidationError(f"policy kind {kind!r} is not simulatable")


class _SegTables:
    """Per-segment, per-system constants consumed by the step kernels."""

    __slots__ = (
        "mkt", "policy_consts",
        "lin_logdrift", "lin_load1", "lin_load2", "lin_inflow", "lin_alpha",
        "geo_logdrift", "geo_load1", "geo_load2",
        "q_drift", "q_load",
        "v_drift", "v_load1", "v_load2",
        "y_logdrift", "y_load1", "y_load2",
        "em_p", "em_excess", "em_gross", "em_sy1", "em_sy2",
        "wfloor_logdrift", "wfloor_load1", "wfloor_alpha",
    )

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, None)


class _System:
    """Working state and resolved tables for one simulated system."""

    def __init__(self, spec: SystemSpec, grid: TimeGrid, paths: int):
        self.spec = spec
        self.label = spec.label
        self.route = _route_of(spec)
        self.params = spec.params
        self.pref = spec.pref
        self.policy = spec.policy
        self.n = spec.params.n_assets
        self.m = spec.params.n_extra
        self.paths = paths
        self.is_wealth = self.route in ("wealth-power", "wealth-exp")
        if self.pref is not None:
            self.pref.validate_against(self.params)
        self.track_salary = bool(
            spec.track_salary or self.is_wealth or self.route == "wealth-euler"
        )
        self.needs = set(getattr(self.policy, "required_states", ("x",)))
        self.check_floor = (
            self.route == "euler"
            and getattr(self.policy, "kind", "") == "forward-power"
        )
        self.states: dict[str, np.ndarray] = {}
        self.tables: list[_SegTables] = []
        self._init_states()

    # -- preparation -------------------------------------------------------

    def _init_states(self) -> None:
        p = self.paths
        ones = np.ones(p)
        x0 = self.params.initial_fund if self.is_wealth else self.params.initial_ratio
        route = self.route
        if route in ("power-exact", "wealth-power"):
            if x0 <= 0.0:
                raise ValidationError(
                    f"power criterion needs a starting point above the floor, got {x0}"
                )
            self.states["xt"] = x0 * ones
            self.states["z"] = np.zeros(p)
        elif route in ("exp-exact", "wealth-exp"):
            g = self._gamma()
            self.states["q"] = (x0 * g) * ones
            self.states["z"] = np.zeros(p)
            self.states["gamma"] = (1.0 / g) * ones
        elif route == "linear":
            self.states["x"] = x0 * ones
        else:  # euler
            self.states["x"] = x0 * ones
            if "z" in self.needs:
                self.states["z"] = np.zeros(p)
            if "gamma" in self.needs:
                self.states["gamma"] = (1.0 / self._gamma()) * ones
        if self.pref is not None:
            self.states["v"] = np.zeros(p)
        if self.track_salary:
            self.states["y"] = self.params.initial_salary * ones

    def _gamma(self) -> float:
        g = getattr(self.policy, "gamma", None)
        if g is None and self.pref is not None:
            g = self.pref.gamma
        if g is None:
            raise ValidationError(
                f"system {self.label!r} needs a risk-aversion parameter"
            )
        return float(g)

    def schedule_breakpoints(self, t0: float, t1: float) -> set[float]:
        bps = set(self.params.all_breakpoints(t0, t1))
        for obj in (self.policy, self.pref):
            if obj is None:
                continue
            for sched in _schedules_of(obj):
                bps.update(sched.breakpoints_in(t0, t1))
        return bps

    def build_tables(self, seg_times: Sequence[float], h: float) -> None:
        for ts in seg_times:
            self.tables.append(self._table_for(ts, h))

    def _beta_at(self, t: float) -> np.ndarray:
        """Floor volatility pick: policy beta, else preference beta."""
        src = getattr(self.policy, "beta", None)
        if src is None and self.pref is not None and self.pref.is_ratio:
            src = self.pref.beta
        if src is None:
            raise ValidationError(
                f"system {self.label!r} needs a beta schedule for its floor state"
            )
        return src.array_at(t)

    def _theta_at(self, t: float):
        if self.pref is not None:
            return (
                self.pref.vol_hedgeable.array_at(t),
                self.pref.vol_unhedgeable.array_at(t),
            )
        th1 = getattr(self.policy, "vol_hedgeable", None)
        if th1 is None:
            raise ValidationError(
                f"system {self.label!r} needs preference volatility picks"
            )
        return th1.array_at(t), np.zeros(self.m)

    def _table_for(self, ts: float, h: float) -> _SegTables:
        tb = _SegTables()
        c = coefficients_at(self.params, ts)
        tb.mkt = c
        tb.policy_consts = self.policy.segment_constants(c)
        lam = c.price_of_risk
        sy1 = c.salary_vol_hedgeable
        sy2 = c.salary_vol_unhedgeable
        s1 = float(sy1 @ sy1)
        s2 = float(sy2 @ sy2)
        route = self.route

        if self.track_salary:
            gy = c.rate + c.salary_growth
            tb.y_logdrift = (gy - 0.5 * (s1 + s2)) * h
            tb.y_load1 = sy1
            tb.y_load2 = sy2

        if self.pref is not None:
            th1, th2 = self._theta_at(ts)
            tb.v_drift = preference_drift(self.params, self.pref, ts) * h
            tb.v_load1 = th1
            tb.v_load2 = th2

        if "z" in self.states or route == "linear":
            if self.is_wealth:
                bench = self._benchmark_at(ts)
                beta_t = c.volatility.T @ bench
                alpha = float(lam @ beta_t + c.rate)
                tb.wfloor_logdrift = (alpha - 0.5 * float(beta_t @ beta_t)) * h
                tb.wfloor_load1 = beta_t
                tb.wfloor_alpha = alpha
            else:
                beta = self._beta_at(ts)
                alpha = float(
                    (lam - sy1) @ beta + lam @ sy1 + s2 - c.salary_growth
                )
                load = float(beta @ beta) + s2
                tb.lin_logdrift = (alpha - 0.5 * load) * h
                tb.lin_load1 = beta
                tb.lin_load2 = -sy2
                tb.lin_alpha = alpha
                tb.lin_inflow = c.contribution * h * _phi1(-alpha * h)

        if route == "power-exact":
            th1, _ = self._theta_at(ts)
            g = self._gamma()
            scale = getattr(self.policy, "myopic_scale", 1.0)
            xi = scale * (lam - g * sy1 + th1) / (1.0 - g) - sy1
            growth = float(xi @ (lam - sy1) + lam @ sy1 + s2 - c.salary_growth)
            tb.geo_logdrift = (growth - 0.5 * (float(xi @ xi) + s2)) * h
            tb.geo_load1 = xi
            tb.geo_load2 = -sy2
        elif route == "exp-exact":
            th1, _ = self._theta_at(ts)
            beta = self._beta_at(ts)
            scale = getattr(self.policy, "myopic_scale", 1.0)
            u = scale * (lam + th1) - sy1 - beta
            tb.q_drift = float(u @ (lam - sy1 - beta)) * h
            tb.q_load = u
        elif route == "wealth-power":
            th1, _ = self._theta_at(ts)
            g = self._gamma()
            scale = getattr(self.policy, "myopic_scale", 1.0)
            zeta = scale * (lam + th1) / (1.0 - g)
            growth = float(zeta @ lam) + c.rate
            tb.geo_logdrift = (growth - 0.5 * float(zeta @ zeta)) * h
            tb.geo_load1 = zeta
            tb.geo_load2 = np.zeros(self.m)
        elif route == "wealth-exp":
            th1, _ = self._theta_at(ts)
            bench = self._benchmark_at(ts)
            beta_t = c.volatility.T @ bench
            scale = getattr(self.policy, "myopic_scale", 1.0)
            u = scale * (lam + th1) - beta_t
            tb.q_drift = float(u @ (lam - beta_t)) * h
            tb.q_load = u
        elif route == "euler":
            tb.em_p = c.contribution
            tb.em_excess = lam - sy1
            tb.em_gross = c.salary_growth - s1 - s2
            tb.em_sy1 = sy1
            tb.em_sy2 = sy2

        return tb

    def _benchmark_at(self, t: float) -> np.ndarray:
        bench = getattr(self.policy, "benchmark", None)
        if bench is None and self.pref is not None and not self.pref.is_ratio:
            bench = self.pref.benchmark_weights
        if bench is None:
            raise ValidationError(
                f"system {self.label!r} needs benchmark weights for its floor state"
            )
        return bench.array_at(t)

    # -- per-step operations -------------------------------------------------

    def current_x(self) -> np.ndarray:
        route = self.route
        if route in ("power-exact", "wealth-power"):
            return self.states["z"] + self.states["xt"]
        if route in ("exp-exact", "wealth-exp"):
            return self.states["z"] + self.states["q"] * self.states["gamma"]
        return self.states["x"]

    def weights(self, seg: int, t: float) -> np.ndarray:
        tb = self.tables[seg]
        view = dict(self.states)
        view["x"] = self.current_x()
        return self.policy.weights_from(tb.policy_consts, t, view)

    def cushion(self) -> np.ndarray:
        if "xt" in self.states:
            return self.states["xt"]
        if "q" in self.states:
            return self.states["q"] * self.states["gamma"]
        if "z" in self.states:
            return self.states["x"] - self.states["z"]
        return self.states["x"]

    def utility(self) -> np.ndarray | None:
        if self.pref is None:
            return None
        tol = self.states.get("gamma")
        return utility_from_states(self.pref, self.cushion(), self.states["v"], tol)

    def snapshot(self, t: float, weights: np.ndarray) -> Snapshot:
        state_view = {k: v.copy() for k, v in self.states.items()}
        state_view["x"] = self.current_x().copy()
        return Snapshot(t=t, states=state_view, weights=np.array(weights),
                        utility=self.utility())

    def advance(self, k: int, seg: int, t: float, dB1: np.ndarray, dB2: np.ndarray,
                weights: np.ndarray | None = None) -> None:
        tb = self.tables[seg]
        st = self.states
        route = self.route

        # The wealth floor's inflow accrues at the salary over the step, so
        # grab the left-endpoint salary before advancing it.
        y_left = st["y"] if "y" in st else None

        if self.track_salary:
            st["y"] = st["y"] * np.exp(
                tb.y_logdrift + dB1 @ tb.y_load1 + dB2 @ tb.y_load2
            )

        if self.pref is not None:
            st["v"] = st["v"] + tb.v_drift + dB1 @ tb.v_load1 + dB2 @ tb.v_load2

        if "z" in st:
            if self.is_wealth:
                factor = np.exp(tb.wfloor_logdrift + dB1 @ tb.wfloor_load1)
                inflow = tb.mkt.contribution * y_left * self._wfloor_dteff(tb)
                st["z"] = factor * (st["z"] + inflow)
            else:
                factor = np.exp(
                    tb.lin_logdrift + dB1 @ tb.lin_load1 + dB2 @ tb.lin_load2
                )
                st["z"] = factor * (st["z"] + tb.lin_inflow)

        if "gamma" in st:
            if self.is_wealth:
                st["gamma"] = st["gamma"] * np.exp(
                    tb.wfloor_logdrift + dB1 @ tb.wfloor_load1
                )
            else:
                st["gamma"] = st["gamma"] * np.exp(
                    tb.lin_logdrift + dB1 @ tb.lin_load1 + dB2 @ tb.lin_load2
                )

        if route == "linear":
            factor = np.exp(tb.lin_logdrift + dB1 @ tb.lin_load1 + dB2 @ tb.lin_load2)
            st["x"] = factor * (st["x"] + tb.lin_inflow)
        elif route in ("power-exact", "wealth-power"):
            st["xt"] = st["xt"] * np.exp(
                tb.geo_logdrift + dB1 @ tb.geo_load1 + dB2 @ tb.geo_load2
            )
        elif route in ("exp-exact", "wealth-exp"):
            st["q"] = st["q"] + tb.q_drift + dB1 @ tb.q_load
        elif route == "euler":
            if weights is None:
                weights = self.weights(seg, t)
            x = st["x"]
            h = self._h
            load = weights @ tb.mkt.volatility          # sigma' pi, shape (P, n)
            with np.errstate(over="ignore", invalid="ignore"):
                drift = tb.em_p + x * (load @ tb.em_excess - tb.em_gross)
                shock = np.einsum("ij,ij->i", load - tb.em_sy1, dB1) - dB2 @ tb.em_sy2
                x_new = x + drift * h + x * shock
            if not np.all(np.isfinite(x_new)):
                bad = int(np.count_nonzero(~np.isfinite(x_new)))
                raise SimulationBlowUpError(
                    f"{bad} path(s) of system {self.label!r} became non-finite at "
                    f"step {k} (t={t:.6f}); refine the grid or bound the rule"
                )
            st["x"] = x_new
            if self.check_floor and "z" in st:
                below = st["x"] <= st["z"]
                if np.any(below):
                    raise AdmissibilityError(
                        f"{int(below.sum())} path(s) of system {self.label!r} hit "
                        f"the floor at step {k} (t={t:.6f}); the power criterion "
                        "is -infinity there"
                    )

    def _wfloor_dteff(self, tb: _SegTables) -> float:
        return self._h * _phi1(-tb.wfloor_alpha * self._h)

    _h: float = 0.0  # set by the driver


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _segment_starts(systems: Sequence[_System], grid: TimeGrid) -> tuple[np.ndarray, list[float]]:
    """Union of coefficient breakpoints, validated against the grid."""
    bps: set[float] = set()
    for sys in systems:
        bps.update(sys.schedule_breakpoints(grid.t_start, grid.t_end))
    ordered = sorted(bps)
    grid.check_alignment(ordered)
    seg_times = [grid.t_start] + ordered
    edges = np.asarray(seg_times)
    step_times = grid.times()[:-1]
    seg_of_step = np.searchsorted(edges, step_times + GRID_TOL, side="right") - 1
    return seg_of_step, seg_times


def simulate_systems(
    systems: Sequence[SystemSpec],
    noise: NoiseBlock,
    *,
    checkpoints: Sequence[float] = (),
    record: bool = False,
    step_hook: Callable[[int, float, Mapping[str, np.ndarray]], None] | None = None,
) -> dict[str, SystemResult]:
    """Advance one or more systems through the same noise.

    All systems see identical Brownian increments, which makes cross-system
    differences (of weights, states, utilities) exact path-by-path
    comparisons.  ``checkpoints`` must be grid times; a snapshot of states,
    weights and utilities is taken at each.  With ``record=True`` the full
    per-step series are kept (memory scales as paths x steps).  ``step_hook``
    is called every step with (step index, time, {label: weights}).
    """
    if not systems:
        raise ValidationError("no systems to simulate")
    labels = [s.label for s in systems]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"duplicate system labels: {labels}")
    grid = noise.grid
    paths = noise.paths
    n = systems[0].params.n_assets
    m = systems[0].params.n_extra
    for s in systems:
        if (s.params.n_assets, s.params.n_extra) != (n, m):
            raise ValidationError("all systems must share the noise dimensions")
    if (noise.n, noise.m) != (n, m):
        raise ValidationError(
            f"noise has dimensions ({noise.n}, {noise.m}), model needs ({n}, {m})"
        )
    if record and paths * (grid.steps + 1) > 50_000_000:
        raise ValidationError(
            "recording full series for this many paths x steps would exhaust "
            "memory; use checkpoints instead"
        )

    runtimes = [_System(s, grid, paths) for s in systems]
    seg_of_step, seg_times = _segment_starts(runtimes, grid)
    h = grid.dt
    for rt in runtimes:
        rt._h = h
        rt.build_tables(seg_times, h)

    cp_index: dict[int, float] = {}
    for t_cp in checkpoints:
        cp_index[grid.index_of(t_cp)] = float(t_cp)

    results = {
        rt.label: SystemResult(label=rt.label, route=rt.route, checkpoints={}, grid=grid)
        for rt in runtimes
    }
    series: dict[str, dict[str, np.ndarray]] = {}
    strat: dict[str, np.ndarray] = {}
    if record:
        for rt in runtimes:
            keys = list(rt.states) + ["x"]
            series[rt.label] = {
                key: np.empty((paths, grid.steps + 1)) for key in dict.fromkeys(keys)
            }
            strat[rt.label] = np.empty((paths, grid.steps + 1, n))

    times = grid.times()
    steps = grid.steps
    need_weights = record or step_hook is not None

    for k in range(steps + 1):
        t = float(times[k])
        if k < steps:
            seg = int(seg_of_step[k])
        else:
            # Coefficients for display at the final instant: right-continuous
            # lookup at t_end.
            seg = int(
                np.searchsorted(np.asarray(seg_times), t + GRID_TOL, side="right") - 1
            )
        want_cp = k in cp_index
        weights_now: dict[str, np.ndarray] = {}
        if need_weights or want_cp:
            for rt in runtimes:
                w = rt.weights(seg, t)
                weights_now[rt.label] = w
                if record:
                    for key, arr in series[rt.label].items():
                        arr[:, k] = rt.current_x() if key == "x" else rt.states[key]
                    strat[rt.label][:, k] = w
                if want_cp:
                    results[rt.label].checkpoints[cp_index[k]] = rt.snapshot(t, w)
            if step_hook is not None and k < steps:
                step_hook(k, t, weights_now)
        if k == steps:
            break
        dB1 = noise.dB1[:, k, :]
        dB2 = noise.dB2[:, k, :]
        for rt in runtimes:
            rt.advance(k, seg, t, dB1, dB2, weights_now.get(rt.label))

    if record:
        for rt in runtimes:
            results[rt.label].series = series[rt.label]
            results[rt.label].strategy = strat[rt.label]
    return results


def simulate_path(
    params: ModelParams,
    policy,
    *,
    noise: NoiseBlock,
    pref: PreferenceSpec | None = None,
    record: bool = True,
    checkpoints: Sequence[float] = (),
    force_euler: bool = False,
) -> SystemResult:
    """Single-system convenience wrapper around :func:`simulate_systems`."""
    spec = SystemSpec(
        label="run",
        params=params,
        policy=policy,
        pref=pref,
        force_euler=force_euler,
        track_salary=True,
    )
    return simulate_systems(
        [spec], noise, checkpoints=checkpoints, record=record
    )["run"]


def simulate_baseline_ratio(
    params: ModelParams,
    beta,
    noise: NoiseBlock,
    *,
    start: float = 0.0,
    include_contribution: bool = True,
) -> np.ndarray:
    """Exact-in-drift simulation of the benchmark ratio process.

    The process solves dZ = p dt + Z (alpha dt + beta dB1 - sy2 dB2) with
    alpha tied to beta by the benchmark identity.  With ``start=0`` this is
    the floor of the ratio criteria; with ``include_contribution=False`` and
    ``start=1/gamma`` it is the exponential family's risk-tolerance process.
    Returns the full series, shape (paths, steps + 1).
    """
    beta_sched = beta if isinstance(beta, Schedule) else Schedule.constant(beta)
    grid = noise.grid
    bps = set(params.all_breakpoints(grid.t_start, grid.t_end))
    bps.update(beta_sched.breakpoints_in(grid.t_start, grid.t_end))
    ordered = sorted(bps)
    grid.check_alignment(ordered)
    seg_times = [grid.t_start] + ordered
    edges = np.asarray(seg_times)
    step_times = grid.times()[:-1]
    seg_of_step = np.searchsorted(edges, step_times + GRID_TOL, side="right") - 1

    h = grid.dt
    tables = []
    for ts in seg_times:
        c = coefficients_at(params, ts)
        lam = c.price_of_risk
        sy1 = c.salary_vol_hedgeable
        sy2 = c.salary_vol_unhedgeable
        b = beta_sched.array_at(ts)
        alpha = float((lam - sy1) @ b + lam @ sy1 + sy2 @ sy2 - c.salary_growth)
        logdrift = (alpha - 0.5 * (float(b @ b) + float(sy2 @ sy2))) * h
        inflow = (c.contribution if include_contribution else 0.0) * h * _phi1(-alpha * h)
        tables.append((logdrift, b, -sy2, inflow))

    z = np.full(noise.paths, float(start))
    out = np.empty((noise.paths, grid.steps + 1))
    out[:, 0] = z
    for k in range(grid.steps):
        logdrift, load1, load2, inflow = tables[int(seg_of_step[k])]
        z = np.exp(logdrift + noise.dB1[:, k, :] @ load1 + noise.dB2[:, k, :] @ load2) \
            * (z + inflow)
        out[:, k + 1] = z
    return out


def simulate_fund_salary_euler(
    params: ModelParams,
    policy,
    noise: NoiseBlock,
) -> dict[str, np.ndarray]:
    """Euler simulation of fund wealth and salary as separate states.

    The rule is evaluated on the implied ratio W/Y each step.  This is the
    deliberately plain discretisation used to check that simulating the
    ratio directly and reconstructing it as W/Y agree to discretisation
    order; production runs use the ratio routes instead.
    """
    grid = noise.grid
    bps = sorted(params.all_breakpoints(grid.t_start, grid.t_end))
    grid.check_alignment(bps)
    seg_times = [grid.t_start] + bps
    edges = np.asarray(seg_times)
    step_times = grid.times()[:-1]
    seg_of_step = np.searchsorted(edges, step_times + GRID_TOL, side="right") - 1

    h = grid.dt
    tables = []
    for ts in seg_times:
        c = coefficients_at(params, ts)
        tables.append((c, policy.segment_constants(c)))

    paths = noise.paths
    w = np.full(paths, params.initial_fund)
    y = np.full(paths, params.initial_salary)
    out_w = np.empty((paths, grid.steps + 1))
    out_y = np.empty((paths, grid.steps + 1))
    out_w[:, 0] = w
    out_y[:, 0] = y
    times = grid.times()
    for k in range(grid.steps):
        c, consts = tables[int(seg_of_step[k])]
        t = float(times[k])
        dB1 = noise.dB1[:, k, :]
        dB2 = noise.dB2[:, k, :]
        lam = c.price_of_risk
        sy1 = c.salary_vol_hedgeable
        sy2 = c.salary_vol_unhedgeable
        pi = policy.weights_from(consts, t, {"x": w / y})
        load = pi @ c.volatility
        w_new = w + (c.contribution * y + w * (c.rate + load @ lam)) * h \
            + w * np.einsum("ij,ij->i", load, dB1)
        y_new = y + y * ((c.rate + c.salary_growth) * h + dB1 @ sy1 + dB2 @ sy2)
        if not (np.all(np.isfinite(w_new)) and np.all(np.isfinite(y_new))):
            raise SimulationBlowUpError(
                f"fund/salary Euler step became non-finite at step {k} (t={t:.6f})"
            )
        w, y = w_new, y_new
        out_w[:, k + 1] = w
        out_y[:, k + 1] = y
    return {"w": out_w, "y": out_y}


# ---------------------------------------------------------------------------
# Trajectory output
# ---------------------------------------------------------------------------

TRAJECTORY_FIELDS = ("t", "Y", "W", "X", "Z", "Gamma", "V")


def trajectory_rows(result: SystemResult, path_index: int = 0):
    """Yield per-step trajectory dicts for one recorded path.

    ``W`` and ``X`` are linked by W = X * Y definitionally: the engine
    simulates the ratio (or wealth) plus the salary and derives the other.
    Absent states yield empty strings.
    """
    if result.series is None or result.grid is None:
        raise ValidationError("trajectory output needs a recorded simulation")
    series = result.series
    times = result.grid.times()
    is_wealth = result.route in ("wealth-power", "wealth-exp", "wealth-euler")
    y = series.get("y")
    for k in range(result.grid.steps + 1):
        row: dict[str, object] = {"t": float(times[k])}
        yk = float(y[path_index, k]) if y is not None else None
        xk = float(series["x"][path_index, k])
        if is_wealth:
            row["W"] = xk
            row["X"] = xk / yk if yk else ""
        else:
            row["X"] = xk
            row["W"] = xk * yk if yk is not None else ""
        row["Y"] = yk if yk is not None else ""
        row["Z"] = float(series["z"][path_index, k]) if "z" in series else ""
        row["Gamma"] = float(series["gamma"][path_index, k]) if "gamma" in series else ""
        row["V"] = float(series["v"][path_index, k]) if "v" in series else ""
        for j in range(result.strategy.shape[2]):
            row[f"pi_{j + 1}"] = float(result.strategy[path_index, k, j])
        yield row


def write_trajectory_csv(result: SystemResult, file, path_index: int = 0) -> None:
    """Write one recorded path in the trajectory CSV contract."""
    n = result.strategy.shape[2]
    header = list(TRAJECTORY_FIELDS) + [f"pi_{j + 1}" for j in range(n)]
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in trajectory_rows(result, path_index):
            w.writerow([
                repr(v) if isinstance(v, float) else v for v in (row[h] for h in header)
            ])
