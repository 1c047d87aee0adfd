"""Command-line entry point.

Subcommands::

    dcpension simulate    one-off path dumps for inspection
    dcpension experiment  scripted reference experiments with verdicts
    dcpension verify      consistency suites for CI (martingale / spde / all)
    dcpension presets     list built-in parameter sets

Exit codes: 0 all verdicts pass; 1 a verdict failed; 2 usage or parse
problem; 3 validation problem (bad parameter values, misaligned grids,
inadmissible paths); 4 I/O failure.  Verdict lines go to stdout; timing goes
to stderr so artifacts stay byte-reproducible.

The default output directory is ``./runs``, overridable with the
``DCPENSION_OUTDIR`` environment variable or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import (
    ConfigError,
    PRESETS,
    Settings,
    normalize_family,
    parse_config,
)
from .engine import (
    NoiseBlock,
    ReplayError,
    SimulationBlowUpError,
    SystemSpec,
    TimeGrid,
    simulate_systems,
    write_trajectory_csv,
)
from .experiments import EXPERIMENTS, run_experiment
from .model import ValidationError
from .preferences import AdmissibilityError
from .strategies import optimal_policy

__all__ = ["main"]

EXIT_OK = 0
EXIT_VERDICT = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4

OUTDIR_ENV = "DCPENSION_OUTDIR"

_PRESET_BLURBS = {
    "backward-pitfall": "classical CRRA saver facing an anticipated salary growth revision",
    "power-showcase": "power criterion on the ratio, deterministic factor scenarios",
    "forward-revisit": "forward criterion through a growth revision, adaptive vs committed",
    "martingale": "sample-mean martingale checks for optimal and perturbed rules",
    "spde": "randomised two-route consistency checks of the drift identity",
}

_VERIFY_SUITES = ("martingale", "spde", "all")


def _default_out_base() -> Path:
    return Path(os.environ.get(OUTDIR_ENV, "runs"))


def _settings_from(args: argparse.Namespace, default_preset: str | None) -> Settings:
    if args.config is not None and args.preset is not None:
        raise ConfigError("--config and --preset are mutually exclusive")
    overrides = list(args.set or [])
    for flag, key in (
        ("seed", "simulation.seed"),
        ("paths", "simulation.paths"),
        ("workers", "simulation.workers"),
        ("steps_per_year", "simulation.steps_per_year"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    preset = args.preset
    if args.config is None and preset is None:
        if default_preset is None:
            raise ConfigError("provide --config FILE or --preset NAME")
        preset = default_preset
    return parse_config(args.config, overrides, preset=preset)


def _print_checks(checks) -> bool:
    ok = True
    for check in checks:
        tag = "PASS" if check["passed"] else "FAIL"
        ok &= check["passed"]
        print(f"[{tag}] {check['name']}: {check['detail']}")
    return ok


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="TOML parameter file")
    parser.add_argument("--preset", metavar="NAME", choices=sorted(PRESETS),
                        help="built-in parameter set (see `presets`)")
    parser.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                        help="override a config entry (repeatable)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--paths", type=int, help="Monte Carlo path count")
    parser.add_argument("--workers", type=int, help="worker processes")
    parser.add_argument("--steps-per-year", type=int, dest="steps_per_year",
                        help="time steps per year")
    parser.add_argument("--out", metavar="DIR", help="output directory")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _cmd_simulate(args: argparse.Namespace) -> int:
    settings = _settings_from(args, default_preset=None)
    if settings.pref is None:
        raise ValidationError("simulate needs a [preference] section")
    if not 1 <= args.trajectories <= 64:
        raise ValidationError("--trajectories must be between 1 and 64")
    grid = TimeGrid.from_rate(0.0, settings.horizon, settings.steps_per_year)
    params = settings.params
    if args.replay is not None:
        noise = NoiseBlock.load_csv(args.replay, grid, params.n_assets, params.n_extra)
    else:
        noise = NoiseBlock.from_seed(
            settings.seed, grid, args.trajectories, params.n_assets, params.n_extra
        )
    out = Path(args.out) if args.out else _default_out_base() / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    if args.dump_noise is not None:
        noise.save_csv(args.dump_noise)

    label = settings.pref.family
    spec = SystemSpec(label=label, params=params,
                      policy=optimal_policy(settings.pref), pref=settings.pref,
                      track_salary=True)
    t0 = time.monotonic()
    result = simulate_systems(
        [spec], noise, checkpoints=settings.checkpoints, record=True
    )[label]
    artifacts = []
    for k in range(noise.paths):
        name = f"trajectory_{k:03d}.csv"
        write_trajectory_csv(result, out / name, path_index=k)
        artifacts.append(name)

    summary = {
        "family": label,
        "seed": settings.seed,
        "paths": noise.paths,
        "steps_per_year": settings.steps_per_year,
        "horizon": settings.horizon,
        "artifacts": artifacts,
        "final": {},
    }
    for state, series in sorted(result.series.items()):
        tail = series[:, -1]
        summary["final"][state] = {
            "mean": float(tail.mean()),
            "min": float(tail.min()),
            "max": float(tail.max()),
        }
    (out / "run.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(artifacts)} trajectories and run.json to {out}")
    print(f"simulate finished in {time.monotonic() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment / verify
# ---------------------------------------------------------------------------


def _experiment_kwargs(args: argparse.Namespace) -> dict:
    kwargs = {}
    families = getattr(args, "family", None)
    if families:
        if args.experiment not in ("martingale", "spde"):
            raise ConfigError(f"--family does not apply to {args.experiment}")
        kwargs["families"] = tuple(normalize_family(f) for f in families)
    scenarios = getattr(args, "scenario", None)
    if scenarios:
        if args.experiment != "power-showcase":
            raise ConfigError("--scenario only applies to power-showcase")
        paths = {}
        for item in scenarios:
            name, sep, file = item.partition("=")
            if not sep:
                raise ConfigError(f"--scenario {item!r} is not NAME=FILE")
            paths[name] = Path(file)
        kwargs["scenario_paths"] = paths
    return kwargs


def _run_one(name: str, settings: Settings, out: Path, **kwargs) -> bool:
    t0 = time.monotonic()
    report = run_experiment(name, settings, out, **kwargs)
    ok = _print_checks(report["checks"])
    print(f"report: {out / 'report.json'}")
    print(f"{name} finished in {time.monotonic() - t0:.1f}s", file=sys.stderr)
    return ok


def _cmd_experiment(args: argparse.Namespace) -> int:
    settings = _settings_from(args, default_preset=args.experiment)
    out = Path(args.out) if args.out else _default_out_base() / args.experiment
    ok = _run_one(args.experiment, settings, out, **_experiment_kwargs(args))
    return EXIT_OK if ok else EXIT_VERDICT


def _cmd_verify(args: argparse.Namespace) -> int:
    suites = ("martingale", "spde") if args.suite == "all" else (args.suite,)
    base = Path(args.out) if args.out else _default_out_base() / "verify"
    ok = True
    for suite in suites:
        kwargs = {}
        if args.family:
            kwargs["families"] = tuple(normalize_family(f) for f in args.family)
        settings = _settings_from(args, default_preset=suite)
        ok &= _run_one(suite, settings, base / suite, **kwargs)
    print("verification " + ("PASSED" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_VERDICT


def _cmd_presets(args: argparse.Namespace) -> int:
    if args.json:
        print(json.dumps(PRESETS, sort_keys=True, indent=2))
        return EXIT_OK
    for name in sorted(PRESETS):
        print(f"{name:18s} {_PRESET_BLURBS.get(name, '')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcpension",
        description="Pension-plan accumulation experiments: classical vs "
                    "forward investment criteria on simulated fund paths.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="dump a handful of simulated paths")
    _add_common(p_sim)
    p_sim.add_argument("--trajectories", type=int, default=4,
                       help="number of paths to record (1-64, default 4)")
    p_sim.add_argument("--replay", metavar="FILE",
                       help="drive the simulation with a recorded noise file")
    p_sim.add_argument("--dump-noise", metavar="FILE", dest="dump_noise",
                       help="save the first noise path in replay format")
    p_sim.set_defaults(func=_cmd_simulate)

    p_exp = sub.add_parser("experiment", help="run a scripted reference experiment")
    p_exp.add_argument("experiment", choices=sorted(EXPERIMENTS),
                       help="experiment identifier")
    _add_common(p_exp)
    p_exp.add_argument("--family", action="append", metavar="NAME",
                       help="preference families for martingale/spde (repeatable)")
    p_exp.add_argument("--scenario", action="append", metavar="NAME=FILE",
                       help="replace a showcase scenario with a replay file")
    p_exp.set_defaults(func=_cmd_experiment)

    p_ver = sub.add_parser("verify", help="run a consistency suite and report verdicts")
    p_ver.add_argument("suite", choices=_VERIFY_SUITES)
    _add_common(p_ver)
    p_ver.add_argument("--family", action="append", metavar="NAME",
                       help="restrict to preference families (repeatable)")
    p_ver.set_defaults(func=_cmd_verify)

    p_pre = sub.add_parser("presets", help="list built-in parameter sets")
    p_pre.add_argument("--json", action="store_true", help="dump presets as JSON")
    p_pre.set_defaults(func=_cmd_presets)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AdmissibilityError, SimulationBlowUpError, ValueError) as exc:
        # ValidationError and friends are ValueError subclasses; anything in
        # this bucket means the inputs were readable but not usable.
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
