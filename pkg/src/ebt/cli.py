"""Command-line front end.

Subcommands: ``run`` (integrate and export a trajectory), ``residual``
(two-route residual report over all internalization intervals), ``converge``
(grid study with optional assertion gate), ``validate`` (sampled rate checks,
no solve).  Exit codes: 0 success, 1 configuration error, 2 numerical
failure, 3 assertion-gate failure.

Outputs are deterministic: identical configs and overrides produce
byte-identical data artifacts.  The only wall-clock content lives in the
converge report's ``runtime_s`` column and in ``summary.json``, both excluded
from determinism comparisons.  All files are UTF-8 with LF line endings and
are written atomically (temp file + rename).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .measures import DiscreteMeasure, write_measure_csv
from .model import (
    DensitySpec,
    ProblemSpec,
    catalog_build,
    initial_support_width,
    validate_rates,
)
from .residual import residual_report, write_residual_csv
from .solver import SolverError, export_trajectory_csv, run, trajectory_metadata
from .testfunctions import standard_family
from .verify import (
    ConvergenceReport,
    convergence_study,
    report_summary,
    write_report_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_ASSERT = 3

_ASSERT_DEFAULTS = {
    "monotone_factor": 1.2,
    "residual_slope_n": [-1.3, -0.7],
    "require_mass_bound": True,
    "max_final_functional_error": None,
}


class ConfigError(ValueError):
    """Configuration file or override problem."""


def _load_schema() -> dict:
    text = resources.files("ebt").joinpath("config_schema.json").read_text("utf-8")
    return json.loads(text)


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(config, _load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: schema violation at {where}: {exc.message}") from exc
    return config


def _initial_from_config(block: Optional[dict]):
    if block is None:
        return None
    kind = block["kind"]
    if kind == "atoms":
        if len(block["locations"]) != len(block["masses"]):
            raise ConfigError("initial atoms: locations and masses differ in length")
        return DiscreteMeasure(np.asarray(block["locations"], dtype=float),
                               np.asarray(block["masses"], dtype=float))
    mass = float(block.get("mass", 1.0))
    if kind == "uniform":
        return DensitySpec.uniform(block["lo"], block["hi"], mass)
    if kind == "triangular":
        return DensitySpec.triangular(block["lo"], block["mode"], block["hi"], mass)
    if kind == "truncated_exponential":
        return DensitySpec.truncated_exponential(block["lo"], block["hi"],
                                                 block["rate"], mass)
    raise ConfigError(f"unknown initial kind {kind!r}")


def build_problem(config: dict, args: Optional[argparse.Namespace] = None) -> ProblemSpec:
    """Construct the problem from a validated config plus CLI overrides."""
    def over(name, default):
        value = getattr(args, name, None) if args is not None else None
        return default if value is None else value

    params = dict(config["params"])
    params["x_b"] = config["x_b"]
    params["T"] = config["T"]
    params["N"] = over("n_cohorts", config["N"])
    params["n"] = over("n_internalizations", config["n"])
    formulation = over("boundary_formulation",
                       config.get("boundary_formulation", "simplified"))
    try:
        return catalog_build(
            config["model"], params,
            boundary_formulation=formulation,
            initial=_initial_from_config(config.get("initial")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _run_settings(config: dict, args: argparse.Namespace) -> tuple[float, float, int]:
    h = args.step_size if args.step_size is not None else config["step_size"]
    eps = (args.prune_epsilon if args.prune_epsilon is not None
           else config.get("prune_epsilon", 0.0))
    stride = (args.snapshot_stride if args.snapshot_stride is not None
              else config.get("snapshot_stride", 1))
    if h <= 0:
        raise ConfigError(f"step size must be > 0, got {h}")
    if eps < 0:
        raise ConfigError(f"prune epsilon must be >= 0, got {eps}")
    if stride < 1:
        raise ConfigError(f"snapshot stride must be >= 1, got {stride}")
    return float(h), float(eps), int(stride)


def _output_dir(args: argparse.Namespace) -> Path:
    target = args.output_dir or os.environ.get("EBT_OUTPUT_DIR") or "."
    path = Path(target)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_write(path: Path, writer) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _write_json(path: Path, payload: dict) -> None:
    def writer(tmp: str) -> None:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _atomic_write(path, writer)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    problem = build_problem(config, args)
    h, eps, stride = _run_settings(config, args)
    traj = run(problem, h, prune_epsilon=eps, snapshot_stride=stride)
    out = _output_dir(args)
    _atomic_write(out / "trajectory.csv", lambda tmp: export_trajectory_csv(traj, tmp))
    _atomic_write(out / "final_measure.csv",
                  lambda tmp: write_measure_csv(traj.snapshots[-1].measure, tmp))
    metadata = {"config": config, **trajectory_metadata(traj)}
    _write_json(out / "metadata.json", metadata)
    print(f"run: {len(traj.snapshots)} snapshots, "
          f"final mass {traj.snapshots[-1].measure.total_mass()!r} "
          f"-> {out / 'trajectory.csv'}")
    return EXIT_OK


def _cmd_residual(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    problem = build_problem(config, args)
    h, eps, stride = _run_settings(config, args)
    if stride != 1:
        raise ConfigError("residual reports require snapshot_stride == 1")
    traj = run(problem, h, prune_epsilon=eps, snapshot_stride=stride)
    rows = residual_report(traj, standard_family(problem))
    out = _output_dir(args)
    _atomic_write(out / "residual_report.csv",
                  lambda tmp: write_residual_csv(rows, tmp))
    metadata = {"config": config, **trajectory_metadata(traj)}
    _write_json(out / "metadata.json", metadata)
    worst = max(row.abs_diff for row in rows)
    print(f"residual: {len(rows)} rows, max |quadrature - closed_form| = {worst!r} "
          f"-> {out / 'residual_report.csv'}")
    return EXIT_OK


def _parse_grid(raw: Optional[str]) -> Optional[list[int]]:
    if raw is None:
        return None
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {raw!r}: {exc}") from exc
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"bad grid {raw!r}: need positive integers")
    return values


def _cmd_converge(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    problem = build_problem(config, args)
    h, eps, _ = _run_settings(config, args)
    grids = config.get("grids", {})
    n_grid = _parse_grid(args.n_grid) or grids.get("N")
    ni_grid = _parse_grid(args.ni_grid) or grids.get("n")
    if not n_grid or not ni_grid:
        raise ConfigError("converge needs grids: config 'grids' {N, n} or "
                          "--N-grid/--n-grid flags")
    reference = args.reference or config.get("reference", "auto")
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    report = convergence_study(problem, n_grid, ni_grid, h,
                               reference=reference, jobs=jobs, prune_epsilon=eps)
    out = _output_dir(args)
    _atomic_write(out / "report.csv", lambda tmp: write_report_csv(report, tmp))
    _write_json(out / "summary.json", report_summary(report))
    print(f"converge: {len(report.rows)} rows -> {out / 'report.csv'}")
    failures = _gate_failures(report, config) if args.assert_gate else []
    for message in failures:
        print(f"assert: {message}", file=sys.stderr)
    if failures:
        return EXIT_ASSERT
    if args.assert_gate:
        print("assert: all gates passed")
    return EXIT_OK


def _monotone_violations(label: str, values: list, factor: float) -> list[str]:
    series = [(x, y) for x, y in values if y == y]  # drop nan
    out = []
    for (x0, y0), (x1, y1) in zip(series[:-1], series[1:]):
        if y1 > factor * y0:
            out.append(f"{label}: error rose from {y0!r} at {x0} to {y1!r} at {x1} "
                       f"(allowed factor {factor})")
    return out


def _gate_failures(report: ConvergenceReport, config: dict) -> list[str]:
    gate = {**_ASSERT_DEFAULTS, **config.get("assert", {})}
    failures: list[str] = []

    if gate["require_mass_bound"]:
        for row in report.rows:
            if row.mass_bound_ok is False:
                failures.append(f"mass bound violated at N={row.n_cohorts}, "
                                f"n={row.n_internalizations}")
    for row in report.rows:
        if row.error:
            failures.append(f"row N={row.n_cohorts}, n={row.n_internalizations} "
                            f"failed: {row.error}")

    has_functional = any(r.functional_error == r.functional_error for r in report.rows)
    column = "functional_error" if has_functional else "flat_error"
    finest_n = report.n_grid[-1]
    finest_ni = report.n_internalization_grid[-1]
    factor = gate["monotone_factor"]
    along_n = [(nc, getattr(report.row(nc, finest_ni), column)) for nc in report.n_grid]
    along_ni = [(ni, getattr(report.row(finest_n, ni), column))
                for ni in report.n_internalization_grid]
    if len(along_n) >= 2:
        failures += _monotone_violations(f"{column} along N at n={finest_ni}",
                                         along_n, factor)
    if len(along_ni) >= 2:
        failures += _monotone_violations(f"{column} along n at N={finest_n}",
                                         along_ni, factor)

    band = gate["residual_slope_n"]
    if band is not None and len(report.n_internalization_grid) >= 3:
        slope = report.slopes.get("residual_norm_vs_n")
        if slope is None:
            failures.append("residual_norm slope in n could not be fitted "
                            "(too few points above the error floor)")
        elif not (band[0] <= slope <= band[1]):
            failures.append(f"residual_norm slope in n is {slope!r}, "
                            f"outside [{band[0]}, {band[1]}]")

    limit = gate["max_final_functional_error"]
    if limit is not None:
        finest = report.row(finest_n, finest_ni)
        value = finest.functional_error
        if not value == value or value > limit:
            failures.append(f"finest-grid functional_error {value!r} exceeds {limit!r}")
    return failures


def _cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    problem = build_problem(config, args)
    width = max(initial_support_width(problem), 1.0)
    x_hi = problem.x_b + 2.0 * width + 1.0
    rng = np.random.default_rng(20260810)
    probes = [
        DiscreteMeasure(
            problem.x_b + width * rng.random(3),
            rng.random(3),
        )
        for _ in range(8)
    ]
    report = validate_rates(problem.rates, (problem.x_b, x_hi), probes)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_CONFIG


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, metavar="JSON",
                     help="problem configuration file")
    sub.add_argument("--output-dir", default=None, metavar="DIR",
                     help="artifact directory (fallback: $EBT_OUTPUT_DIR, then '.')")
    sub.add_argument("--N", dest="n_cohorts", type=int, default=None,
                     help="override the initial cohort count")
    sub.add_argument("--n", dest="n_internalizations", type=int, default=None,
                     help="override the internalization-interval count")
    sub.add_argument("--h", dest="step_size", type=float, default=None,
                     help="override the integrator step size")
    sub.add_argument("--boundary-formulation", choices=["simplified", "original"],
                     default=None)
    sub.add_argument("--prune-epsilon", type=float, default=None)
    sub.add_argument("--snapshot-stride", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebt",
        description="Cohort solver for size-structured population models with "
                    "flat-metric and weak-residual verification tools.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_p = subparsers.add_parser("run", help="integrate and export a trajectory")
    _add_common(run_p)
    run_p.set_defaults(handler=_cmd_run)

    res_p = subparsers.add_parser("residual",
                                  help="two-route residual report per interval")
    _add_common(res_p)
    res_p.set_defaults(handler=_cmd_residual)

    conv_p = subparsers.add_parser("converge", help="(N, n) grid convergence study")
    _add_common(conv_p)
    conv_p.add_argument("--N-grid", dest="n_grid", default=None, metavar="LIST",
                        help="comma-separated cohort counts (overrides config grids.N)")
    conv_p.add_argument("--n-grid", dest="ni_grid", default=None, metavar="LIST",
                        help="comma-separated internalization counts "
                             "(overrides config grids.n)")
    conv_p.add_argument("--jobs", type=int, default=None,
                        help="worker pool size (default: available parallelism)")
    conv_p.add_argument("--reference", choices=["auto", "self", "none"], default=None)
    conv_p.add_argument("--assert", dest="assert_gate", action="store_true",
                        help="exit 3 unless the configured acceptance gates hold")
    conv_p.set_defaults(handler=_cmd_converge)

    val_p = subparsers.add_parser("validate",
                                  help="sampled rate-function checks, no solve")
    _add_common(val_p)
    val_p.set_defaults(handler=_cmd_validate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
