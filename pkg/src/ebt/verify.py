"""Independent oracles, error measurement, and convergence-study drivers.

Reference solutions come in two tiers.  For feedback-free constant-rate
problems, :class:`ConstantRatesOracle` evaluates functionals of the exact
solution by characteristics and adaptive quadrature, independent of the
cohort scheme.  For everything else, a fine-resolution self-convergence run
of the scheme itself stands in for the exact solution.

``functional_error`` (max functional mismatch divided by the test function's
W^{1,inf} norm) is a *lower bound* on the flat distance, never the metric
itself; it is reported under its own name and column everywhere.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.integrate import quad

from .measures import DiscreteMeasure, flat_distance
from .model import ProblemSpec
from .residual import residual_norm
from .solver import Trajectory, run
from .testfunctions import TestFunction, standard_family

__all__ = [
    "ConstantRatesOracle",
    "oracle_functional",
    "flat_error",
    "functional_error",
    "check_mass_bound",
    "check_tail_bound",
    "ConvergenceRow",
    "ConvergenceReport",
    "convergence_study",
    "write_report_csv",
    "report_summary",
    "fit_loglog_slope",
]

_QUAD_OPTS = dict(epsabs=1e-12, epsrel=1e-10, limit=200)


# ---------------------------------------------------------------------------
# Constant-rates oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantRatesOracle:
    """Exact-solution functionals for feedback-free constant rates.

    Along characteristics the initial mass is transported by ``g0`` and
    thinned by ``exp(-mu0 t)``; the newborn flux at the birth size is
    ``beta0 P(s)`` with total mass ``P(s) = P(0) exp((beta0 - mu0) s)``.  For
    a test function ``phi``,

        int phi(., T) dzeta_T
          = int phi(x0 + g0 T, T) e^{-mu0 T} dnu_0(x0)
          + int_0^T phi(x_b + g0 (T-s), T) e^{-mu0 (T-s)} beta0 P(s) ds,

    evaluated with adaptive quadrature to ~1e-10.
    """

    problem: ProblemSpec
    g0: float
    mu0: float
    beta0: float
    p0: float

    @classmethod
    def from_problem(cls, problem: ProblemSpec) -> "ConstantRatesOracle":
        """Extract constants by sampling; raises ValueError if the problem is
        not feedback-free with constant rates and positive growth."""
        from .model import initial_support_width

        width = max(initial_support_width(problem), 1.0)
        xs = problem.x_b + np.linspace(0.0, 2.0 * width, 7)
        probes = [
            DiscreteMeasure(np.array([problem.x_b + 0.3 * width]), np.array([0.7])),
            DiscreteMeasure(np.array([problem.x_b + 0.1, problem.x_b + 0.8 * width]),
                            np.array([1.3, 0.4])),
            DiscreteMeasure.empty(),
        ]
        consts = []
        for fn in (problem.rates.growth, problem.rates.mortality, problem.rates.fecundity):
            values = np.concatenate([
                np.asarray(fn(xs, probe), dtype=float) + np.zeros_like(xs)
                for probe in probes
            ])
            ref = float(values[0])
            scale = max(abs(ref), 1.0)
            if not np.all(np.abs(values - ref) <= 1e-12 * scale):
                raise ValueError(
                    "functional oracle requires feedback-free constant rates; "
                    "sampled values vary"
                )
            consts.append(ref)
        g0, mu0, beta0 = consts
        if g0 <= 0.0:
            raise ValueError(f"functional oracle requires g0 > 0, got {g0!r}")
        initial = problem.initial_data
        p0 = initial.total_mass()
        return cls(problem=problem, g0=g0, mu0=mu0, beta0=beta0, p0=p0)

    def total_mass(self, t: float) -> float:
        return self.p0 * math.exp((self.beta0 - self.mu0) * t)

    def functional(self, phi: TestFunction, t: Optional[float] = None) -> float:
        """``int phi(., t) dzeta_t`` of the exact solution."""
        horizon = self.problem.horizon if t is None else float(t)
        if horizon < 0.0 or horizon > self.problem.horizon + 1e-12:
            raise ValueError(f"time {horizon!r} outside [0, horizon]")
        survive = math.exp(-self.mu0 * horizon)
        shift = self.g0 * horizon
        initial = self.problem.initial_data

        if isinstance(initial, DiscreteMeasure):
            transported = survive * initial.integrate(
                lambda x: phi.value(x + shift, horizon))
        else:
            lo = max(initial.lo, phi.center - phi.half_width - shift)
            hi = min(initial.hi, phi.center + phi.half_width - shift)
            if lo >= hi:
                transported = 0.0
            else:
                val, _ = quad(
                    lambda x0: float(np.asarray(initial.fn(x0), dtype=float))
                    * float(phi.value(x0 + shift, horizon)),
                    lo, hi, **_QUAD_OPTS)
                transported = survive * val

        x_b = self.problem.x_b
        # phi(x_b + g0 (T-s), T) is nonzero only while the newborn characteristic
        # crosses the bump
        s_lo = max(0.0, horizon - (phi.center + phi.half_width - x_b) / self.g0)
        s_hi = min(horizon, horizon - (phi.center - phi.half_width - x_b) / self.g0)
        if s_lo >= s_hi or self.beta0 == 0.0:
            born = 0.0
        else:
            def integrand(s: float) -> float:
                age = horizon - s
                return (float(phi.value(x_b + self.g0 * age, horizon))
                        * math.exp(-self.mu0 * age) * self.beta0 * self.total_mass(s))

            born, _ = quad(integrand, s_lo, s_hi, **_QUAD_OPTS)
        return transported + born


def oracle_functional(problem: ProblemSpec, phi: TestFunction,
                      t: Optional[float] = None) -> float:
    """One-shot form of :meth:`ConstantRatesOracle.functional`."""
    return ConstantRatesOracle.from_problem(problem).functional(phi, t)


# ---------------------------------------------------------------------------
# Error measures and scheme-bound checks
# ---------------------------------------------------------------------------

def flat_error(
    traj: Trajectory,
    reference: Union[DiscreteMeasure, ConstantRatesOracle],
    t: Optional[float] = None,
    phi_family: Optional[Sequence[TestFunction]] = None,
) -> float:
    """Error of the trajectory at time ``t`` against a reference.

    With an atomic reference (typically a fine-resolution self-convergence
    run), this is the exact flat distance.  With a functional oracle it
    delegates to :func:`functional_error`, a documented lower bound.
    """
    at = traj.horizon if t is None else float(t)
    if isinstance(reference, DiscreteMeasure):
        return flat_distance(traj.measure_at(at), reference)
    return functional_error(traj, reference, t=at, phi_family=phi_family)


def functional_error(
    traj: Trajectory,
    oracle: Optional[ConstantRatesOracle] = None,
    t: Optional[float] = None,
    phi_family: Optional[Sequence[TestFunction]] = None,
) -> float:
    """Max over the family of ``|int phi dzeta_t - oracle| / ||phi(., t)||``.

    The normalization uses the W^{1,inf} sum norm of the spatial slice, so
    each term is a valid flat-distance lower bound.
    """
    if oracle is None:
        oracle = ConstantRatesOracle.from_problem(traj.problem)
    at = traj.horizon if t is None else float(t)
    family = list(phi_family) if phi_family is not None else standard_family(traj.problem)
    measure = traj.measure_at(at)
    worst = 0.0
    for phi in family:
        approx = measure.integrate(lambda x: phi.value(x, at))
        exact = oracle.functional(phi, at)
        worst = max(worst, abs(approx - exact) / phi.space_norm(at))
    return worst


def check_mass_bound(traj: Trajectory, slack: float = 1e-8) -> Optional[bool]:
    """Total mass stays below ``P(0) exp(beta_sup t) (1 + slack)`` at every
    snapshot; ``None`` when no ``beta_sup`` is declared."""
    bounds = traj.problem.rates.bounds
    if bounds is None or bounds.beta_sup is None:
        return None
    p0 = traj.snapshots[0].measure.total_mass()
    for snap in traj.snapshots:
        limit = p0 * math.exp(bounds.beta_sup * snap.t) * (1.0 + slack)
        if snap.measure.total_mass() > limit:
            return False
    return True


def check_tail_bound(traj: Trajectory, thresholds: Optional[Sequence[float]] = None,
                     slack: float = 1e-12) -> Optional[bool]:
    """For birth-free runs: mass above ``M`` at time ``t`` never exceeds the
    initial mass above ``M - t g_sup``.  ``None`` when not applicable."""
    bounds = traj.problem.rates.bounds
    if bounds is None or bounds.g_sup is None or bounds.beta_sup is None:
        return None
    if bounds.beta_sup != 0.0:
        return None
    g_sup = bounds.g_sup
    initial = traj.snapshots[0].measure
    if thresholds is None:
        lo = traj.problem.x_b - 0.5
        hi = float(np.max(initial.locations, initial=traj.problem.x_b)) \
            + g_sup * traj.horizon + 0.5
        thresholds = np.linspace(lo, hi, 25)
    for snap in traj.snapshots:
        for m in thresholds:
            if snap.measure.tail_mass(m) > initial.tail_mass(m - snap.t * g_sup) + slack:
                return False
    return True


# ---------------------------------------------------------------------------
# Convergence studies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceRow:
    n_cohorts: int
    n_internalizations: int
    h_eff: float
    flat_error: float          # nan when no atomic reference
    functional_error: float    # nan when no functional oracle
    residual_norm: float
    mass_bound_ok: Optional[bool]
    runtime_s: float
    error: Optional[str] = None


@dataclass(frozen=True)
class ConvergenceReport:
    problem: ProblemSpec
    n_grid: tuple[int, ...]
    n_internalization_grid: tuple[int, ...]
    h: float
    reference: str                       # "none" | "self" | "measure"
    rows: tuple[ConvergenceRow, ...]
    slopes: dict

    def row(self, n_cohorts: int, n_internalizations: int) -> ConvergenceRow:
        for r in self.rows:
            if r.n_cohorts == n_cohorts and r.n_internalizations == n_internalizations:
                return r
        raise KeyError((n_cohorts, n_internalizations))


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float],
                     floor: float = 1e-9) -> Optional[float]:
    """OLS slope of log(y) against log(x), dropping non-finite values and
    floor-contaminated rows (``y < 10 * floor``); ``None`` below 3 points."""
    pts = [(x, y) for x, y in zip(xs, ys)
           if math.isfinite(x) and math.isfinite(y) and x > 0 and y >= 10.0 * floor]
    if len(pts) < 3:
        return None
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    lx = lx - lx.mean()
    return float(np.dot(lx, ly - ly.mean()) / np.dot(lx, lx))


def _study_row(
    problem: ProblemSpec,
    n_cohorts: int,
    n_internalizations: int,
    h: float,
    phi_family: Sequence[TestFunction],
    has_oracle: bool,
    reference_measure: Optional[DiscreteMeasure],
    prune_epsilon: float,
) -> ConvergenceRow:
    started = time.perf_counter()
    try:
        spec = problem.with_resolution(n_cohorts=n_cohorts,
                                       n_internalizations=n_internalizations)
        traj = run(spec, h, prune_epsilon=prune_epsilon, snapshot_stride=1)
        res_norm = residual_norm(traj, phi_family)
        func_err = math.nan
        if has_oracle:
            oracle = ConstantRatesOracle.from_problem(spec)
            func_err = functional_error(traj, oracle, phi_family=phi_family)
        flat_err = math.nan
        if reference_measure is not None:
            flat_err = flat_distance(traj.measure_at(traj.horizon), reference_measure)
        return ConvergenceRow(
            n_cohorts=n_cohorts,
            n_internalizations=n_internalizations,
            h_eff=traj.h_eff,
            flat_error=flat_err,
            functional_error=func_err,
            residual_norm=res_norm,
            mass_bound_ok=check_mass_bound(traj),
            runtime_s=time.perf_counter() - started,
        )
    except Exception as exc:  # recorded per-row, not fatal to the study
        return ConvergenceRow(
            n_cohorts=n_cohorts,
            n_internalizations=n_internalizations,
            h_eff=math.nan,
            flat_error=math.nan,
            functional_error=math.nan,
            residual_norm=math.nan,
            mass_bound_ok=None,
            runtime_s=time.perf_counter() - started,
            error=f"{type(exc).__name__}: {exc}",
        )


def convergence_study(
    problem: ProblemSpec,
    n_grid: Sequence[int],
    n_internalization_grid: Sequence[int],
    h: float,
    *,
    reference: Union[str, DiscreteMeasure] = "auto",
    jobs: int = 1,
    prune_epsilon: float = 0.0,
    slope_floor: float = 1e-9,
) -> ConvergenceReport:
    """Run the full (N, n) grid and fit error slopes along each axis.

    ``reference``: ``"self"`` runs the scheme at four times the finest grid
    and measures true flat distances against it; ``"none"`` skips that
    column; ``"auto"`` picks ``"self"`` exactly when no functional oracle
    applies; or pass an atomic reference measure directly.  Slopes are fitted
    by log-log OLS along each axis holding the other at its finest value,
    only over axes with at least 3 usable points.  Rows are independent jobs
    (``jobs`` workers); their order in the report is the deterministic grid
    order regardless of completion order.
    """
    if not n_grid or not n_internalization_grid:
        raise ValueError("grids must be non-empty")
    n_grid = sorted({int(v) for v in n_grid})
    ni_grid = sorted({int(v) for v in n_internalization_grid})
    phi_family = standard_family(problem)

    has_oracle = True
    try:
        ConstantRatesOracle.from_problem(problem)
    except ValueError:
        has_oracle = False

    reference_measure: Optional[DiscreteMeasure] = None
    if isinstance(reference, DiscreteMeasure):
        reference_measure = reference
        reference_kind = "measure"
    elif reference == "auto":
        reference_kind = "none" if has_oracle else "self"
    elif reference in ("self", "none"):
        reference_kind = reference
    else:
        raise ValueError(f"unknown reference {reference!r}")
    if reference_kind == "self":
        fine = problem.with_resolution(n_cohorts=4 * max(n_grid),
                                       n_internalizations=4 * max(ni_grid))
        reference_measure = run(fine, h, prune_epsilon=prune_epsilon,
                                snapshot_stride=1).measure_at(problem.horizon)

    grid = [(nc, ni) for nc in n_grid for ni in ni_grid]
    worker = delayed(_study_row)
    rows = Parallel(n_jobs=jobs)(
        worker(problem, nc, ni, h, phi_family, has_oracle, reference_measure,
               prune_epsilon)
        for nc, ni in grid
    )

    slopes: dict = {}
    finest_n, finest_ni = n_grid[-1], ni_grid[-1]
    by_key = {(r.n_cohorts, r.n_internalizations): r for r in rows}
    for column in ("flat_error", "functional_error", "residual_norm"):
        along_n = [getattr(by_key[(nc, finest_ni)], column) for nc in n_grid]
        slopes[f"{column}_vs_N"] = fit_loglog_slope(n_grid, along_n, slope_floor)
        along_ni = [getattr(by_key[(finest_n, ni)], column) for ni in ni_grid]
        slopes[f"{column}_vs_n"] = fit_loglog_slope(ni_grid, along_ni, slope_floor)

    return ConvergenceReport(
        problem=problem,
        n_grid=tuple(n_grid),
        n_internalization_grid=tuple(ni_grid),
        h=h,
        reference=reference_kind,
        rows=tuple(rows),
        slopes=slopes,
    )


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_report_csv(report: ConvergenceReport, path: str | Path) -> None:
    """Pinned columns: ``N,n,h_eff,flat_error,functional_error,residual_norm,
    mass_bound_ok,runtime_s``.  Only ``runtime_s`` carries wall-clock content."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("N,n,h_eff,flat_error,functional_error,residual_norm,"
                 "mass_bound_ok,runtime_s\n")
        for r in report.rows:
            cells = [
                str(r.n_cohorts), str(r.n_internalizations), _csv_cell(r.h_eff),
                _csv_cell(r.flat_error), _csv_cell(r.functional_error),
                _csv_cell(r.residual_norm), _csv_cell(r.mass_bound_ok),
                _csv_cell(r.runtime_s),
            ]
            fh.write(",".join(cells) + "\n")


def report_summary(report: ConvergenceReport) -> dict:
    """JSON-ready summary: fitted slopes plus per-row runtimes."""
    return {
        "N_grid": list(report.n_grid),
        "n_grid": list(report.n_internalization_grid),
        "h": report.h,
        "reference": report.reference,
        "slopes": report.slopes,
        "rows_with_errors": [
            {"N": r.n_cohorts, "n": r.n_internalizations, "error": r.error}
            for r in report.rows if r.error
        ],
        "runtime_s": {
            "total": sum(r.runtime_s for r in report.rows),
            "per_row": [r.runtime_s for r in report.rows],
        },
    }
