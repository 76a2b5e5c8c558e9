"""The cohort solver: state, dynamics, events, and time integration.

The scheme tracks a boundary cohort (lowest index ``B``, collecting newborn
individuals at the birth size ``x_b``) and internal cohorts ``B+1..``.  The
solution measure at time ``t`` is one atom per cohort, located at the cohort
center with the cohort abundance as mass.

Internal cohorts evolve along characteristics:

    dN_i/dt = -mu(X_i, zeta) N_i,        dX_i/dt = g(X_i, zeta).

Two boundary-cohort formulations are supported.  The simplified one adds only
the birth inflow:

    dN_B/dt = -mu(X_B, zeta) N_B + sum_i beta(X_i, zeta) N_i,
    dX_B/dt = g(X_B, zeta),

with the birth sum over all cohorts including the boundary one.  The original
(de Roos) formulation instead tracks the cumulative excess over the birth
size, ``pi_B``, with rates expanded around ``x_b``:

    dN_B/dt  = -mu(x_b, zeta) N_B - mu_x(x_b, zeta) pi_B + sum_i beta N_i,
    dpi_B/dt =  g(x_b, zeta) N_B + g_x(x_b, zeta) pi_B - mu(x_b, zeta) pi_B,

and reports the boundary center through the non-linear transform
``X_B = x_b + pi_B/N_B`` when ``pi_B > 0``, else ``x_b``.

Integration uses the classical fixed-step fourth-order Runge-Kutta method
with the step adjusted down to an integer count per internalization interval,
so events never fall inside a step.  Runs are strictly sequential; distinct
runs are independent and may execute in parallel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .measures import DiscreteMeasure
from .model import (
    ORIGINAL,
    SIMPLIFIED,
    DensitySpec,
    InitialData,
    ProblemSpec,
    rate_derivatives,
)

__all__ = [
    "CohortState",
    "CohortDerivative",
    "PruneRecord",
    "Snapshot",
    "Trajectory",
    "SolverError",
    "init_cohorts",
    "rhs",
    "assemble_measure",
    "internalize",
    "prune",
    "run",
    "export_trajectory_csv",
    "trajectory_metadata",
]

#: Abundances in [-NEGATIVE_TOL, 0) are clamped to zero after a step;
#: anything below aborts the run.
NEGATIVE_TOL = 1e-12


class SolverError(RuntimeError):
    """Integration abort: non-finite rate or violated state invariant."""


@dataclass(frozen=True)
class CohortState:
    """The scheme's unknowns at one instant.

    ``index`` is sorted ascending and ``index[0]`` is the boundary index
    ``B`` (0 at the start, decremented at each internalization).  Indices are
    stable identifiers: cohorts are never renumbered, and pruning leaves
    holes.  Under the original formulation ``center[0]`` always holds the
    transform value ``x_b + pi_b/N_B`` (or ``x_b``), so the induced measure
    reads uniformly off ``(center, abundance)``.
    """

    t: float
    x_b: float
    formulation: str
    index: np.ndarray      # int64, sorted ascending
    abundance: np.ndarray  # N_i >= 0
    center: np.ndarray     # X_i >= x_b
    pi_b: float = 0.0

    def __post_init__(self) -> None:
        for name in ("index", "abundance", "center"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def boundary_index(self) -> int:
        return int(self.index[0])

    @property
    def n_cohorts(self) -> int:
        return int(self.index.size)


@dataclass(frozen=True)
class CohortDerivative:
    """Time derivatives of the state fields, in state array order.

    Under the original formulation ``d_center[0]`` is zero (the boundary
    center is the derived transform, not an integrated unknown) and ``d_pi_b``
    carries the boundary dynamics.
    """

    d_abundance: np.ndarray
    d_center: np.ndarray
    d_pi_b: float


@dataclass(frozen=True)
class PruneRecord:
    t: float
    removed: int
    mass_removed: float


@dataclass(frozen=True)
class Snapshot:
    t: float
    state: CohortState
    measure: DiscreteMeasure


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed run output consumed by the residual and verification code.

    Snapshot times are strictly increasing and include 0, every
    internalization time, and the horizon.  The snapshot stored at an
    internalization time is the pre-event state (the event preserves the
    induced measure; with ``prune_epsilon == 0`` pre- and post-event measures
    coincide exactly).
    """

    problem: ProblemSpec
    step_size: float          # requested h
    h_eff: float              # effective step actually used
    snapshot_stride: int
    prune_epsilon: float
    snapshots: tuple[Snapshot, ...]
    internalization_times: tuple[float, ...]
    prune_events: tuple[PruneRecord, ...]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def horizon(self) -> float:
        return self.problem.horizon

    def index_at_time(self, t: float) -> int:
        times = self.times
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > 1e-9 * max(1.0, self.horizon):
            raise KeyError(f"{t!r} is not a snapshot time")
        return i

    def state_at(self, t: float) -> CohortState:
        return self.snapshots[self.index_at_time(t)].state

    def measure_at(self, t: float) -> DiscreteMeasure:
        return self.snapshots[self.index_at_time(t)].measure

    def cohort_history(self, cohort_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Times, abundances, and centers of one cohort across the snapshots
        that contain it."""
        ts, ns, xs = [], [], []
        for snap in self.snapshots:
            pos = np.searchsorted(snap.state.index, cohort_index)
            if pos < snap.state.index.size and snap.state.index[pos] == cohort_index:
                ts.append(snap.t)
                ns.append(snap.state.abundance[pos])
                xs.append(snap.state.center[pos])
        return np.array(ts), np.array(ns), np.array(xs)

    def total_prune_loss(self) -> float:
        return float(sum(ev.mass_removed for ev in self.prune_events))


# ---------------------------------------------------------------------------
# State construction and events
# ---------------------------------------------------------------------------

def _transform_center(pi_b: float, n_b: float, x_b: float) -> float:
    if pi_b > 0.0:
        if n_b <= 0.0:
            raise SolverError(
                f"boundary cohort has pi_b={pi_b!r} > 0 with N_B={n_b!r} <= 0; "
                "unreachable under non-negative rates"
            )
        return x_b + pi_b / n_b
    return x_b


def init_cohorts(
    initial_data: InitialData,
    n_cohorts: int,
    x_b: float,
    formulation: str = SIMPLIFIED,
) -> CohortState:
    """Discretize the initial data into ``n_cohorts`` internal cohorts.

    Density data is split into equal-mass quantile cells, each cohort placed
    at the cell's conditional mean.  Atomic data with at most ``n_cohorts``
    atoms is copied verbatim (sorted by location), padding the unused indices
    with zero-mass cohorts at ``x_b``.  The boundary cohort starts empty at
    the birth size.  Total mass is preserved exactly up to accumulation
    roundoff.
    """
    if n_cohorts < 1:
        raise ValueError("n_cohorts must be >= 1")

    if isinstance(initial_data, DiscreteMeasure):
        if np.any(initial_data.masses < 0.0):
            raise ValueError("initial data has negative mass")
        k = len(initial_data)
        if k > n_cohorts:
            raise ValueError(
                f"atomic initial data has {k} atoms but only {n_cohorts} cohorts; "
                "increase N (verbatim copy is the only supported atomic discretization)"
            )
        order = np.argsort(initial_data.locations, kind="stable")
        centers = np.concatenate([initial_data.locations[order],
                                  np.full(n_cohorts - k, float(x_b))])
        masses = np.concatenate([initial_data.masses[order],
                                 np.zeros(n_cohorts - k)])
    else:
        centers, masses = _quantile_cells(initial_data, n_cohorts)

    index = np.arange(0, n_cohorts + 1, dtype=np.int64)
    abundance = np.concatenate([[0.0], masses])
    center = np.concatenate([[float(x_b)], centers])
    return CohortState(
        t=0.0, x_b=float(x_b), formulation=formulation,
        index=index, abundance=abundance, center=center, pi_b=0.0,
    )


def _quantile_cells(density: DensitySpec, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = density.lo, density.hi
    total = density.total_mass()
    if total <= 0.0:
        return np.full(n_cells, lo), np.zeros(n_cells)
    cell_mass = total / n_cells

    def scalar_fn(x: float) -> float:
        return float(np.asarray(density.fn(x), dtype=float))

    edges = np.empty(n_cells + 1)
    edges[0], edges[-1] = lo, hi
    for j in range(1, n_cells):
        left = edges[j - 1]

        def deficit(x: float, _left=left) -> float:
            val, _ = quad(scalar_fn, _left, x, epsabs=1e-13, epsrel=1e-12, limit=200)
            return val - cell_mass

        edges[j] = brentq(deficit, left, hi, xtol=1e-14, rtol=8.9e-16)

    centers = np.empty(n_cells)
    for j in range(n_cells):
        first_moment, _ = quad(lambda x: x * scalar_fn(x), edges[j], edges[j + 1],
                               epsabs=1e-13, epsrel=1e-12, limit=200)
        centers[j] = first_moment / cell_mass
    return centers, np.full(n_cells, cell_mass)


def assemble_measure(state: CohortState) -> DiscreteMeasure:
    """The induced measure: one atom per cohort, zero-mass atoms included."""
    return DiscreteMeasure(state.center, state.abundance)


def internalize(state: CohortState) -> CohortState:
    """Turn the boundary cohort internal and open a fresh empty one at ``x_b``.

    The previous boundary cohort keeps its ``(N, X)``; under the original
    formulation its center is frozen at the transform value (which
    ``center[0]`` already holds).  Total mass is unchanged.
    """
    new_index = np.concatenate([[state.boundary_index - 1], state.index])
    new_abundance = np.concatenate([[0.0], state.abundance])
    new_center = np.concatenate([[state.x_b], state.center])
    return CohortState(
        t=state.t, x_b=state.x_b, formulation=state.formulation,
        index=new_index.astype(np.int64), abundance=new_abundance,
        center=new_center, pi_b=0.0,
    )


def prune(state: CohortState, epsilon: float) -> tuple[CohortState, PruneRecord]:
    """Drop internal cohorts with abundance below ``epsilon``.

    The boundary cohort is never removed.  The reported mass loss is at most
    ``epsilon`` times the number of removed cohorts.  ``epsilon == 0`` is the
    identity.
    """
    if epsilon < 0.0:
        raise ValueError("epsilon must be >= 0")
    if epsilon == 0.0 or state.n_cohorts == 1:
        return state, PruneRecord(t=state.t, removed=0, mass_removed=0.0)
    keep = state.abundance >= epsilon
    keep[0] = True  # boundary exemption
    removed = int(np.sum(~keep))
    if removed == 0:
        return state, PruneRecord(t=state.t, removed=0, mass_removed=0.0)
    record = PruneRecord(
        t=state.t, removed=removed,
        mass_removed=float(np.sum(state.abundance[~keep])),
    )
    new_state = CohortState(
        t=state.t, x_b=state.x_b, formulation=state.formulation,
        index=state.index[keep].copy(), abundance=state.abundance[keep].copy(),
        center=state.center[keep].copy(), pi_b=state.pi_b,
    )
    return new_state, record


# ---------------------------------------------------------------------------
# Right-hand side
# ---------------------------------------------------------------------------

def _as_rate_array(value, template: np.ndarray) -> np.ndarray:
    return np.asarray(value, dtype=float) + np.zeros_like(template)


def _scalar_boundary_rates(problem: ProblemSpec, env: DiscreteMeasure, g_dx, mu_dx):
    """(g, g_x, mu, mu_x) at the birth size against the given environment."""
    x_b = problem.x_b
    rates = problem.rates
    return (
        float(np.asarray(rates.growth(x_b, env), dtype=float)),
        float(np.asarray(g_dx(x_b, env), dtype=float)),
        float(np.asarray(rates.mortality(x_b, env), dtype=float)),
        float(np.asarray(mu_dx(x_b, env), dtype=float)),
    )


def original_boundary_rhs(
    n_b: float,
    pi_b: float,
    birth: float,
    g_b: float,
    g_x_b: float,
    mu_b: float,
    mu_x_b: float,
) -> tuple[float, float]:
    """``(dN_B/dt, dpi_B/dt)`` of the original boundary formulation."""
    d_n = -mu_b * n_b - mu_x_b * pi_b + birth
    d_pi = g_b * n_b + g_x_b * pi_b - mu_b * pi_b
    return d_n, d_pi


def _eval_rhs_arrays(
    abundance: np.ndarray,
    center: np.ndarray,     # slot 0 already holds the effective boundary center
    pi_b: float,
    problem: ProblemSpec,
    g_dx,
    mu_dx,
    t: float,
) -> tuple[np.ndarray, np.ndarray, float]:
    rates = problem.rates
    env = DiscreteMeasure._raw(center, abundance)
    g = _as_rate_array(rates.growth(center, env), center)
    mu = _as_rate_array(rates.mortality(center, env), center)
    beta = _as_rate_array(rates.fecundity(center, env), center)
    for name, arr in (("growth", g), ("mortality", mu), ("fecundity", beta)):
        if not np.all(np.isfinite(arr)):
            bad = int(np.argmax(~np.isfinite(arr)))
            raise SolverError(
                f"{name} rate is not finite at t={t!r}, x={float(center[bad])!r} "
                f"(cohort position {bad})"
            )
    birth = float(np.dot(beta, abundance))

    d_abundance = -mu * abundance
    d_center = g.copy()
    if problem.boundary_formulation == SIMPLIFIED:
        d_abundance[0] = -mu[0] * abundance[0] + birth
        d_pi = 0.0
    else:
        g_b, g_x_b, mu_b, mu_x_b = _scalar_boundary_rates(problem, env, g_dx, mu_dx)
        if not all(map(math.isfinite, (g_b, g_x_b, mu_b, mu_x_b))):
            raise SolverError(f"boundary rate is not finite at t={t!r}, x={problem.x_b!r}")
        d_abundance[0], d_pi = original_boundary_rhs(
            abundance[0], pi_b, birth, g_b, g_x_b, mu_b, mu_x_b)
        d_center[0] = 0.0
    return d_abundance, d_center, d_pi


def rhs(state: CohortState, problem: ProblemSpec) -> CohortDerivative:
    """Time derivative of every state field at the state's own environment."""
    g_dx, mu_dx = rate_derivatives(problem.rates, problem.x_b)
    d_n, d_x, d_pi = _eval_rhs_arrays(
        state.abundance, state.center, state.pi_b, problem, g_dx, mu_dx, state.t)
    return CohortDerivative(d_abundance=d_n, d_center=d_x, d_pi_b=d_pi)


# ---------------------------------------------------------------------------
# Time integration
# ---------------------------------------------------------------------------

def run(
    problem: ProblemSpec,
    h: float,
    prune_epsilon: float = 0.0,
    snapshot_stride: int = 1,
) -> Trajectory:
    """Integrate from 0 to the horizon with scheduled internalizations.

    Classical RK4 with ``h_eff = (T/n) / ceil((T/n)/h)`` so every
    internalization time ``t_i = i T/n`` falls on a step boundary; the
    boundary cohort is internalized at the interior times ``t_1..t_{n-1}``
    and pruning runs immediately after each internalization.  Snapshots are
    recorded at t=0, every ``snapshot_stride`` accepted steps, every ``t_i``,
    and the horizon.  The run is deterministic: identical inputs give
    bit-identical trajectories.
    """
    if h <= 0.0:
        raise ValueError("step size must be > 0")
    if snapshot_stride < 1:
        raise ValueError("snapshot_stride must be >= 1")
    if prune_epsilon < 0.0:
        raise ValueError("prune_epsilon must be >= 0")

    horizon = problem.horizon
    n_intervals = problem.internalization_count
    interval = horizon / n_intervals
    steps_per_interval = max(1, math.ceil(interval / h - 1e-9))
    h_eff = interval / steps_per_interval
    g_dx, mu_dx = rate_derivatives(problem.rates, problem.x_b)
    is_original = problem.boundary_formulation == ORIGINAL

    state = init_cohorts(
        problem.initial_data, problem.initial_cohort_count,
        problem.x_b, problem.boundary_formulation,
    )

    snapshots: list[Snapshot] = []
    prune_events: list[PruneRecord] = []
    internalization_times: list[float] = []

    def record(t: float, st: CohortState) -> None:
        snapshots.append(Snapshot(t=t, state=st, measure=assemble_measure(st)))

    record(0.0, state)

    index = state.index
    abundance = np.array(state.abundance)
    center = np.array(state.center)
    pi_b = state.pi_b

    def f(y: np.ndarray, k: int, t: float) -> np.ndarray:
        n_part = y[:k]
        x_part = y[k:2 * k].copy()
        pi = float(y[2 * k])
        if is_original:
            x_part[0] = _transform_center(pi, float(n_part[0]), problem.x_b)
        d_n, d_x, d_pi = _eval_rhs_arrays(n_part, x_part, pi, problem, g_dx, mu_dx, t)
        return np.concatenate([d_n, d_x, [d_pi]])

    def materialize(t: float) -> CohortState:
        ctr = np.array(center)
        if is_original:
            ctr[0] = _transform_center(pi_b, float(abundance[0]), problem.x_b)
        return CohortState(
            t=t, x_b=problem.x_b, formulation=problem.boundary_formulation,
            index=np.array(index), abundance=np.array(abundance),
            center=ctr, pi_b=pi_b,
        )

    for i in range(n_intervals):
        t_start = i * interval
        t_end = horizon if i == n_intervals - 1 else (i + 1) * interval
        k = index.size
        y = np.concatenate([abundance, center, [pi_b]])
        for j in range(1, steps_per_interval + 1):
            t_node = t_start + (j - 1) * h_eff
            k1 = f(y, k, t_node)
            k2 = f(y + 0.5 * h_eff * k1, k, t_node + 0.5 * h_eff)
            k3 = f(y + 0.5 * h_eff * k2, k, t_node + 0.5 * h_eff)
            k4 = f(y + h_eff * k3, k, t_node + h_eff)
            y = y + h_eff * ((k1 + k4 + 2.0 * (k2 + k3)) / 6.0)
            t_new = t_end if j == steps_per_interval else t_start + j * h_eff
            _clamp_nonnegative(y, k, t_new)
            if j % snapshot_stride == 0 or j == steps_per_interval:
                abundance = y[:k].copy()
                center = y[k:2 * k].copy()
                pi_b = float(y[2 * k])
                record(t_new, materialize(t_new))
        abundance = y[:k].copy()
        center = y[k:2 * k].copy()
        pi_b = float(y[2 * k])
        if i < n_intervals - 1:
            internalization_times.append(t_end)
            post = internalize(materialize(t_end))
            post, removal = prune(post, prune_epsilon)
            if removal.removed:
                prune_events.append(removal)
            index = np.array(post.index)
            abundance = np.array(post.abundance)
            center = np.array(post.center)
            pi_b = post.pi_b

    return Trajectory(
        problem=problem,
        step_size=h,
        h_eff=h_eff,
        snapshot_stride=snapshot_stride,
        prune_epsilon=prune_epsilon,
        snapshots=tuple(snapshots),
        internalization_times=tuple(internalization_times),
        prune_events=tuple(prune_events),
    )


def _clamp_nonnegative(y: np.ndarray, k: int, t: float) -> None:
    if not np.all(np.isfinite(y)):
        bad = int(np.argmax(~np.isfinite(y)))
        what = "abundance" if bad < k else ("center" if bad < 2 * k else "pi_B")
        raise SolverError(
            f"state is no longer finite at t={t!r} ({what}, cohort position {bad % k}); "
            "the run diverged"
        )
    n_part = y[:k]
    worst = float(np.min(n_part)) if k else 0.0
    if worst < -NEGATIVE_TOL:
        bad = int(np.argmin(n_part))
        raise SolverError(
            f"cohort abundance fell to {worst!r} (< -{NEGATIVE_TOL}) at t={t!r} "
            f"(cohort position {bad})"
        )
    np.maximum(n_part, 0.0, out=n_part)
    pi = float(y[2 * k])
    if pi < -NEGATIVE_TOL:
        raise SolverError(f"pi_B fell to {pi!r} (< -{NEGATIVE_TOL}) at t={t!r}")
    if pi < 0.0:
        y[2 * k] = 0.0


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def export_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    """Write ``t,cohort_index,N,X`` rows, one per cohort per snapshot."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,cohort_index,N,X\n")
        for snap in traj.snapshots:
            t_repr = repr(float(snap.t))
            st = snap.state
            for idx, n_val, x_val in zip(st.index, st.abundance, st.center):
                fh.write(f"{t_repr},{int(idx)},{float(n_val)!r},{float(x_val)!r}\n")


def trajectory_metadata(traj: Trajectory) -> dict:
    """Run metadata for the sidecar JSON (no wall-clock content)."""
    return {
        "h_requested": traj.step_size,
        "h_eff": traj.h_eff,
        "snapshot_stride": traj.snapshot_stride,
        "prune_epsilon": traj.prune_epsilon,
        "internalization_times": list(traj.internalization_times),
        "prune_events": [
            {"t": ev.t, "removed": ev.removed, "mass_removed": ev.mass_removed}
            for ev in traj.prune_events
        ],
        "total_prune_mass_removed": traj.total_prune_loss(),
        "n_snapshots": len(traj.snapshots),
        "final_cohort_count": traj.snapshots[-1].state.n_cohorts,
        "boundary_formulation": traj.problem.boundary_formulation,
        "x_b": traj.problem.x_b,
        "horizon": traj.problem.horizon,
        "initial_cohort_count": traj.problem.initial_cohort_count,
        "internalization_count": traj.problem.internalization_count,
    }
