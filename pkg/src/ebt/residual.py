"""Weak-form residual of a trajectory, computed two independent ways.

For a test function ``phi``, a time interval ``[t1, t2]``, and a measure
``nu`` playing the role of initial data at ``t1``, the residual of the
trajectory's measure family ``sigma_t`` is

    R = int phi(x, t2) dsigma_{t2}  -  int phi(x, t1) dnu
        - int_{t1}^{t2} int (phi_t + g phi_x - mu phi) dsigma_t dt
        - int_{t1}^{t2} phi(x_b, t) * [int beta dsigma_t] dt,

zero for exact weak solutions (the birth integral enters once, multiplied by
``phi(x_b, t)``, and with a minus sign: that is the unique sign convention
under which exact solutions have zero residual).

``residual_quadrature`` evaluates this definition directly with composite
Simpson quadrature over the stored snapshots.  ``residual_closed_form``
evaluates the algebraically reduced expression valid between consecutive
internalizations: the interior transport telescopes exactly, leaving only the
initial-data mismatch at ``t1`` and a boundary-cohort term

    R = sum_i N_i(t1) phi(X_i(t1), t1) - int phi(., t1) dnu
        + int (phi(X_B(t), t) - phi(x_b, t)) * sum_i beta(X_i) N_i dt,

plus, under the original boundary formulation, the correction

    int  N_B (dX_B/dt - g(X_B)) phi_x(X_B, t)
       + [N_B (mu(X_B) - mu(x_b)) - mu_x(x_b) pi_B] phi(X_B, t)  dt,

with ``dX_B/dt`` computed analytically from the quotient rule on the
``pi_B/N_B`` transform (never by differencing the trajectory).  Agreement of
the two routes per interval is the executable content of the reduction; the
chaining identity assembles the whole-interval residual from per-interval
residuals with the initial measure chained through the internalization
snapshots.

Both routes use the same Simpson rule over the same snapshots, so their
difference isolates the algebra from the time-quadrature error.  Runs feeding
this module should use ``snapshot_stride=1`` and ``prune_epsilon=0`` (pruning
introduces O(epsilon) measure jumps the continuous-time algebra knows nothing
about).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .measures import DiscreteMeasure
from .model import ORIGINAL, ProblemSpec, rate_derivatives
from .solver import (
    Snapshot,
    Trajectory,
    _scalar_boundary_rates,
    _transform_center,
    original_boundary_rhs,
)
from .testfunctions import TestFunction

__all__ = [
    "residual_quadrature",
    "residual_closed_form",
    "boundary_correction",
    "full_residual",
    "residual_norm",
    "ResidualRow",
    "residual_report",
    "write_residual_csv",
]

_TIME_ATOL = 1e-9


def _simpson(values: np.ndarray, dx: float) -> float:
    """Composite Simpson on uniform nodes; 3/8 rule closes an odd panel count."""
    v = np.asarray(values, dtype=float)
    panels = v.size - 1
    if panels < 2:
        raise ValueError("Simpson quadrature needs at least 3 nodes")
    total = 0.0
    if panels % 2 == 1:
        total += dx * 3.0 / 8.0 * (v[-4] + 3.0 * v[-3] + 3.0 * v[-2] + v[-1])
        v = v[:-3]
    if v.size > 1:
        total += dx / 3.0 * (v[0] + v[-1] + 4.0 * np.sum(v[1:-1:2]) + 2.0 * np.sum(v[2:-2:2]))
    return float(total)


def _snapshot_slice(traj: Trajectory, t1: float, t2: float) -> list[Snapshot]:
    if not t1 < t2:
        raise ValueError(f"need t1 < t2, got {t1!r} >= {t2!r}")
    i1 = traj.index_at_time(t1)
    i2 = traj.index_at_time(t2)
    snaps = list(traj.snapshots[i1:i2 + 1])
    if len(snaps) < 3:
        raise ValueError(
            f"fewer than 3 snapshots in [{t1!r}, {t2!r}]; "
            "run with at least 2 steps per internalization interval and snapshot_stride=1"
        )
    return snaps


def _check_uniform(times: np.ndarray) -> float:
    gaps = np.diff(times)
    dx = float(gaps[0])
    if np.any(np.abs(gaps - dx) > 1e-9 * max(dx, 1.0)):
        raise ValueError(
            "snapshots are not uniformly spaced on the quadrature piece; "
            "use a snapshot_stride that divides the steps per interval"
        )
    return dx


def _events_inside(traj: Trajectory, t1: float, t2: float) -> list[float]:
    atol = _TIME_ATOL * max(1.0, traj.horizon)
    return [t for t in traj.internalization_times if t1 + atol < t < t2 - atol]


def _is_event(traj: Trajectory, t: float) -> bool:
    atol = _TIME_ATOL * max(1.0, traj.horizon)
    return any(abs(t - ti) <= atol for ti in traj.internalization_times)


def _rates_on_snapshot(problem: ProblemSpec, snap: Snapshot):
    x = snap.state.center
    env = snap.measure
    g = np.asarray(problem.rates.growth(x, env), dtype=float) + np.zeros_like(x)
    mu = np.asarray(problem.rates.mortality(x, env), dtype=float) + np.zeros_like(x)
    beta = np.asarray(problem.rates.fecundity(x, env), dtype=float) + np.zeros_like(x)
    return g, mu, beta


def residual_quadrature(
    traj: Trajectory,
    phi: TestFunction,
    t1: float,
    t2: float,
    nu: DiscreteMeasure,
) -> float:
    """Direct time-quadrature of the residual definition over ``[t1, t2]``.

    ``t1`` and ``t2`` must be snapshot times.  The interval may span
    internalizations: the quadrature is applied piecewise between events (the
    integrands are continuous there but not smooth across events).
    """
    problem = traj.problem
    snaps = _snapshot_slice(traj, t1, t2)
    x_b = problem.x_b

    boundary_t2 = snaps[-1].measure.integrate(lambda x: phi.value(x, t2))
    boundary_t1 = nu.integrate(lambda x: phi.value(x, t1))

    def interior(snap: Snapshot) -> float:
        val, d_dx, d_dt = phi.eval(snap.state.center, snap.t)
        g, mu, _ = _rates_on_snapshot(problem, snap)
        return float(np.dot(snap.state.abundance, d_dt + g * d_dx - mu * val))

    def birth(snap: Snapshot) -> float:
        _, _, beta = _rates_on_snapshot(problem, snap)
        total_birth = float(np.dot(beta, snap.state.abundance))
        return float(phi.value(x_b, snap.t)) * total_birth

    cut_times = [t1, *_events_inside(traj, t1, t2), t2]
    time_integral = 0.0
    for left, right in zip(cut_times[:-1], cut_times[1:]):
        i_l = traj.index_at_time(left)
        i_r = traj.index_at_time(right)
        piece = traj.snapshots[i_l:i_r + 1]
        if len(piece) < 3:
            raise ValueError(
                f"fewer than 3 snapshots on [{left!r}, {right!r}]; "
                "run with at least 2 steps per internalization interval"
            )
        dx = _check_uniform(np.array([s.t for s in piece]))
        time_integral += _simpson([interior(s) + birth(s) for s in piece], dx)

    return boundary_t2 - boundary_t1 - time_integral


def _boundary_integrands(
    traj: Trajectory,
    phi: TestFunction,
    snaps: Sequence[Snapshot],
    fresh_left: bool,
) -> np.ndarray:
    """Boundary birth term plus (original formulation) correction per node.

    ``fresh_left`` marks the left endpoint as an internalization instant: the
    interval's own boundary cohort is the freshly internalized one
    (N_B = 0, X_B = x_b, pi_B = 0), for which every integrand vanishes.
    """
    problem = traj.problem
    x_b = problem.x_b
    is_original = problem.boundary_formulation == ORIGINAL
    g_dx, mu_dx = rate_derivatives(problem.rates, x_b)

    out = np.zeros(len(snaps))
    for k, snap in enumerate(snaps):
        if k == 0 and fresh_left:
            continue
        g, mu, beta = _rates_on_snapshot(problem, snap)
        total_birth = float(np.dot(beta, snap.state.abundance))
        x_bc = float(snap.state.center[0])
        val_b = float(phi.value(x_bc, snap.t))
        val_xb = float(phi.value(x_b, snap.t))
        term = (val_b - val_xb) * total_birth
        if is_original:
            term += _correction_integrand(
                problem, snap, phi, total_birth, float(g[0]), float(mu[0]),
                g_dx, mu_dx)
        out[k] = term
    return out


def _correction_integrand(
    problem: ProblemSpec,
    snap: Snapshot,
    phi: TestFunction,
    total_birth: float,
    g_at_xb_center: float,
    mu_at_xb_center: float,
    g_dx,
    mu_dx,
) -> float:
    """Exact original-formulation correction at one node.

    ``g_at_xb_center``/``mu_at_xb_center`` are the rates at the boundary
    cohort's center (the transform value).  The correction vanishes while
    ``pi_B == 0`` (the transform is pinned at ``x_b`` and its one-sided
    derivative equals the growth rate there).
    """
    n_b = float(snap.state.abundance[0])
    pi_b = float(snap.state.pi_b)
    if pi_b <= 0.0:
        return 0.0
    x_bc = _transform_center(pi_b, n_b, problem.x_b)
    g_b, g_x_b, mu_b, mu_x_b = _scalar_boundary_rates(problem, snap.measure, g_dx, mu_dx)
    d_n, d_pi = original_boundary_rhs(n_b, pi_b, total_birth, g_b, g_x_b, mu_b, mu_x_b)
    dxb_dt = (d_pi * n_b - pi_b * d_n) / (n_b * n_b)
    val, d_dx, _ = phi.eval(np.asarray(x_bc), snap.t)
    transport_defect = n_b * (dxb_dt - g_at_xb_center) * float(d_dx)
    mortality_defect = (n_b * (mu_at_xb_center - mu_b) - mu_x_b * pi_b) * float(val)
    return transport_defect + mortality_defect


def residual_closed_form(
    traj: Trajectory,
    phi: TestFunction,
    t1: float,
    t2: float,
    nu: DiscreteMeasure,
) -> float:
    """Reduced residual over an interval containing no internalization.

    Equals :func:`residual_quadrature` up to the shared time-quadrature and
    ODE-solver error; the interior transport contributes nothing.
    """
    if _events_inside(traj, t1, t2):
        raise ValueError(
            f"({t1!r}, {t2!r}) contains an internalization time; "
            "the closed form only holds between internalizations"
        )
    snaps = _snapshot_slice(traj, t1, t2)
    initial_atoms = snaps[0].measure.integrate(lambda x: phi.value(x, t1))
    initial_nu = nu.integrate(lambda x: phi.value(x, t1))
    dx = _check_uniform(np.array([s.t for s in snaps]))
    fresh_left = _is_event(traj, t1)
    boundary = _simpson(_boundary_integrands(traj, phi, snaps, fresh_left), dx)
    return initial_atoms - initial_nu + boundary


def boundary_correction(
    traj: Trajectory,
    phi: TestFunction,
    t1: float,
    t2: float,
) -> float:
    """The original-formulation correction integral alone over ``[t1, t2]``.

    Zero for simplified-formulation trajectories.  Bounded by a constant
    times the squared interval length (the boundary cohort's excess over the
    birth size grows at most linearly from each internalization).
    """
    if traj.problem.boundary_formulation != ORIGINAL:
        return 0.0
    if _events_inside(traj, t1, t2):
        raise ValueError(f"({t1!r}, {t2!r}) contains an internalization time")
    problem = traj.problem
    snaps = _snapshot_slice(traj, t1, t2)
    dx = _check_uniform(np.array([s.t for s in snaps]))
    fresh_left = _is_event(traj, t1)
    g_dx, mu_dx = rate_derivatives(problem.rates, problem.x_b)
    values = np.zeros(len(snaps))
    for k, snap in enumerate(snaps):
        if k == 0 and fresh_left:
            continue
        g, mu, beta = _rates_on_snapshot(problem, snap)
        total_birth = float(np.dot(beta, snap.state.abundance))
        values[k] = _correction_integrand(
            problem, snap, phi, total_birth, float(g[0]), float(mu[0]),
            g_dx, mu_dx)
    return _simpson(values, dx)


def _interval_boundaries(traj: Trajectory) -> list[float]:
    return [0.0, *traj.internalization_times, traj.horizon]


def _initial_measure(traj: Trajectory, override: Optional[DiscreteMeasure]) -> DiscreteMeasure:
    if override is not None:
        return override
    if isinstance(traj.problem.initial_data, DiscreteMeasure):
        return traj.problem.initial_data
    # Density initial data: chain from the discretized t=0 measure, i.e. the
    # reported residual excludes the initial-data discretization term.
    return traj.snapshots[0].measure


def full_residual(
    traj: Trajectory,
    phi: TestFunction,
    initial_measure: Optional[DiscreteMeasure] = None,
) -> float:
    """Whole-horizon residual assembled by internalization-interval chaining.

    ``R(0, T) = R(0, t_1; nu_0) + sum_i R(t_i, t_{i+1}; zeta_{t_i})`` with the
    closed form per interval.  ``nu_0`` defaults to the problem's initial data
    when atomic, else to the t=0 snapshot measure.
    """
    cuts = _interval_boundaries(traj)
    nu = _initial_measure(traj, initial_measure)
    total = 0.0
    for left, right in zip(cuts[:-1], cuts[1:]):
        total += residual_closed_form(traj, phi, left, right, nu)
        nu = traj.measure_at(right)
    return total


def residual_norm(
    traj: Trajectory,
    phi_family: Sequence[TestFunction],
    initial_measure: Optional[DiscreteMeasure] = None,
) -> float:
    """Max over the family of the absolute whole-horizon chained residual."""
    if not phi_family:
        raise ValueError("phi_family must be non-empty")
    return max(abs(full_residual(traj, phi, initial_measure)) for phi in phi_family)


@dataclass(frozen=True)
class ResidualRow:
    phi_id: str
    t1: float
    t2: float
    quadrature: float
    closed_form: float

    @property
    def abs_diff(self) -> float:
        return abs(self.quadrature - self.closed_form)


def residual_report(
    traj: Trajectory,
    phi_family: Sequence[TestFunction],
) -> list[ResidualRow]:
    """Per-interval, per-test-function comparison of the two residual routes."""
    cuts = _interval_boundaries(traj)
    rows: list[ResidualRow] = []
    for phi in phi_family:
        nu = traj.snapshots[0].measure
        for left, right in zip(cuts[:-1], cuts[1:]):
            rows.append(ResidualRow(
                phi_id=phi.label,
                t1=left,
                t2=right,
                quadrature=residual_quadrature(traj, phi, left, right, nu),
                closed_form=residual_closed_form(traj, phi, left, right, nu),
            ))
            nu = traj.measure_at(right)
    return rows


def write_residual_csv(rows: Sequence[ResidualRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("phi_id,t1,t2,quadrature,closed_form,abs_diff\n")
        for row in rows:
            fh.write(
                f"{row.phi_id},{float(row.t1)!r},{float(row.t2)!r},"
                f"{float(row.quadrature)!r},{float(row.closed_form)!r},"
                f"{float(row.abs_diff)!r}\n"
            )
