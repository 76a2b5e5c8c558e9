"""Finite positive atomic measures on the half-line and the flat metric.

A :class:`DiscreteMeasure` is a finite positive linear combination of Dirac
masses.  It is the state snapshot produced by the cohort solver and the object
all metrics and integrals in this package act on.

Flat metric
-----------
``flat_distance`` computes the Kantorovich-Rubinstein (flat, bounded-Lipschitz)
distance

    rho(mu, nu) = sup { integral of phi d(mu - nu) :
                        phi smooth, compactly supported,
                        sup|phi| + sup|phi'| <= 1 }

Note the *sum* norm convention ``||phi||_inf + ||phi'||_inf <= 1``.  Many
references use ``max(||phi||_inf, Lip phi) <= 1`` instead; numeric values
differ.  Under the sum norm, unit Dirac masses at distance ``d`` are at
distance ``2d/(d+2)`` (not ``min(d, 2)``).

For atomic measures the supremum is computed exactly by a small dense linear
program over the test function's values at the atom locations plus the norm
budget split (a, b) with ``a + b <= 1``:

    maximize    sum_k d_k phi_k
    subject to  |phi_k| <= a,
                |phi_{k+1} - phi_k| <= b (x_{k+1} - x_k),
                a + b <= 1,  a, b >= 0,

where ``x_1 < ... < x_K`` is the sorted union of atom locations and ``d_k``
the net signed masses.  In one dimension the adjacent-pair Lipschitz
constraints imply all pairs (telescoping), and an optimal vector of atom
values extends to a piecewise-linear function on the line with sup norm
``<= a`` and Lipschitz constant ``<= b``; ramping it to zero outside the atom
range and mollifying yields admissible smooth functions approaching the LP
value.  Compact support costs nothing: on the bounded set of atoms, smooth
compactly supported functions approximate the constant within any sup budget,
so the LP (which ignores support) computes the exact supremum.  Whether the
supremum ranges over smooth functions on the whole line or only on
``[x_b, inf)`` makes no difference because all atoms lie in ``[x_b, inf)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

__all__ = [
    "DiscreteMeasure",
    "CapacityError",
    "EvaluationError",
    "flat_distance",
    "read_measure_csv",
    "write_measure_csv",
]

#: Default cap on the combined atom count accepted by :func:`flat_distance`.
DEFAULT_ATOM_LIMIT = 20_000

_LP_OPTIONS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


class CapacityError(RuntimeError):
    """Raised when an operation exceeds a configured size limit."""


class EvaluationError(RuntimeError):
    """Raised when an integrand evaluates to a non-finite value at an atom."""


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finite positive atomic measure ``sum_i masses[i] * delta(locations[i])``.

    Parameters
    ----------
    locations:
        Atom locations; finite reals.  The solver keeps them in
        ``[x_b, inf)`` but the measure itself only requires finiteness.
    masses:
        Atom masses; non-negative, finite.

    Atom order carries no meaning, atoms with equal locations behave as their
    merged sum under every operation, and zero-mass atoms are permitted and
    ignored.  Instances are immutable (the arrays are locked) and all
    operations are pure, so values can be shared freely across workers.
    """

    locations: np.ndarray
    masses: np.ndarray
    _validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self) -> None:
        loc = np.asarray(self.locations, dtype=float)
        mas = np.asarray(self.masses, dtype=float)
        if self._validate:
            loc = np.array(loc, dtype=float, copy=True).reshape(-1)
            mas = np.array(mas, dtype=float, copy=True).reshape(-1)
            if loc.shape != mas.shape:
                raise ValueError(
                    f"locations and masses differ in length: {loc.size} vs {mas.size}"
                )
            if loc.size and not np.all(np.isfinite(loc)):
                raise ValueError("atom locations must be finite")
            if mas.size and (not np.all(np.isfinite(mas)) or np.any(mas < 0.0)):
                raise ValueError("atom masses must be finite and >= 0")
            loc.setflags(write=False)
            mas.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "masses", mas)

    @classmethod
    def empty(cls) -> "DiscreteMeasure":
        return cls(np.empty(0), np.empty(0))

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple[float, float]]) -> "DiscreteMeasure":
        """Build a measure from ``(location, mass)`` pairs."""
        pairs = list(atoms)
        if not pairs:
            return cls.empty()
        loc, mas = zip(*pairs)
        return cls(np.asarray(loc, dtype=float), np.asarray(mas, dtype=float))

    @classmethod
    def _raw(cls, locations: np.ndarray, masses: np.ndarray) -> "DiscreteMeasure":
        # Internal fast path: no copy, no validation.  Used by the solver for
        # transient Runge-Kutta stage states, whose masses may dip a few ulps
        # below zero.
        return cls(locations, masses, _validate=False)

    def __len__(self) -> int:
        return int(self.locations.size)

    def total_mass(self) -> float:
        """Total mass of the measure (sum of atom masses)."""
        return float(np.sum(self.masses)) if len(self) else 0.0

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """Integrate ``f`` against the measure: ``sum_i masses[i] f(locations[i])``.

        ``f`` may be vectorized over a 1-d array of locations or accept
        scalars only.  Raises :class:`EvaluationError` naming the offending
        atom if ``f`` evaluates to a non-finite value at any atom.
        """
        if not len(self):
            return 0.0
        values = _eval_on_atoms(f, self.locations)
        bad = ~np.isfinite(values)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise EvaluationError(
                f"integrand is not finite at atom {i} "
                f"(location={float(self.locations[i])!r}, mass={float(self.masses[i])!r})"
            )
        return float(np.dot(self.masses, values))

    def tail_mass(self, threshold: float) -> float:
        """Mass strictly above ``threshold``; non-increasing in ``threshold``."""
        if not len(self):
            return 0.0
        return float(np.sum(self.masses[self.locations > threshold]))

    def merged(self) -> "DiscreteMeasure":
        """Canonical form: duplicate locations summed, zero atoms dropped, sorted."""
        loc, mas = _merge_atoms(self.locations, self.masses)
        return DiscreteMeasure(loc, mas)


def _eval_on_atoms(f: Callable, locations: np.ndarray) -> np.ndarray:
    try:
        values = np.asarray(f(locations), dtype=float)
        if values.shape == locations.shape:
            return values
        if values.ndim == 0:  # constant function returning a scalar
            return np.full(locations.shape, float(values))
    except (TypeError, ValueError, IndexError):
        pass
    # scalar-only callable
    return np.array([float(f(float(x))) for x in locations], dtype=float)


def _merge_atoms(locations: np.ndarray, masses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keep = masses != 0.0
    loc, mas = locations[keep], masses[keep]
    if loc.size == 0:
        return np.empty(0), np.empty(0)
    uniq, inverse = np.unique(loc, return_inverse=True)
    summed = np.zeros(uniq.size)
    np.add.at(summed, inverse, mas)
    keep = summed != 0.0
    return uniq[keep], summed[keep]


def _net_signed_atoms(a: DiscreteMeasure, b: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Sorted union of atom locations with net masses of ``a - b``; zeros dropped."""
    loc = np.concatenate([a.locations, b.locations])
    mas = np.concatenate([a.masses, -np.asarray(b.masses)])
    if loc.size == 0:
        return np.empty(0), np.empty(0)
    uniq, inverse = np.unique(loc, return_inverse=True)
    net = np.zeros(uniq.size)
    np.add.at(net, inverse, mas)
    keep = net != 0.0
    return uniq[keep], net[keep]


def flat_distance(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    *,
    max_atoms: int = DEFAULT_ATOM_LIMIT,
) -> float:
    """Exact flat (Kantorovich-Rubinstein) distance between atomic measures.

    Solves the dense LP described in the module docstring with the HiGHS
    backend.  Symmetric, zero iff the arguments coincide as measures, and
    bounded by ``a.total_mass() + b.total_mass()``.

    Raises
    ------
    CapacityError
        If the combined atom count exceeds ``max_atoms``.
    """
    if len(a) + len(b) > max_atoms:
        raise CapacityError(
            f"flat_distance: combined atom count {len(a) + len(b)} exceeds "
            f"the limit {max_atoms}"
        )
    x, d = _net_signed_atoms(a, b)
    k = x.size
    if k == 0:
        return 0.0

    # Variables z = (phi_1..phi_k, a, b); minimize -d.phi.
    n_var = k + 2
    cost = np.zeros(n_var)
    cost[:k] = -d

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    r = 0

    def _add(row_idx, col_idx, value) -> None:
        rows.append(np.asarray(row_idx, dtype=np.int64))
        cols.append(np.asarray(col_idx, dtype=np.int64))
        vals.append(np.asarray(value, dtype=float))

    ks = np.arange(k)
    # phi_k - a <= 0 and -phi_k - a <= 0
    _add(r + ks, ks, np.ones(k))
    _add(r + ks, np.full(k, k), -np.ones(k))
    r += k
    _add(r + ks, ks, -np.ones(k))
    _add(r + ks, np.full(k, k), -np.ones(k))
    r += k
    # adjacent Lipschitz: |phi_{j+1} - phi_j| <= b * dx_j
    if k > 1:
        dx = np.diff(x)
        js = np.arange(k - 1)
        _add(r + js, js + 1, np.ones(k - 1))
        _add(r + js, js, -np.ones(k - 1))
        _add(r + js, np.full(k - 1, k + 1), -dx)
        r += k - 1
        _add(r + js, js + 1, -np.ones(k - 1))
        _add(r + js, js, np.ones(k - 1))
        _add(r + js, np.full(k - 1, k + 1), -dx)
        r += k - 1
    # a + b <= 1
    _add([r, r], [k, k + 1], [1.0, 1.0])
    r += 1

    a_ub = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(r, n_var),
    ).tocsr()
    b_ub = np.zeros(r)
    b_ub[-1] = 1.0
    bounds = [(None, None)] * k + [(0.0, 1.0), (0.0, 1.0)]

    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs",
                  options=_LP_OPTIONS)
    if not res.success:
        raise RuntimeError(f"flat_distance LP failed: {res.message}")
    return max(float(-res.fun), 0.0)


def write_measure_csv(measure: DiscreteMeasure, path: str | Path) -> None:
    """Write a measure as CSV with header ``location,mass``, one atom per row.

    Floats use the shortest representation that round-trips to the identical
    double, so re-reading reproduces the measure bit for bit.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("location,mass\n")
        for loc, mas in zip(measure.locations, measure.masses):
            fh.write(f"{float(loc)!r},{float(mas)!r}\n")


def read_measure_csv(path: str | Path) -> DiscreteMeasure:
    """Read a measure written by :func:`write_measure_csv`."""
    locations: list[float] = []
    masses: list[float] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["location", "mass"]:
            raise ValueError(f"{path}: expected header 'location,mass', got {header!r}")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: malformed row {row!r}")
            locations.append(float(row[0]))
            masses.append(float(row[1]))
    return DiscreteMeasure(np.asarray(locations), np.asarray(masses))
