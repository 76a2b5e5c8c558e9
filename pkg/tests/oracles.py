"""Independent reference implementations used only by the tests.

These deliberately share no algorithmic machinery with the package: the flat
metric is re-solved (a) by a brute-force search over the norm-budget split
with an exact concave piecewise-linear dynamic program for the inner chain
problem and (b) by a dense-grid linear program with test-function values on
many non-atom locations, so the package's atom-located LP is checked from two
directions.
"""
from __future__ import annotations

import numpy as np
from scipy import optimize

from ebt.measures import DiscreteMeasure


def merge_signed(a: DiscreteMeasure, b: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    loc = np.concatenate([a.locations, b.locations])
    sgn = np.concatenate([a.masses, -np.asarray(b.masses)])
    if loc.size == 0:
        return np.empty(0), np.empty(0)
    uniq = np.unique(loc)
    net = np.array([float(np.sum(sgn[loc == u])) for u in uniq])
    keep = net != 0.0
    return uniq[keep], net[keep]


# ---------------------------------------------------------------------------
# Concave piecewise-linear DP for the inner chain problem
# ---------------------------------------------------------------------------

def _dedupe(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keep = np.concatenate([[True], np.diff(xs) > 0])
    return xs[keep], ys[keep]


def _window(xs: np.ndarray, ys: np.ndarray, half: float) -> tuple[np.ndarray, np.ndarray]:
    """Sliding max over a window of half-width ``half`` of a concave PL function."""
    top = float(np.max(ys))
    peaks = np.nonzero(ys == top)[0]
    il, ir = int(peaks[0]), int(peaks[-1])
    new_xs = np.concatenate([xs[:il + 1] - half, xs[ir:] + half])
    new_ys = np.concatenate([ys[:il + 1], ys[ir:]])
    return _dedupe(new_xs, new_ys)


def _clip(xs: np.ndarray, ys: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    vlo = float(np.interp(lo, xs, ys))
    vhi = float(np.interp(hi, xs, ys))
    keep = (xs > lo) & (xs < hi)
    return _dedupe(np.concatenate([[lo], xs[keep], [hi]]),
                   np.concatenate([[vlo], ys[keep], [vhi]]))


def chain_max(d: np.ndarray, x: np.ndarray, a: float, b: float) -> float:
    """maximize sum d_j phi_j  s.t.  |phi_j| <= a, |phi_{j+1}-phi_j| <= b dx_j."""
    if a <= 0.0:
        return 0.0
    xs = np.array([-a, a])
    ys = d[0] * xs
    for j in range(1, d.size):
        xs, ys = _window(xs, ys, b * (x[j] - x[j - 1]))
        xs, ys = _clip(xs, ys, -a, a)
        ys = ys + d[j] * xs
    return float(np.max(ys))


def flat_distance_split_search(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    """Brute-force search over the budget split a + b = 1, exact inner solve.

    The inner value is concave in the split, so a coarse scan bracket plus
    golden-section refinement converges to machine precision.
    """
    x, d = merge_signed(a, b)
    if x.size == 0:
        return 0.0

    def value(split: float) -> float:
        return chain_max(d, x, 1.0 - split, split)

    grid = np.linspace(0.0, 1.0, 41)
    values = [value(s) for s in grid]
    i = int(np.argmax(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    best = max(values)
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    e = lo + invphi * (hi - lo)
    fc, fe = value(c), value(e)
    for _ in range(120):
        if fc >= fe:
            hi, e, fe = e, c, fc
            c = hi - invphi * (hi - lo)
            fc = value(c)
        else:
            lo, c, fc = c, e, fe
            e = lo + invphi * (hi - lo)
            fe = value(e)
        best = max(best, fc, fe)
    return best


# ---------------------------------------------------------------------------
# Dense-grid LP
# ---------------------------------------------------------------------------

def flat_distance_dense_lp(a: DiscreteMeasure, b: DiscreteMeasure,
                           n_fill: int = 201) -> float:
    """Same LP as the package but with ``n_fill`` extra non-atom grid points,
    checking that atom-located variables suffice."""
    atoms, d = merge_signed(a, b)
    if atoms.size == 0:
        return 0.0
    lo, hi = float(np.min(atoms)) - 1.0, float(np.max(atoms)) + 1.0
    grid = np.unique(np.concatenate([atoms, np.linspace(lo, hi, n_fill)]))
    m = grid.size
    atom_pos = np.searchsorted(grid, atoms)

    cost = np.zeros(m + 2)
    cost[atom_pos] = -d
    rows = []
    rhs = []
    for j in range(m):
        row = np.zeros(m + 2)
        row[j], row[m] = 1.0, -1.0
        rows.append(row)
        rhs.append(0.0)
        row = np.zeros(m + 2)
        row[j], row[m] = -1.0, -1.0
        rows.append(row)
        rhs.append(0.0)
    for j in range(m - 1):
        dx = grid[j + 1] - grid[j]
        row = np.zeros(m + 2)
        row[j + 1], row[j], row[m + 1] = 1.0, -1.0, -dx
        rows.append(row)
        rhs.append(0.0)
        row = np.zeros(m + 2)
        row[j + 1], row[j], row[m + 1] = -1.0, 1.0, -dx
        rows.append(row)
        rhs.append(0.0)
    row = np.zeros(m + 2)
    row[m], row[m + 1] = 1.0, 1.0
    rows.append(row)
    rhs.append(1.0)

    res = optimize.linprog(
        cost, A_ub=np.array(rows), b_ub=np.array(rhs),
        bounds=[(None, None)] * m + [(0.0, 1.0), (0.0, 1.0)],
        method="highs",
    )
    assert res.success, res.message
    return float(-res.fun)


# ---------------------------------------------------------------------------
# Misc helpers
# ---------------------------------------------------------------------------

def random_measure(rng: np.random.Generator, max_atoms: int,
                   x_range: tuple[float, float] = (0.0, 5.0),
                   mass_scale: float = 2.0,
                   allow_empty: bool = True) -> DiscreteMeasure:
    low = 0 if allow_empty else 1
    k = int(rng.integers(low, max_atoms + 1))
    loc = rng.uniform(*x_range, size=k)
    mas = rng.uniform(0.0, mass_scale, size=k)
    return DiscreteMeasure(loc, mas)


def central_difference(f, x: float, h: float) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)
