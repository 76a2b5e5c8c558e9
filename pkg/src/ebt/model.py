"""Problem definitions: vital rates, initial data, and the built-in catalog.

A problem couples vital-rate functions ``g``, ``mu``, ``beta`` (growth,
mortality, fecundity) with a birth size ``x_b``, a time horizon, initial data,
and the discretization parameters of the cohort scheme.  Environmental
feedback enters through the current solution measure: every rate receives the
state ``x`` and a :class:`~ebt.measures.DiscreteMeasure`.

Rate functions must be pure (no hidden mutable state) and accept ``x`` either
as a float or as a 1-d numpy array, returning a matching shape.  With that,
:class:`ProblemSpec` and :class:`VitalRates` are immutable and safe to share
across workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.integrate import quad

from .measures import DiscreteMeasure, flat_distance

__all__ = [
    "VitalRates",
    "RateBounds",
    "FeedbackLipschitz",
    "DensitySpec",
    "ProblemSpec",
    "SIMPLIFIED",
    "ORIGINAL",
    "CATALOG_MODELS",
    "catalog_build",
    "validate_rates",
    "RateViolation",
    "RateValidationReport",
    "rate_derivatives",
]

SIMPLIFIED = "simplified"
ORIGINAL = "original"

RateFn = Callable[[Union[float, np.ndarray], DiscreteMeasure], Union[float, np.ndarray]]


@dataclass(frozen=True)
class RateBounds:
    """Declared suprema of the vital rates; ``None`` means undeclared."""

    g_sup: Optional[float] = None
    mu_sup: Optional[float] = None
    beta_sup: Optional[float] = None


@dataclass(frozen=True)
class FeedbackLipschitz:
    """Declared Lipschitz constants of the rates w.r.t. the flat metric."""

    c_g: Optional[float] = None
    c_mu: Optional[float] = None
    c_beta: Optional[float] = None


@dataclass(frozen=True)
class VitalRates:
    """The model's growth, mortality, and fecundity with optional extras.

    ``growth_dx`` and ``mortality_dx`` are the x-derivatives needed by the
    original (de Roos) boundary-cohort dynamics; when absent the solver falls
    back to central finite differences with step ``1e-6 * max(1, |x_b|)``
    (the rates must then be evaluable in a small neighbourhood of ``x_b``).
    """

    growth: RateFn
    mortality: RateFn
    fecundity: RateFn
    growth_dx: Optional[RateFn] = None
    mortality_dx: Optional[RateFn] = None
    bounds: Optional[RateBounds] = None
    lipschitz: Optional[FeedbackLipschitz] = None


@dataclass(frozen=True)
class DensitySpec:
    """Initial data given as a density on a compact support interval.

    ``fn`` need not be normalized; the initial total mass is its integral
    over ``[lo, hi]``.  ``family``/``params`` are metadata kept for config
    echo and repr only.
    """

    fn: Callable[[Union[float, np.ndarray]], Union[float, np.ndarray]]
    lo: float
    hi: float
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError(f"density support must be a finite interval, got [{self.lo}, {self.hi}]")

    def total_mass(self) -> float:
        val, _ = quad(self.fn, self.lo, self.hi, epsabs=1e-12, epsrel=1e-12, limit=200)
        return float(val)

    @classmethod
    def uniform(cls, lo: float, hi: float, mass: float = 1.0) -> "DensitySpec":
        if mass < 0:
            raise ValueError("mass must be >= 0")
        h = mass / (hi - lo)
        return cls(lambda x: np.where((np.asarray(x) >= lo) & (np.asarray(x) <= hi), h, 0.0),
                   lo, hi, family="uniform", params={"lo": lo, "hi": hi, "mass": mass})

    @classmethod
    def triangular(cls, lo: float, mode: float, hi: float, mass: float = 1.0) -> "DensitySpec":
        if not (lo < mode < hi):
            raise ValueError("triangular density requires lo < mode < hi")
        if mass < 0:
            raise ValueError("mass must be >= 0")
        peak = 2.0 * mass / (hi - lo)

        def fn(x):
            x = np.asarray(x, dtype=float)
            up = peak * (x - lo) / (mode - lo)
            down = peak * (hi - x) / (hi - mode)
            return np.where((x >= lo) & (x <= hi), np.where(x <= mode, up, down), 0.0)

        return cls(fn, lo, hi, family="triangular",
                   params={"lo": lo, "mode": mode, "hi": hi, "mass": mass})

    @classmethod
    def truncated_exponential(cls, lo: float, hi: float, rate: float, mass: float = 1.0) -> "DensitySpec":
        if rate <= 0:
            raise ValueError("rate must be > 0")
        if mass < 0:
            raise ValueError("mass must be >= 0")
        norm = mass * rate / (1.0 - math.exp(-rate * (hi - lo)))

        def fn(x):
            x = np.asarray(x, dtype=float)
            return np.where((x >= lo) & (x <= hi), norm * np.exp(-rate * (x - lo)), 0.0)

        return cls(fn, lo, hi, family="truncated_exponential",
                   params={"lo": lo, "hi": hi, "rate": rate, "mass": mass})


InitialData = Union[DiscreteMeasure, DensitySpec]


@dataclass(frozen=True)
class ProblemSpec:
    """A complete problem: rates, initial data, horizon, and scheme parameters.

    ``internalization_count`` is the number ``n`` of boundary-cohort
    internalization intervals (events at ``t_i = i*T/n``, ``i = 1..n-1``);
    ``initial_cohort_count`` is the number ``N`` of initial internal cohorts.
    """

    x_b: float
    horizon: float
    rates: VitalRates
    initial_data: InitialData
    boundary_formulation: str = SIMPLIFIED
    internalization_count: int = 10
    initial_cohort_count: int = 50

    def __post_init__(self) -> None:
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if self.internalization_count < 1:
            raise ValueError("internalization_count must be >= 1")
        if self.initial_cohort_count < 1:
            raise ValueError("initial_cohort_count must be >= 1")
        if self.boundary_formulation not in (SIMPLIFIED, ORIGINAL):
            raise ValueError(
                f"boundary_formulation must be '{SIMPLIFIED}' or '{ORIGINAL}', "
                f"got {self.boundary_formulation!r}"
            )
        lo = _initial_support(self.initial_data)[0]
        if lo < self.x_b - 1e-12:
            raise ValueError(
                f"initial data supported below the birth size: min support {lo} < x_b {self.x_b}"
            )

    def with_resolution(self, *, n_cohorts: Optional[int] = None,
                        n_internalizations: Optional[int] = None) -> "ProblemSpec":
        """Copy with a different (N, n); used by convergence sweeps."""
        kwargs = {}
        if n_cohorts is not None:
            kwargs["initial_cohort_count"] = n_cohorts
        if n_internalizations is not None:
            kwargs["internalization_count"] = n_internalizations
        return replace(self, **kwargs)


def _initial_support(initial: InitialData) -> tuple[float, float]:
    if isinstance(initial, DensitySpec):
        return initial.lo, initial.hi
    if len(initial) == 0:
        return math.inf, -math.inf
    return float(np.min(initial.locations)), float(np.max(initial.locations))


def initial_support_width(problem: ProblemSpec) -> float:
    """Extent of the initial data above the birth size (0 for empty data)."""
    lo, hi = _initial_support(problem.initial_data)
    return max(hi - problem.x_b, 0.0) if hi >= lo else 0.0


def _const(value: float) -> RateFn:
    def fn(x, env):
        return np.asarray(x, dtype=float) * 0.0 + value
    return fn


def _zero() -> RateFn:
    return _const(0.0)


def rate_derivatives(rates: VitalRates, x_b: float) -> tuple[RateFn, RateFn]:
    """Return ``(dg/dx, dmu/dx)``, falling back to central differences.

    The fallback step is ``1e-6 * max(1, |x_b|)``, fixed per problem so runs
    are reproducible.
    """
    h = 1e-6 * max(1.0, abs(x_b))

    def fd(fn: RateFn) -> RateFn:
        def dfn(x, env):
            x = np.asarray(x, dtype=float)
            return (np.asarray(fn(x + h, env), dtype=float)
                    - np.asarray(fn(x - h, env), dtype=float)) / (2.0 * h)
        return dfn

    g_dx = rates.growth_dx if rates.growth_dx is not None else fd(rates.growth)
    mu_dx = rates.mortality_dx if rates.mortality_dx is not None else fd(rates.mortality)
    return g_dx, mu_dx


# ---------------------------------------------------------------------------
# Built-in catalog
# ---------------------------------------------------------------------------

CATALOG_MODELS = (
    "pure_decay",
    "pure_transport",
    "constant_rates",
    "ramp_fecundity",
    "logistic_feedback",
)

_COMMON_KEYS = {"x_b", "T", "N", "n"}
_MODEL_KEYS = {
    "pure_decay": ({"mu0"}, set()),
    "pure_transport": ({"g0"}, set()),
    "constant_rates": ({"g0", "mu0", "beta0"}, set()),
    "ramp_fecundity": ({"g0", "mu0", "beta0"}, {"ramp_center", "ramp_width"}),
    "logistic_feedback": ({"g0", "mu0", "mu1", "beta0"}, set()),
}


def catalog_build(
    name: str,
    params: dict,
    *,
    boundary_formulation: str = SIMPLIFIED,
    initial: Optional[InitialData] = None,
) -> ProblemSpec:
    """Build a fully populated :class:`ProblemSpec` from the model catalog.

    ``params`` is a flat map of reals: the model's rate parameters plus the
    common problem parameters ``x_b`` (default 0), ``T`` (default 1),
    ``N`` (default 50), ``n`` (default 10).  Analytic derivatives, declared
    bounds, and declared feedback-Lipschitz constants are filled in.  When
    ``initial`` is omitted, a uniform density of unit mass on
    ``[x_b + 0.2, x_b + 1.2]`` is used.
    """
    if name not in CATALOG_MODELS:
        raise ValueError(f"unknown catalog model {name!r}; known: {', '.join(CATALOG_MODELS)}")
    required, optional = _MODEL_KEYS[name]
    allowed = required | optional | _COMMON_KEYS
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"{name}: unknown parameter(s) {sorted(unknown)}")
    missing = required - set(params)
    if missing:
        raise ValueError(f"{name}: missing parameter(s) {sorted(missing)}")

    p = {k: float(v) for k, v in params.items()}
    x_b = p.get("x_b", 0.0)
    horizon = p.get("T", 1.0)
    n_cohorts = int(p.get("N", 50))
    n_internal = int(p.get("n", 10))

    for key in ("mu0", "g0", "beta0", "mu1"):
        if key in p and p[key] < 0.0:
            raise ValueError(f"{name}: parameter {key} must be >= 0, got {p[key]}")

    if name == "pure_decay":
        mu0 = p["mu0"]
        rates = VitalRates(
            growth=_zero(), mortality=_const(mu0), fecundity=_zero(),
            growth_dx=_zero(), mortality_dx=_zero(),
            bounds=RateBounds(0.0, mu0, 0.0),
            lipschitz=FeedbackLipschitz(0.0, 0.0, 0.0),
        )
    elif name == "pure_transport":
        g0 = p["g0"]
        rates = VitalRates(
            growth=_const(g0), mortality=_zero(), fecundity=_zero(),
            growth_dx=_zero(), mortality_dx=_zero(),
            bounds=RateBounds(g0, 0.0, 0.0),
            lipschitz=FeedbackLipschitz(0.0, 0.0, 0.0),
        )
    elif name == "constant_rates":
        g0, mu0, beta0 = p["g0"], p["mu0"], p["beta0"]
        rates = VitalRates(
            growth=_const(g0), mortality=_const(mu0), fecundity=_const(beta0),
            growth_dx=_zero(), mortality_dx=_zero(),
            bounds=RateBounds(g0, mu0, beta0),
            lipschitz=FeedbackLipschitz(0.0, 0.0, 0.0),
        )
    elif name == "ramp_fecundity":
        g0, mu0, beta0 = p["g0"], p["mu0"], p["beta0"]
        center = p.get("ramp_center", x_b + 0.5)
        width = p.get("ramp_width", 0.5)
        if width <= 0:
            raise ValueError(f"{name}: ramp_width must be > 0, got {width}")

        def fecundity(x, env, _c=center, _w=width, _b=beta0):
            s = (np.asarray(x, dtype=float) - _c) / _w
            # logistic ramp from 0 to beta0, smooth on the whole line
            return _b / (1.0 + np.exp(-s))

        rates = VitalRates(
            growth=_const(g0), mortality=_const(mu0), fecundity=fecundity,
            growth_dx=_zero(), mortality_dx=_zero(),
            bounds=RateBounds(g0, mu0, beta0),
            lipschitz=FeedbackLipschitz(0.0, 0.0, 0.0),
        )
    else:  # logistic_feedback
        g0, mu0, mu1, beta0 = p["g0"], p["mu0"], p["mu1"], p["beta0"]

        def mortality(x, env, _m0=mu0, _m1=mu1):
            return np.asarray(x, dtype=float) * 0.0 + (_m0 + _m1 * env.total_mass())

        rates = VitalRates(
            growth=_const(g0), mortality=mortality, fecundity=_const(beta0),
            growth_dx=_zero(), mortality_dx=_zero(),
            bounds=RateBounds(g0, None, beta0),
            lipschitz=FeedbackLipschitz(0.0, mu1, 0.0),
        )

    if initial is None:
        initial = DensitySpec.uniform(x_b + 0.2, x_b + 1.2, 1.0)

    return ProblemSpec(
        x_b=x_b,
        horizon=horizon,
        rates=rates,
        initial_data=initial,
        boundary_formulation=boundary_formulation,
        internalization_count=n_internal,
        initial_cohort_count=n_cohorts,
    )


# ---------------------------------------------------------------------------
# Sampled validation of rate functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateViolation:
    rate: str          # "growth" | "mortality" | "fecundity"
    kind: str          # "evaluation_error" | "non_finite" | "negative"
                       # | "bound_exceeded" | "feedback_lipschitz"
    message: str
    x: Optional[float] = None
    value: Optional[float] = None
    limit: Optional[float] = None


@dataclass(frozen=True)
class RateValidationReport:
    violations: tuple[RateViolation, ...]
    n_grid_points: int
    n_probes: int
    n_pairs: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return (f"rates consistent at {self.n_grid_points} grid points, "
                    f"{self.n_probes} probe measures, {self.n_pairs} probe pairs")
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  [{v.rate}/{v.kind}] {v.message}" for v in self.violations]
        return "\n".join(lines)


def validate_rates(
    rates: VitalRates,
    x_range: tuple[float, float],
    probe_measures: Sequence[DiscreteMeasure],
    *,
    n_grid: int = 100,
) -> RateValidationReport:
    """Sampled consistency check of the rate functions.

    Checks, at every grid point of ``x_range`` and against every probe
    measure: finiteness, non-negativity, and the declared bounds.  On every
    unordered pair of probe measures it checks the declared feedback-Lipschitz
    inequalities ``sup_x |f(x, sigma) - f(x, lambda)| <= C_f rho(sigma,
    lambda)``.  This is a sampled check, not a proof: models on an unbounded
    state space can only be probed.  Rate evaluation failures are reported as
    violations, never raised.
    """
    if n_grid < 1:
        raise ValueError("n_grid must be >= 1")
    grid = np.linspace(x_range[0], x_range[1], n_grid)
    probes = list(probe_measures)
    if not probes:
        raise ValueError("at least one probe measure is required")

    bounds = rates.bounds or RateBounds()
    lip = rates.lipschitz or FeedbackLipschitz()
    named = [
        ("growth", rates.growth, bounds.g_sup, lip.c_g),
        ("mortality", rates.mortality, bounds.mu_sup, lip.c_mu),
        ("fecundity", rates.fecundity, bounds.beta_sup, lip.c_beta),
    ]
    violations: list[RateViolation] = []

    samples: dict[tuple[str, int], np.ndarray] = {}
    for name, fn, sup, _ in named:
        for j, probe in enumerate(probes):
            try:
                vals = np.asarray(fn(grid, probe), dtype=float) + np.zeros_like(grid)
            except Exception as exc:  # reported, not thrown
                violations.append(RateViolation(
                    rate=name, kind="evaluation_error",
                    message=f"evaluation failed on probe {j}: {exc!r}"))
                continue
            samples[(name, j)] = vals
            bad = ~np.isfinite(vals)
            if np.any(bad):
                i = int(np.argmax(bad))
                violations.append(RateViolation(
                    rate=name, kind="non_finite", x=float(grid[i]),
                    value=float(vals[i]),
                    message=(f"non-finite at {int(np.sum(bad))} of {grid.size} grid "
                             f"points on probe {j} (first at x={float(grid[i])!r})")))
                continue
            neg = vals < 0.0
            if np.any(neg):
                i = int(np.argmax(neg))
                violations.append(RateViolation(
                    rate=name, kind="negative", x=float(grid[i]), value=float(vals[i]),
                    message=(f"negative at {int(np.sum(neg))} of {grid.size} grid "
                             f"points on probe {j} (first: {float(vals[i])!r} at "
                             f"x={float(grid[i])!r})")))
            if sup is not None:
                over = vals > sup * (1.0 + 1e-12) + 1e-12
                if np.any(over):
                    i = int(np.argmax(over))
                    violations.append(RateViolation(
                        rate=name, kind="bound_exceeded", x=float(grid[i]),
                        value=float(vals[i]), limit=sup,
                        message=(f"exceeds declared bound {sup!r} at "
                                 f"{int(np.sum(over))} of {grid.size} grid points "
                                 f"on probe {j} (first: {float(vals[i])!r} at "
                                 f"x={float(grid[i])!r})")))

    pairs = [(i, j) for i in range(len(probes)) for j in range(i + 1, len(probes))]
    for name, fn, _, c in named:
        if c is None:
            continue
        for i, j in pairs:
            vi = samples.get((name, i))
            vj = samples.get((name, j))
            if vi is None or vj is None or not (np.all(np.isfinite(vi)) and np.all(np.isfinite(vj))):
                continue
            diff = float(np.max(np.abs(vi - vj)))
            rho = flat_distance(probes[i], probes[j])
            if diff > c * rho * (1.0 + 1e-9) + 1e-12:
                violations.append(RateViolation(
                    rate=name, kind="feedback_lipschitz", value=diff, limit=c * rho,
                    message=(f"|f(sigma)-f(lambda)| = {diff!r} exceeds "
                             f"C*rho = {c * rho!r} on probe pair ({i},{j})")))

    return RateValidationReport(
        violations=tuple(violations),
        n_grid_points=int(grid.size),
        n_probes=len(probes),
        n_pairs=len(pairs),
    )
