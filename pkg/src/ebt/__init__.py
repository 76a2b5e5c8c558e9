"""Escalator Boxcar Train solver with verification machinery.

Cohort-based solution of one-dimensional size-structured population models,
together with the tools needed to check a run: an exact flat-metric
(Kantorovich-Rubinstein) distance on atomic measures, two independent
weak-form residual evaluations, analytic oracles for constant-rate models,
and convergence-study drivers.
"""
from .measures import (
    CapacityError,
    DiscreteMeasure,
    EvaluationError,
    flat_distance,
    read_measure_csv,
    write_measure_csv,
)
from .model import (
    CATALOG_MODELS,
    DensitySpec,
    FeedbackLipschitz,
    ProblemSpec,
    RateBounds,
    VitalRates,
    catalog_build,
    validate_rates,
)
from .residual import (
    full_residual,
    residual_closed_form,
    residual_norm,
    residual_quadrature,
    residual_report,
)
from .solver import (
    CohortState,
    SolverError,
    Trajectory,
    assemble_measure,
    init_cohorts,
    internalize,
    prune,
    rhs,
    run,
)
from .testfunctions import BumpProfile, FlatProfile, TestFunction, standard_family
from .verify import (
    ConstantRatesOracle,
    convergence_study,
    flat_error,
    functional_error,
    oracle_functional,
)

__version__ = "0.1.0"
