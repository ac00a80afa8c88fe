"""Distributed error-feedback optimization lab.

Normalized EF21-style methods with five momentum variants, contractive
compression, parameter-agnostic decreasing schedules, and a verification
harness for their convergence behavior on synthetic smooth problems.
"""

from .compressors import CompressedMessage, CompressorSpec, compress, spec_from_fraction
from .core import OracleStreams, RngStream, client_oracle_streams, derive_stream
from .engine import (
    MetricsRecord,
    ProblemConfig,
    RunConfig,
    RunResult,
    Simulation,
    make_problem,
    run,
)
from .harness import ComparisonReport, RateFit, audit_descent, compare_methods, fit_rate
from .momentum import MomentumState, update_momentum
from .problems import (
    LogisticProblem,
    Problem,
    QuadraticProblem,
    make_hetero_quadratics,
    make_label_sorted_logreg,
)
from .reference import run_centralized_reference
from .schedules import Schedule, default_exponents, eta_at, gamma_at

__version__ = "0.1.0"
