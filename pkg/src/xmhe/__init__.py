"""Excitation-aware moving horizon estimation.

Joint state and constant-parameter estimation for uncertain nonlinear
discrete-time systems, with an online persistence-of-excitation monitor,
numerically validated detectability/excitation certificates, certified
error-bound evaluators, and a reproduction harness for the Chua-circuit
benchmark.
"""

from .model import (
    Box, ChuaParams, SystemModel, Trajectory, chua_model,
    scalar_benchmark_model,
)
from .solver import (
    ResidualProblem, SolveReport, SolverOptions, finite_difference_jacobian,
    is_convex_window, solve,
)
from .excitation import (
    GainCertificate, MonitorState, advance, gramian_over_window, is_excited,
    phi,
)
from .certificates import (
    BoundConstants, CertificateSet, IossCertificate, Partition, PeCertificate,
    WeightBounds, bound_constants, check_weight_contract,
    derive_chua_certificates, derive_ioss, derive_pe_weights,
    derive_scalar_certificates, gen_eig_max, load_certificates, mhe_weights,
    min_horizon, partition_timeline, rges_constants, save_certificates,
    synthesize_gain_chua, theorem_bound, validate_gain, validate_ioss,
    weight_bounds,
)
from .mhe import (
    EstimateRecord, MheConfig, MheState, MovingHorizonEstimator, build_window,
    gamma, rmse,
)
from .harness import RunConfig, RunSummary, compare_variants, gen_disturbance, run

__version__ = "0.1.0"
