"""Weighted-particle variational inference with accelerated position updates
and dynamic weight adjustment, plus first-order and kernel-drift baselines."""

from .core import (
    DegenerateInputError,
    EmpiricalMoments,
    InvalidArgumentError,
    KernelConfig,
    ParticleState,
    bandwidth_nn,
    empirical_moments,
    rbf_kernel,
    rbf_kernel_grad,
    rbf_kernel_matrix,
)
from .dynamics import (
    CANONICAL_METHODS,
    ConfigurationError,
    DynamicsConfig,
    NumericalDivergenceError,
    StepRng,
    Stepper,
    ca_weight_update,
    dk_resample,
    make_stepper,
    parse_method,
)
from .harness import (
    ExperimentConfig,
    ExperimentRecord,
    init_particles,
    load_config,
    parse_config_text,
    run_experiment,
    sweep,
    write_csv,
    write_svg_lineplot,
)
from .metrics import (
    WeightedCloud,
    mode_mass,
    moment_errors,
    wasserstein2_exact,
    wasserstein2_sinkhorn,
)
from .smoothing import FirstVariation, first_variation, stein_kernel, stein_kernel_grad_y
from .targets import (
    GaussianMixtureTarget,
    GaussianTarget,
    GPData,
    GPHyperparameterTarget,
    UnsupportedOperationError,
    gmm_target,
    gp_target,
    sg_target,
    synthetic_gp_data,
)

__version__ = "0.1.0"
