"""Training-free guided flow-ODE sampling for noisy linear inverse problems.

The package pairs an analytic Gaussian-mixture prior (closed-form
denoiser, Jacobian, and densities) with a guided Euler solver so that
every approximation can be checked against an exact posterior oracle.
"""

from .errors import (
    ConfigError,
    DivergenceError,
    FlowSolveError,
    RangeUnattainableError,
    ShapeMismatchError,
    SingularityError,
    SingularSystemError,
    TensorFormatError,
    TimeDomainError,
)
from .guidance import (
    GammaRule,
    GuidanceConfig,
    Rt2Rule,
    correct_vf,
    correction_coefficient,
    gamma,
    null_range_combine,
    pigdm_g,
    rt2,
)
from .models import (
    Denoiser,
    GaussianMixture,
    VectorFieldModel,
    denoiser_to_vf,
    gmm_denoiser,
    gmm_log_marginal,
    make_fd_vjp,
    retime,
    vf_coefficients,
    vf_to_denoiser,
)
from .operators import (
    DenseOperator,
    DownsampleOperator,
    GaussianBlurOperator,
    LinearOperator,
    MaskOperator,
    operator_from_spec,
)
from .oracle import (
    exact_conditional_denoiser,
    exact_conditional_vf,
    exact_posterior,
    log_evidence,
)
from .paths import CondOTPath, CustomPath, ProbPath, ScheduleSample, VEPath, VPPath, make_path
from .solver import (
    InitMode,
    Lift,
    SolveResult,
    SolveRun,
    derive_rng,
    derive_seed,
    grid_times,
    initialize,
    solve,
    solve_batch,
    validate_grid,
)

__version__ = "0.1.0"
