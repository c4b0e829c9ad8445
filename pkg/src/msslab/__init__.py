"""Mean-square stability of LTI blocks under multiplicative white noise.

The package answers one question two independent ways.  Analytically:
close the loop u = w + gamma-masked feedback around a stable block,
build the loop gain operator on output covariances, and test H2
finiteness plus spectral radius < 1.  Empirically: simulate the loop
with exact per-step noise increments and compare ensemble statistics
against the predicted covariance trajectory and steady state.
"""

from .analysis import (
    AnalysisOptions,
    CovarianceTrajectory,
    MssVerdict,
    SteadyState,
    analyze,
    covariance_trajectory,
    steady_state_covariances,
)
from .config import (
    ProblemConfig,
    load_config,
    load_schema,
    parse_config,
    validate_report,
)
from .errors import (
    BadGrid,
    BadQuadrature,
    ConfigError,
    DimensionMismatch,
    InsufficientPaths,
    MidpointNoConvergence,
    MsslabError,
    NonFinite,
    NonPositiveDt,
    NotHurwitz,
    NotMss,
    NotPsd,
    NotSymmetric,
    OffGrid,
    RealizationRequired,
    SingularFixedPoint,
    SingularKroneckerSum,
    SingularSystem,
    StratonovichNeedsRealization,
    TooFewSamples,
)
from .loopgain import (
    INTERPRETATIONS,
    LoopGainHandle,
    LyapunovBackend,
    QuadratureBackend,
    SpectralResult,
    apply_lgo,
    apply_lgo_lyapunov,
    apply_lgo_quadrature,
    covariance_sandwich,
    equivalent_ito_system,
    lgo_matrix_apply,
    lgo_matrix_kronecker,
    lyapunov_solve,
    make_lgo,
    spectral_radius_dense,
    spectral_radius_power,
    stratonovich_correction_gain,
)
from .noise import (
    NoiseSpec,
    RngState,
    draw_increment_chunk,
    philox_generator,
    sample_increments,
    validate_noise,
)
from .simulate import (
    SCHEMES,
    IndependenceReport,
    PathResult,
    SimulationConfig,
    SimulationEnsemble,
    increment_independence_test,
    open_loop_terminal_samples,
    quadratic_variation,
    run_ensemble,
    simulate_path,
    simulate_path_ito,
    simulate_path_stratonovich,
)
from .system import (
    LtiSystem,
    VariationProfile,
    h2_norm_squared,
    impulse_response,
    impulse_response_grid,
    is_hurwitz,
    kron_lyapunov_solve,
    make_sampled,
    make_state_space,
    matrix_exponential,
    matrix_exponential_grid,
    spectral_norm,
    variation_profile,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisOptions",
    "BadGrid",
    "BadQuadrature",
    "ConfigError",
    "CovarianceTrajectory",
    "DimensionMismatch",
    "INTERPRETATIONS",
    "IndependenceReport",
    "InsufficientPaths",
    "LoopGainHandle",
    "LtiSystem",
    "LyapunovBackend",
    "MidpointNoConvergence",
    "MssVerdict",
    "MsslabError",
    "NoiseSpec",
    "NonFinite",
    "NonPositiveDt",
    "NotHurwitz",
    "NotMss",
    "NotPsd",
    "NotSymmetric",
    "OffGrid",
    "PathResult",
    "ProblemConfig",
    "QuadratureBackend",
    "RealizationRequired",
    "RngState",
    "SCHEMES",
    "SimulationConfig",
    "SimulationEnsemble",
    "SingularFixedPoint",
    "SingularKroneckerSum",
    "SingularSystem",
    "SpectralResult",
    "SteadyState",
    "StratonovichNeedsRealization",
    "TooFewSamples",
    "VariationProfile",
    "analyze",
    "apply_lgo",
    "apply_lgo_lyapunov",
    "apply_lgo_quadrature",
    "covariance_sandwich",
    "covariance_trajectory",
    "draw_increment_chunk",
    "equivalent_ito_system",
    "h2_norm_squared",
    "impulse_response",
    "impulse_response_grid",
    "increment_independence_test",
    "is_hurwitz",
    "kron_lyapunov_solve",
    "lgo_matrix_apply",
    "lgo_matrix_kronecker",
    "load_config",
    "load_schema",
    "lyapunov_solve",
    "make_lgo",
    "make_sampled",
    "make_state_space",
    "matrix_exponential",
    "matrix_exponential_grid",
    "open_loop_terminal_samples",
    "parse_config",
    "philox_generator",
    "quadratic_variation",
    "run_ensemble",
    "sample_increments",
    "simulate_path",
    "simulate_path_ito",
    "simulate_path_stratonovich",
    "spectral_norm",
    "spectral_radius_dense",
    "spectral_radius_power",
    "steady_state_covariances",
    "stratonovich_correction_gain",
    "validate_noise",
    "validate_report",
    "variation_profile",
]
