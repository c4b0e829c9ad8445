"""Mean-square stability verdicts and second-moment dynamics.

The loop closes u = w + r around the forward block, where r is the block
output masked by the multiplicative gain.  The covariance rate of u then
satisfies the fixed point U = W + L(U); the loop is mean-square stable
iff the (equivalent) forward block has a finite H2 norm and the loop
gain operator has spectral radius strictly below one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadGrid, DimensionMismatch, NonFinite, NotMss, SingularFixedPoint
from .loopgain import (
    LoopGainHandle,
    LyapunovBackend,
    QuadratureBackend,
    SpectralResult,
    _check_interpretation,
    covariance_sandwich,
    equivalent_ito_system,
    lgo_matrix_apply,
    lgo_matrix_kronecker,
    make_lgo,
    spectral_radius_power,
)
from .noise import NoiseSpec
from .system import (
    LtiSystem,
    h2_norm_squared,
    impulse_response_grid,
    is_hurwitz,
    matrix_exponential,
)


@dataclass(frozen=True)
class AnalysisOptions:
    """Tunables for the verdict computation; defaults suit desk scale."""

    power_tol: float = 1e-10
    power_max_iter: int = 10000
    quad_horizon: float | None = None
    quad_dt: float | None = None

    def __post_init__(self):
        if not self.power_tol > 0:
            raise ValueError(f"power_tol must be positive, got {self.power_tol}")
        if self.power_max_iter < 1:
            raise ValueError(
                f"power_max_iter must be >= 1, got {self.power_max_iter}"
            )
        for name in ("quad_horizon", "quad_dt"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class SteadyState:
    """Stationary covariance rates of the closed loop.

    u_bar = w_cov + r_bar is the loop input rate, r_bar the masked
    feedback rate, y_bar the unmasked block output rate.
    """

    u_bar: np.ndarray
    r_bar: np.ndarray
    y_bar: np.ndarray


@dataclass(frozen=True)
class MssVerdict:
    """Both stability conditions plus supporting diagnostics.

    mss is exactly h2_finite and (rho < 1, strictly).  ``flags`` records
    degraded routes, e.g. quadrature fallbacks for non-Hurwitz or
    sampled blocks where the reported numbers are horizon-truncated.
    """

    interpretation: str
    mss: bool
    h2_finite: bool
    h2_squared: float
    rho: float | None
    spectral: SpectralResult | None
    steady_state: SteadyState | None
    flags: tuple[str, ...] = ()

    @property
    def worst_case_cov(self) -> np.ndarray | None:
        return self.spectral.eigen_matrix if self.spectral is not None else None


def _check_loop_noise(sys: LtiSystem, noise: NoiseSpec) -> None:
    if sys.n_in != sys.n_out:
        raise DimensionMismatch(
            f"feedback loop needs a square block, got {sys.n_out} outputs "
            f"and {sys.n_in} inputs"
        )
    if noise.n_gains != sys.n_in:
        raise DimensionMismatch(
            f"gamma_cov is {noise.n_gains}x{noise.n_gains} but the block "
            f"has {sys.n_in} loop channels"
        )
    if noise.n_drive != sys.n_in:
        raise DimensionMismatch(
            f"w_cov is {noise.n_drive}x{noise.n_drive} but the additive "
            f"drive shares the {sys.n_in}-channel loop input"
        )


def _truncated_h2_squared(block: LtiSystem) -> float:
    kernel = block.samples
    weights = np.full(kernel.shape[0], block.sample_dt)
    weights[0] = weights[-1] = 0.5 * block.sample_dt
    return float(np.einsum("k,kab,kab->", weights, kernel, kernel))


def _dense_operator_matrix(
    sys: LtiSystem, noise: NoiseSpec, interpretation: str, handle: LoopGainHandle
) -> np.ndarray:
    if sys.is_state_space:
        return lgo_matrix_kronecker(sys, noise.gamma_cov, interpretation)
    return lgo_matrix_apply(handle)


def _solve_steady_state(
    sys: LtiSystem,
    noise: NoiseSpec,
    interpretation: str,
    handle: LoopGainHandle,
) -> SteadyState:
    n = noise.n_gains
    k_matrix = _dense_operator_matrix(sys, noise, interpretation, handle)
    lhs = np.eye(n * n) - k_matrix
    rhs = noise.w_cov.flatten(order="F")
    try:
        vec_u = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularFixedPoint(
            f"steady-state system (I - K) is singular: {exc}"
        ) from exc
    residual = float(np.linalg.norm(lhs @ vec_u - rhs))
    if not np.all(np.isfinite(vec_u)) or residual > 1e-8 * max(
        1.0, float(np.linalg.norm(rhs))
    ):
        raise SingularFixedPoint(
            f"steady-state solve residual {residual:.3e} is too large; "
            "the loop is too close to the stability boundary"
        )
    u_bar = vec_u.reshape((n, n), order="F")
    u_bar = 0.5 * (u_bar + u_bar.T)
    y_bar = covariance_sandwich(handle, u_bar)
    y_bar = 0.5 * (y_bar + y_bar.T)
    r_bar = noise.gamma_cov * y_bar
    return SteadyState(u_bar=u_bar, r_bar=r_bar, y_bar=y_bar)


def analyze(
    sys: LtiSystem,
    noise: NoiseSpec,
    interpretation: str = "ito",
    options: AnalysisOptions | None = None,
) -> MssVerdict:
    """Full mean-square stability verdict for the closed loop.

    Both conditions are always reported.  When the equivalent block is
    not Hurwitz (infinite H2), rho still comes from quadrature over a
    finite horizon so the report shows how far past the boundary the
    loop sits; the "rho_truncated_horizon" flag marks it.  Sampled
    blocks (Ito only) get both numbers from their sample grid, flagged
    "h2_truncated_grid", since finiteness cannot be decided from finitely
    many samples; that verdict is best-effort by construction.
    """
    options = options or AnalysisOptions()
    _check_interpretation(interpretation)
    _check_loop_noise(sys, noise)
    flags: list[str] = []

    if interpretation == "stratonovich":
        block = equivalent_ito_system(sys, noise.gamma_cov)
    else:
        block = sys

    if block.is_state_space:
        h2_squared = h2_norm_squared(block)
        h2_finite = math.isfinite(h2_squared)
    else:
        h2_squared = _truncated_h2_squared(block)
        h2_finite = True
        flags.append("h2_truncated_grid")

    quad = QuadratureBackend(horizon=options.quad_horizon, dt=options.quad_dt)
    if block.is_state_space and is_hurwitz(block.a):
        backend = LyapunovBackend()
    elif block.is_state_space:
        backend = quad
        flags.append("rho_truncated_horizon")
    else:
        backend = quad
        flags.append("rho_sample_grid")
    handle = make_lgo(sys, noise.gamma_cov, interpretation, backend)
    spectral = spectral_radius_power(
        handle, tol=options.power_tol, max_iter=options.power_max_iter
    )
    if not spectral.converged:
        flags.append("power_iteration_max_iter")

    mss = bool(h2_finite and spectral.rho < 1.0)
    steady_state = None
    if mss:
        steady_state = _solve_steady_state(sys, noise, interpretation, handle)
    return MssVerdict(
        interpretation=interpretation,
        mss=mss,
        h2_finite=h2_finite,
        h2_squared=h2_squared,
        rho=spectral.rho,
        spectral=spectral,
        steady_state=steady_state,
        flags=tuple(flags),
    )


def steady_state_covariances(
    sys: LtiSystem,
    noise: NoiseSpec,
    interpretation: str = "ito",
    options: AnalysisOptions | None = None,
) -> SteadyState:
    """Stationary covariance rates; raises NotMss for unstable loops."""
    verdict = analyze(sys, noise, interpretation, options)
    if not verdict.mss:
        raise NotMss(
            f"loop is not mean-square stable (h2_finite={verdict.h2_finite}, "
            f"rho={verdict.rho})"
        )
    return verdict.steady_state


@dataclass(frozen=True)
class CovarianceTrajectory:
    """Transient covariance rates on the grid t_k = k*dt.

    u[k], r[k], y[k] are the loop input, masked feedback and block
    output covariance rates at t_k; for a constant drive the sequence
    is monotone nondecreasing in the PSD order and converges to the
    steady state exactly when the loop is mean-square stable.
    """

    times: np.ndarray
    u: np.ndarray
    r: np.ndarray
    y: np.ndarray

    @property
    def trace_u(self) -> np.ndarray:
        return np.trace(self.u, axis1=1, axis2=2)

    @property
    def trace_y(self) -> np.ndarray:
        return np.trace(self.y, axis1=1, axis2=2)


# Overflow just before the NonFinite check is expected data for loops
# far past the stability threshold, not a numpy error.
@np.errstate(over="ignore", invalid="ignore")
def covariance_trajectory(
    sys: LtiSystem,
    noise: NoiseSpec,
    interpretation: str = "ito",
    horizon: float = 10.0,
    dt: float = 1e-3,
) -> CovarianceTrajectory:
    """March the covariance fixed point forward on a uniform grid.

    Right-endpoint rule for the feedback convolution:

        U(t_0) = W,   R(t_k) = gamma_cov o sum_{j=1..k} M(j dt) U(t_{k-j}) M*(j dt) dt,
        U(t_k) = W + R(t_k),   Y by the same kernel sum without the mask.

    State-space blocks use the equivalent one-step recursion
    Z_{k+1} = E (Z_k + B U_k B^T dt) E^T with E = e^{A dt}, which
    reproduces the same sums in O(K) work; sampled blocks pay the O(K^2)
    convolution directly.  Stratonovich loops route through the
    equivalent Ito block first.
    """
    _check_interpretation(interpretation)
    _check_loop_noise(sys, noise)
    if dt <= 0 or horizon <= 0:
        raise BadGrid(f"need positive dt and horizon, got dt={dt}, horizon={horizon}")
    n_steps = int(round(horizon / dt))
    if n_steps < 1 or abs(n_steps * dt - horizon) > 1e-6 * dt:
        raise BadGrid(
            f"horizon {horizon} is not a whole number of steps of dt={dt}"
        )
    if interpretation == "stratonovich":
        block = equivalent_ito_system(sys, noise.gamma_cov)
    else:
        block = sys
    n = noise.n_gains
    w_cov = noise.w_cov
    gamma = noise.gamma_cov
    u = np.empty((n_steps + 1, n, n))
    r = np.zeros((n_steps + 1, n, n))
    y = np.zeros((n_steps + 1, n, n))
    u[0] = w_cov
    if block.is_state_space:
        step = matrix_exponential(block.a, dt)
        b, c = block.b, block.c
        z = np.zeros((block.n_state, block.n_state))
        for k in range(1, n_steps + 1):
            z = step @ (z + (b @ u[k - 1] @ b.T) * dt) @ step.T
            y[k] = c @ z @ c.T
            r[k] = gamma * y[k]
            u[k] = w_cov + r[k]
            if not np.isfinite(u[k]).all():
                raise NonFinite(
                    f"covariance trajectory overflowed at t={k * dt}"
                )
    else:
        kernel = impulse_response_grid(block, dt, n_steps + 1)
        for k in range(1, n_steps + 1):
            y[k] = np.einsum(
                "jab,jbc,jdc->ad", kernel[1 : k + 1], u[k - 1 :: -1], kernel[1 : k + 1]
            ) * dt
            r[k] = gamma * y[k]
            u[k] = w_cov + r[k]
            if not np.isfinite(u[k]).all():
                raise NonFinite(
                    f"covariance trajectory overflowed at t={k * dt}"
                )
    times = np.arange(n_steps + 1) * dt
    return CovarianceTrajectory(times=times, u=u, r=r, y=y)
