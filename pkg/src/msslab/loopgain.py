"""Loop gain operator of a white-noise feedback loop.

For a forward block with impulse response M and gain covariance rate
gamma_cov, the operator maps an input covariance rate X to

    L(X) = gamma_cov o integral_0^inf M(tau) X M*(tau) dtau

(o is the entrywise product; the mask is what a diagonal multiplicative
gain does to a covariance).  Mean-square stability of the loop holds iff
the equivalent forward block has finite H2 norm and rho(L) < 1.

Ito loops use M directly.  Stratonovich loops are converted first: the
equivalent Ito block has the drift correction A + B((CB) o gamma_cov)C/2,
and the operator integrates that block's kernel.

Two interchangeable backends realize the integral: a Lyapunov solve
(exact, needs a Hurwitz realization) and trapezoid quadrature over a
finite horizon (also covers sampled kernels and non-Hurwitz diagnostics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadQuadrature,
    DimensionMismatch,
    NonFinite,
    NotHurwitz,
    RealizationRequired,
    SingularKroneckerSum,
    StratonovichNeedsRealization,
)
from .noise import _psd_factor
from .system import (
    LtiSystem,
    impulse_response_grid,
    is_hurwitz,
    kron_lyapunov_solve,
    make_state_space,
)

INTERPRETATIONS = ("ito", "stratonovich")

DEFAULT_QUAD_NODES = 40000
DEFAULT_DECAY_EXPONENT = 40.0


def _check_interpretation(interpretation: str) -> str:
    if interpretation not in INTERPRETATIONS:
        raise ValueError(
            f"interpretation must be one of {INTERPRETATIONS}, got {interpretation!r}"
        )
    return interpretation


def _check_loop(sys: LtiSystem, gamma_cov: np.ndarray) -> np.ndarray:
    gamma_cov, _ = _psd_factor(gamma_cov, "gamma_cov")
    n = gamma_cov.shape[0]
    if sys.n_out != sys.n_in:
        raise DimensionMismatch(
            f"feedback loop needs a square block, got {sys.n_out} outputs "
            f"and {sys.n_in} inputs"
        )
    if sys.n_in != n:
        raise DimensionMismatch(
            f"gamma_cov is {n}x{n} but the block has {sys.n_in} loop channels"
        )
    return gamma_cov


@dataclass(frozen=True)
class LyapunovBackend:
    """Exact integral through the Lyapunov equation of the realization."""


@dataclass(frozen=True)
class QuadratureBackend:
    """Trapezoid rule on [0, horizon] with spacing dt.

    Either field may be None: the horizon defaults to 40 decay constants
    of the kernel's slowest mode (the full stored horizon for sampled
    kernels) and dt to horizon/40000 (the sample spacing).
    """

    horizon: float | None = None
    dt: float | None = None


def stratonovich_correction_gain(sys: LtiSystem, gamma_cov) -> np.ndarray:
    """Feedback gain (M(0) o gamma_cov)/2 absorbed by the conversion."""
    gamma_cov = _check_loop(sys, np.asarray(gamma_cov, dtype=float))
    m0 = sys.c @ sys.b if sys.is_state_space else sys.samples[0]
    return 0.5 * (m0 * gamma_cov)


def equivalent_ito_system(sys: LtiSystem, gamma_cov) -> LtiSystem:
    """Forward block whose Ito loop matches the Stratonovich loop of sys.

    The loop closes the correction gain around the realization, shifting
    the drift: (A + B G C, B, C) with G = (M(0) o gamma_cov)/2.  When
    M(0) = CB = 0 the conversion is the identity.
    """
    if not sys.is_state_space:
        raise StratonovichNeedsRealization(
            "Stratonovich conversion needs a state-space realization"
        )
    gain = stratonovich_correction_gain(sys, gamma_cov)
    return make_state_space(sys.a + sys.b @ gain @ sys.c, sys.b, sys.c)


def lyapunov_solve(a, q) -> np.ndarray:
    """Solve A X + X A^T + Q = 0 for Hurwitz A.

    Symmetric Q gives a symmetric X (symmetrized against rounding).
    """
    a = np.asarray(a, dtype=float)
    if not is_hurwitz(a):
        raise NotHurwitz("A has an eigenvalue with real part >= -1e-9")
    x = kron_lyapunov_solve(a, q)
    q = np.asarray(q, dtype=float)
    if np.abs(q - q.T).max() <= 1e-12 * max(1.0, float(np.abs(q).max())):
        x = 0.5 * (x + x.T)
    return x


def _auto_quadrature(block: LtiSystem) -> tuple[float, float]:
    if block.is_state_space:
        slowest = float(np.max(np.linalg.eigvals(block.a).real))
        rate = max(abs(slowest), 1e-3)
        horizon = DEFAULT_DECAY_EXPONENT / rate
        return horizon, horizon / DEFAULT_QUAD_NODES
    horizon = (block.samples.shape[0] - 1) * block.sample_dt
    return horizon, block.sample_dt


@dataclass(frozen=True)
class LoopGainHandle:
    """Prepared operator: equivalent block, mask, and backend data.

    ``block`` is the kernel-bearing system (the conversion already
    applied for Stratonovich loops).  Quadrature handles carry their
    kernel stack and trapezoid weights so repeated applies are cheap.
    """

    block: LtiSystem
    gamma_cov: np.ndarray
    interpretation: str
    backend: LyapunovBackend | QuadratureBackend
    kernel: np.ndarray | None = None
    weights: np.ndarray | None = None

    @property
    def n_loop(self) -> int:
        return self.gamma_cov.shape[0]


def make_lgo(
    sys: LtiSystem,
    gamma_cov,
    interpretation: str = "ito",
    backend: LyapunovBackend | QuadratureBackend | None = None,
) -> LoopGainHandle:
    """Prepare the loop gain operator for repeated application."""
    _check_interpretation(interpretation)
    gamma_cov = _check_loop(sys, np.asarray(gamma_cov, dtype=float))
    if backend is None:
        backend = LyapunovBackend()
    if interpretation == "stratonovich":
        if not sys.is_state_space:
            raise StratonovichNeedsRealization(
                "Stratonovich loop gain needs a state-space realization "
                "(the conversion has no sampled form)"
            )
        block = equivalent_ito_system(sys, gamma_cov)
    else:
        block = sys
    kernel = None
    weights = None
    if isinstance(backend, QuadratureBackend):
        horizon, dt = backend.horizon, backend.dt
        auto_horizon, auto_dt = _auto_quadrature(block)
        if horizon is None:
            horizon = auto_horizon
        if dt is None:
            dt = horizon / DEFAULT_QUAD_NODES if block.is_state_space else auto_dt
        if dt <= 0 or horizon <= 0:
            raise BadQuadrature(
                f"quadrature needs positive horizon and dt, got "
                f"horizon={horizon}, dt={dt}"
            )
        count = int(round(horizon / dt))
        if count < 2:
            raise BadQuadrature(
                f"quadrature grid has {count} steps; need at least 2"
            )
        kernel = impulse_response_grid(block, dt, count + 1)
        weights = np.full(count + 1, dt)
        weights[0] = weights[-1] = 0.5 * dt
        backend = QuadratureBackend(horizon=count * dt, dt=dt)
    elif isinstance(backend, LyapunovBackend):
        if not block.is_state_space:
            raise RealizationRequired(
                "Lyapunov backend needs a state-space realization; "
                "use the quadrature backend for sampled kernels"
            )
    else:
        raise TypeError(f"unknown backend {backend!r}")
    return LoopGainHandle(
        block=block,
        gamma_cov=gamma_cov,
        interpretation=interpretation,
        backend=backend,
        kernel=kernel,
        weights=weights,
    )


def _check_operand(handle: LoopGainHandle, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = handle.n_loop
    if x.shape != (n, n):
        raise DimensionMismatch(f"operand has shape {x.shape}, expected {(n, n)}")
    if not np.all(np.isfinite(x)):
        raise NonFinite("operand contains NaN or infinity")
    return x


def covariance_sandwich(handle: LoopGainHandle, x) -> np.ndarray:
    """The unmasked integral of M(tau) X M*(tau): the output covariance
    rate produced by input covariance rate X through the block."""
    x = _check_operand(handle, x)
    if isinstance(handle.backend, LyapunovBackend):
        block = handle.block
        xbar = lyapunov_solve(block.a, block.b @ x @ block.b.T)
        return block.c @ xbar @ block.c.T
    weighted = handle.kernel * handle.weights[:, None, None]
    return np.einsum("kac,kbc->ab", weighted @ x, handle.kernel)


def apply_lgo_lyapunov(handle: LoopGainHandle, x) -> np.ndarray:
    """L(X) through the Lyapunov realization backend."""
    if not isinstance(handle.backend, LyapunovBackend):
        raise ValueError("handle was not built with the Lyapunov backend")
    return handle.gamma_cov * covariance_sandwich(handle, x)


def apply_lgo_quadrature(handle: LoopGainHandle, x) -> np.ndarray:
    """L(X) through trapezoid quadrature of the kernel stack."""
    if not isinstance(handle.backend, QuadratureBackend):
        raise ValueError("handle was not built with the quadrature backend")
    return handle.gamma_cov * covariance_sandwich(handle, x)


def apply_lgo(handle: LoopGainHandle, x) -> np.ndarray:
    """L(X) with whichever backend the handle carries."""
    return handle.gamma_cov * covariance_sandwich(handle, x)


@dataclass(frozen=True)
class SpectralResult:
    """Power-iteration output.

    ``eigen_matrix`` is the unit-Frobenius symmetric iterate; for an
    irreducible mask it is the worst-case input covariance shape.  When
    ``converged`` is false the estimate is the best available after
    max_iter (no exception: callers decide).
    """

    rho: float
    eigen_matrix: np.ndarray
    iterations: int
    converged: bool


def spectral_radius_power(
    handle: LoopGainHandle, tol: float = 1e-10, max_iter: int = 10000
) -> SpectralResult:
    """Spectral radius of the loop gain operator by power iteration.

    Iterates X <- L(X)/||L(X)||_F from X = I/||I||_F, symmetrizing each
    step; the estimate is the Frobenius inner product <L(X), X>.  Stops
    when successive estimates agree within tol*max(1, rho) AND the
    residual ||L(X) - rho X||_F meets the same bound (the residual check
    keeps the reported eigen-matrix honest, not just the eigenvalue).
    """
    n = handle.n_loop
    x = np.eye(n) / math.sqrt(n)
    rho_prev = None
    rho = 0.0
    for iteration in range(1, max_iter + 1):
        lx = apply_lgo(handle, x)
        lx = 0.5 * (lx + lx.T)
        rho = float(np.tensordot(lx, x))
        norm_lx = float(np.linalg.norm(lx))
        if norm_lx == 0.0:
            return SpectralResult(
                rho=0.0, eigen_matrix=x, iterations=iteration, converged=True
            )
        scale = tol * max(1.0, abs(rho))
        residual = float(np.linalg.norm(lx - rho * x))
        if (
            rho_prev is not None
            and abs(rho - rho_prev) <= scale
            and residual <= scale
        ):
            return SpectralResult(
                rho=rho, eigen_matrix=x, iterations=iteration, converged=True
            )
        rho_prev = rho
        x = lx / norm_lx
    return SpectralResult(
        rho=rho, eigen_matrix=x, iterations=max_iter, converged=False
    )


def lgo_matrix_kronecker(
    sys: LtiSystem, gamma_cov, interpretation: str = "ito"
) -> np.ndarray:
    """Dense matrix of the operator in the column-major vec basis.

    K = Diag(vec gamma_cov) (C (x) C) (-(A_k (x) I + I (x) A_k))^{-1} (B (x) B)
    so that vec(L(X)) = K vec(X).  Dense oracle for desk-scale loops;
    cross-checks the power iteration and feeds the steady-state solve.
    """
    _check_interpretation(interpretation)
    gamma_cov = _check_loop(sys, np.asarray(gamma_cov, dtype=float))
    if not sys.is_state_space:
        raise RealizationRequired(
            "the Kronecker matrix needs a state-space realization"
        )
    block = (
        equivalent_ito_system(sys, gamma_cov)
        if interpretation == "stratonovich"
        else sys
    )
    n_state = block.n_state
    n = gamma_cov.shape[0]
    if n * n > 256 or n_state * n_state > 256:
        raise DimensionMismatch(
            f"dense operator matrix is limited to 16 channels/states, "
            f"got {n} loop channels and {n_state} states"
        )
    if not is_hurwitz(block.a):
        raise NotHurwitz(
            "equivalent block is not Hurwitz; the untruncated operator "
            "matrix does not exist"
        )
    eye = np.eye(n_state)
    kron_sum = np.kron(eye, block.a) + np.kron(block.a, eye)
    try:
        inner = np.linalg.solve(-kron_sum, np.kron(block.b, block.b))
    except np.linalg.LinAlgError as exc:
        raise SingularKroneckerSum(
            f"Kronecker sum of the block drift is singular: {exc}"
        ) from exc
    k_matrix = gamma_cov.flatten(order="F")[:, None] * (
        np.kron(block.c, block.c) @ inner
    )
    return k_matrix


def lgo_matrix_apply(handle: LoopGainHandle) -> np.ndarray:
    """Dense operator matrix built column-by-column with apply_lgo.

    Backend-independent twin of lgo_matrix_kronecker; the route sampled
    kernels take to a steady-state solve.
    """
    n = handle.n_loop
    k_matrix = np.empty((n * n, n * n))
    basis = np.zeros((n, n))
    for j in range(n):
        for i in range(n):
            basis[i, j] = 1.0
            k_matrix[:, i + j * n] = apply_lgo(handle, basis).flatten(order="F")
            basis[i, j] = 0.0
    return k_matrix


def spectral_radius_dense(k_matrix) -> float:
    """Largest eigenvalue magnitude of a dense operator matrix."""
    k_matrix = np.asarray(k_matrix, dtype=float)
    if k_matrix.ndim != 2 or k_matrix.shape[0] != k_matrix.shape[1]:
        raise DimensionMismatch(
            f"operator matrix must be square, got shape {k_matrix.shape}"
        )
    if not np.all(np.isfinite(k_matrix)):
        raise NonFinite("operator matrix contains NaN or infinity")
    return float(np.abs(np.linalg.eigvals(k_matrix)).max())
