"""Continuous-time LTI forward blocks.

A block is either a state-space triple (A, B, C) with impulse response
M(t) = C e^{At} B, or a uniformly sampled impulse response used when no
realization is available.  Zero initial conditions throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    NonFinite,
    NonPositiveDt,
    OffGrid,
    RealizationRequired,
    SingularSystem,
    TooFewSamples,
)

HURWITZ_MARGIN = 1e-9


def _as_matrix(value, name: str) -> np.ndarray:
    mat = np.array(value, dtype=float)
    if mat.ndim != 2:
        raise DimensionMismatch(f"{name} must be a 2-d matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NonFinite(f"{name} contains NaN or infinity")
    return mat


@dataclass(frozen=True)
class LtiSystem:
    """Forward block, in state-space or sampled-impulse-response form.

    Exactly one representation is populated.  Use :func:`make_state_space`
    or :func:`make_sampled` instead of the raw constructor.
    """

    a: np.ndarray | None = None
    b: np.ndarray | None = None
    c: np.ndarray | None = None
    sample_dt: float | None = None
    samples: np.ndarray | None = None

    @property
    def is_state_space(self) -> bool:
        return self.a is not None

    @property
    def n_state(self) -> int:
        if not self.is_state_space:
            raise RealizationRequired("sampled system has no state dimension")
        return self.a.shape[0]

    @property
    def n_in(self) -> int:
        return self.b.shape[1] if self.is_state_space else self.samples.shape[2]

    @property
    def n_out(self) -> int:
        return self.c.shape[0] if self.is_state_space else self.samples.shape[1]


def make_state_space(a, b, c) -> LtiSystem:
    """Build a state-space block, validating shapes and finiteness."""
    a = _as_matrix(a, "A")
    b = _as_matrix(b, "B")
    c = _as_matrix(c, "C")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionMismatch(f"A must be square, got shape {a.shape}")
    if b.shape[0] != n:
        raise DimensionMismatch(
            f"B has {b.shape[0]} rows but A is {n}x{n}"
        )
    if c.shape[1] != n:
        raise DimensionMismatch(
            f"C has {c.shape[1]} columns but A is {n}x{n}"
        )
    return LtiSystem(a=a, b=b, c=c)


def make_sampled(dt: float, values) -> LtiSystem:
    """Build a block from impulse-response samples M(k*dt), k = 0, 1, ...

    ``values`` is a sequence of n_out x n_in matrices on a uniform grid
    starting at t = 0.
    """
    if not np.isfinite(dt):
        raise NonFinite("sample dt is not finite")
    if dt <= 0:
        raise NonPositiveDt(f"sample dt must be positive, got {dt}")
    samples = np.array(values, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None, None]
    if samples.ndim != 3:
        raise DimensionMismatch(
            f"samples must be a sequence of matrices, got shape {samples.shape}"
        )
    if samples.shape[0] < 2:
        raise TooFewSamples(
            f"need at least 2 impulse-response samples, got {samples.shape[0]}"
        )
    if not np.all(np.isfinite(samples)):
        raise NonFinite("impulse-response samples contain NaN or infinity")
    return LtiSystem(sample_dt=float(dt), samples=samples)


def matrix_exponential(a, t: float = 1.0) -> np.ndarray:
    """e^{At} by scaling-and-squaring on a truncated Taylor series.

    Self-contained: scale so the 1-norm is at most 1/2, sum the series to
    machine precision, square back up.  Intended for desk-scale matrices.
    """
    a = _as_matrix(a, "A")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionMismatch(f"A must be square, got shape {a.shape}")
    if not np.isfinite(t):
        raise NonFinite("t is not finite")
    at = a * t
    norm = np.linalg.norm(at, 1)
    if norm == 0.0:
        return np.eye(n)
    n_squarings = max(0, int(math.ceil(math.log2(norm / 0.5))))
    scaled = at / (2.0 ** n_squarings)
    term = np.eye(n)
    total = np.eye(n)
    for k in range(1, 40):
        term = term @ scaled / k
        total = total + term
        if np.linalg.norm(term, 1) <= 1e-17 * np.linalg.norm(total, 1):
            break
    for _ in range(n_squarings):
        total = total @ total
    return total


def matrix_exponential_grid(a, dt: float, count: int) -> np.ndarray:
    """Stack of e^{A k dt} for k = 0 .. count-1, built by binary doubling."""
    a = _as_matrix(a, "A")
    if dt <= 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    n = a.shape[0]
    out = np.empty((count, n, n))
    out[0] = np.eye(n)
    if count == 1:
        return out
    out[1] = matrix_exponential(a, dt)
    filled = 2
    while filled < count:
        take = min(filled, count - filled)
        pivot = out[filled - 1] @ out[1]
        out[filled : filled + take] = out[:take] @ pivot
        filled += take
    return out


def _sample_index(sys: LtiSystem, t: float) -> int:
    ratio = t / sys.sample_dt
    k = int(round(ratio))
    if abs(ratio - k) > 1e-9 * max(1.0, abs(ratio)):
        raise OffGrid(
            f"t={t} is not on the sample grid with dt={sys.sample_dt}"
        )
    if k < 0 or k >= sys.samples.shape[0]:
        raise OffGrid(
            f"t={t} is outside the sampled horizon "
            f"[0, {(sys.samples.shape[0] - 1) * sys.sample_dt}]"
        )
    return k


def impulse_response(sys: LtiSystem, t: float) -> np.ndarray:
    """M(t) for a single time t >= 0.

    Sampled systems are looked up exactly on their grid; no interpolation.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if sys.is_state_space:
        return sys.c @ matrix_exponential(sys.a, t) @ sys.b
    return sys.samples[_sample_index(sys, t)].copy()


def impulse_response_grid(sys: LtiSystem, dt: float, count: int) -> np.ndarray:
    """M(k*dt) for k = 0 .. count-1 as a (count, n_out, n_in) stack.

    For sampled systems dt must be an integer multiple of the sample
    spacing and the horizon must not overrun the stored samples.
    """
    if dt <= 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    if sys.is_state_space:
        stack = matrix_exponential_grid(sys.a, dt, count)
        return np.matmul(sys.c, stack @ sys.b)
    ratio = dt / sys.sample_dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
        raise OffGrid(
            f"grid dt={dt} is not a multiple of the sample dt={sys.sample_dt}"
        )
    if (count - 1) * stride >= sys.samples.shape[0]:
        raise OffGrid(
            f"grid horizon {(count - 1) * dt} overruns the sampled horizon "
            f"{(sys.samples.shape[0] - 1) * sys.sample_dt}"
        )
    return sys.samples[:: stride][:count].copy()


def is_hurwitz(a, margin: float = HURWITZ_MARGIN) -> bool:
    """True when every eigenvalue has real part < -margin.

    Eigenvalues inside the margin count as non-Hurwitz.
    """
    a = _as_matrix(a, "A")
    return bool(np.all(np.linalg.eigvals(a).real < -margin))


def kron_lyapunov_solve(a, q) -> np.ndarray:
    """Solve A X + X A^T + Q = 0 through the Kronecker-sum linear system.

    Deliberately dense and direct: desk-scale n, no Schur factorization.
    """
    a = _as_matrix(a, "A")
    q = _as_matrix(q, "Q")
    n = a.shape[0]
    if q.shape != (n, n):
        raise DimensionMismatch(f"Q has shape {q.shape}, expected {(n, n)}")
    eye = np.eye(n)
    kron_sum = np.kron(eye, a) + np.kron(a, eye)
    try:
        vec_x = np.linalg.solve(kron_sum, -q.flatten(order="F"))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"Kronecker sum of A is singular: {exc}") from exc
    if not np.all(np.isfinite(vec_x)):
        raise SingularSystem("Lyapunov solve produced non-finite values")
    return vec_x.reshape((n, n), order="F")


def h2_norm_squared(sys: LtiSystem) -> float:
    """Squared H2 norm of a state-space block; math.inf when A is not Hurwitz.

    The infinite marker is data, not an error: the stability theorem
    consumes it as condition 1.
    """
    if not sys.is_state_space:
        raise RealizationRequired("H2 norm needs a state-space realization")
    if not is_hurwitz(sys.a):
        return math.inf
    x = kron_lyapunov_solve(sys.a, sys.b @ sys.b.T)
    x = 0.5 * (x + x.T)
    return float(np.trace(sys.c @ x @ sys.c.T))


def spectral_norm(mat, tol: float = 1e-12, max_iter: int = 1000) -> float:
    """Largest singular value via power iteration on M^T M."""
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {m.shape}")
    if m.size == 0 or not np.any(m):
        return 0.0
    n_cols = m.shape[1]
    v = np.ones(n_cols) + 1e-3 * np.arange(n_cols)
    v /= np.linalg.norm(v)
    if np.linalg.norm(m @ v) == 0.0:
        for i in range(n_cols):
            if np.linalg.norm(m[:, i]) > 0.0:
                v = np.zeros(n_cols)
                v[i] = 1.0
                break
        else:
            return 0.0
    sigma = 0.0
    for _ in range(max_iter):
        w = m @ v
        estimate = float(np.linalg.norm(w))
        if estimate == 0.0:
            return 0.0
        v = m.T @ w
        scale = np.linalg.norm(v)
        if scale == 0.0:
            return estimate
        v /= scale
        if abs(estimate - sigma) <= tol * max(estimate, 1.0):
            return estimate
        sigma = estimate
    return sigma


@dataclass(frozen=True)
class VariationProfile:
    """Diagnostic variation of a sampled kernel over its horizon."""

    total_variation: float
    quadratic_variation: float
    horizon: float


def variation_profile(values, dt: float) -> VariationProfile:
    """Total and quadratic variation of a matrix-valued sample sequence.

    Sums spectral norms (and squared norms) of consecutive differences.
    A heuristic for spotting jumpy kernels; smooth kernels have quadratic
    variation shrinking like O(dt).
    """
    if dt <= 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    samples = np.array(values, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None, None]
    if samples.ndim != 3:
        raise DimensionMismatch(
            f"samples must be a sequence of matrices, got shape {samples.shape}"
        )
    if samples.shape[0] < 2:
        raise TooFewSamples(
            f"need at least 2 samples, got {samples.shape[0]}"
        )
    if not np.all(np.isfinite(samples)):
        raise NonFinite("samples contain NaN or infinity")
    norms = np.array(
        [spectral_norm(samples[k + 1] - samples[k]) for k in range(samples.shape[0] - 1)]
    )
    return VariationProfile(
        total_variation=float(norms.sum()),
        quadratic_variation=float((norms ** 2).sum()),
        horizon=float((samples.shape[0] - 1) * dt),
    )
