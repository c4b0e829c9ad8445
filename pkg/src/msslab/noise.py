"""White-noise loop specification and increment sampling.

The loop carries two independent sources: the multiplicative gain vector
(covariance rate gamma_cov, applied through a diagonal feedback mask) and
the additive drive (covariance rate w_cov).  Increments over a step dt are
zero-mean Gaussians with covariance cov*dt.

Randomness is counter-based: every stream is a Philox generator keyed by
(seed, stream index), so draws are reproducible, order-independent and
safe to parallelize without threading mutable generator state around.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFinite, NonPositiveDt, NotPsd, NotSymmetric

SYMMETRY_TOL = 1e-12


def _psd_factor(cov, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Validate a covariance and return (copy, symmetric square root).

    Eigendecomposition rather than Cholesky: rate matrices are routinely
    rank-deficient (perfectly correlated or absent channels) and Cholesky
    would reject them.  Eigenvalues in [-eps_psd, 0) are clamped to zero.
    """
    mat = np.array(cov, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NonFinite(f"{name} contains NaN or infinity")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > SYMMETRY_TOL * scale:
        raise NotSymmetric(
            f"{name} is asymmetric beyond {SYMMETRY_TOL} (relative)"
        )
    mat = 0.5 * (mat + mat.T)
    eigvals, eigvecs = np.linalg.eigh(mat)
    eps_psd = 1e-10 * max(float(eigvals[-1]), 1.0)
    if eigvals[0] < -eps_psd:
        raise NotPsd(
            f"{name} has eigenvalue {eigvals[0]:.3e} below -{eps_psd:.3e}"
        )
    clamped = np.clip(eigvals, 0.0, None)
    factor = (eigvecs * np.sqrt(clamped)) @ eigvecs.T
    return mat, factor


@dataclass(frozen=True)
class NoiseSpec:
    """Validated noise covariance rates with precomputed factors.

    gamma_factor @ gamma_factor.T == gamma_cov (likewise for w) within
    1e-10 Frobenius.
    """

    gamma_cov: np.ndarray
    w_cov: np.ndarray
    gamma_factor: np.ndarray
    w_factor: np.ndarray

    @property
    def n_gains(self) -> int:
        return self.gamma_cov.shape[0]

    @property
    def n_drive(self) -> int:
        return self.w_cov.shape[0]


def validate_noise(gamma_cov, w_cov) -> NoiseSpec:
    """Check symmetry/PSD-ness of both covariance rates and factor them."""
    gamma_cov, gamma_factor = _psd_factor(gamma_cov, "gamma_cov")
    w_cov, w_factor = _psd_factor(w_cov, "w_cov")
    return NoiseSpec(
        gamma_cov=gamma_cov,
        w_cov=w_cov,
        gamma_factor=gamma_factor,
        w_factor=w_factor,
    )


@dataclass(frozen=True)
class RngState:
    """Explicit, immutable sampling state: (seed, call counter)."""

    seed: int
    counter: int = 0


def philox_generator(seed: int, stream: int) -> np.random.Generator:
    """Generator for one named stream of a seed (counter-based Philox)."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_increments(
    spec: NoiseSpec, dt: float, state: RngState
) -> tuple[np.ndarray, np.ndarray, RngState]:
    """One step of gain and drive increments, threading the rng state.

    Returns (dgamma, dw, next_state); dgamma ~ N(0, gamma_cov*dt) and
    dw ~ N(0, w_cov*dt), mutually independent.  The same state always
    yields the same draw.
    """
    if dt <= 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    gen = philox_generator(state.seed, state.counter)
    root_dt = np.sqrt(dt)
    dgamma = spec.gamma_factor @ gen.standard_normal(spec.n_gains) * root_dt
    dw = spec.w_factor @ gen.standard_normal(spec.n_drive) * root_dt
    return dgamma, dw, RngState(seed=state.seed, counter=state.counter + 1)


def draw_increment_chunk(
    spec: NoiseSpec, dt: float, n_steps: int, gen: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Blocks of increments for n_steps steps from one path's generator.

    Draw order (gain block first, then drive block) is part of the
    reproducibility contract shared by single-path and ensemble runs.
    """
    root_dt = np.sqrt(dt)
    dgamma = gen.standard_normal((n_steps, spec.n_gains)) @ spec.gamma_factor.T * root_dt
    dw = gen.standard_normal((n_steps, spec.n_drive)) @ spec.w_factor.T * root_dt
    return dgamma, dw
