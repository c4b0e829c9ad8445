"""Monte Carlo simulation of the stochastic feedback loop.

Discretizes the loop on t_k = k dt with zero initial state:

    y_k = C x_k,   r_k = dgamma_k o y_k  (Ito, left point)
    u_k = dw_k + r_k,   x_{k+1} = x_k + A x_k dt + B u_k.

The Stratonovich rule replaces the feedback increment by the implicit
midpoint r_k = dgamma_k o (y_k + y_{k+1})/2, solved per step by fixed
point iteration (contraction factor O(||dgamma_k||), so it converges for
reasonable dt).  The drive and the open-loop convolution need no rule:
only the feedback product is interpretation-sensitive.

Two schemes: the state-space step above, and the literal convolution sum
y_N = sum_{k<N} M(t_N - t_k) u_k (O(N^2), works for sampled kernels and
doubles as an oracle for the recursion).

Paths are reproducible and order-independent: path i draws from a Philox
stream keyed (seed, i) in fixed chunks, so single-path runs, ensembles,
and any parallel schedule see identical noise.  Ensembles reduce batch
partial sums in fixed batch order; MSSLAB_THREADS (0 = auto) caps the
worker threads without changing output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadGrid,
    DimensionMismatch,
    InsufficientPaths,
    MidpointNoConvergence,
    NonPositiveDt,
    RealizationRequired,
)
from .loopgain import _check_interpretation
from .noise import NoiseSpec, draw_increment_chunk, philox_generator
from .system import LtiSystem, impulse_response_grid

SCHEMES = ("state_space_step", "convolution_sum")

OVERFLOW_LIMIT = 1e150
MIDPOINT_TOL = 1e-10
MIDPOINT_MAX_ITER = 50

_PATH_BATCH = 2048
_STEP_CHUNK = 2048


@dataclass(frozen=True)
class SimulationConfig:
    """Grid, ensemble size and discretization rule for a run."""

    dt: float
    horizon: float
    n_paths: int
    seed: int
    interpretation: str = "ito"
    scheme: str = "state_space_step"

    def __post_init__(self):
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise NonPositiveDt(f"dt must be positive, got {self.dt}")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise BadGrid(f"horizon must be positive, got {self.horizon}")
        steps = round(self.horizon / self.dt)
        if steps < 1 or abs(steps * self.dt - self.horizon) > 1e-6 * self.dt:
            raise BadGrid(
                f"horizon {self.horizon} is not a whole number of steps "
                f"of dt={self.dt}"
            )
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        _check_interpretation(self.interpretation)
        if self.scheme not in SCHEMES:
            raise ValueError(
                f"scheme must be one of {SCHEMES}, got {self.scheme!r}"
            )

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class PathResult:
    """One sample path: block output plus the loop increments."""

    times: np.ndarray
    y: np.ndarray
    u_increments: np.ndarray
    r_increments: np.ndarray
    diverged: bool
    diverged_at: int | None


def _draw_path_increments(
    noise: NoiseSpec, dt: float, n_steps: int, gen: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """All increments of one path, drawn in the canonical chunk order."""
    dgam = np.empty((n_steps, noise.n_gains))
    dw = np.empty((n_steps, noise.n_drive))
    for start in range(0, n_steps, _STEP_CHUNK):
        stop = min(start + _STEP_CHUNK, n_steps)
        dgam[start:stop], dw[start:stop] = draw_increment_chunk(
            noise, dt, stop - start, gen
        )
    return dgam, dw


def _check_increments(
    noise: NoiseSpec, n_steps: int, increments
) -> tuple[np.ndarray, np.ndarray]:
    dgam = np.asarray(increments[0], dtype=float)
    dw = np.asarray(increments[1], dtype=float)
    if dgam.ndim == 1:
        dgam = dgam[:, None]
    if dw.ndim == 1:
        dw = dw[:, None]
    if dgam.shape != (n_steps, noise.n_gains):
        raise DimensionMismatch(
            f"gain increments have shape {dgam.shape}, expected "
            f"{(n_steps, noise.n_gains)}"
        )
    if dw.shape != (n_steps, noise.n_drive):
        raise DimensionMismatch(
            f"drive increments have shape {dw.shape}, expected "
            f"{(n_steps, noise.n_drive)}"
        )
    return dgam, dw


def _midpoint_solve(dgam_k, y_k, base_y, gain_y, label: str):
    """Solve r = dgamma o (y_k + base_y + gain_y(r))/2 by fixed point.

    base_y is the next output without the feedback contribution and
    gain_y maps a feedback increment to its next-output contribution.
    Works on (n,) vectors and (B, n) batches alike.
    """
    r = dgam_k * y_k
    for _ in range(MIDPOINT_MAX_ITER):
        r_new = 0.5 * dgam_k * (y_k + base_y + gain_y(r))
        err = np.abs(r_new - r).max(axis=-1)
        bound = MIDPOINT_TOL * np.maximum(1.0, np.abs(r_new).max(axis=-1))
        r = r_new
        if np.all(err <= bound):
            return r
    raise MidpointNoConvergence(
        f"implicit midpoint did not converge in {MIDPOINT_MAX_ITER} "
        f"iterations at {label}; reduce dt relative to the gain magnitude"
    )


def simulate_path_ito(
    sys: LtiSystem,
    noise: NoiseSpec,
    config: SimulationConfig,
    path_index: int = 0,
    increments=None,
) -> PathResult:
    """One Ito path (left-point feedback product)."""
    return _simulate_path(sys, noise, config, path_index, False, increments)


def simulate_path_stratonovich(
    sys: LtiSystem,
    noise: NoiseSpec,
    config: SimulationConfig,
    path_index: int = 0,
    increments=None,
) -> PathResult:
    """One Stratonovich path (implicit midpoint feedback product)."""
    return _simulate_path(sys, noise, config, path_index, True, increments)


def simulate_path(
    sys: LtiSystem,
    noise: NoiseSpec,
    config: SimulationConfig,
    path_index: int = 0,
    increments=None,
) -> PathResult:
    """One path using the interpretation named in the config."""
    midpoint = config.interpretation == "stratonovich"
    return _simulate_path(sys, noise, config, path_index, midpoint, increments)


def _check_loop_shapes(sys: LtiSystem, noise: NoiseSpec) -> None:
    if sys.n_in != sys.n_out:
        raise DimensionMismatch(
            f"feedback loop needs a square block, got {sys.n_out} outputs "
            f"and {sys.n_in} inputs"
        )
    if noise.n_gains != sys.n_in or noise.n_drive != sys.n_in:
        raise DimensionMismatch(
            f"noise dimensions ({noise.n_gains} gains, {noise.n_drive} "
            f"drive) must equal the {sys.n_in} loop channels"
        )


@np.errstate(over="ignore", invalid="ignore")
def _simulate_path(sys, noise, config, path_index, midpoint, increments):
    _check_loop_shapes(sys, noise)
    n_steps = config.n_steps
    dt = config.dt
    if increments is None:
        gen = philox_generator(config.seed, path_index)
        dgam, dw = _draw_path_increments(noise, dt, n_steps, gen)
    else:
        dgam, dw = _check_increments(noise, n_steps, increments)
    n_out = sys.n_out
    y = np.zeros((n_steps + 1, n_out))
    r_inc = np.zeros((n_steps, sys.n_in))
    u_inc = np.zeros((n_steps, sys.n_in))
    diverged_at = None

    if config.scheme == "state_space_step":
        if not sys.is_state_space:
            raise RealizationRequired(
                "the state-space scheme needs a realization; use the "
                "convolution_sum scheme for sampled kernels"
            )
        a, b, c = sys.a, sys.b, sys.c
        one_step = np.eye(sys.n_state) + a * dt
        x = np.zeros(sys.n_state)
        for k in range(n_steps):
            y_k = c @ x
            y[k] = y_k
            if midpoint:
                base_x = one_step @ x + b @ dw[k]
                r = _midpoint_solve(
                    dgam[k],
                    y_k,
                    c @ base_x,
                    lambda rr: (b @ rr) @ c.T,
                    f"t={k * dt}",
                )
            else:
                r = dgam[k] * y_k
            u = dw[k] + r
            r_inc[k] = r
            u_inc[k] = u
            x = one_step @ x + b @ u
            if not np.isfinite(x).all() or np.abs(x).max() > OVERFLOW_LIMIT:
                diverged_at = k + 1
                y[k + 1 :] = np.nan
                break
        else:
            y[n_steps] = c @ x
    else:
        kernel = impulse_response_grid(sys, dt, n_steps + 1)
        y_k = np.zeros(n_out)
        for k in range(n_steps):
            y[k] = y_k
            if midpoint:
                base_y = np.einsum(
                    "jym,jm->y", kernel[k + 1 : 1 : -1], u_inc[:k]
                ) + kernel[1] @ dw[k]
                r = _midpoint_solve(
                    dgam[k], y_k, base_y, lambda rr: kernel[1] @ rr, f"t={k * dt}"
                )
            else:
                r = dgam[k] * y_k
            u = dw[k] + r
            r_inc[k] = r
            u_inc[k] = u
            y_k = np.einsum("jym,jm->y", kernel[k + 1 : 0 : -1], u_inc[: k + 1])
            if not np.isfinite(y_k).all() or np.abs(y_k).max() > OVERFLOW_LIMIT:
                diverged_at = k + 1
                y[k + 1 :] = np.nan
                break
        else:
            y[n_steps] = y_k

    return PathResult(
        times=config.times,
        y=y,
        u_increments=u_inc,
        r_increments=r_inc,
        diverged=diverged_at is not None,
        diverged_at=diverged_at,
    )


@dataclass(frozen=True)
class SimulationEnsemble:
    """Per-time ensemble statistics over the surviving paths.

    var_y[k] is the mean squared output norm at t_k, stderr_y its
    sampling error (NaN when fewer than two paths survive; flagged in
    diagnostics for n_paths = 1).  var_u_increments[k] is the mean
    squared input increment norm per unit time at step k.  qv_y[k] is
    the mean running quadratic variation of y.  n_diverged[k] counts
    paths flagged divergent by t_k; they are excluded from the
    statistics from their divergence time on.
    """

    times: np.ndarray
    var_y: np.ndarray
    stderr_y: np.ndarray
    var_u_increments: np.ndarray
    qv_y: np.ndarray
    n_diverged: np.ndarray
    n_paths: int
    config: SimulationConfig
    diagnostics: dict = field(default_factory=dict)
    r_paths: np.ndarray | None = None
    u_paths: np.ndarray | None = None


def _resolve_workers(max_workers: int | None) -> int:
    if max_workers is None:
        raw = os.environ.get("MSSLAB_THREADS", "").strip()
        if raw:
            try:
                max_workers = int(raw)
            except ValueError:
                raise ValueError(
                    f"MSSLAB_THREADS must be an integer, got {raw!r}"
                ) from None
        else:
            max_workers = 0
    if max_workers < 0:
        raise ValueError(f"worker count must be >= 0, got {max_workers}")
    if max_workers == 0:
        return max(1, os.cpu_count() or 1)
    return max_workers


class _BatchStats:
    """Fixed-order partial sums for one contiguous block of paths."""

    def __init__(self, n_steps: int):
        self.sum_y2 = np.zeros(n_steps + 1)
        self.sum_y4 = np.zeros(n_steps + 1)
        self.alive_count = np.zeros(n_steps + 1, dtype=np.int64)
        self.sum_u2 = np.zeros(n_steps)
        self.sum_qv = np.zeros(n_steps + 1)


def _record_time(stats, k, y, alive, qv_run):
    s = np.einsum("pj,pj->p", y, y)
    s_alive = np.where(alive, s, 0.0)
    stats.sum_y2[k] += s_alive.sum()
    stats.sum_y4[k] += (s_alive * s_alive).sum()
    stats.alive_count[k] += int(alive.sum())
    stats.sum_qv[k] += np.where(alive, qv_run, 0.0).sum()


# Overflow at the divergence-detection step is expected data, not an
# error; dead paths are frozen at zero right after detection.
@np.errstate(over="ignore", invalid="ignore")
def _run_batch(
    sys,
    noise,
    config,
    midpoint,
    first_path,
    batch_size,
    kernel,
    r_store,
    u_store,
):
    n_steps = config.n_steps
    dt = config.dt
    stats = _BatchStats(n_steps)
    gens = [
        philox_generator(config.seed, first_path + i) for i in range(batch_size)
    ]
    state_scheme = config.scheme == "state_space_step"
    if state_scheme:
        a, b, c = sys.a, sys.b, sys.c
        one_step_t = (np.eye(sys.n_state) + a * dt).T
        b_t, c_t = b.T, c.T
        x = np.zeros((batch_size, sys.n_state))
    else:
        u_hist = np.zeros((batch_size, n_steps, sys.n_in))
    y = np.zeros((batch_size, sys.n_out))
    y_prev = np.zeros_like(y)
    qv_run = np.zeros(batch_size)
    alive = np.ones(batch_size, dtype=bool)
    k = 0
    while k < n_steps:
        chunk = min(_STEP_CHUNK, n_steps - k)
        dgam = np.empty((batch_size, chunk, noise.n_gains))
        dw = np.empty((batch_size, chunk, noise.n_drive))
        for i, gen in enumerate(gens):
            dgam[i], dw[i] = draw_increment_chunk(noise, dt, chunk, gen)
        for j in range(chunk):
            if k > 0:
                dy = y - y_prev
                qv_run += np.where(alive, np.einsum("pj,pj->p", dy, dy), 0.0)
            _record_time(stats, k, y, alive, qv_run)
            dgam_k = dgam[:, j]
            dw_k = dw[:, j]
            if state_scheme:
                if midpoint:
                    base_x = x @ one_step_t + dw_k @ b_t
                    r = _midpoint_solve(
                        dgam_k,
                        y,
                        base_x @ c_t,
                        lambda rr: (rr @ b_t) @ c_t,
                        f"t={k * dt}",
                    )
                else:
                    r = dgam_k * y
                u = dw_k + r
                x_next = x @ one_step_t + u @ b_t
                bad = ~np.isfinite(x_next).all(axis=1) | (
                    np.abs(x_next).max(axis=1) > OVERFLOW_LIMIT
                )
                y_next = x_next @ c_t
            else:
                if midpoint:
                    base_y = np.einsum(
                        "pjm,jym->py", u_hist[:, :k], kernel[k + 1 : 1 : -1]
                    ) + dw_k @ kernel[1].T
                    r = _midpoint_solve(
                        dgam_k, y, base_y, lambda rr: rr @ kernel[1].T, f"t={k * dt}"
                    )
                else:
                    r = dgam_k * y
                u = dw_k + r
                u_hist[:, k] = u
                y_next = np.einsum(
                    "pjm,jym->py", u_hist[:, : k + 1], kernel[k + 1 : 0 : -1]
                )
                bad = ~np.isfinite(y_next).all(axis=1) | (
                    np.abs(y_next).max(axis=1) > OVERFLOW_LIMIT
                )
            u2 = np.einsum("pj,pj->p", u, u)
            stats.sum_u2[k] += np.where(alive, u2, 0.0).sum() / dt
            if r_store is not None:
                live = alive[:, None]
                r_store[first_path : first_path + batch_size, k] = np.where(
                    live, r, 0.0
                )
                u_store[first_path : first_path + batch_size, k] = np.where(
                    live, u, 0.0
                )
            alive = alive & ~bad
            if not alive.all():
                dead = ~alive
                y_next[dead] = 0.0
                if state_scheme:
                    x_next[dead] = 0.0
                else:
                    u_hist[dead, : k + 1] = 0.0
            if state_scheme:
                x = x_next
            y_prev = y
            y = y_next
            k += 1
    dy = y - y_prev
    if n_steps > 0:
        qv_run += np.where(alive, np.einsum("pj,pj->p", dy, dy), 0.0)
    _record_time(stats, n_steps, y, alive, qv_run)
    return stats


def run_ensemble(
    sys: LtiSystem,
    noise: NoiseSpec,
    config: SimulationConfig,
    record_increments: bool = False,
    max_workers: int | None = None,
) -> SimulationEnsemble:
    """Simulate n_paths independent paths and reduce their statistics.

    Every path i is bit-identical to ``simulate_path(..., path_index=i)``
    with the same config.  Results do not depend on the worker count or
    execution order (fixed batching, fixed-order reduction).
    """
    _check_loop_shapes(sys, noise)
    midpoint = config.interpretation == "stratonovich"
    n_steps = config.n_steps
    n_paths = config.n_paths
    if config.scheme == "state_space_step" and not sys.is_state_space:
        raise RealizationRequired(
            "the state-space scheme needs a realization; use the "
            "convolution_sum scheme for sampled kernels"
        )
    kernel = None
    if config.scheme == "convolution_sum":
        kernel = impulse_response_grid(sys, config.dt, n_steps + 1)
    r_store = u_store = None
    if record_increments:
        total = 2 * n_paths * n_steps * sys.n_in * 8
        if total > 2_000_000_000:
            raise ValueError(
                f"recording increments for this run needs {total / 1e9:.1f} GB; "
                "shrink n_paths or the grid"
            )
        r_store = np.zeros((n_paths, n_steps, sys.n_in))
        u_store = np.zeros((n_paths, n_steps, sys.n_in))

    batches = [
        (start, min(_PATH_BATCH, n_paths - start))
        for start in range(0, n_paths, _PATH_BATCH)
    ]
    workers = min(_resolve_workers(max_workers), len(batches))

    def work(batch):
        first, size = batch
        return _run_batch(
            sys, noise, config, midpoint, first, size, kernel, r_store, u_store
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(work, batches))
    else:
        partials = [work(batch) for batch in batches]

    total = _BatchStats(n_steps)
    for part in partials:
        total.sum_y2 += part.sum_y2
        total.sum_y4 += part.sum_y4
        total.alive_count += part.alive_count
        total.sum_u2 += part.sum_u2
        total.sum_qv += part.sum_qv

    count = total.alive_count.astype(float)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        var_y = np.where(count > 0, total.sum_y2 / count, np.nan)
        qv_y = np.where(count > 0, total.sum_qv / count, np.nan)
        var_u = np.where(
            count[:-1] > 0, total.sum_u2 / count[:-1], np.nan
        )
        spread = total.sum_y4 - total.sum_y2**2 / count
        stderr_y = np.where(
            count > 1,
            np.sqrt(np.maximum(spread, 0.0) / (count - 1.0)) / np.sqrt(count),
            np.nan,
        )
    diagnostics = {
        "stderr_defined": n_paths > 1,
        "workers": workers,
        "increments_recorded": record_increments,
    }
    if record_increments and n_paths >= 100 and n_steps >= 2:
        report = increment_independence_test(r_store, max_lag=min(10, n_steps - 1))
        diagnostics["r_max_abs_corr"] = report.max_abs_corr
    return SimulationEnsemble(
        times=config.times,
        var_y=var_y,
        stderr_y=stderr_y,
        var_u_increments=var_u,
        qv_y=qv_y,
        n_diverged=n_paths - total.alive_count,
        n_paths=n_paths,
        config=config,
        diagnostics=diagnostics,
        r_paths=r_store,
        u_paths=u_store,
    )


def quadratic_variation(y: np.ndarray) -> np.ndarray:
    """Running sum of squared increments of a sampled path.

    Returns the sequence <y>(t_k), k = 0..K, with <y>(0) = 0.  For a
    Wiener path this estimates cov-trace times t; for differentiable
    paths it vanishes like O(dt).
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2:
        raise DimensionMismatch(f"path must be 1-d or 2-d, got shape {y.shape}")
    dy = np.diff(y, axis=0)
    out = np.zeros(y.shape[0])
    np.cumsum(np.einsum("kj,kj->k", dy, dy), out=out[1:])
    return out


@dataclass(frozen=True)
class IndependenceReport:
    """Lagged cross-moment statistics of an increment ensemble."""

    max_abs_corr: float
    per_lag: np.ndarray


def increment_independence_test(
    paths: np.ndarray, max_lag: int = 10
) -> IndependenceReport:
    """Test temporal independence of increments across an ensemble.

    For each time k, lag l and component, forms the studentized cross
    moment mean(a*b)/std(a*b) over paths with a = increment at k and
    b = increment at k+l.  Under independence the statistic fluctuates
    with standard deviation exactly 1/sqrt(n_paths) whatever the
    marginal tails, so 5/sqrt(n_paths) bounds it at the five-sigma
    level.  (Normalizing by the product of marginal deviations instead
    would inflate the null spread for dependent-but-uncorrelated
    increments and fail that bound even for exact Wiener input.)

    Returns the per-lag maxima over times/components and the overall
    maximum.  Degenerate cells (zero product spread) count as zero.
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[:, :, None]
    if paths.ndim != 3:
        raise DimensionMismatch(
            f"expected (n_paths, n_steps) or (n_paths, n_steps, n), got "
            f"shape {paths.shape}"
        )
    n_paths, n_steps = paths.shape[0], paths.shape[1]
    if n_paths < 100:
        raise InsufficientPaths(
            f"need at least 100 paths for the independence test, got {n_paths}"
        )
    if max_lag < 1 or max_lag >= n_steps:
        raise ValueError(
            f"max_lag must be in [1, {n_steps - 1}], got {max_lag}"
        )
    per_lag = np.zeros(max_lag)
    for lag in range(1, max_lag + 1):
        prod = paths[:, :-lag] * paths[:, lag:]
        mean = prod.mean(axis=0)
        spread = prod.std(axis=0, ddof=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cells = np.where(spread > 0.0, mean / spread, 0.0)
        per_lag[lag - 1] = np.abs(cells).max()
    return IndependenceReport(max_abs_corr=float(per_lag.max()), per_lag=per_lag)


def open_loop_terminal_samples(
    sys: LtiSystem,
    noise: NoiseSpec,
    horizon: float,
    dt: float,
    n_paths: int,
    seed: int,
    kernel_node: str = "left",
) -> np.ndarray:
    """Terminal outputs of the open-loop convolution of the drive alone.

    Evaluates y(T) = sum_k M(T - t*_k) dw_k with the kernel node t*_k at
    the left endpoint or the midpoint of each step.  The gain stream is
    not drawn: this helper exists to check that an additive convolution
    is insensitive to the evaluation rule, unlike the feedback product.
    Returns an (n_paths, n_out) array of samples.
    """
    if kernel_node not in ("left", "midpoint"):
        raise ValueError(
            f"kernel_node must be 'left' or 'midpoint', got {kernel_node!r}"
        )
    config = SimulationConfig(
        dt=dt, horizon=horizon, n_paths=n_paths, seed=seed
    )
    n_steps = config.n_steps
    if kernel_node == "left":
        stack = impulse_response_grid(sys, dt, n_steps + 1)
        kernels = stack[1:][::-1]
    else:
        stack = impulse_response_grid(sys, dt / 2, 2 * n_steps + 1)
        kernels = stack[1::2][::-1]
    root_dt = np.sqrt(dt)
    out = np.empty((n_paths, sys.n_out))
    for start in range(0, n_paths, _PATH_BATCH):
        stop = min(start + _PATH_BATCH, n_paths)
        dw = np.empty((stop - start, n_steps, noise.n_drive))
        for i in range(start, stop):
            gen = philox_generator(seed, i)
            dw[i - start] = (
                gen.standard_normal((n_steps, noise.n_drive))
                @ noise.w_factor.T
                * root_dt
            )
        out[start:stop] = np.einsum("pkm,kym->py", dw, kernels)
    return out
