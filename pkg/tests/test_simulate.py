"""Simulator tests: determinism, discretization oracles, divergence handling."""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import msslab
from msslab import (
    BadGrid,
    DimensionMismatch,
    InsufficientPaths,
    MidpointNoConvergence,
    NonPositiveDt,
    RealizationRequired,
    SimulationConfig,
)
from msslab.simulate import (
    increment_independence_test,
    open_loop_terminal_samples,
    quadratic_variation,
)
from msslab.system import impulse_response_grid


def scalar_block():
    return msslab.make_state_space([[-1.0]], [[1.0]], [[1.0]])


def noise(s2, w=1.0):
    return msslab.validate_noise([[s2]], [[w]])


class TestConfig:
    def test_grid_properties(self):
        cfg = SimulationConfig(dt=0.25, horizon=2.0, n_paths=3, seed=0)
        assert cfg.n_steps == 8
        assert_allclose(cfg.times, np.arange(9) * 0.25)

    def test_bad_dt(self):
        for dt in (0.0, -1.0, math.nan, math.inf):
            with pytest.raises(NonPositiveDt):
                SimulationConfig(dt=dt, horizon=1.0, n_paths=1, seed=0)

    def test_bad_horizon(self):
        with pytest.raises(BadGrid):
            SimulationConfig(dt=0.1, horizon=-1.0, n_paths=1, seed=0)
        # 1.0 is not a whole number of 0.3 steps
        with pytest.raises(BadGrid):
            SimulationConfig(dt=0.3, horizon=1.0, n_paths=1, seed=0)

    def test_bad_counts_and_names(self):
        with pytest.raises(ValueError):
            SimulationConfig(dt=0.1, horizon=1.0, n_paths=0, seed=0)
        with pytest.raises(ValueError):
            SimulationConfig(
                dt=0.1, horizon=1.0, n_paths=1, seed=0, interpretation="milstein"
            )
        with pytest.raises(ValueError):
            SimulationConfig(dt=0.1, horizon=1.0, n_paths=1, seed=0, scheme="exact")


class TestPathDeterminism:
    CFG = SimulationConfig(dt=0.01, horizon=1.0, n_paths=4, seed=42)

    def test_same_path_index_replays(self):
        p1 = msslab.simulate_path(scalar_block(), noise(0.5), self.CFG, path_index=2)
        p2 = msslab.simulate_path(scalar_block(), noise(0.5), self.CFG, path_index=2)
        assert_array_equal(p1.y, p2.y)
        assert_array_equal(p1.u_increments, p2.u_increments)
        assert_array_equal(p1.r_increments, p2.r_increments)

    def test_distinct_path_indices_differ(self):
        p0 = msslab.simulate_path(scalar_block(), noise(0.5), self.CFG, path_index=0)
        p1 = msslab.simulate_path(scalar_block(), noise(0.5), self.CFG, path_index=1)
        assert np.abs(p0.y - p1.y).max() > 1e-3

    def test_named_entry_points_match_config_dispatch(self):
        ito = msslab.simulate_path_ito(scalar_block(), noise(0.5), self.CFG)
        via_cfg = msslab.simulate_path(scalar_block(), noise(0.5), self.CFG)
        assert_array_equal(ito.y, via_cfg.y)
        scfg = SimulationConfig(
            dt=0.01, horizon=1.0, n_paths=4, seed=42, interpretation="stratonovich"
        )
        strat = msslab.simulate_path_stratonovich(scalar_block(), noise(0.5), self.CFG)
        via_scfg = msslab.simulate_path(scalar_block(), noise(0.5), scfg)
        assert_array_equal(strat.y, via_scfg.y)

    def test_explicit_increments_replay_the_internal_draw(self):
        from msslab.noise import philox_generator
        from msslab.simulate import _draw_path_increments

        gen = philox_generator(self.CFG.seed, 2)
        dgam, dw = _draw_path_increments(noise(0.5), self.CFG.dt, self.CFG.n_steps, gen)
        drawn = msslab.simulate_path(scalar_block(), noise(0.5), self.CFG, path_index=2)
        fed = msslab.simulate_path(
            scalar_block(), noise(0.5), self.CFG, increments=(dgam, dw)
        )
        assert_array_equal(drawn.y, fed.y)
        # 1-d arrays are promoted to single-channel columns
        fed_flat = msslab.simulate_path(
            scalar_block(), noise(0.5), self.CFG, increments=(dgam[:, 0], dw[:, 0])
        )
        assert_array_equal(drawn.y, fed_flat.y)

    def test_wrong_increment_shape_rejected(self):
        bad = np.zeros((self.CFG.n_steps + 3, 1))
        good = np.zeros((self.CFG.n_steps, 1))
        with pytest.raises(DimensionMismatch):
            msslab.simulate_path(
                scalar_block(), noise(0.5), self.CFG, increments=(bad, good)
            )
        with pytest.raises(DimensionMismatch):
            msslab.simulate_path(
                scalar_block(), noise(0.5), self.CFG, increments=(good, bad)
            )

    def test_loop_shape_mismatch_rejected(self):
        two = msslab.validate_noise(np.eye(2), np.eye(2))
        with pytest.raises(DimensionMismatch):
            msslab.simulate_path(scalar_block(), two, self.CFG)
        with pytest.raises(DimensionMismatch):
            msslab.run_ensemble(scalar_block(), two, self.CFG)


class TestSchemes:
    def test_state_vs_convolution_differ_at_order_dt(self):
        # Euler state stepping and the exact-kernel convolution sum are
        # distinct discretizations of the same loop; their paths agree
        # to O(dt) but not exactly.
        for dt in (0.01, 0.005):
            c_state = SimulationConfig(dt=dt, horizon=2.0, n_paths=1, seed=12)
            c_conv = SimulationConfig(
                dt=dt, horizon=2.0, n_paths=1, seed=12, scheme="convolution_sum"
            )
            ps = msslab.simulate_path(scalar_block(), noise(1.0), c_state)
            pc = msslab.simulate_path(scalar_block(), noise(1.0), c_conv)
            sup = float(np.abs(ps.y - pc.y).max())
            assert dt / 20 < sup < 3 * dt

    def test_sampled_kernel_matches_state_space_convolution(self):
        cfg = SimulationConfig(
            dt=0.02, horizon=1.0, n_paths=1, seed=8, scheme="convolution_sum"
        )
        kernel = impulse_response_grid(scalar_block(), cfg.dt, cfg.n_steps + 1)
        sampled = msslab.make_sampled(cfg.dt, kernel)
        p_ss = msslab.simulate_path(scalar_block(), noise(0.5), cfg)
        p_sa = msslab.simulate_path(sampled, noise(0.5), cfg)
        assert_array_equal(p_ss.y, p_sa.y)

    def test_sampled_kernel_requires_convolution_scheme(self):
        cfg = SimulationConfig(dt=0.02, horizon=1.0, n_paths=2, seed=8)
        kernel = impulse_response_grid(scalar_block(), cfg.dt, cfg.n_steps + 1)
        sampled = msslab.make_sampled(cfg.dt, kernel)
        with pytest.raises(RealizationRequired):
            msslab.simulate_path(sampled, noise(0.5), cfg)
        with pytest.raises(RealizationRequired):
            msslab.run_ensemble(sampled, noise(0.5), cfg)


class TestEnsembleStats:
    def test_matches_per_path_simulation(self):
        cfg = SimulationConfig(dt=0.01, horizon=1.0, n_paths=7, seed=3)
        ens = msslab.run_ensemble(scalar_block(), noise(0.8), cfg)
        ys = np.stack(
            [
                msslab.simulate_path(scalar_block(), noise(0.8), cfg, path_index=i).y[
                    :, 0
                ]
                for i in range(7)
            ]
        )
        assert_allclose(ens.var_y, (ys**2).mean(axis=0), rtol=1e-12)
        # stderr of the mean of y^2, not of y
        se = np.std(ys**2, axis=0, ddof=1) / math.sqrt(7)
        assert_allclose(ens.stderr_y[1:], se[1:], rtol=1e-10)
        assert ens.stderr_y[0] == 0.0
        assert ens.diagnostics["stderr_defined"]

    def test_single_path_ensemble(self):
        cfg = SimulationConfig(dt=0.01, horizon=1.0, n_paths=1, seed=3)
        ens = msslab.run_ensemble(scalar_block(), noise(0.8), cfg)
        path = msslab.simulate_path(scalar_block(), noise(0.8), cfg, path_index=0)
        assert_allclose(ens.var_y, path.y[:, 0] ** 2, rtol=1e-12)
        assert np.isnan(ens.stderr_y).all()
        assert not ens.diagnostics["stderr_defined"]

    def test_stationary_variance_of_the_euler_chain(self):
        # the driven Euler chain equilibrates at W / (2 - dt - s2), not
        # at the continuum value W / (2 - s2)
        dt, s2 = 0.05, 0.5
        cfg = SimulationConfig(dt=dt, horizon=10.0, n_paths=4000, seed=11)
        ens = msslab.run_ensemble(scalar_block(), noise(s2), cfg)
        target = 1.0 / (2.0 - dt - s2)
        assert abs(ens.var_y[-1] - target) < 4.0 * ens.stderr_y[-1]

    def test_quadratic_variation_tracks_injected_power(self):
        # E<y>(T) for the Euler chain is sum_k (W + s2 v_k) dt + dt^2 v_k
        # with v_k the exact chain second moment
        dt, s2 = 0.01, 0.5
        cfg = SimulationConfig(dt=dt, horizon=5.0, n_paths=2000, seed=5)
        ens = msslab.run_ensemble(scalar_block(), noise(s2), cfg)
        v, pred = 0.0, 0.0
        decay = (1.0 - dt) ** 2 + s2 * dt
        for _ in range(cfg.n_steps):
            pred += dt * dt * v + (1.0 + s2 * v) * dt
            v = decay * v + dt
        assert abs(ens.qv_y[-1] / pred - 1.0) < 0.03

    def test_input_increment_power(self):
        # var_u_increments estimates (W + s2 v_k), measured per unit time
        dt, s2 = 0.05, 0.5
        cfg = SimulationConfig(dt=dt, horizon=10.0, n_paths=4000, seed=11)
        ens = msslab.run_ensemble(scalar_block(), noise(s2), cfg)
        target = 1.0 + s2 / (2.0 - dt - s2)
        tail = ens.var_u_increments[-50:].mean()
        assert abs(tail - target) < 0.05 * target


class TestWorkers:
    CFG = SimulationConfig(dt=0.01, horizon=1.0, n_paths=32, seed=1)

    def test_worker_count_does_not_change_results(self):
        base = msslab.run_ensemble(scalar_block(), noise(0.5), self.CFG, max_workers=1)
        multi = msslab.run_ensemble(scalar_block(), noise(0.5), self.CFG, max_workers=3)
        assert_array_equal(base.var_y, multi.var_y)
        assert_array_equal(base.stderr_y, multi.stderr_y)
        assert_array_equal(base.qv_y, multi.qv_y)

    def test_env_thread_count_does_not_change_results(self, monkeypatch):
        monkeypatch.setenv("MSSLAB_THREADS", "1")
        one = msslab.run_ensemble(scalar_block(), noise(0.5), self.CFG)
        monkeypatch.setenv("MSSLAB_THREADS", "4")
        four = msslab.run_ensemble(scalar_block(), noise(0.5), self.CFG)
        assert_array_equal(one.var_y, four.var_y)
        assert_array_equal(one.stderr_y, four.stderr_y)

    def test_bad_worker_settings(self, monkeypatch):
        monkeypatch.setenv("MSSLAB_THREADS", "lots")
        with pytest.raises(ValueError):
            msslab.run_ensemble(scalar_block(), noise(0.5), self.CFG)
        monkeypatch.delenv("MSSLAB_THREADS")
        with pytest.raises(ValueError):
            msslab.run_ensemble(scalar_block(), noise(0.5), self.CFG, max_workers=-1)


class TestQuadraticVariationHelper:
    def test_wiener_increments_accumulate_t(self):
        cfg = SimulationConfig(dt=1e-4, horizon=1.0, n_paths=1, seed=3)
        path = msslab.simulate_path(scalar_block(), noise(0.0), cfg)
        qv_u = float(np.sum(path.u_increments**2))
        assert abs(qv_u - 1.0) < 4.0 * math.sqrt(2.0 * 1.0 * 1e-4)

    def test_smooth_path_vanishes(self):
        t = np.linspace(0.0, 1.0, 1001)
        qv = quadratic_variation(np.sin(t))
        assert qv[0] == 0.0
        assert np.all(np.diff(qv) >= 0.0)
        assert qv[-1] < 2e-3

    def test_shapes(self):
        qv = quadratic_variation(np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]]))
        assert_allclose(qv, [0.0, 2.0, 2.0])
        with pytest.raises(DimensionMismatch):
            quadratic_variation(np.zeros((2, 2, 2)))


class TestDivergence:
    BLOCK = msslab.make_state_space([[200.0]], [[1.0]], [[1.0]])
    CFG = SimulationConfig(dt=0.1, horizon=20.0, n_paths=50, seed=4)

    def test_path_flags_and_truncates(self):
        path = msslab.simulate_path(self.BLOCK, noise(1.0), self.CFG)
        assert path.diverged
        assert path.diverged_at is not None
        assert np.isfinite(path.y[: path.diverged_at]).all()
        assert np.isnan(path.y[path.diverged_at :]).all()

    def test_ensemble_excludes_dead_paths(self):
        ens = msslab.run_ensemble(self.BLOCK, noise(1.0), self.CFG, record_increments=True)
        assert ens.n_diverged[0] == 0
        assert ens.n_diverged[-1] == 50
        assert np.all(np.diff(ens.n_diverged) >= 0)
        alive = 50 - ens.n_diverged
        assert np.isfinite(ens.var_y[alive > 0]).all()
        assert np.isnan(ens.var_y[alive == 0]).all()

    def test_recorded_increments_freeze_after_death(self):
        ens = msslab.run_ensemble(self.BLOCK, noise(1.0), self.CFG, record_increments=True)
        path = msslab.simulate_path(self.BLOCK, noise(1.0), self.CFG, path_index=0)
        k = path.diverged_at
        assert np.any(ens.r_paths[0, k - 1] != 0.0)
        assert np.all(ens.r_paths[0, k:] == 0.0)
        assert np.all(ens.u_paths[0, k:] == 0.0)

    def test_stable_run_has_no_divergence(self):
        cfg = SimulationConfig(dt=0.01, horizon=1.0, n_paths=20, seed=0)
        ens = msslab.run_ensemble(scalar_block(), noise(0.5), cfg)
        assert ens.n_diverged[-1] == 0


class TestMidpointSolve:
    def test_no_convergence_at_huge_gain(self):
        # dt * s2 large makes the fixed-point map expansive
        cfg = SimulationConfig(
            dt=0.05, horizon=1.0, n_paths=1, seed=0, interpretation="stratonovich"
        )
        with pytest.raises(MidpointNoConvergence):
            msslab.simulate_path(scalar_block(), noise(400.0), cfg)

    def test_zero_gain_midpoint_equals_ito(self):
        ito = SimulationConfig(dt=0.01, horizon=1.0, n_paths=1, seed=6)
        strat = SimulationConfig(
            dt=0.01, horizon=1.0, n_paths=1, seed=6, interpretation="stratonovich"
        )
        pi = msslab.simulate_path(scalar_block(), noise(0.0), ito)
        ps = msslab.simulate_path(scalar_block(), noise(0.0), strat)
        assert_array_equal(pi.y, ps.y)


class TestRecording:
    def test_shapes_and_diagnostics(self):
        cfg = SimulationConfig(dt=0.01, horizon=1.0, n_paths=120, seed=2)
        ens = msslab.run_ensemble(scalar_block(), noise(0.5), cfg, record_increments=True)
        assert ens.r_paths.shape == (120, 100, 1)
        assert ens.u_paths.shape == (120, 100, 1)
        assert ens.diagnostics["increments_recorded"]
        assert "r_max_abs_corr" in ens.diagnostics
        assert ens.diagnostics["r_max_abs_corr"] < 5.0 / math.sqrt(120)

    def test_not_recorded_by_default(self):
        cfg = SimulationConfig(dt=0.1, horizon=1.0, n_paths=3, seed=2)
        ens = msslab.run_ensemble(scalar_block(), noise(0.5), cfg)
        assert ens.r_paths is None
        assert ens.u_paths is None
        assert not ens.diagnostics["increments_recorded"]

    def test_size_guard(self):
        cfg = SimulationConfig(dt=1e-3, horizon=1.0, n_paths=1_000_000, seed=0)
        with pytest.raises(ValueError, match="GB"):
            msslab.run_ensemble(
                scalar_block(), noise(0.5), cfg, record_increments=True
            )


class TestIndependenceTest:
    def test_needs_enough_paths(self):
        with pytest.raises(InsufficientPaths):
            increment_independence_test(np.zeros((50, 10)))

    def test_lag_bounds(self):
        arr = np.random.default_rng(0).standard_normal((200, 5))
        with pytest.raises(ValueError):
            increment_independence_test(arr, max_lag=0)
        with pytest.raises(ValueError):
            increment_independence_test(arr, max_lag=5)
        with pytest.raises(DimensionMismatch):
            increment_independence_test(np.zeros((200, 5, 1, 1)))

    def test_iid_input_stays_under_bound(self):
        arr = np.random.default_rng(0).standard_normal((10_000, 100))
        report = increment_independence_test(arr, max_lag=10)
        assert report.per_lag.shape == (10,)
        assert report.max_abs_corr == report.per_lag.max()
        assert report.max_abs_corr < 5.0 / math.sqrt(10_000)

    def test_detects_repeated_increments(self):
        rng = np.random.default_rng(9)
        dep = np.repeat(rng.standard_normal((500, 1)), 20, axis=1)
        report = increment_independence_test(dep, max_lag=3)
        assert report.max_abs_corr > 5.0 / math.sqrt(500)

    def test_degenerate_cells_count_as_zero(self):
        report = increment_independence_test(np.zeros((200, 6)), max_lag=2)
        assert report.max_abs_corr == 0.0


class TestOpenLoopTerminalSamples:
    T, DT, P = 2.0, 0.01, 20_000

    def oracle(self, node):
        # exact variance of the discrete convolution of iid Wiener steps
        j = np.arange(1, round(self.T / self.DT) + 1)
        shift = 0.5 if node == "midpoint" else 0.0
        return float(np.sum(np.exp(-2.0 * (j - shift) * self.DT)) * self.DT)

    def test_matches_exact_discrete_variance(self):
        for node in ("left", "midpoint"):
            y = open_loop_terminal_samples(
                scalar_block(), noise(0.0), self.T, self.DT, self.P, 21, node
            )
            target = self.oracle(node)
            se = target * math.sqrt(2.0 / (self.P - 1))
            assert abs(float(np.var(y)) - target) < 4.0 * se

    def test_same_seed_couples_the_nodes(self):
        yl = open_loop_terminal_samples(
            scalar_block(), noise(0.0), self.T, self.DT, self.P, 21, "left"
        )
        ym = open_loop_terminal_samples(
            scalar_block(), noise(0.0), self.T, self.DT, self.P, 21, "midpoint"
        )
        assert np.corrcoef(yl[:, 0], ym[:, 0])[0, 1] > 0.999

    def test_bad_node_name(self):
        with pytest.raises(ValueError):
            open_loop_terminal_samples(
                scalar_block(), noise(0.0), 1.0, 0.1, 10, 0, "right"
            )
