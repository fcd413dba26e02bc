import numpy as np
import pytest

from rangeloc.dataset import FrameVector, Layout
from rangeloc.geometry import AnchorParams, TagMount, Vec3
from rangeloc.go import (
    GoConfig,
    SingularGeometryError,
    huber_rho,
    huber_weight,
    residual,
    residual_jacobian,
    run_go_pipeline,
    solve_window,
)
from rangeloc.sim import (
    Box,
    Environment,
    NoiseModel,
    TrialData,
    generate_trajectory,
    gt_labels,
    sample_measurements,
)

ANCHORS = [
    AnchorParams(0, Vec3(0, 0, 0)),
    AnchorParams(1, Vec3(10, 0, 0)),
    AnchorParams(2, Vec3(0, 10, 0)),
    AnchorParams(3, Vec3(0, 0, 10)),
]
LAYOUT1 = Layout((0,), (0, 1, 2, 3))


def frames_for_position(p, anchors=ANCHORS, n_frames=6, layout=LAYOUT1):
    p = np.asarray(p, dtype=float)
    values = np.zeros(layout.input_dim)
    for ai, a in enumerate(anchors):
        values[layout.slot(0, a.anchor_id)] = np.linalg.norm(p - a.position.to_array()) * a.scale + a.bias
    return [FrameVector(0.05 * k, values.copy()) for k in range(n_frames)]


class TestResidual:
    def test_noise_free_zero(self):
        a = AnchorParams(0, Vec3(3, 4, 0), scale=1.2, bias=0.3)
        p = np.array([0.0, 0.0, 0.0])
        meas = 1.2 * 5.0 + 0.3
        assert residual(p, meas, a) == pytest.approx(0.0, abs=1e-12)

    def test_at_anchor_equals_meas_minus_bias(self):
        a = AnchorParams(0, Vec3(1, 2, 3), bias=0.4)
        assert residual(np.array([1.0, 2, 3]), 7.0, a) == pytest.approx(7.0 - 0.4)

    def test_random_geometry_matches_formula(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = rng.uniform(-20, 20, 3)
            ap = rng.uniform(-20, 20, 3)
            s, b = rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5)
            meas = rng.uniform(0.1, 50)
            a = AnchorParams(0, Vec3.from_array(ap), s, b)
            want = meas - (s * np.linalg.norm(p - ap) + b)
            assert residual(p, meas, a) == pytest.approx(want, abs=1e-12)


class TestResidualJacobian:
    def test_on_x_axis(self):
        a = AnchorParams(0, Vec3(0, 0, 0), scale=1.3)
        g = residual_jacobian(np.array([5.0, 0, 0]), a)
        assert np.allclose(g, [-1.3, 0, 0], atol=1e-12)

    def test_gradient_norm_equals_scale(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = AnchorParams(0, Vec3.from_array(rng.uniform(-5, 5, 3)), scale=rng.uniform(0.5, 2))
            p = a.position.to_array() + rng.normal(size=3)
            assert np.linalg.norm(residual_jacobian(p, a)) == pytest.approx(a.scale, abs=1e-12)

    def test_matches_central_differences(self):
        rng = np.random.default_rng(4)
        h = 1e-6
        for _ in range(1000):
            a = AnchorParams(
                0, Vec3.from_array(rng.uniform(-10, 10, 3)),
                scale=rng.uniform(0.5, 1.5), bias=rng.uniform(-0.5, 0.5)
            )
            p = rng.uniform(-10, 10, 3)
            if np.linalg.norm(p - a.position.to_array()) < 0.1:
                continue
            meas = rng.uniform(1, 30)
            g = residual_jacobian(p, a)
            fd = np.empty(3)
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd[k] = (residual(p + e, meas, a) - residual(p - e, meas, a)) / (2 * h)
            assert np.allclose(g, fd, atol=1e-6)

    def test_singularity_guarded(self):
        a = AnchorParams(0, Vec3(0, 0, 0))
        with pytest.raises(SingularGeometryError):
            residual_jacobian(np.array([0.0, 0.0, 0.0]), a)


class TestHuber:
    def test_unit_weight_inside(self):
        assert huber_weight(0.0, 0.5) == 1.0
        assert huber_weight(0.5, 0.5) == 1.0

    def test_half_weight_at_twice_delta(self):
        assert huber_weight(1.0, 0.5) == pytest.approx(0.5)
        assert huber_weight(-1.0, 0.5) == pytest.approx(0.5)

    def test_irls_fix            (self):
        # 1-D toy: argmin_x sum rho(y_i - x) via IRLS equals direct grid minimization
        rng = np.random.default_rng(5)
        y = np.concatenate([rng.normal(0, 0.1, 40), [8.0, -9.0]])  # two gross outliers
        delta = 0.5
        x = float(np.mean(y))
        for _ in range(200):
            w = np.array([huber_weight(float(v - x), delta) for v in y])
            x = float(np.sum(w * y) / np.sum(w))
        grid = np.linspace(-2, 2, 400001)
        costs = huber_rho(y[None, :] - grid[:, None], delta).sum(axis=1)
        x_grid = grid[np.argmin(costs)]
        assert abs(x - x_grid) < 1e-4

    def test_rho_piecewise_definition_on_grid(self):
        rs = np.linspace(-3, 3, 601)
        delta = 0.5
        got = huber_rho(rs, delta)
        want = np.where(np.abs(rs) <= delta, 0.5 * rs**2, delta * (np.abs(rs) - delta / 2))
        assert np.allclose(got, want, atol=1e-12)


class TestSolveWindow:
    CFG = GoConfig(window_frames=6, huber_delta=0.5, motion_sigma=0.05)

    def test_noise_free_static_recovery(self):
        frames = frames_for_position([2.0, 3.0, 4.0])
        sol = solve_window(frames, LAYOUT1, ANCHORS, self.CFG)
        assert sol.converged
        assert np.allclose(sol.positions, [2, 3, 4], atol=1e-6)

    def test_multistart_uniqueness(self):
        frames = frames_for_position([2.0, 3.0, 4.0])
        rng = np.random.default_rng(6)
        for _ in range(5):
            init = rng.uniform(0, 8, size=(6, 1, 3))
            sol = solve_window(frames, LAYOUT1, ANCHORS, self.CFG, init=init)
            assert np.allclose(sol.positions, [2, 3, 4], atol=1e-5)

    def test_cost_never_increases_on_accepted_steps(self):
        frames = frames_for_position([2.0, 3.0, 4.0])
        sol = solve_window(frames, LAYOUT1, ANCHORS, self.CFG)
        trace = np.array(sol.cost_trace)
        assert np.all(np.diff(trace) <= 0)

    def test_single_anchor_low_observability(self):
        values = np.zeros(LAYOUT1.input_dim)
        values[LAYOUT1.slot(0, 0)] = 5.0
        frames = [FrameVector(0.05 * k, values.copy()) for k in range(6)]
        sol = solve_window(frames, LAYOUT1, ANCHORS, self.CFG)
        assert sol.converged
        assert sol.low_observability
        # lands on the range sphere of the observed anchor
        d = np.linalg.norm(sol.positions[0] - ANCHORS[0].position.to_array())
        assert d == pytest.approx(5.0, abs=1e-3)

    def test_outlier_moves_solution_less_than_5cm(self):
        # default-size window, outlier in an interior frame (window edges are
        # only weakly tied by the motion prior and measure a boundary effect,
        # not the kernel's influence bound)
        frames = frames_for_position([2.0, 3.0, 4.0], n_frames=20)
        clean = solve_window(frames, LAYOUT1, ANCHORS, self.CFG)
        dirty = [FrameVector(f.stamp, f.values.copy()) for f in frames]
        dirty[10].values[LAYOUT1.slot(0, 1)] += 50.0
        robust = solve_window(dirty, LAYOUT1, ANCHORS, self.CFG)
        shift = np.max(np.linalg.norm(robust.positions - clean.positions, axis=1))
        assert shift < 0.05

    def test_no_measurements_rejected(self):
        frames = [FrameVector(0.05 * k, np.zeros(LAYOUT1.input_dim)) for k in range(6)]
        with pytest.raises(ValueError, match="no measurements"):
            solve_window(frames, LAYOUT1, ANCHORS, self.CFG)

    def test_exactness_sweep_100_positions(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = rng.uniform(1, 9, size=3)
            frames = frames_for_position(p)
            sol = solve_window(frames, LAYOUT1, ANCHORS, self.CFG)
            assert sol.converged
            assert np.allclose(sol.positions, p, atol=1e-6)

    def test_dual_tag_rigid_link(self):
        layout2 = Layout((0, 1), (0, 1, 2, 3))
        p0 = np.array([2.0, 3.0, 4.0])
        p1 = np.array([2.6, 3.0, 4.0])
        values = np.zeros(layout2.input_dim)
        for a in ANCHORS:
            values[layout2.slot(0, a.anchor_id)] = np.linalg.norm(p0 - a.position.to_array())
            values[layout2.slot(1, a.anchor_id)] = np.linalg.norm(p1 - a.position.to_array())
        frames = [FrameVector(0.05 * k, values.copy()) for k in range(6)]
        cfg = GoConfig(window_frames=6, rigid_distance=0.6)
        sol = solve_window(frames, layout2, ANCHORS, cfg)
        assert np.allclose(sol.tag_positions[0], p0, atol=1e-5)
        assert np.allclose(sol.tag_positions[1], p1, atol=1e-5)


class TestRunGoPipeline:
    def make_trial(self, noise=None, seed=3):
        bounds = Box((0, 0, 0), (40, 30, 8))
        anchors = (
            AnchorParams(0, Vec3(1, 1, 1)),
            AnchorParams(1, Vec3(39, 1, 5)),
            AnchorParams(2, Vec3(39, 29, 2)),
            AnchorParams(3, Vec3(1, 29, 6)),
            AnchorParams(4, Vec3(20, 15, 7)),
        )
        env = Environment(bounds, anchors)
        mounts = [TagMount(0, Vec3(0.3, 0, 0)), TagMount(1, Vec3(-0.3, 0, 0))]
        # slow vehicle: within-bin motion must stay below the exactness bar
        traj = generate_trajectory(Box((2, 2, 1), (38, 28, 2)), 3, 0.25, 0.1,
                                   seed=seed, max_duration_s=20)
        noise = noise or NoiseModel(sigma_range=0.0)
        recs = sample_measurements(env, traj, noise, 20.0, mounts, seed=seed)
        gt = gt_labels(traj, mounts)
        return TrialData("t00", env, mounts, recs, gt, gt), list(anchors)

    def test_clean_scenario_subcentimeter(self):
        trial, anchors = self.make_trial()
        cfg = GoConfig(window_frames=20, motion_sigma=0.05)
        out = run_go_pipeline(trial, anchors, cfg)
        assert out.rmse < 0.01

    def test_empty_trial_rejected(self):
        trial, anchors = self.make_trial()
        trial.records = []
        with pytest.raises(ValueError, match="no measurements"):
            run_go_pipeline(trial, anchors, GoConfig())

    def test_estimates_aligned_to_bin_stamps(self):
        trial, anchors = self.make_trial()
        out = run_go_pipeline(trial, anchors, GoConfig(window_frames=20))
        assert len(out.stamps) == len(out.positions)
        assert np.all(np.diff(out.stamps) > 0)
