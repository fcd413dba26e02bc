import math

import numpy as np
import pytest

import rangeloc.autodiff as ad
from rangeloc.autodiff import Tensor, backward, gradcheck, tensor
from rangeloc.dataset import TrialWindows, WindowedDataset
from rangeloc.models import (
    MambaConfig,
    MambaModel,
    RnnConfig,
    RnnModel,
    TrainConfig,
    TrainingDiverged,
    build_model,
    discretize,
    mse_loss,
    predict_trajectory,
    selective_scan,
    selective_scan_ref,
    train_model,
    train_repeats,
)

TINY = MambaConfig(input_dim=4, label_dim=3, S=6, d_model=8, n_blocks=2,
                   d_state=4, expand=2, conv_width=4)


def rand_scan_inputs(rng, B, S, D, N):
    u = rng.normal(size=(B, S, D))
    delta = rng.uniform(0.01, 0.5, size=(B, S, D))
    a = -rng.uniform(0.2, 3.0, size=(D, N))
    b_t = rng.normal(size=(B, S, N))
    c_t = rng.normal(size=(B, S, N))
    d_skip = rng.normal(size=(D,))
    return u, delta, a, b_t, c_t, d_skip


class TestDiscretize:
    def test_closed_form_at_log_two(self):
        a_bar, b_bar = discretize(math.log(2.0), -1.0, 1.0)
        assert float(a_bar) == pytest.approx(0.5, abs=1e-15)
        assert float(b_bar) == pytest.approx(0.5, abs=1e-15)

    def test_first_order_series_small_delta(self):
        rng = np.random.default_rng(1)
        a = -rng.uniform(0.1, 5.0, size=(8, 4))
        b = rng.normal(size=(8, 4))
        delta = 1e-8
        a_bar, b_bar = discretize(delta, a, b)
        assert np.max(np.abs(a_bar - (1.0 + delta * a))) < 1e-12
        assert np.max(np.abs(b_bar - delta * b)) < 1e-12

    def test_a_bar_in_unit_interval(self):
        rng = np.random.default_rng(2)
        a = -np.exp(rng.normal(size=100_000))
        delta = np.exp(rng.normal(size=100_000))
        a_bar, _ = discretize(delta, a, np.ones(100_000))
        assert np.all((a_bar > 0) & (a_bar < 1))


class TestSelectiveScan:
    def test_single_step_closed_form(self):
        rng = np.random.default_rng(3)
        u, delta, a, b_t, c_t, d_skip = rand_scan_inputs(rng, 2, 1, 3, 4)
        y = selective_scan(tensor(u), tensor(delta), tensor(a), tensor(b_t),
                           tensor(c_t), tensor(d_skip)).data
        a_bar, b_bar = discretize(delta[:, 0, :, None], a, b_t[:, 0, None, :])
        h1 = b_bar * u[:, 0, :, None]
        want = np.einsum("bdn,bn->bd", h1, c_t[:, 0]) + d_skip * u[:, 0]
        assert np.allclose(y[:, 0], want, atol=1e-12)

    def test_three_step_hand_unrolled(self):
        rng = np.random.default_rng(4)
        u, delta, a, b_t, c_t, d_skip = rand_scan_inputs(rng, 1, 3, 2, 3)
        y = selective_scan(tensor(u), tensor(delta), tensor(a), tensor(b_t),
                           tensor(c_t), tensor(d_skip)).data
        ab, bb = zip(*(discretize(delta[:, t, :, None], a, b_t[:, t, None, :])
                       for t in range(3)))
        x = [bb[t] * u[:, t, :, None] for t in range(3)]
        h3 = ab[2] * (ab[1] * x[0] + x[1]) + x[2]
        want = np.einsum("bdn,bn->bd", h3, c_t[:, 2]) + d_skip * u[:, 2]
        assert np.allclose(y[:, 2], want, atol=1e-12)

    def test_matches_naive_loop_100_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            B = int(rng.integers(1, 4))
            S = int(rng.integers(1, 65))
            D = int(rng.integers(1, 9))
            N = int(rng.integers(1, 33))
            u, delta, a, b_t, c_t, d_skip = rand_scan_inputs(rng, B, S, D, N)
            fast = selective_scan(tensor(u), tensor(delta), tensor(a), tensor(b_t),
                                  tensor(c_t), tensor(d_skip)).data
            ref = selective_scan_ref(u, delta, a, b_t, c_t, d_skip)
            assert np.max(np.abs(fast - ref)) < 1e-10

    def test_near_zero_decay_is_memoryless(self):
        rng = np.random.default_rng(6)
        u, delta, a, b_t, c_t, d_skip = rand_scan_inputs(rng, 1, 4, 2, 3)
        a = np.full_like(a, -1e6)  # a_bar ~ 0
        base = selective_scan(tensor(u), tensor(delta), tensor(a), tensor(b_t),
                              tensor(c_t), tensor(d_skip)).data
        u2 = u.copy()
        u2[:, 0] += 10.0
        bumped = selective_scan(tensor(u2), tensor(delta), tensor(a), tensor(b_t),
                                tensor(c_t), tensor(d_skip)).data
        assert np.allclose(base[:, 1:], bumped[:, 1:], atol=1e-12)
        assert not np.allclose(base[:, 0], bumped[:, 0])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        u, delta, a, b_t, c_t, d_skip = rand_scan_inputs(rng, 1, 4, 2, 3)
        ts = [Tensor(v, requires_grad=True) for v in (u, delta, a, b_t, c_t, d_skip)]
        w = rng.normal(size=(1, 4, 2))
        err = gradcheck(
            lambda: ad.reduce_sum(selective_scan(*ts) * tensor(w)), ts
        )
        assert err < 1e-5


class TestEmbed:
    def test_zero_weights_zero_output(self):
        m = MambaModel(TINY, seed=0)
        m.params["embed/w"].data[:] = 0
        m.params["embed/b"].data[:] = 0
        m.params["embed/pos"].data[:] = 0
        out = m.embed(tensor(np.random.default_rng(0).normal(size=(2, 6, 4))))
        assert np.all(out.data == 0)

    def test_identity_projection_passthrough(self):
        m = MambaModel(TINY, seed=0)
        m.params["embed/w"].data[:] = 0
        m.params["embed/w"].data[:4, :4] = np.eye(4)
        m.params["embed/b"].data[:] = 0
        m.params["embed/pos"].data[:] = 0
        x = np.random.default_rng(1).normal(size=(2, 6, 4))
        out = m.embed(tensor(x))
        assert np.allclose(out.data[:, :, :4], x)
        assert np.all(out.data[:, :, 4:] == 0)

    def test_wrong_window_length_rejected(self):
        m = MambaModel(TINY, seed=0)
        with pytest.raises(ad.ShapeError, match="window length"):
            m.embed(tensor(np.zeros((1, 5, 4))))

    def test_position_table_gradient_sums_over_batch(self):
        m = MambaModel(TINY, seed=0)
        x = np.random.default_rng(2).normal(size=(3, 6, 4))
        w = np.random.default_rng(3).normal(size=(3, 6, 8))
        pos = m.params["embed/pos"]
        err = gradcheck(lambda: ad.reduce_sum(m.embed(tensor(x)) * tensor(w)), [pos])
        assert err < 1e-5
        ad.zero_grads([pos])
        backward(ad.reduce_sum(m.embed(tensor(x)) * tensor(w)))
        assert np.allclose(pos.grad, w.sum(axis=0), atol=1e-12)


class TestMambaBlock:
    def test_zero_out_projection_is_identity(self):
        m = MambaModel(TINY, seed=1)
        m.params["block0/out_w"].data[:] = 0
        x = np.random.default_rng(4).normal(size=(2, 6, 8))
        out = m.block(0, tensor(x))
        assert np.array_equal(out.data, x)

    def test_causality_perturbation_sweep(self):
        m = MambaModel(TINY, seed=2)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 6, 4))
        base = m.forward(x).data
        for t in range(6):
            bumped = x.copy()
            bumped[0, t] += 1.0
            out = m.forward(bumped).data
            if t > 0:
                assert np.array_equal(out[:, :t], base[:, :t])
            assert not np.allclose(out[:, t], base[:, t])

    def test_conv_disabled_still_differentiable(self):
        cfg = MambaConfig(input_dim=3, label_dim=2, S=4, d_model=6, n_blocks=1,
                          d_state=3, conv_width=0)
        m = MambaModel(cfg, seed=3)
        x = np.random.default_rng(6).normal(size=(2, 4, 3))
        w = np.random.default_rng(7).normal(size=(2, 4, 2))
        params = m.parameters()
        err = gradcheck(
            lambda: ad.reduce_sum(m.forward(x) * tensor(w)),
            params, max_coords=6, rng=np.random.default_rng(0),
        )
        assert err < 1e-4

    def test_debug_mode_checks_decay_range(self):
        m = MambaModel(TINY, seed=4)
        m.debug = True
        m.forward(np.random.default_rng(8).normal(size=(1, 6, 4)))  # should not raise


class TestMambaForward:
    def test_deterministic(self):
        m = MambaModel(TINY, seed=5)
        x = np.random.default_rng(9).normal(size=(2, 6, 4))
        assert np.array_equal(m.forward(x).data, m.forward(x).data)

    def test_output_shape(self):
        cfg = MambaConfig(input_dim=20, label_dim=6, S=10, d_model=16,
                          n_blocks=2, d_state=4)
        m = MambaModel(cfg, seed=6)
        out = m.forward(np.zeros((3, 10, 20)))
        assert out.shape == (3, 10, 6)

    def test_default_param_count_below_bilstm(self):
        mamba = MambaModel(MambaConfig(input_dim=20, label_dim=6, S=100), seed=0)
        bilstm = RnnModel(RnnConfig("bilstm", input_dim=20, label_dim=6), seed=0)
        assert mamba.param_count() < bilstm.param_count()

    def test_end_to_end_gradcheck_miniature(self):
        cfg = MambaConfig(input_dim=3, label_dim=2, S=5, d_model=8, n_blocks=2,
                          d_state=4)
        m = MambaModel(cfg, seed=7)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 5, 3))
        y = rng.normal(size=(2, 5, 2))
        err = gradcheck(
            lambda: mse_loss(m.forward(x), y),
            m.parameters(), max_coords=4, rng=np.random.default_rng(1),
        )
        assert err < 1e-4


class TestRnn:
    def test_zero_lstm_outputs_zero(self):
        m = RnnModel(RnnConfig("lstm", input_dim=3, label_dim=2, hidden_size=5,
                               n_layers=1), seed=0)
        for p in m.parameters():
            p.data[:] = 0
        out = m.forward(np.random.default_rng(0).normal(size=(2, 4, 3)))
        assert np.all(out.data == 0)

    def test_gru_single_step_hand_oracle(self):
        cfg = RnnConfig("gru", input_dim=2, label_dim=1, hidden_size=3, n_layers=1)
        m = RnnModel(cfg, seed=1)
        x = np.random.default_rng(1).normal(size=(1, 1, 2))
        H = 3
        wx, wh = m.params["l0f/wx"].data, m.params["l0f/wh"].data
        bx, bh = m.params["l0f/bx"].data, m.params["l0f/bh"].data
        gx = x[0, 0] @ wx + bx
        gh = np.zeros(3 * H) + bh  # h0 = 0
        sig = lambda v: 1 / (1 + np.exp(-v))
        r = sig(gx[0:H] + gh[0:H])
        z = sig(gx[H : 2 * H] + gh[H : 2 * H])
        n = np.tanh(gx[2 * H :] + r * gh[2 * H :])
        h = (1 - z) * n  # + z * 0
        want = h @ m.params["head/w"].data + m.params["head/b"].data
        got = m.forward(x).data[0, 0]
        assert np.allclose(got, want, atol=1e-12)

    def test_lstm_causal_bilstm_not(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 5, 3))
        bump = x.copy()
        bump[0, 4] += 1.0  # change only the last step
        lstm = RnnModel(RnnConfig("lstm", 3, 2, hidden_size=4, n_layers=1), seed=2)
        a, b = lstm.forward(x).data, lstm.forward(bump).data
        assert np.array_equal(a[:, :4], b[:, :4])
        bi = RnnModel(RnnConfig("bilstm", 3, 2, hidden_size=4, n_layers=1), seed=2)
        a, b = bi.forward(x).data, bi.forward(bump).data
        assert not np.allclose(a[:, 0], b[:, 0])  # future leaks backward

    def test_gradcheck_cells(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 2))
        w = rng.normal(size=(2, 3, 2))
        for cell in ("gru", "lstm", "bilstm"):
            m = RnnModel(RnnConfig(cell, 2, 2, hidden_size=3, n_layers=2), seed=3)
            err = gradcheck(
                lambda: ad.reduce_sum(m.forward(x) * tensor(w)),
                m.parameters(), max_coords=4, rng=np.random.default_rng(4),
            )
            assert err < 1e-4, cell


class TestMseLoss:
    def test_zero_for_equal(self):
        y = tensor(np.ones((2, 3, 4)))
        assert float(mse_loss(y, np.ones((2, 3, 4))).data) == 0.0

    def test_constant_error(self):
        p = tensor(np.full((2, 3), 1.5))
        assert float(mse_loss(p, np.zeros((2, 3))).data) == pytest.approx(2.25)

    def test_gradient_formula(self):
        rng = np.random.default_rng(5)
        pred = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        targ = rng.normal(size=(2, 3, 4))
        backward(mse_loss(pred, targ))
        want = 2.0 * (pred.data - targ) / pred.data.size
        assert np.allclose(pred.grad, want, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            mse_loss(tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def tiny_dataset(rng, n_frames=40, S=6, input_dim=4, label_dim=3):
    frames = rng.uniform(0, 1, size=(n_frames, input_dim))
    w = rng.normal(size=(input_dim, label_dim))
    labels = frames @ w + 0.1 * rng.normal(size=(n_frames, label_dim))
    tw = TrialWindows("t0", np.arange(n_frames) * 0.05, frames, labels)
    return WindowedDataset(S, [tw])


class TestTraining:
    def test_loss_decreases_and_curve_recorded(self):
        rng = np.random.default_rng(6)
        ds = tiny_dataset(rng)
        m = MambaModel(MambaConfig(4, 3, 6, d_model=8, n_blocks=1, d_state=4), seed=1)
        hist = train_model(m, ds, TrainConfig(batch=8, epochs=12, lr0=0.01,
                                              repeats=1, seed=1), shuffle_seed=1)
        assert len(hist.losses) == 12
        assert all(math.isfinite(v) for v in hist.losses)
        assert hist.losses[-1] < hist.losses[0]

    def test_divergence_aborts_with_diagnostic(self):
        rng = np.random.default_rng(7)
        ds = tiny_dataset(rng)
        ds.trials[0].labels[:] = np.inf
        m = MambaModel(MambaConfig(4, 3, 6, d_model=8, n_blocks=1, d_state=4), seed=1)
        with pytest.raises(TrainingDiverged, match="epoch 0"):
            train_model(m, ds, TrainConfig(batch=8, epochs=2, repeats=1), shuffle_seed=1)

    def test_repeats_differ_but_share_config_hash(self):
        rng = np.random.default_rng(8)
        ds = tiny_dataset(rng)
        cfg = MambaConfig(4, 3, 6, d_model=8, n_blocks=1, d_state=4)
        runs = train_repeats("mamba", cfg, ds,
                             TrainConfig(batch=8, epochs=1, repeats=2, seed=5))
        (m1, _), (m2, _) = runs
        assert m1.config_hash() == m2.config_hash()
        assert not np.array_equal(m1.params["embed/w"].data, m2.params["embed/w"].data)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        ds = tiny_dataset(rng)
        cfg = MambaConfig(4, 3, 6, d_model=8, n_blocks=1, d_state=4)
        tc = TrainConfig(batch=8, epochs=2, repeats=1, seed=3)
        a = train_repeats("mamba", cfg, ds, tc)[0][0]
        b = train_repeats("mamba", cfg, ds, tc)[0][0]
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_masked_anchor_sensitivity_after_training(self):
        rng = np.random.default_rng(10)
        ds = tiny_dataset(rng)
        m = MambaModel(MambaConfig(4, 3, 6, d_model=8, n_blocks=1, d_state=4), seed=2)
        train_model(m, ds, TrainConfig(batch=8, epochs=3, lr0=0.01, repeats=1),
                    shuffle_seed=2)
        X, _ = ds.batch([0])
        base = m.forward(X).data
        masked = X.copy()
        masked[:, :, 1] = 0.0  # knock out one input column entirely
        out = m.forward(masked).data
        assert np.max(np.abs(out - base)) > 0


class TestPredictTrajectory:
    def test_last_mode_matches_manual_assembly(self):
        rng = np.random.default_rng(11)
        cfg = MambaConfig(4, 3, 6, d_model=8, n_blocks=1, d_state=4)
        m = MambaModel(cfg, seed=3)
        frames = rng.uniform(0, 1, size=(15, 4))
        out = predict_trajectory(m, frames, S=6, batch=4, assemble="last")
        assert out.shape == (15, 3)
        first = m.forward(frames[None, 0:6]).data[0]
        assert np.allclose(out[:5], first[:5], atol=1e-12)
        for j in range(5, 15):
            win = m.forward(frames[None, j - 5 : j + 1]).data[0]
            assert np.allclose(out[j], win[-1], atol=1e-12)

    def test_mean_mode_averages_covering_windows(self):
        rng = np.random.default_rng(12)
        cfg = MambaConfig(2, 2, 3, d_model=4, n_blocks=1, d_state=2)
        m = MambaModel(cfg, seed=4)
        frames = rng.uniform(0, 1, size=(5, 2))
        out = predict_trajectory(m, frames, S=3, batch=8, assemble="mean")
        wins = np.stack([m.forward(frames[None, s : s + 3]).data[0] for s in range(3)])
        # frame 2 is covered by windows 0,1,2 at steps 2,1,0
        want = (wins[0, 2] + wins[1, 1] + wins[2, 0]) / 3
        assert np.allclose(out[2], want, atol=1e-12)

    def test_short_trial_rejected(self):
        m = MambaModel(MambaConfig(2, 2, 8, d_model=4, n_blocks=1, d_state=2), seed=0)
        with pytest.raises(ValueError):
            predict_trajectory(m, np.zeros((4, 2)), S=8)


class TestBuildModel:
    def test_kinds(self):
        assert build_model("mamba", MambaConfig(4, 3, 6, d_model=8, d_state=4), 0).kind == "mamba"
        assert build_model("gru", RnnConfig("gru", 4, 3, 8, 1), 0).kind == "gru"
