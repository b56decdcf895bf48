"""Projection-head, contrastive-objective and training-loop tests."""

import numpy as np
import pytest
from scipy import optimize

from atlas import align
from atlas.errors import ArgumentError, BatchNormDegeneracyError, ConfigError


def small_heads(seed=0, d_in=5, d_hidden=4, d_out=4):
    heads = {}
    for i, m in enumerate(align.MODALITY_ORDER):
        rng = np.random.default_rng(seed * 17 + i)
        heads[m] = align.ProjectionHead(d_in, d_hidden, d_out, rng=rng)
    return heads


def small_batch(seed=0, b=4, d_in=5):
    rng = np.random.default_rng(seed + 1000)
    return {m: rng.standard_normal((b, d_in)) for m in align.MODALITY_ORDER}


def reference_forward(head, h, training):
    """Independent straightforward re-implementation of the head forward."""
    p = head.params
    a = h @ p["w1"] + p["b1"]
    r = np.where(a > 0, a, 0.0)
    y = r @ p["w2"] + p["b2"]
    if training:
        mu, var = y.mean(0), y.var(0)
    else:
        mu, var = head.running_mean, head.running_var
    z = p["gamma"] * (y - mu) / np.sqrt(var + head.eps) + p["beta"]
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class TestProjectionHead:
    def test_rows_unit_norm_both_modes(self):
        heads = small_heads()
        batch = small_batch()
        for training in (True, False):
            z = align.project(heads["HE"], batch["HE"], training=training)
            np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)

    def test_eval_mode_identity_parameters(self):
        head = align.ProjectionHead(4, 4, 4, rng=np.random.default_rng(0))
        head.params["w1"] = np.eye(4)
        head.params["b1"] = np.zeros(4)
        head.params["w2"] = np.eye(4)
        head.params["b2"] = np.zeros(4)
        # running stats (0, 1), gamma=1, beta=0: output is the normalized
        # linear map up to the epsilon in the variance
        h = np.abs(np.random.default_rng(1).standard_normal((3, 4))) + 0.5
        z = align.project(head, h, training=False)
        expected = h / np.sqrt(1 + head.eps)
        expected /= np.linalg.norm(expected, axis=1, keepdims=True)
        np.testing.assert_allclose(z, expected, atol=1e-9)

    def test_forward_matches_reference_implementation(self):
        heads = small_heads(seed=3)
        batch = small_batch(seed=3)
        for training in (True, False):
            z, _ = heads["MIF"].forward(batch["MIF"], training=training)
            np.testing.assert_allclose(
                z, reference_forward(heads["MIF"], batch["MIF"], training), atol=1e-12)

    def test_single_row_training_batch_rejected(self):
        heads = small_heads()
        with pytest.raises(BatchNormDegeneracyError):
            heads["HE"].forward(np.ones((1, 5)), training=True)

    def test_running_stats_update_only_when_requested(self):
        head = small_heads()["HE"]
        before = head.running_mean.copy()
        head.forward(small_batch()["HE"], training=True, update_running=False)
        np.testing.assert_array_equal(head.running_mean, before)
        head.forward(small_batch()["HE"], training=True, update_running=True)
        assert not np.array_equal(head.running_mean, before)


class TestInfoNce:
    def test_singleton_batch_zero_loss(self):
        z = np.array([[1.0, 0.0]])
        assert align.info_nce(z, z, 0.07) == pytest.approx(0.0, abs=1e-12)

    def test_identical_rows_give_log_b(self):
        z = np.tile(np.array([1.0, 0.0, 0.0]), (8, 1))
        assert align.info_nce(z, z, 0.07) == pytest.approx(np.log(8), abs=1e-12)

    def test_two_row_closed_form(self):
        za = np.array([[1.0, 0.0], [0.0, 1.0]])
        zb = np.array([[1.0, 0.0], [0.0, 1.0]])
        tau = 0.25
        # each row: log(exp(1/tau) + exp(0)) - 1/tau
        expected = np.log(np.exp(1 / tau) + 1.0) - 1 / tau
        assert align.info_nce(za, zb, tau) == pytest.approx(expected, abs=1e-12)

    def test_nonpositive_temperature_rejected(self):
        z = np.eye(2)
        for tau in (0.0, -1.0, 1e-12 - 1e-12):
            with pytest.raises(ArgumentError):
                align.info_nce(z, z, tau)

    def test_loss_nonnegative_and_decreases_with_diagonal(self):
        rng = np.random.default_rng(5)
        za = rng.standard_normal((6, 8))
        za /= np.linalg.norm(za, axis=1, keepdims=True)
        zb = rng.standard_normal((6, 8))
        zb /= np.linalg.norm(zb, axis=1, keepdims=True)
        base = align.info_nce(za, zb, 0.3)
        assert base >= 0.0
        # move one item's pair closer, everything else fixed
        zb2 = zb.copy()
        zb2[2] = (zb[2] + za[2]) / np.linalg.norm(zb[2] + za[2])
        assert align.info_nce(za, zb2, 0.3) < base


class TestTotalLoss:
    def test_uniform_batch_six_log_b(self):
        z = np.tile(np.array([0.0, 1.0]), (5, 1))
        assert align.total_loss(z, z, z, 0.07) == pytest.approx(6 * np.log(5), abs=1e-10)

    def test_role_swap_invariance(self):
        rng = np.random.default_rng(7)
        mats = [rng.standard_normal((4, 6)) for _ in range(3)]
        mats = [m / np.linalg.norm(m, axis=1, keepdims=True) for m in mats]
        a = align.total_loss(mats[0], mats[1], mats[2], 0.1)
        b = align.total_loss(mats[2], mats[1], mats[0], 0.1)
        assert a == pytest.approx(b, abs=1e-12)

    def test_matches_term_wise_oracle(self):
        rng = np.random.default_rng(9)
        z = {}
        for m in align.MODALITY_ORDER:
            mat = rng.standard_normal((5, 7))
            z[m] = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        expected = 0.0
        for a in align.MODALITY_ORDER:
            for b in align.MODALITY_ORDER:
                if a != b:
                    expected += align.info_nce(z[a], z[b], 0.2)
        got = align.total_loss(z["HE"], z["MIF"], z["TXT"], 0.2)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_simultaneous_row_permutation_invariance(self):
        rng = np.random.default_rng(11)
        z = {}
        for m in align.MODALITY_ORDER:
            mat = rng.standard_normal((6, 5))
            z[m] = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        perm = rng.permutation(6)
        a = align.total_loss(z["HE"], z["MIF"], z["TXT"], 0.15)
        b = align.total_loss(z["HE"][perm], z["MIF"][perm], z["TXT"][perm], 0.15)
        assert a == pytest.approx(b, abs=1e-12)


def flatten_params(heads):
    return np.concatenate([
        heads[m].params[k].ravel()
        for m in align.MODALITY_ORDER for k in align.PARAM_NAMES
    ])


def assign_params(heads, vec):
    offset = 0
    for m in align.MODALITY_ORDER:
        for k in align.PARAM_NAMES:
            shape = heads[m].params[k].shape
            size = int(np.prod(shape)) if shape else 1
            heads[m].params[k] = vec[offset:offset + size].reshape(shape).copy()
            offset += size


def flatten_grads(heads, grads):
    return np.concatenate([
        grads[m][k].ravel()
        for m in align.MODALITY_ORDER for k in align.PARAM_NAMES
    ])


def finite_difference_check(seed, b=4, d_in=5, d_hidden=4, d_out=4, tau=0.3, h=1e-5):
    """Max relative error between analytic and central-difference gradients."""
    heads = small_heads(seed=seed, d_in=d_in, d_hidden=d_hidden, d_out=d_out)
    batch = small_batch(seed=seed, b=b, d_in=d_in)
    _, grads = align.loss_and_param_grads(batch, heads, tau, training=True)
    analytic = flatten_grads(heads, grads)

    theta = flatten_params(heads)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            shifted = theta.copy()
            shifted[i] += sign * h
            assign_params(heads, shifted)
            loss, _ = align.loss_and_param_grads(batch, heads, tau, training=True)
            if slot == 0:
                up = loss
            else:
                down = loss
        numeric[i] = (up - down) / (2 * h)
    assign_params(heads, theta)
    # scale floor keeps finite-difference roundoff noise on structurally
    # zero gradients (batch-norm shift invariance of b2) from dominating
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / scale))


class TestGradients:
    def test_finite_difference_small_suite(self):
        for seed in range(5):
            assert finite_difference_check(seed) < 1e-4

    def test_gradient_vanishes_at_one_parameter_minimum(self):
        heads = small_heads(seed=13)
        batch = small_batch(seed=13)

        def slice_loss(theta):
            w2 = heads["HE"].params["w2"].copy()
            w2[0, 0] = theta
            heads["HE"].params["w2"] = w2
            loss, _ = align.loss_and_param_grads(batch, heads, 0.3, training=True)
            return loss

        # this slice has an interior minimum inside (-2, 2)
        assert slice_loss(-0.2) < min(slice_loss(-2.0), slice_loss(2.0))
        result = optimize.minimize_scalar(slice_loss, bounds=(-2, 2), method="bounded",
                                          options={"xatol": 1e-10})
        slice_loss(result.x)
        _, grads = align.loss_and_param_grads(batch, heads, 0.3, training=True)
        assert abs(grads["HE"]["w2"][0, 0]) < 1e-6

    def test_tiny_temperature_rejected_before_overflow(self):
        heads = small_heads()
        batch = small_batch()
        with pytest.raises(ArgumentError):
            align.loss_and_param_grads(batch, heads, 0.0, training=True)


class TestSchedule:
    def test_step_zero(self):
        assert align.lr_at(0, 1e-4, 5000, 10000) == 0.0

    def test_warmup_end_hits_peak(self):
        assert align.lr_at(5000, 1e-4, 5000, 10000) == pytest.approx(1e-4)

    def test_final_step_zero(self):
        assert align.lr_at(10000, 1e-4, 5000, 10000) == pytest.approx(0.0, abs=1e-12)

    def test_linear_during_warmup(self):
        assert align.lr_at(2500, 1e-4, 5000, 10000) == pytest.approx(5e-5)

    def test_monotone_decay_after_warmup(self):
        values = [align.lr_at(s, 1e-4, 100, 1000) for s in range(100, 1001, 50)]
        assert all(b <= a for a, b in zip(values, values[1:]))


class TestTraining:
    def small_config(self, **overrides):
        base = dict(batch_size=16, lr_projection=1e-3, warmup_steps=5,
                    total_steps=60, epochs=10, hidden_dim=16, output_dim=16, seed=0)
        base.update(overrides)
        return align.AlignConfig(**base)

    def correlated_features(self, seed=0, n=128, latent=8, dim=12, noise=0.2):
        rng = np.random.default_rng(seed)
        basis = np.linalg.qr(rng.standard_normal((dim, latent)))[0]
        u = rng.standard_normal((n, latent))
        return {m: u @ basis.T + noise * rng.standard_normal((n, dim))
                for m in align.MODALITY_ORDER}

    def test_zero_learning_rate_keeps_parameters(self):
        feats = self.correlated_features()
        config = self.small_config(lr_projection=0.0)
        heads = align.init_heads({m: 12 for m in align.MODALITY_ORDER}, config)
        before = {m: {k: v.copy() for k, v in heads[m].params.items()}
                  for m in align.MODALITY_ORDER}
        result = align.train(feats, config, heads=heads)
        for m in align.MODALITY_ORDER:
            for k in align.PARAM_NAMES:
                np.testing.assert_array_equal(result.heads[m].params[k], before[m][k])

    def test_loss_trend_decreases_over_seeds(self):
        for seed in range(5):
            feats = self.correlated_features(seed=seed)
            result = align.train(feats, self.small_config(seed=seed))
            losses = [l for _, l, _ in result.loss_trace]
            head = np.mean(losses[:10])
            tail = np.mean(losses[-10:])
            assert tail < head

    def test_same_seed_identical_checkpoints(self, tmp_path):
        feats = self.correlated_features(seed=2)
        r1 = align.train(feats, self.small_config(seed=5))
        r2 = align.train(feats, self.small_config(seed=5))
        p1, p2 = tmp_path / "a.ck", tmp_path / "b.ck"
        align.save_checkpoint(r1.heads, p1)
        align.save_checkpoint(r2.heads, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_too_few_items_for_batch(self):
        feats = self.correlated_features(n=8)
        with pytest.raises(ConfigError, match="smaller batch"):
            align.train(feats, self.small_config())

    def test_checkpoint_round_trip(self, tmp_path):
        feats = self.correlated_features(seed=3)
        result = align.train(feats, self.small_config(seed=3))
        path = tmp_path / "heads.ck"
        align.save_checkpoint(result.heads, path, config=result.config)
        loaded = align.load_checkpoint(path)
        for m in align.MODALITY_ORDER:
            for k, v in result.heads[m].state_tensors().items():
                np.testing.assert_array_equal(loaded[m].state_tensors()[k], v)
        batch = self.correlated_features(seed=9, n=8)["HE"]
        np.testing.assert_allclose(
            align.project(loaded["HE"], batch),
            align.project(result.heads["HE"], batch), atol=1e-12)

    def test_loss_trace_csv(self, tmp_path):
        feats = self.correlated_features(seed=4)
        result = align.train(feats, self.small_config(seed=4, total_steps=10))
        path = tmp_path / "trace.csv"
        align.write_loss_trace(result.loss_trace, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss,lr"
        assert len(lines) == 11
