import numpy as np
import pytest

from fsbm.driftnet import (DriftNetwork, OptimizerState, adamw_step, forward, load_checkpoint,
                           regression_grads, regression_loss, save_checkpoint, time_embed)


def random_net(seed=0, dim=2, hidden=16, n_blocks=2, embed_dim=8):
    """A net with a non-zero head and normalisation so every parameter matters."""
    rng = np.random.default_rng(seed)
    net = DriftNetwork(dim, hidden, n_blocks, embed_dim, rng)
    net.params["W_out"] = rng.normal(size=net.params["W_out"].shape) / np.sqrt(hidden)
    net.params["b_out"] = rng.normal(size=dim) * 0.1
    net.params["x_mean"] = rng.normal(size=dim)
    net.params["x_scale"] = rng.uniform(0.5, 2, dim)
    net.params["out_scale"] = rng.uniform(0.5, 2, dim)
    return net


class TestTimeEmbed:
    def test_zero_time(self):
        e = time_embed(0.0, 16)
        np.testing.assert_array_equal(e[:8], 0.0)
        np.testing.assert_array_equal(e[8:], 1.0)

    def test_bounded(self):
        e = time_embed(np.linspace(-3, 3, 500), 32)
        assert np.all(np.abs(e) <= 1)

    def test_injective_on_grid(self):
        t = np.linspace(0, 1, 1001)
        e = time_embed(t, 32)
        d = np.linalg.norm(e[:, None] - e[None], axis=-1)
        off = ~np.eye(len(t), dtype=bool)
        assert d[off].min() > 0

    @pytest.mark.parametrize("dim", [0, 3, -2])
    def test_bad_dim(self, dim):
        with pytest.raises(ValueError):
            time_embed(0.5, dim)


class TestForward:
    def test_zero_head(self):
        net = DriftNetwork(3, 32, 4, 16, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(20, 3))
        np.testing.assert_array_equal(net(x, 0.3), 0.0)

    def test_batch_invariance(self):
        net = random_net(1)
        rng = np.random.default_rng(2)
        x, t = rng.normal(size=(15, 2)), rng.uniform(size=15)
        full = net(x, t)
        single = np.vstack([net(x[i:i + 1], t[i:i + 1]) for i in range(15)])
        np.testing.assert_allclose(full, single, atol=1e-12, rtol=0)

    def test_lipschitz_probe(self):
        net = DriftNetwork(2, 128, 4, 32, np.random.default_rng(3))
        net.params["W_out"] = np.random.default_rng(4).normal(size=(2, 128)) / np.sqrt(128)
        rng = np.random.default_rng(5)
        x, t = rng.normal(size=(200, 2)) * 5, rng.uniform(size=200)
        delta = rng.normal(size=(200, 2))
        delta *= 1e-4 / np.linalg.norm(delta, axis=1, keepdims=True)
        ratio = np.linalg.norm(net(x + delta, t) - net(x, t), axis=1) / 1e-4
        assert ratio.max() < 1e3

    def test_nan_weights(self):
        net = random_net(6)
        net.params["W10"][0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            net(np.zeros((1, 2)), 0.5)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            random_net(7)(np.zeros((4, 3)), 0.5)

    def test_deterministic(self):
        x = np.ones((3, 2))
        a = DriftNetwork(2, rng=np.random.default_rng(9))
        b = DriftNetwork(2, rng=np.random.default_rng(9))
        for k in a.names:
            np.testing.assert_array_equal(a.params[k], b.params[k])


class TestGradients:
    def test_finite_differences(self):
        net = random_net(10)
        rng = np.random.default_rng(11)
        x, t, y = rng.normal(size=(7, 2)), rng.uniform(size=7), rng.normal(size=(7, 2))
        _, grads = regression_grads(net, x, t, y)
        h = 1e-5
        for k in net.trainable:
            w = net.params[k]
            fd = np.zeros_like(w)
            for ix in np.ndindex(w.shape):
                old = w[ix]
                w[ix] = old + h
                lp = regression_loss(net, x, t, y)
                w[ix] = old - h
                lm = regression_loss(net, x, t, y)
                w[ix] = old
                fd[ix] = (lp - lm) / (2 * h)
            err = np.linalg.norm(grads[k] - fd) / max(np.linalg.norm(fd), 1e-12)
            assert err <= 1e-4, k

    def test_zero_residual(self):
        net = random_net(12)
        rng = np.random.default_rng(13)
        x, t = rng.normal(size=(9, 2)), rng.uniform(size=9)
        loss, grads = regression_grads(net, x, t, net(x, t))
        assert loss == 0.0
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_residual_scaling(self):
        net = random_net(14)
        rng = np.random.default_rng(15)
        x, t = rng.normal(size=(9, 2)), rng.uniform(size=9)
        out = net(x, t)
        r = rng.normal(size=out.shape) * 1e-6
        _, g1 = regression_grads(net, x, t, out - r)
        _, g2 = regression_grads(net, x, t, out - 2 * r)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-3, atol=1e-20)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            regression_grads(random_net(), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)))

    def test_stats_not_trained(self):
        net = random_net(16)
        _, grads = regression_grads(net, np.ones((2, 2)), np.full(2, 0.5), np.zeros((2, 2)))
        assert not {"x_mean", "x_scale", "out_scale"} & set(grads)


class TestAdamW:
    def test_zero_grads_no_decay(self):
        net = random_net(20)
        before = {k: v.copy() for k, v in net.params.items()}
        state = OptimizerState(lr=0.1)
        for _ in range(5):
            adamw_step(net, {k: np.zeros_like(net.params[k]) for k in net.trainable}, state)
        for k in net.names:
            np.testing.assert_array_equal(net.params[k], before[k])
        assert state.step == 5

    def test_decay_factor(self):
        net = random_net(21)
        w0 = net.params["W_in"].copy()
        state = OptimizerState(lr=0.01, weight_decay=0.1)
        for _ in range(3):
            adamw_step(net, {"W_in": np.zeros_like(w0)}, state)
        np.testing.assert_allclose(net.params["W_in"], w0 * (1 - 0.01 * 0.1) ** 3, rtol=1e-14)

    def test_scalar_quadratic(self):
        class Scalar:
            params = {"w": np.zeros(1)}

        obj = Scalar()
        state = OptimizerState(lr=0.01)
        for _ in range(2000):
            adamw_step(obj, {"w": 2 * (obj.params["w"] - 3)}, state)
        assert abs(obj.params["w"][0] - 3) <= 1e-3

    def test_clip_norm(self):
        class Scalar:
            params = {"w": np.zeros(2)}

        obj = Scalar()
        state = OptimizerState(lr=0.1, clip_norm=1.0)
        adamw_step(obj, {"w": np.array([300.0, 400.0])}, state)
        np.testing.assert_allclose(state.m["w"], 0.1 * np.array([0.6, 0.8]))

    def test_shape_mismatch(self):
        net = random_net(22)
        with pytest.raises(ValueError):
            adamw_step(net, {"W_in": np.zeros(3)}, OptimizerState())


class TestTraining:
    def test_fits_bridge_drift(self):
        rng = np.random.default_rng(0)
        net = DriftNetwork(2, 64, 4, 32, np.random.default_rng(1))
        x1 = np.array([1.0, 2.0])
        X = rng.normal(size=(4096, 2))
        T = rng.uniform(0, 0.9, 4096)
        Y = (x1 - X) / (1 - T[:, None])
        net.fit_normalization(X, Y)
        state = OptimizerState(lr=3e-3)
        steps = 5000
        for s in range(steps):
            i = rng.integers(0, 4096, 256)
            _, g = regression_grads(net, X[i], T[i], Y[i])
            adamw_step(net, g, state, lr=state.lr * 0.5 * (1 + np.cos(np.pi * s / steps)))
        assert regression_loss(net, X, T, Y) < 1e-3

    def test_bitwise_reproducible(self):
        def run():
            rng = np.random.default_rng(4)
            net = DriftNetwork(2, 16, 2, 8, np.random.default_rng(5))
            state = OptimizerState(lr=1e-2, weight_decay=0.01, clip_norm=5.0)
            for _ in range(30):
                x, t = rng.normal(size=(32, 2)), rng.uniform(size=32)
                _, g = regression_grads(net, x, t, -x)
                adamw_step(net, g, state)
            return net

        a, b = run(), run()
        for k in a.names:
            np.testing.assert_array_equal(a.params[k], b.params[k])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = random_net(30, dim=3, hidden=12, n_blocks=3, embed_dim=6)
        net.normalized = True
        f = tmp_path / "net.ckpt"
        save_checkpoint(net, f)
        back = load_checkpoint(f)
        assert (back.dim, back.hidden, back.n_blocks, back.embed_dim) == (3, 12, 3, 6)
        assert back.normalized
        for k in net.names:
            np.testing.assert_array_equal(back.params[k], net.params[k])
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(back(x, 0.4), net(x, 0.4))

    def test_size(self, tmp_path):
        net = random_net(31)
        f = tmp_path / "net.ckpt"
        save_checkpoint(net, f)
        n = sum(v.size for v in net.params.values())
        assert f.stat().st_size == 8 + 24 + 8 * n

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "bad.ckpt"
        f.write_bytes(b"NOTANET" + bytes(40))
        with pytest.raises(ValueError):
            load_checkpoint(f)

    def test_trailing_bytes(self, tmp_path):
        f = tmp_path / "net.ckpt"
        save_checkpoint(random_net(32), f)
        f.write_bytes(f.read_bytes() + b"\x00" * 8)
        with pytest.raises(ValueError):
            load_checkpoint(f)
