import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relform import nn
from relform.dynamics import N_ACTIONS

from oracles import actor_loss, critic_loss, fd_check


@pytest.fixture(scope="module")
def sequence():
    rng = np.random.default_rng(0)
    T, B, D = 2, 3, 9
    x = rng.normal(size=(T, B, D))
    h0 = rng.normal(scale=0.5, size=(B, nn.HIDDEN))
    masks = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
    return rng, x, h0, masks


class TestGradients:
    def test_actor_head(self, sequence):
        rng, x, h0, masks = sequence
        net = nn.RecurrentNet(x.shape[-1], N_ACTIONS, np.random.default_rng(1), out_gain=1.0)
        for k in net.params:  # move away from the all-zero bias/unit-gain init so every path is exercised
            net.params[k] = net.params[k] + rng.normal(scale=0.05, size=net.params[k].shape)
        acts = rng.integers(0, N_ACTIONS, size=(2, 3))
        worst = fd_check(net, actor_loss(acts, rng.normal(size=(2, 3))), x, h0, masks, max_entries=60, rng=rng)
        assert set(worst) == set(net.params)
        assert max(worst.values()) < 1e-4, worst

    def test_critic_head(self, sequence):
        rng, x, h0, masks = sequence
        net = nn.RecurrentNet(x.shape[-1], 1, np.random.default_rng(2))
        for k in net.params:
            net.params[k] = net.params[k] + rng.normal(scale=0.05, size=net.params[k].shape)
        worst = fd_check(net, critic_loss(rng.normal(size=(2, 3))), x, h0, masks, max_entries=60, rng=rng)
        assert max(worst.values()) < 1e-4, worst

    def test_input_and_hidden_gradients(self, sequence):
        rng, x, h0, masks = sequence
        net = nn.RecurrentNet(x.shape[-1], 1, np.random.default_rng(3))
        tgt = rng.normal(size=(2, 3))
        loss = critic_loss(tgt)
        out, _, cache = net.forward(x, h0, masks, keep_cache=True)
        g = net.backward(cache, loss(out)[1])
        eps = 1e-5
        for arr, key in ((x, "dx"), (h0, "dh0")):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                lp = loss(net.forward(x, h0, masks)[0])[0]
                arr[idx] = old - eps
                lm = loss(net.forward(x, h0, masks)[0])[0]
                arr[idx] = old
                num[idx] = (lp - lm) / (2 * eps)
            assert np.linalg.norm(num - g[key]) <= 1e-6 * (1 + np.linalg.norm(num))

    def test_zero_loss_zero_grads(self, sequence):
        _, x, h0, masks = sequence
        net = nn.RecurrentNet(x.shape[-1], 4, np.random.default_rng(4))
        _, _, cache = net.forward(x, h0, masks, keep_cache=True)
        g = net.backward(cache, np.zeros((2, 3, 4)))
        assert all(not np.any(g[k]) for k in net.params)

    def test_masked_step_blocks_hidden_gradient(self, sequence):
        _, x, h0, _ = sequence
        net = nn.RecurrentNet(x.shape[-1], 1, np.random.default_rng(5))
        masks = np.zeros((2, 3))
        _, _, cache = net.forward(x, h0, masks, keep_cache=True)
        g = net.backward(cache, np.ones((2, 3, 1)))
        assert not np.any(g["dh0"])


class TestForward:
    def test_zero_weights_uniform(self):
        net = nn.RecurrentNet(5, N_ACTIONS, np.random.default_rng(0))
        for k in net.params:
            net.params[k] = np.zeros_like(net.params[k])
        out, _ = net.forward(np.ones((1, 2, 5)), np.zeros((2, nn.HIDDEN)))
        assert np.allclose(nn.softmax(out), 1 / N_ACTIONS)

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(1)
        pol = nn.Policy(7, N_ACTIONS, rng)
        p, _ = pol.probs(rng.normal(size=(50, 7)), rng.normal(size=(50, nn.HIDDEN)))
        assert np.allclose(p.sum(axis=-1), 1, atol=1e-6)

    def test_hidden_moves(self):
        moved = 0
        for s in range(20):
            rng = np.random.default_rng(s)
            net = nn.RecurrentNet(6, 3, rng)
            h0 = np.zeros((1, nn.HIDDEN))
            _, h = net.forward(rng.normal(size=(1, 1, 6)), h0)
            moved += not np.allclose(h, h0)
        assert moved == 20

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        net = nn.RecurrentNet(6, 3, rng)
        x, h = rng.normal(size=(3, 2, 6)), rng.normal(size=(2, nn.HIDDEN))
        a, b = net.forward(x, h), net.forward(x, h)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_width_mismatch(self):
        net = nn.RecurrentNet(6, 3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 1, 5)), np.zeros((1, nn.HIDDEN)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=30))
    def test_entropy_bounds(self, logits):
        e = float(nn.entropy(np.array(logits)))
        assert -1e-12 <= e <= math.log(len(logits)) + 1e-12
        assert np.exp(nn.log_softmax(np.array(logits))).sum() == pytest.approx(1.0)


class TestOrthogonalInit:
    def test_square(self):
        w = nn.orthogonal_init((64, 64), 1.7, np.random.default_rng(0))
        assert np.allclose(w @ w.T, 1.7**2 * np.eye(64), atol=1e-6)

    @pytest.mark.parametrize("shape", [(64, 64), (30, 64), (64, 25), (100, 64)])
    def test_singular_values(self, shape):
        w = nn.orthogonal_init(shape, math.sqrt(2), np.random.default_rng(1))
        assert np.allclose(np.linalg.svd(w, compute_uv=False), math.sqrt(2), atol=1e-6)

    def test_seeded(self):
        a = nn.orthogonal_init((8, 8), 1.0, np.random.default_rng(5))
        b = nn.orthogonal_init((8, 8), 1.0, np.random.default_rng(5))
        assert np.array_equal(a, b)


class TestPopArt:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        vf = nn.ValueFunction(6, rng)
        vf.popart.mu, vf.popart.nu = 3.0, 13.0
        return rng, vf

    def test_preserves_outputs(self):
        rng, vf = self.make()
        x, h = rng.normal(size=(100, 6)), rng.normal(size=(100, nn.HIDDEN))
        before, _ = vf.value(x, h)
        vf.popart.update(rng.normal(40, 9, size=256), vf.net)
        after, _ = vf.value(x, h)
        assert np.max(np.abs(before - after)) < 1e-6
        assert vf.popart.mu != 3.0

    def test_constant_targets_at_mean_keep_mu(self):
        rng, vf = self.make()
        vf.popart.update(np.full(32, 3.0), vf.net)
        assert vf.popart.mu == pytest.approx(3.0)

    def test_converges_to_stream_stats(self):
        rng = np.random.default_rng(1)
        vf = nn.ValueFunction(4, rng, popart_beta=1e-2)
        for _ in range(3000):
            vf.popart.update(rng.normal(7.0, 2.0, size=500), vf.net)
        assert vf.popart.mu == pytest.approx(7.0, rel=0.05)
        assert vf.popart.sigma == pytest.approx(2.0, rel=0.05)

    def test_sigma_floor(self):
        _, vf = self.make()
        vf.popart.mu, vf.popart.nu = 0.0, 0.0
        assert vf.popart.sigma == 1e-4

    def test_empty_batch(self):
        _, vf = self.make()
        with pytest.raises(ValueError):
            vf.popart.update([], vf.net)


class TestObservationNormalizer:
    def test_first_sample_zero(self):
        s = nn.RunningMeanStd(3)
        assert np.allclose(nn.observation_normalize(s, np.array([[1.0, -2.0, 5.0]]), update=True), 0)

    def test_constant_stream(self):
        s = nn.RunningMeanStd(2)
        for _ in range(10):
            out = nn.observation_normalize(s, np.full((4, 2), 3.5), update=True)
        assert np.allclose(out, 0)

    def test_matches_batch_stats(self):
        rng = np.random.default_rng(0)
        data = rng.normal([1.0, -4.0], [0.5, 3.0], size=(5000, 2))
        s = nn.RunningMeanStd(2)
        for chunk in np.array_split(data, 37):
            s.update(chunk)
        assert np.allclose(s.mean, data.mean(axis=0), rtol=0.01)
        assert np.allclose(s.var, data.var(axis=0), rtol=0.01)

    def test_clip(self):
        s = nn.RunningMeanStd(1)
        s.update(np.array([[0.0], [1.0]]))
        assert nn.observation_normalize(s, np.array([[1e6]]))[0, 0] == 10.0

    def test_no_update_by_default(self):
        s = nn.RunningMeanStd(1)
        nn.observation_normalize(s, np.array([[5.0]]))
        assert s.count == 0


class TestOptimizer:
    def test_clip_grad_norm(self):
        rng = np.random.default_rng(0)
        g = {"a": rng.normal(size=(10, 10)) * 10, "b": rng.normal(size=3), "dx": np.ones(1000)}
        pre = nn.clip_grad_norm(g, 0.5)
        assert pre > 0.5
        assert math.sqrt(sum(np.sum(g[k] ** 2) for k in ("a", "b"))) <= 0.5 + 1e-6

    def test_adam_ignores_unknown_keys(self):
        p = {"w": np.ones(2)}
        nn.Adam(0.1).step(p, {"w": np.ones(2), "dx": np.ones(5)})
        assert np.all(p["w"] < 1)

    def test_adam_minimizes_quadratic(self):
        p = {"w": np.array([3.0, -2.0])}
        opt = nn.Adam(0.05)
        for _ in range(2000):
            opt.step(p, {"w": 2 * p["w"]})
        assert np.allclose(p["w"], 0, atol=1e-2)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        pol, vf = nn.Policy(9, N_ACTIONS, rng), nn.ValueFunction(27, rng)
        pol.obs_rms.update(rng.normal(size=(10, 9)))
        vf.popart.update(rng.normal(size=10), vf.net)
        nn.save_checkpoint(tmp_path / "c.npz", [pol], [vf], {"note": "x"}, {"arr": np.arange(3)})
        pols, vfs, meta, extra = nn.load_checkpoint(tmp_path / "c.npz")
        for k, v in pol.net.params.items():
            assert np.array_equal(v, pols[0].net.params[k])
        for k, v in vf.net.params.items():
            assert np.array_equal(v, vfs[0].net.params[k])
        assert np.array_equal(pols[0].obs_rms.mean, pol.obs_rms.mean)
        assert vfs[0].popart.mu == vf.popart.mu and vfs[0].popart.nu == vf.popart.nu
        assert meta == {"note": "x"} and np.array_equal(extra["arr"], np.arange(3))

    def test_version_mismatch(self, tmp_path, monkeypatch):
        rng = np.random.default_rng(0)
        nn.save_checkpoint(tmp_path / "c.npz", [nn.Policy(3, 2, rng)])
        monkeypatch.setattr(nn, "CHECKPOINT_VERSION", 99)
        with pytest.raises(ValueError):
            nn.load_checkpoint(tmp_path / "c.npz")
