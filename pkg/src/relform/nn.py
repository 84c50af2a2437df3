"""Recurrent actor-critic networks in numpy with hand-written backprop.

Layout of every network: three ``dense -> ReLU -> LayerNorm`` blocks, one GRU
layer followed by LayerNorm, and a dense output head.  Sequences are
``(T, B, features)``; ``masks[t, b] == 0`` resets the hidden state before
step ``t``.
"""

from __future__ import annotations

import io
import json
import math
import os
import tempfile

import numpy as np

HIDDEN = 64
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


def orthogonal_init(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q.reshape(rows, cols)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def entropy(logits):
    lp = log_softmax(logits)
    return -(np.exp(lp) * lp).sum(axis=-1)


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = (x - mu) * inv
    return g * xh + b, (xh, inv)


def _ln_backward(dy, g, cache):
    xh, inv = cache
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xh).sum(axis=red), dy.sum(axis=red)


class RecurrentNet:
    """Dense x3 -> GRU -> dense head, parameters held in an ordered dict."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = HIDDEN, out_gain: float = 1.0):
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        H = hidden
        relu_gain = math.sqrt(2.0)
        p = {}
        for k, fan_in in enumerate((in_dim, H, H), start=1):
            p[f"fc{k}_w"] = orthogonal_init((fan_in, H), relu_gain, rng)
            p[f"fc{k}_b"] = np.zeros(H)
            p[f"ln{k}_g"] = np.ones(H)
            p[f"ln{k}_b"] = np.zeros(H)
        p["gru_wx"] = np.concatenate([orthogonal_init((H, H), 1.0, rng) for _ in range(3)], axis=1)
        p["gru_uzr"] = np.concatenate([orthogonal_init((H, H), 1.0, rng) for _ in range(2)], axis=1)
        p["gru_un"] = orthogonal_init((H, H), 1.0, rng)
        p["gru_b"] = np.zeros(3 * H)
        p["ln4_g"] = np.ones(H)
        p["ln4_b"] = np.zeros(H)
        p["out_w"] = orthogonal_init((H, out_dim), out_gain, rng)
        p["out_b"] = np.zeros(out_dim)
        self.params = p

    def copy(self) -> "RecurrentNet":
        new = object.__new__(RecurrentNet)
        new.in_dim, new.out_dim, new.hidden = self.in_dim, self.out_dim, self.hidden
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def init_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden))

    # -- forward -------------------------------------------------------
    def _trunk(self, x):
        p = self.params
        caches = []
        a = x
        for k in (1, 2, 3):
            pre = a @ p[f"fc{k}_w"] + p[f"fc{k}_b"]
            act = np.maximum(pre, 0.0)
            a, ln = _ln_forward(act, p[f"ln{k}_g"], p[f"ln{k}_b"])
            caches.append((pre, ln))
        return a, caches

    def forward(self, x, h0, masks=None, keep_cache: bool = False):
        """Run a ``(T, B, in)`` sequence; returns ``(out, h_last[, cache])``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} != {self.in_dim}")
        T, B = x.shape[:2]
        if masks is None:
            masks = np.ones((T, B))
        p, H = self.params, self.hidden
        feat, trunk_cache = self._trunk(x)
        xw = feat @ p["gru_wx"] + p["gru_b"]
        hs = np.empty((T, B, H))
        steps = []
        h = h0
        for t in range(T):
            hm = h * masks[t][:, None]
            zr = sigmoid(xw[t, :, : 2 * H] + hm @ p["gru_uzr"])
            z, r = zr[:, :H], zr[:, H:]
            n = np.tanh(xw[t, :, 2 * H :] + (r * hm) @ p["gru_un"])
            h = (1.0 - z) * hm + z * n
            hs[t] = h
            if keep_cache:
                steps.append((hm, z, r, n))
        y, ln4 = _ln_forward(hs, p["ln4_g"], p["ln4_b"])
        out = y @ p["out_w"] + p["out_b"]
        if not keep_cache:
            return out, h
        cache = dict(x=x, masks=masks, trunk=trunk_cache, feat=feat, steps=steps, y=y, ln4=ln4)
        return out, h, cache

    # -- backward ------------------------------------------------------
    def backward(self, cache, dout, dh_last=None) -> dict:
        p, H = self.params, self.hidden
        g = {}
        y = cache["y"]
        T, B = dout.shape[:2]
        g["out_w"] = y.reshape(-1, H).T @ dout.reshape(-1, self.out_dim)
        g["out_b"] = dout.sum(axis=(0, 1))
        dy = dout @ p["out_w"].T
        dhs, g["ln4_g"], g["ln4_b"] = _ln_backward(dy, p["ln4_g"], cache["ln4"])

        dxw = np.empty((T, B, 3 * H))
        g_uzr = np.zeros_like(p["gru_uzr"])
        g_un = np.zeros_like(p["gru_un"])
        uzr_t, un_t = p["gru_uzr"].T, p["gru_un"].T
        dh_next = np.zeros((B, H)) if dh_last is None else dh_last
        masks = cache["masks"]
        for t in range(T - 1, -1, -1):
            hm, z, r, n = cache["steps"][t]
            dh = dhs[t] + dh_next
            dz = dh * (n - hm)
            dn = dh * z
            dhm = dh * (1.0 - z)
            da_n = dn * (1.0 - n * n)
            g_un += (r * hm).T @ da_n
            drh = da_n @ un_t
            dr = drh * hm
            dhm += drh * r
            da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            g_uzr += hm.T @ da_zr
            dhm += da_zr @ uzr_t
            dxw[t, :, : 2 * H] = da_zr
            dxw[t, :, 2 * H :] = da_n
            dh_next = dhm * masks[t][:, None]
        g["gru_uzr"], g["gru_un"] = g_uzr, g_un
        feat = cache["feat"]
        g["gru_wx"] = feat.reshape(-1, H).T @ dxw.reshape(-1, 3 * H)
        g["gru_b"] = dxw.sum(axis=(0, 1))
        da = dxw @ p["gru_wx"].T

        for k in (3, 2, 1):
            pre, ln = cache["trunk"][k - 1]
            dact, g[f"ln{k}_g"], g[f"ln{k}_b"] = _ln_backward(da, p[f"ln{k}_g"], ln)
            dpre = dact * (pre > 0)
            if k == 1:
                a_in = cache["x"]
            else:
                _, prev_ln = cache["trunk"][k - 2]
                a_in = p[f"ln{k-1}_g"] * prev_ln[0] + p[f"ln{k-1}_b"]
            g[f"fc{k}_w"] = a_in.reshape(-1, a_in.shape[-1]).T @ dpre.reshape(-1, H)
            g[f"fc{k}_b"] = dpre.sum(axis=(0, 1))
            da = dpre @ p[f"fc{k}_w"].T
        g["dx"] = da
        g["dh0"] = dh_next
        return g


class RunningMeanStd:
    """Per-dimension running mean/variance merged batch by batch."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0

    def update(self, batch):
        batch = np.asarray(batch, dtype=float).reshape(-1, len(self.mean))
        if len(batch) == 0:
            return
        b_mean, b_var, b_n = batch.mean(axis=0), batch.var(axis=0), float(len(batch))
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, b_n
            return
        tot = self.count + b_n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * b_n + delta**2 * self.count * b_n / tot
        self.mean = self.mean + delta * b_n / tot
        self.var = m2 / tot
        self.count = tot

    def normalize(self, x):
        return np.clip((np.asarray(x) - self.mean) / np.sqrt(self.var + 1e-8), -10.0, 10.0)

    def state(self) -> dict:
        return {"mean": self.mean, "var": self.var, "count": np.array(self.count)}

    def load(self, d):
        self.mean, self.var, self.count = np.array(d["mean"]), np.array(d["var"]), float(d["count"])


def observation_normalize(stats: RunningMeanStd, obs, update: bool = False):
    if update:
        stats.update(obs)
    return stats.normalize(obs)


class PopArt:
    """Exponential running statistics of value targets with output-preserving head rescaling."""

    def __init__(self, beta: float = 1e-2, sigma_floor: float = 1e-4):
        self.beta = beta
        self.sigma_floor = sigma_floor
        self.mu = 0.0
        self.nu = 1.0
        self.updates = 0

    @property
    def sigma(self) -> float:
        return max(math.sqrt(max(self.nu - self.mu**2, 0.0)), self.sigma_floor)

    def normalize(self, v):
        return (np.asarray(v) - self.mu) / self.sigma

    def denormalize(self, v):
        return np.asarray(v) * self.sigma + self.mu

    def update(self, targets, net: RecurrentNet):
        t = np.asarray(targets, dtype=float).reshape(-1)
        if t.size == 0:
            raise ValueError("empty target batch")
        mu_old, sigma_old = self.mu, self.sigma
        self.mu = (1 - self.beta) * self.mu + self.beta * float(t.mean())
        self.nu = (1 - self.beta) * self.nu + self.beta * float(np.mean(t * t))
        self.updates += 1
        sigma_new = self.sigma
        p = net.params
        p["out_w"] = p["out_w"] * (sigma_old / sigma_new)
        p["out_b"] = (sigma_old * p["out_b"] + mu_old - self.mu) / sigma_new

    def state(self) -> dict:
        return {"mu": np.array(self.mu), "nu": np.array(self.nu), "updates": np.array(self.updates)}

    def load(self, d):
        self.mu, self.nu, self.updates = float(d["mu"]), float(d["nu"]), int(d["updates"])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-3):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            if k not in params:
                continue
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {"t": np.array(self.t)}
        for k in self.m:
            out[f"m/{k}"], out[f"v/{k}"] = self.m[k], self.v[k]
        return out

    def load(self, d):
        self.t = int(d["t"])
        self.m = {k[2:]: np.array(v) for k, v in d.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in d.items() if k.startswith("v/")}


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    keys = [k for k in grads if k not in ("dx", "dh0")]
    norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in keys:
            grads[k] = grads[k] * scale
    return norm


class Policy:
    """Actor network plus its observation normalizer."""

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator):
        self.net = RecurrentNet(obs_dim, n_actions, rng, out_gain=0.01)
        self.obs_rms = RunningMeanStd(obs_dim)

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim

    def step(self, obs, h, masks=None):
        """Single decision step for a batch; returns ``(logits, h')``."""
        x = self.obs_rms.normalize(obs)[None]
        m = None if masks is None else np.asarray(masks, dtype=float)[None]
        out, h = self.net.forward(x, h, m)
        return out[0], h

    def probs(self, obs, h, masks=None):
        logits, h = self.step(obs, h, masks)
        return softmax(logits), h


class ValueFunction:
    """Critic network, its input normalizer and PopArt statistics."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, popart_beta: float = 1e-2):
        self.net = RecurrentNet(obs_dim, 1, rng, out_gain=1.0)
        self.obs_rms = RunningMeanStd(obs_dim)
        self.popart = PopArt(popart_beta)

    def step(self, obs, h, masks=None):
        """Returns ``(normalized value, h')`` for a batch of shared observations."""
        x = self.obs_rms.normalize(obs)[None]
        m = None if masks is None else np.asarray(masks, dtype=float)[None]
        out, h = self.net.forward(x, h, m)
        return out[0, :, 0], h

    def value(self, obs, h, masks=None):
        v, h = self.step(obs, h, masks)
        return self.popart.denormalize(v), h


# -- checkpoints -------------------------------------------------------

def _flatten(prefix: str, d: dict, out: dict):
    for k, v in d.items():
        out[f"{prefix}/{k}"] = np.asarray(v)


def _sub(d: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in d.items() if k.startswith(prefix + "/")}


def save_checkpoint(path, policies: list[Policy], critics: list[ValueFunction] | None = None, meta: dict | None = None,
                    extra: dict | None = None):
    """Write all parameters and statistics to an ``.npz`` file, atomically."""
    arrays = {}
    for i, pol in enumerate(policies):
        _flatten(f"actor{i}/net", pol.net.params, arrays)
        _flatten(f"actor{i}/rms", pol.obs_rms.state(), arrays)
    for i, cr in enumerate(critics or []):
        _flatten(f"critic{i}/net", cr.net.params, arrays)
        _flatten(f"critic{i}/rms", cr.obs_rms.state(), arrays)
        _flatten(f"critic{i}/popart", cr.popart.state(), arrays)
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    header = {
        "version": CHECKPOINT_VERSION,
        "n_actors": len(policies),
        "n_critics": len(critics or []),
        "actor_dims": [[p.net.in_dim, p.net.out_dim] for p in policies],
        "critic_dims": [[c.net.in_dim, 1] for c in (critics or [])],
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Return ``(policies, critics, meta, extra)``."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(arrays.pop("header").tobytes().decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    rng = np.random.default_rng(0)
    policies, critics = [], []
    for i, (din, dout) in enumerate(header["actor_dims"]):
        pol = Policy(din, dout, rng)
        pol.net.params = {k: v.astype(float) for k, v in _sub(arrays, f"actor{i}/net").items()}
        pol.obs_rms.load(_sub(arrays, f"actor{i}/rms"))
        policies.append(pol)
    for i, (din, _) in enumerate(header["critic_dims"]):
        cr = ValueFunction(din, rng)
        cr.net.params = {k: v.astype(float) for k, v in _sub(arrays, f"critic{i}/net").items()}
        cr.obs_rms.load(_sub(arrays, f"critic{i}/rms"))
        cr.popart.load(_sub(arrays, f"critic{i}/popart"))
        critics.append(cr)
    return policies, critics, header["meta"], _sub(arrays, "extra")


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
