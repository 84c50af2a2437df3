"""Independent reference implementations used as test oracles."""

import math

import numpy as np

from relform import nn
from relform.sensing import world_circles


def ray_march_oracle(world, ego, cfg, step=1e-3):
    """Walk each beam in fixed steps and report the first sample inside any circle."""
    centers, radii = world_circles(world, exclude=ego)
    origin = world.vehicles.position[ego]
    out = []
    ts = np.arange(0.0, cfg.max_range + step / 2, step)
    for ang in cfg.beam_angles + world.vehicles.heading[ego]:
        pts = origin + ts[:, None] * np.array([math.cos(ang), math.sin(ang)])
        if len(centers):
            d = np.linalg.norm(pts[:, None, :] - centers[None], axis=-1)
            hit = np.flatnonzero(np.any(d <= radii, axis=1))
        else:
            hit = []
        out.append(ts[hit[0]] if len(hit) else cfg.max_range)
    return np.minimum(np.array(out), cfg.max_range)



def fd_check(net, loss_fn, x, h0, masks, eps=1e-5, max_entries=None, rng=None):
    """Central differences per parameter tensor; returns each tensor's relative error.

    With ``max_entries`` only a random subset of each tensor is perturbed.
    """
    out, _, cache = net.forward(x, h0, masks, keep_cache=True)
    _, dout = loss_fn(out)
    grads = net.backward(cache, dout)
    worst = {}
    for name, w in net.params.items():
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        nflat = np.zeros(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn(net.forward(x, h0, masks)[0])[0]
            flat[i] = old - eps
            lm = loss_fn(net.forward(x, h0, masks)[0])[0]
            flat[i] = old
            nflat[j] = (lp - lm) / (2 * eps)
        ana = grads[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(nflat) + np.linalg.norm(ana), 1e-12)
        worst[name] = float(np.linalg.norm(nflat - ana) / denom)
    return worst


def actor_loss(actions, weights):
    def f(logits):
        lp = nn.log_softmax(logits)
        p = np.exp(lp)
        sel = np.take_along_axis(lp, actions[..., None], -1)[..., 0]
        loss = -float(np.sum(weights * sel))
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, actions[..., None], 1.0, -1)
        return loss, -weights[..., None] * (onehot - p)
    return f


def critic_loss(targets):
    def f(v):
        e = v[..., 0] - targets
        return 0.5 * float(np.sum(e * e)), e[..., None]
    return f




def gae_double_loop(rewards, values, dones, last_value, gamma, lam):
    """Advantage as an explicit sum of discounted TD errors, one start index at a time."""
    T = len(rewards)
    v_next = [values[t + 1] if t + 1 < T else last_value for t in range(T)]
    deltas = [rewards[t] + gamma * v_next[t] * (1.0 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, coef = 0.0, 1.0
        for l in range(t, T):
            total += coef * deltas[l]
            if dones[l]:
                break
            coef *= gamma * lam
        adv[t] = total
    return adv


def kl_direct(p_t, p_s, floor=1e-8):
    total = 0.0
    for a, b in zip(p_t, p_s):
        if a > 0:
            total += a * (math.log(a) - math.log(max(b, floor)))
    return total
