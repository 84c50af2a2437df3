"""Static figures written next to the CSV outputs (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(episodes: list[dict], path):
    """Per-episode reward terms and formation error with a moving average."""
    keys = [("reward", "total reward"), ("r_form", "formation term"), ("r_navi", "navigation term"),
            ("formation_error", "mean formation error")]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    x = np.arange(len(episodes))
    for ax, (k, label) in zip(axes.flat, keys):
        y = np.array([float(e[k]) for e in episodes])
        ax.plot(x, y, lw=0.6, alpha=0.4)
        if len(y) >= 10:
            w = max(len(y) // 20, 5)
            ax.plot(x[w - 1:], np.convolve(y, np.ones(w) / w, mode="valid"), lw=1.5)
        ax.set_title(label)
    for ax in axes[-1]:
        ax.set_xlabel("episode")
    return _save(fig, path)


def plot_adaptation(errors, schedule: dict, path):
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(np.arange(len(errors)), errors, lw=1.2)
    for step in schedule:
        ax.axvline(step, color="tab:red", ls="--", lw=0.8)
    ax.set_xlabel("decision step")
    ax.set_ylabel("formation error")
    return _save(fig, path)


def plot_distillation(history: list[dict], path):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for t in sorted({h["teacher"] for h in history}):
        pts = [(h["episode"], h["held_out_kl"]) for h in history if h["teacher"] == t]
        ax.plot(*zip(*pts), marker=".", label=f"teacher {t}")
    ax.set_yscale("log")
    ax.set_xlabel("distillation episode")
    ax.set_ylabel("held-out KL")
    ax.legend()
    return _save(fig, path)


def plot_trajectory(rows: list[dict], meta: dict, path, episode: int = 0):
    fig, ax = plt.subplots(figsize=(6, 6))
    ep = [r for r in rows if int(r["episode"]) == episode]
    for a in sorted({int(r["agent"]) for r in ep}):
        xy = np.array([[float(r["x"]), float(r["y"])] for r in ep if int(r["agent"]) == a])
        ax.plot(xy[:, 0], xy[:, 1], lw=1, label=f"agent {a}")
    em = meta["episodes"][episode]
    for c, rad in zip(em["obstacle_centers"], em["obstacle_radii"]):
        ax.add_patch(plt.Circle(c, rad, color="k"))
    if ep:
        ax.plot(float(ep[0]["dest_x"]), float(ep[0]["dest_y"]), "r*", ms=12)
    ax.set_aspect("equal")
    ax.legend(fontsize=7)
    return _save(fig, path)
