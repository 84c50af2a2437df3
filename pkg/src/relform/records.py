"""CSV logs with fixed headers, trajectory capture and the reward replay audit."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .dynamics import VehicleState
from .env import RewardConfig, WorldState, reward_terms
from .nn import atomic_write_bytes

TRAJECTORY_FIELDS = ["episode", "tick", "agent", "x", "y", "heading", "v_b", "phi", "dest_x", "dest_y",
                     "reward", "r_form", "r_navi", "r_avoid"]


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, fields: list[str], rows) -> Path:
    """Write all rows at once and rename into place; floats use their shortest round-trip form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_cell(row[k]) for k in fields])
    atomic_write_bytes(path, buf.getvalue().encode())
    return Path(path)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_json(path, data) -> Path:
    atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())
    return Path(path)


class TrajectoryRecorder:
    """Observer for ``run_episode``: one row per connected agent per decision tick."""

    def __init__(self):
        self.rows: list[dict] = []
        self.episodes: list[dict] = []
        self.episode = -1

    def __call__(self, env, rewards, info):
        w = env.world
        if rewards is None:
            self.episode += 1
            self.episodes.append({
                "obstacle_centers": w.obstacle_centers.tolist(), "obstacle_radii": w.obstacle_radii.tolist(),
                "level": int(w.level),
            })
            dest = w.destination
        else:
            dest = info["destination"]
        for i in np.flatnonzero(w.alive):
            self.rows.append({
                "episode": self.episode, "tick": w.decision_tick, "agent": int(i),
                "x": w.vehicles.position[i, 0], "y": w.vehicles.position[i, 1], "heading": w.vehicles.heading[i],
                "v_b": w.vehicles.speed[i], "phi": w.vehicles.steer[i], "dest_x": dest[0], "dest_y": dest[1],
                "reward": 0.0 if rewards is None else rewards[i],
                "r_form": 0.0 if rewards is None else info["r_form"],
                "r_navi": 0.0 if rewards is None else info["r_navi"][i],
                "r_avoid": 0.0 if rewards is None else info["r_avoid"],
            })

    def meta(self, scenario) -> dict:
        return {
            "n_max": scenario.n_max, "agent_radius": scenario.vehicle.collision_radius,
            "reward": {"alpha": scenario.reward.alpha, "beta": scenario.reward.beta,
                       "collision_buffer": scenario.reward.collision_buffer},
            "topologies": {str(n): np.asarray(q).tolist() for n, q in scenario.topologies.items()},
            "episodes": self.episodes,
        }

    def save(self, path, scenario) -> Path:
        write_csv(path, TRAJECTORY_FIELDS, self.rows)
        write_json(meta_path(path), self.meta(scenario))
        return Path(path)


def meta_path(trajectory_path) -> Path:
    p = Path(trajectory_path)
    return p.with_name(p.stem + ".meta.json")


def _world_from_rows(rows, ep_meta, meta) -> WorldState:
    n_max = meta["n_max"]
    pos, heading = np.zeros((n_max, 2)), np.zeros(n_max)
    speed, steer = np.zeros(n_max), np.zeros(n_max)
    alive = np.zeros(n_max, dtype=bool)
    for r in rows:
        i = int(r["agent"])
        pos[i] = float(r["x"]), float(r["y"])
        heading[i], speed[i], steer[i] = float(r["heading"]), float(r["v_b"]), float(r["phi"])
        alive[i] = True
    dest = np.array([float(rows[0]["dest_x"]), float(rows[0]["dest_y"])])
    topo = {int(n): np.asarray(q, dtype=float) for n, q in meta["topologies"].items()}
    return WorldState(VehicleState(pos, heading, speed, steer), alive,
                      np.asarray(ep_meta["obstacle_centers"], dtype=float).reshape(-1, 2),
                      np.asarray(ep_meta["obstacle_radii"], dtype=float), dest, float(meta["agent_radius"]), topo)


REPLAY_FIELDS = ["episode", "tick", "agent", "logged", "recomputed", "abs_error"]


def replay_rewards(trajectory_path) -> list[dict]:
    """Recompute every logged per-agent reward from the logged states alone."""
    rows = read_csv(trajectory_path)
    with open(meta_path(trajectory_path)) as f:
        meta = json.load(f)
    reward = RewardConfig(**meta["reward"])
    groups: dict[tuple[int, int], list] = {}
    for r in rows:
        groups.setdefault((int(r["episode"]), int(r["tick"])), []).append(r)
    out = []
    for (ep, tick), now_rows in sorted(groups.items()):
        if tick == 0:
            continue
        prev_rows = groups[(ep, tick - 1)]
        ep_meta = meta["episodes"][ep]
        now = _world_from_rows(now_rows, ep_meta, meta)
        prev = _world_from_rows(prev_rows, ep_meta, meta)
        prev.destination = now.destination  # the row's destination is the one the step was scored against
        terms = reward_terms(prev, now, reward)
        for r in now_rows:
            i = int(r["agent"])
            logged, again = float(r["reward"]), float(terms["reward"][i])
            out.append({"episode": ep, "tick": tick, "agent": i, "logged": logged, "recomputed": again,
                        "abs_error": abs(logged - again)})
    return out


def max_abs_error(rows) -> float:
    return max((r["abs_error"] for r in rows), default=0.0)


def finite_mean(values) -> float:
    vals = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else float("nan")
