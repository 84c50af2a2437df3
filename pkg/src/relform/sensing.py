"""Lidar ray casting and per-agent observation vectors.

Peer blocks are ordered cyclically from the ego: block ``k`` (1-based)
describes agent ``(ego + k) % n_max``.  With regular-polygon ideals this makes
every agent's view of the target shape identical, which a shared policy needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import TWO_PI, to_body_frame, wrap_angle


@dataclass(frozen=True)
class LidarConfig:
    beams: int = 36
    max_range: float = 4.0

    def __post_init__(self):
        if self.beams < 4:
            raise ValueError("lidar needs at least 4 beams")
        if not self.max_range > 0:
            raise ValueError("lidar max_range must be > 0")

    @property
    def beam_angles(self) -> np.ndarray:
        return TWO_PI * np.arange(self.beams) / self.beams


@dataclass
class Observation:
    vector: np.ndarray
    alive_mask: np.ndarray  # ego-cyclic order, entry 0 is the ego

    def as_input(self) -> np.ndarray:
        return np.concatenate([self.vector, self.alive_mask.astype(float)])


def observation_size(n_max: int) -> int:
    return 2 * (n_max - 1) + 4


def input_size(n_max: int) -> int:
    """Actor input width: observation vector plus death-mask bits."""
    return observation_size(n_max) + n_max


def ray_circle_distances(origin, angles, centers, radii, max_range: float) -> np.ndarray:
    """Distance along each ray to the first circle boundary, capped at ``max_range``.

    A ray starting inside a circle reads 0.
    """
    angles = np.asarray(angles, dtype=float)
    out = np.full(angles.shape, float(max_range))
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(centers) == 0:
        return out
    radii = np.asarray(radii, dtype=float).reshape(-1)
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (M, 2)
    rel = centers - np.asarray(origin, dtype=float)  # (K, 2)
    b = d @ rel.T  # (M, K) projection of centre on ray
    c = np.sum(rel * rel, axis=1) - radii**2  # (K,)
    disc = b * b - c[None, :]
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
    t_near = b - sq
    inside = np.broadcast_to(c <= 0, b.shape)
    hit = (disc >= 0) & (t_near >= 0)
    t = np.where(inside, 0.0, np.where(hit, t_near, np.inf))
    return np.minimum(out, t.min(axis=1))


def world_circles(world, exclude: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Obstacle circles followed by the collision circles of alive agents."""
    idx = [i for i in np.flatnonzero(world.alive) if i != exclude]
    centers = np.concatenate([world.obstacle_centers.reshape(-1, 2), world.vehicles.position[idx]])
    radii = np.concatenate([world.obstacle_radii.reshape(-1), np.full(len(idx), world.agent_radius)])
    return centers, radii


def lidar_scan(world, ego: int, cfg: LidarConfig) -> np.ndarray:
    if not world.alive[ego]:
        raise ValueError(f"agent {ego} is not alive")
    centers, radii = world_circles(world, exclude=ego)
    angles = cfg.beam_angles + world.vehicles.heading[ego]
    return ray_circle_distances(world.vehicles.position[ego], angles, centers, radii, cfg.max_range)


def min_obstacle_reading(distances) -> tuple[float, float]:
    d = np.asarray(distances, dtype=float)
    k = int(np.argmin(d))  # argmin returns the first index on ties
    return float(d[k]), float(wrap_angle(TWO_PI * k / len(d)))


def build_observation(world, ego: int, n_max: int, cfg: LidarConfig) -> Observation:
    if not world.alive[ego]:
        raise ValueError(f"agent {ego} is not alive")
    pos = world.vehicles.position
    heading = float(world.vehicles.heading[ego])
    vec = np.zeros(observation_size(n_max))
    mask = np.zeros(n_max, dtype=bool)
    mask[0] = True
    n = len(world.alive)
    for k in range(1, n_max):
        j = (ego + k) % n_max
        if j >= n or not world.alive[j]:
            continue
        rel = to_body_frame(pos[j], pos[ego], heading)
        vec[2 * (k - 1)] = math.hypot(rel[0], rel[1])
        vec[2 * (k - 1) + 1] = math.atan2(rel[1], rel[0])
        mask[k] = True
    rel = to_body_frame(world.destination, pos[ego], heading)
    base = 2 * (n_max - 1)
    vec[base] = math.hypot(rel[0], rel[1])
    vec[base + 1] = math.atan2(rel[1], rel[0])
    d_min, th_min = min_obstacle_reading(lidar_scan(world, ego, cfg))
    vec[base + 2] = d_min
    vec[base + 3] = th_min
    # atan2 can return +pi exactly; keep angles in [-pi, pi)
    for a in range(1, len(vec), 2):
        if vec[a] >= math.pi:
            vec[a] -= TWO_PI
    return Observation(vec, mask)
