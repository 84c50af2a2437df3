"""Rigid-motion algebra on 2D point layouts and the formation-error metric.

A layout is an ``(N, 2)`` float array indexed by agent id.  Two layouts are
equivalent when a proper rotation plus a translation maps one onto the other;
reflections are not part of the group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class DegenerateLayoutError(ValueError):
    pass


def as_layout(points, min_points: int = 2) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"layout must have shape (N, 2), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise ValueError(f"layout needs at least {min_points} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("layout coordinates must be finite")
    return arr


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % TWO_PI - math.pi


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RigidTransform:
    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "angle", float(self.angle) % TWO_PI)
        tx, ty = self.translation
        object.__setattr__(self, "translation", (float(tx), float(ty)))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self after other``: x -> self(other(x))."""
        t = rotation_matrix(self.angle) @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidTransform(self.angle + other.angle, (t[0], t[1]))

    def inverse(self) -> "RigidTransform":
        t = -(rotation_matrix(-self.angle) @ np.asarray(self.translation))
        return RigidTransform(-self.angle, (t[0], t[1]))


def apply_rigid_transform(layout, xf: RigidTransform) -> np.ndarray:
    p = as_layout(layout, min_points=1)
    return p @ rotation_matrix(xf.angle).T + np.asarray(xf.translation)


def _centered_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = as_layout(p)
    q = as_layout(q)
    if p.shape != q.shape:
        raise ValueError(f"layouts differ in size: {p.shape[0]} vs {q.shape[0]}")
    return p - p.mean(axis=0), q - q.mean(axis=0)


def optimal_alignment(p, q) -> RigidTransform:
    """Rigid transform ``w`` minimising ``|p - w(q)|^2``."""
    pc, qc = _centered_pair(p, q)
    a = float(np.sum(pc * qc))
    b = float(np.sum(qc[:, 0] * pc[:, 1] - qc[:, 1] * pc[:, 0]))
    theta = math.atan2(b, a)
    t = np.mean(p, axis=0) - rotation_matrix(theta) @ np.mean(q, axis=0)
    return RigidTransform(theta, (t[0], t[1]))


def formation_error(p, q) -> float:
    """Minimum squared distance between ``p`` and any rigid motion of ``q``.

    Closed form: after centring both layouts, the residual is
    ``|p|^2 + |q|^2 - 2 sqrt(A^2 + B^2)`` where ``A`` is the summed dot product
    and ``B`` the summed cross product of corresponding points.
    """
    pc, qc = _centered_pair(p, q)
    a = float(np.sum(pc * qc))
    b = float(np.sum(qc[:, 0] * pc[:, 1] - qc[:, 1] * pc[:, 0]))
    err = float(np.sum(pc * pc) + np.sum(qc * qc)) - 2.0 * math.hypot(a, b)
    return max(err, 0.0)


def brute_force_formation_error(p, q, angle_step: float) -> float:
    """Grid search over rotation angles after centroid alignment (test oracle)."""
    if not angle_step > 0:
        raise ValueError("angle_step must be positive")
    pc, qc = _centered_pair(p, q)
    best = math.inf
    angles = np.arange(0.0, TWO_PI, angle_step)
    # chunked so memory stays bounded for tiny steps
    for chunk in np.array_split(angles, max(1, len(angles) // 4096)):
        c, s = np.cos(chunk)[:, None], np.sin(chunk)[:, None]
        rx = c * qc[:, 0] - s * qc[:, 1]
        ry = s * qc[:, 0] + c * qc[:, 1]
        d = np.sum((pc[:, 0] - rx) ** 2 + (pc[:, 1] - ry) ** 2, axis=1)
        best = min(best, float(d.min()))
    return best


def normalization_factor(q) -> float:
    """Largest squared pairwise distance of the layout."""
    q = as_layout(q)
    diff = q[:, None, :] - q[None, :, :]
    g = float(np.max(np.sum(diff * diff, axis=-1)))
    if g <= 0.0:
        raise DegenerateLayoutError("all points of the layout coincide")
    return g


def to_body_frame(points, origin, heading: float) -> np.ndarray:
    """Express world points in the frame located at ``origin`` rotated by ``heading``."""
    rel = np.asarray(points, dtype=float) - np.asarray(origin, dtype=float)
    c, s = math.cos(heading), math.sin(heading)
    x = c * rel[..., 0] + s * rel[..., 1]
    y = -s * rel[..., 0] + c * rel[..., 1]
    return np.stack([x, y], axis=-1)


def relative_topology(world, ego: int) -> np.ndarray:
    """Layout of all alive agents (index order) in the body frame of ``ego``."""
    if not (0 <= ego < len(world.alive)) or not world.alive[ego]:
        raise ValueError(f"agent {ego} is not alive")
    pos = world.vehicles.position
    return to_body_frame(pos[world.alive], pos[ego], float(world.vehicles.heading[ego]))


def regular_polygon(n: int, side: float, rotation: float = 0.0) -> np.ndarray:
    """Counter-clockwise regular polygon with the given side length, centred at the origin."""
    if n < 2:
        raise ValueError("polygon needs at least 2 vertices")
    if n == 2:
        return np.array([[-side / 2, 0.0], [side / 2, 0.0]])
    radius = side / (2.0 * math.sin(math.pi / n))
    ang = rotation + TWO_PI * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
