"""Ackermann-steering kinematics with a wheelbase-zero unicycle mode.

All state arrays are vectorised over agents: ``position`` is ``(N, 2)`` and
the scalar channels are ``(N,)``.  A single vehicle is simply ``N = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .geometry import wrap_angle

SPEED_LEVELS = (-1.0, -0.5, 0.0, 0.5, 1.0)
STEER_LEVELS = (-1.0, -0.5, 0.0, 0.5, 1.0)
N_ACTIONS = len(SPEED_LEVELS) * len(STEER_LEVELS)


@dataclass(frozen=True)
class VehicleParams:
    """Actuator and footprint constants of one vehicle type.

    With ``wheelbase == 0`` the vehicle is a unicycle and the steer channel
    carries a heading rate (rad/s) rather than a wheel angle.
    """

    wheelbase: float = 0.20
    length: float = 0.25
    width: float = 0.18
    max_speed: float = 0.361
    max_steer: float = 0.298
    speed_slew: float = 1.0
    steer_slew: float = 2.0

    def __post_init__(self):
        if self.wheelbase < 0:
            raise ValueError("wheelbase must be >= 0")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be > 0")
        if self.wheelbase > 0 and not (0 < self.max_steer < math.pi / 2):
            raise ValueError("max_steer must lie in (0, pi/2) for Ackermann vehicles")
        if self.wheelbase == 0 and not self.max_steer > 0:
            raise ValueError("max turn rate must be > 0")

    @property
    def unicycle(self) -> bool:
        return self.wheelbase == 0

    @property
    def collision_radius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)


MVE_VEHICLE = VehicleParams()
MPE_VEHICLE = VehicleParams(wheelbase=0.0, length=0.01, width=0.01, max_speed=1.0, max_steer=1.0)
VEHICLE_PRESETS = {"MVE": MVE_VEHICLE, "MPE": MPE_VEHICLE}


@dataclass
class VehicleState:
    position: np.ndarray
    heading: np.ndarray
    speed: np.ndarray = field(default=None)
    steer: np.ndarray = field(default=None)

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float).reshape(-1, 2)
        n = len(self.position)
        self.heading = np.array(self.heading, dtype=float).reshape(n)
        self.speed = np.zeros(n) if self.speed is None else np.array(self.speed, dtype=float).reshape(n)
        self.steer = np.zeros(n) if self.steer is None else np.array(self.steer, dtype=float).reshape(n)

    def copy(self) -> "VehicleState":
        return VehicleState(self.position.copy(), self.heading.copy(), self.speed.copy(), self.steer.copy())

    def __len__(self):
        return len(self.position)


@dataclass(frozen=True)
class Command:
    speed: np.ndarray
    steer: np.ndarray


def heading_rate(v_b, phi, wheelbase: float):
    if wheelbase <= 0:
        raise ValueError("heading_rate needs a positive wheelbase; use unicycle mode for L = 0")
    return np.asarray(v_b) * np.tan(phi) / wheelbase


def turning_radius(phi: float, wheelbase: float) -> float:
    if wheelbase <= 0:
        raise ValueError("turning radius needs a positive wheelbase")
    t = math.tan(phi)
    return math.inf if t == 0.0 else wheelbase / t


def _slew(actual, target, limit):
    return actual + np.clip(target - actual, -limit, limit)


def step_physics(state: VehicleState, command: Command, params: VehicleParams, dt: float) -> VehicleState:
    """One explicit-Euler control tick.

    Actuators slew toward the clamped command first, then the pose integrates
    with the updated speed and steer.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    tgt_v = np.clip(command.speed, -params.max_speed, params.max_speed)
    tgt_s = np.clip(command.steer, -params.max_steer, params.max_steer)
    v = _slew(state.speed, tgt_v, params.speed_slew * dt)
    s = _slew(state.steer, tgt_s, params.steer_slew * dt)
    omega = s if params.unicycle else v * np.tan(s) / params.wheelbase
    heading = state.heading + omega * dt
    pos = state.position + (v * dt)[:, None] * np.stack([np.cos(state.heading), np.sin(state.heading)], axis=1)
    heading = np.where((heading < -math.pi) | (heading >= math.pi), wrap_angle(heading), heading)
    out = VehicleState(pos, heading, v, s)
    if not (np.all(np.isfinite(out.position)) and np.all(np.isfinite(out.heading))):
        raise FloatingPointError("non-finite vehicle state")
    return out


def decision_to_control(command: Command, controls_per_decision: int) -> list[Command]:
    if controls_per_decision < 1:
        raise ValueError("controls_per_decision must be >= 1")
    return [command] * controls_per_decision


@njit(cache=True)
def _integrate_kernel(pos, heading, speed, steer, tgt_v, tgt_s, wheelbase, dv, ds, dt, substeps):
    two_pi = 2.0 * math.pi
    for i in range(pos.shape[0]):
        x, y, th, v, s = pos[i, 0], pos[i, 1], heading[i], speed[i], steer[i]
        for _ in range(substeps):
            v = v + min(max(tgt_v[i] - v, -dv), dv)
            s = s + min(max(tgt_s[i] - s, -ds), ds)
            omega = s if wheelbase == 0.0 else v * math.tan(s) / wheelbase
            x = x + v * dt * math.cos(th)
            y = y + v * dt * math.sin(th)
            th = th + omega * dt
            if th < -math.pi or th >= math.pi:
                th = (th + math.pi) % two_pi - math.pi
        pos[i, 0], pos[i, 1], heading[i], speed[i], steer[i] = x, y, th, v, s


def integrate(state: VehicleState, command: Command, params: VehicleParams, dt: float, substeps: int) -> VehicleState:
    """Hold ``command`` for ``substeps`` control ticks.

    Same arithmetic as repeated :func:`step_physics`, compiled.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = state.copy()
    n = len(out)
    tgt_v = np.clip(np.broadcast_to(np.asarray(command.speed, dtype=float), (n,)), -params.max_speed, params.max_speed)
    tgt_s = np.clip(np.broadcast_to(np.asarray(command.steer, dtype=float), (n,)), -params.max_steer, params.max_steer)
    _integrate_kernel(
        out.position, out.heading, out.speed, out.steer, np.ascontiguousarray(tgt_v), np.ascontiguousarray(tgt_s),
        float(params.wheelbase), params.speed_slew * dt, params.steer_slew * dt, float(dt), int(substeps),
    )
    if not (np.all(np.isfinite(out.position)) and np.all(np.isfinite(out.heading))):
        raise FloatingPointError("non-finite vehicle state")
    return out


def discretize_action(index, params: VehicleParams) -> Command:
    """Map action ids on the 5x5 (speed, steer) grid to a command.

    Index 0 is the null action; the remaining ids enumerate the grid in
    row-major order with the (0, 0) cell removed.
    """
    idx = np.asarray(index)
    if np.any((idx < 0) | (idx >= N_ACTIONS)):
        raise IndexError(f"action index out of range [0, {N_ACTIONS})")
    sp, st = _ACTION_TABLE[idx, 0], _ACTION_TABLE[idx, 1]
    return Command(sp * params.max_speed, st * params.max_steer)


def _build_table() -> np.ndarray:
    cells = [(a, b) for a in SPEED_LEVELS for b in STEER_LEVELS if not (a == 0 and b == 0)]
    return np.array([(0.0, 0.0)] + cells)


_ACTION_TABLE = _build_table()
MAX_FORWARD_ACTION = int(np.flatnonzero((_ACTION_TABLE[:, 0] == 1.0) & (_ACTION_TABLE[:, 1] == 0.0))[0])


def with_overrides(params: VehicleParams, **kw) -> VehicleParams:
    return replace(params, **{k: v for k, v in kw.items() if v is not None})
