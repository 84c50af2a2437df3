"""Formation-navigation environment: scenarios, rewards, stepping and disconnects."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import dynamics
from .dynamics import VehicleParams, VehicleState
from .geometry import (
    as_layout,
    formation_error,
    normalization_factor,
    regular_polygon,
    relative_topology,
)
from .sensing import LidarConfig, build_observation, input_size

LEVEL_DENSITIES = (0.0, 1e-2, 2e-2, 3e-2, 5e-2)  # obstacles per m^2


class ScenarioGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 5.0
    beta: float = 10.0
    collision_buffer: float = 0.05

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("reward weights must be non-negative")


@dataclass(frozen=True)
class ProfileDefaults:
    vehicle: VehicleParams
    lidar: LidarConfig
    obstacle_radius: tuple[float, float]
    formation_side: float


PROFILES = {
    "MPE": ProfileDefaults(dynamics.MPE_VEHICLE, LidarConfig(36, 4.0), (0.01, 0.05), 2.0),
    "MVE": ProfileDefaults(dynamics.MVE_VEHICLE, LidarConfig(36, 3.0), (0.14, 0.14), 1.0),
}


def default_topologies(n_max: int, side: float) -> dict[int, np.ndarray]:
    return {n: regular_polygon(n, side) for n in range(2, n_max + 1)}


@dataclass
class ScenarioConfig:
    """Everything needed to build and step one environment instance."""

    profile: str = "MPE"
    n_agents: int = 3
    n_max: int | None = None
    vehicle: VehicleParams | None = None
    lidar: LidarConfig | None = None
    reward: RewardConfig = field(default_factory=RewardConfig)
    topologies: Mapping[int, np.ndarray] | None = None
    formation_side: float | None = None
    obstacle_radius: tuple[float, float] | None = None
    spawn_half_extent: float = 2.0
    dest_distance: float = 36.0
    corridor_width: float = 8.0
    episode_cap: int = 400
    goal_radius: float = 1.0
    decision_hz: float = 1.0
    control_hz: float = 100.0
    relay_destination: bool = False

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        d = PROFILES[self.profile]
        if self.n_max is None:
            self.n_max = self.n_agents
        if self.n_agents < 2 or self.n_max < self.n_agents:
            raise ValueError("need 2 <= n_agents <= n_max")
        self.vehicle = self.vehicle or d.vehicle
        self.lidar = self.lidar or d.lidar
        self.obstacle_radius = tuple(self.obstacle_radius or d.obstacle_radius)
        if self.formation_side is None:
            self.formation_side = d.formation_side
        topo = dict(default_topologies(self.n_max, self.formation_side))
        for n, q in (self.topologies or {}).items():
            topo[int(n)] = as_layout(q)
        for n, q in topo.items():
            if len(q) != n:
                raise ValueError(f"topology for n={n} has {len(q)} points")
            normalization_factor(q)  # rejects coincident layouts
        self.topologies = topo
        if self.dest_distance < 36.0:
            raise ValueError("destination must be at least 36 m from the start")
        ratio = self.control_hz / self.decision_hz
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("control_hz must be an integer multiple of decision_hz")

    @property
    def controls_per_decision(self) -> int:
        return int(round(self.control_hz / self.decision_hz))

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_hz

    @property
    def obs_dim(self) -> int:
        return input_size(self.n_max)


@dataclass
class WorldState:
    vehicles: VehicleState
    alive: np.ndarray
    obstacle_centers: np.ndarray
    obstacle_radii: np.ndarray
    destination: np.ndarray
    agent_radius: float
    topologies: Mapping[int, np.ndarray]
    decision_tick: int = 0
    level: int = 0

    def copy(self) -> "WorldState":
        return WorldState(
            self.vehicles.copy(),
            self.alive.copy(),
            self.obstacle_centers.copy(),
            self.obstacle_radii.copy(),
            self.destination.copy(),
            self.agent_radius,
            self.topologies,
            self.decision_tick,
            self.level,
        )

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def centroid(self) -> np.ndarray:
        return self.vehicles.position[self.alive].mean(axis=0)

    def ideal(self) -> np.ndarray:
        return self.topologies[self.n_alive]


def obstacle_count(level: int, corridor_length: float, corridor_width: float) -> int:
    return int(round(LEVEL_DENSITIES[level] * corridor_length * corridor_width))


def generate_scenario(cfg: ScenarioConfig, level: int, rng: np.random.Generator, max_retries: int = 1000) -> WorldState:
    if not 0 <= level < len(LEVEL_DENSITIES):
        raise ValueError(f"level must be in 0..{len(LEVEL_DENSITIES) - 1}")
    n = cfg.n_agents
    r_agent = cfg.vehicle.collision_radius
    margin = 2 * r_agent + cfg.reward.collision_buffer
    h = cfg.spawn_half_extent
    pos = np.zeros((cfg.n_max, 2))
    for i in range(n):
        for _ in range(max_retries):
            p = rng.uniform(-h, h, size=2)
            if i == 0 or np.min(np.linalg.norm(pos[:i] - p, axis=1)) >= margin:
                pos[i] = p
                break
        else:
            raise ScenarioGenerationError("could not place agents without overlap")
    heading = np.zeros(cfg.n_max)
    heading[:n] = rng.uniform(-math.pi, math.pi, size=n)
    alive = np.zeros(cfg.n_max, dtype=bool)
    alive[:n] = True
    start = pos[:n].mean(axis=0)
    bearing = rng.uniform(-math.pi, math.pi)
    axis = np.array([math.cos(bearing), math.sin(bearing)])
    dest = start + cfg.dest_distance * axis
    normal = np.array([-axis[1], axis[0]])

    count = obstacle_count(level, cfg.dest_distance, cfg.corridor_width)
    centers = np.zeros((count, 2))
    lo, hi = cfg.obstacle_radius
    radii = rng.uniform(lo, hi, size=count) if hi > lo else np.full(count, lo)
    for k in range(count):
        for _ in range(max_retries):
            c = start + rng.uniform(0, cfg.dest_distance) * axis + rng.uniform(-0.5, 0.5) * cfg.corridor_width * normal
            gap = np.linalg.norm(pos[:n] - c, axis=1) - (radii[k] + r_agent + cfg.reward.collision_buffer)
            if np.all(gap >= 0):
                centers[k] = c
                break
        else:
            raise ScenarioGenerationError(f"could not place obstacle {k} after {max_retries} retries")
    return WorldState(
        VehicleState(pos, heading), alive, centers, radii, dest, r_agent, cfg.topologies, 0, level
    )


def formation_error_of(world: WorldState) -> float:
    idx = np.flatnonzero(world.alive)
    if len(idx) < 2:
        return 0.0
    return formation_error(relative_topology(world, int(idx[0])), world.ideal())


def formation_reward(world: WorldState) -> float:
    if world.n_alive < 2:
        return 0.0
    return -formation_error_of(world) / normalization_factor(world.ideal())


def navigation_reward(world_prev: WorldState, world_now: WorldState, agent: int) -> float:
    dest = world_prev.destination
    before = np.linalg.norm(world_prev.vehicles.position[agent] - dest)
    after = np.linalg.norm(world_now.vehicles.position[agent] - dest)
    return float(before - after)


def collision_count(world: WorldState, buffer: float) -> int:
    """Ordered (agent, entity) pairs closer than their collision margin."""
    pos = world.vehicles.position[world.alive]
    r = world.agent_radius
    total = 0
    if len(pos) > 1:
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        total += int(np.sum(d < 2 * r + buffer))
    if len(world.obstacle_radii):
        d = np.linalg.norm(pos[:, None] - world.obstacle_centers[None, :], axis=-1)
        total += int(np.sum(d < r + world.obstacle_radii[None, :] + buffer))
    return total


def avoidance_penalty(world: WorldState, buffer: float = 0.05) -> float:
    return -float(collision_count(world, buffer))


def agents_in_collision(world: WorldState, buffer: float) -> np.ndarray:
    pos = world.vehicles.position
    hit = np.zeros(len(pos), dtype=bool)
    idx = np.flatnonzero(world.alive)
    for i in idx:
        others = [j for j in idx if j != i]
        if others and np.any(np.linalg.norm(pos[others] - pos[i], axis=1) < 2 * world.agent_radius + buffer):
            hit[i] = True
        if len(world.obstacle_radii):
            gap = np.linalg.norm(world.obstacle_centers - pos[i], axis=1) - world.obstacle_radii
            if np.any(gap < world.agent_radius + buffer):
                hit[i] = True
    return hit


def disconnect_agent(world: WorldState, agent: int) -> WorldState:
    if not world.alive[agent]:
        raise ValueError(f"agent {agent} is not alive")
    if world.n_alive < 3:
        raise ValueError("disconnecting would leave fewer than 2 agents")
    out = world.copy()
    out.alive[agent] = False
    out.vehicles.speed[agent] = 0.0
    out.vehicles.steer[agent] = 0.0
    return out


def reward_terms(prev: WorldState, now: WorldState, reward: RewardConfig) -> dict:
    """Per-step reward decomposition for every slot (zeros for dead agents)."""
    n = len(now.alive)
    navi = np.zeros(n)
    for i in np.flatnonzero(now.alive & prev.alive):
        navi[i] = navigation_reward(prev, now, i)
    r_form = formation_reward(now)
    r_avoid = avoidance_penalty(now, reward.collision_buffer)
    total = np.where(now.alive, r_form + reward.alpha * navi + reward.beta * r_avoid, 0.0)
    return {"r_form": r_form, "r_navi": navi, "r_avoid": r_avoid, "reward": total}


class FormationEnv:
    """One episode-at-a-time environment instance owning its RNG stream."""

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator, level: int = 0):
        self.cfg = cfg
        self.rng = rng
        self.level = level
        self.world: WorldState | None = None
        self.prev_world: WorldState | None = None
        self.last_success = False

    @property
    def n_max(self) -> int:
        return self.cfg.n_max

    def reset(self, level: int | None = None) -> np.ndarray:
        if level is not None:
            self.level = level
        self.world = generate_scenario(self.cfg, self.level, self.rng)
        self.prev_world = None
        self.last_success = False
        return self.observations()

    def observations(self) -> np.ndarray:
        out = np.zeros((self.n_max, self.cfg.obs_dim))
        for i in np.flatnonzero(self.world.alive):
            out[i] = build_observation(self.world, i, self.n_max, self.cfg.lidar).as_input()
        return out

    def disconnect(self, agent: int) -> np.ndarray:
        self.world = disconnect_agent(self.world, agent)
        return self.observations()

    def step(self, actions):
        w = self.world
        alive = np.flatnonzero(w.alive)
        actions = np.asarray(actions, dtype=int).reshape(-1)
        if len(actions) != len(alive):
            raise ValueError(f"expected {len(alive)} actions, got {len(actions)}")
        cmd = dynamics.discretize_action(actions, self.cfg.vehicle)
        sub = VehicleState(
            w.vehicles.position[alive], w.vehicles.heading[alive], w.vehicles.speed[alive], w.vehicles.steer[alive]
        )
        sub = dynamics.integrate(sub, cmd, self.cfg.vehicle, self.cfg.control_dt, self.cfg.controls_per_decision)
        nxt = w.copy()
        nxt.vehicles.position[alive] = sub.position
        nxt.vehicles.heading[alive] = sub.heading
        nxt.vehicles.speed[alive] = sub.speed
        nxt.vehicles.steer[alive] = sub.steer
        nxt.decision_tick += 1

        terms = reward_terms(w, nxt, self.cfg.reward)
        collided = agents_in_collision(nxt, self.cfg.reward.collision_buffer)
        reached = bool(np.linalg.norm(nxt.centroid() - nxt.destination) <= self.cfg.goal_radius)
        info = dict(terms)
        info["formation_error"] = formation_error_of(nxt)
        info["collisions"] = int(round(-terms["r_avoid"]))
        info["reached"] = reached
        info["destination"] = nxt.destination.copy()
        if reached and self.cfg.relay_destination:
            axis = nxt.destination - w.centroid()
            axis /= max(np.linalg.norm(axis), 1e-12)
            nxt.destination = nxt.destination + self.cfg.dest_distance * axis
            reached = False
        all_collided = bool(np.all(collided[nxt.alive]))
        timeout = nxt.decision_tick >= self.cfg.episode_cap
        done = reached or all_collided or timeout
        info["success"] = reached
        info["timeout"] = timeout and not reached
        self.prev_world, self.world = w, nxt
        self.last_success = reached
        return self.observations(), terms["reward"], done, info


def go_to_goal_actions(env: FormationEnv) -> np.ndarray:
    """Scripted reference controller: full speed ahead, steer toward the destination."""
    w = env.world
    out = []
    table = dynamics._ACTION_TABLE
    for i in np.flatnonzero(w.alive):
        rel = w.destination - w.vehicles.position[i]
        err = math.atan2(rel[1], rel[0]) - w.vehicles.heading[i]
        err = (err + math.pi) % (2 * math.pi) - math.pi
        steer = 0.0 if abs(err) < 0.15 else (0.5 if abs(err) < 0.6 else 1.0) * math.copysign(1.0, err)
        k = int(np.flatnonzero((table[:, 0] == 1.0) & (table[:, 1] == steer))[0])
        out.append(k)
    return np.array(out, dtype=int)
