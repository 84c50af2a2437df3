"""Obstacle-density curriculum: advance a level once episode rewards plateau."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .env import LEVEL_DENSITIES

MAX_LEVEL = len(LEVEL_DENSITIES) - 1


@dataclass
class CurriculumState:
    level: int = 0
    steps_in_level: int = 0
    window: int = 50
    rel_slope_tol: float = 0.01
    step_cap: int = 6_000_000
    rewards: deque = field(default_factory=deque)

    @property
    def densities(self) -> tuple:
        return LEVEL_DENSITIES


def window_slope(values) -> float:
    y = np.asarray(values, dtype=float)
    x = np.arange(len(y), dtype=float)
    x -= x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def plateaued(values, rel_tol: float) -> bool:
    """Drift across the window, |slope| * (W - 1), within ``rel_tol`` of |mean|."""
    drift = abs(window_slope(values)) * (len(values) - 1)
    return drift <= rel_tol * abs(float(np.mean(values)))


def curriculum_advance(state: CurriculumState, new_episode_reward: float | None = None, steps: int = 0) -> CurriculumState:
    """Feed one finished episode (and/or elapsed env steps); returns the updated state."""
    rewards = deque(state.rewards, maxlen=state.window)
    if new_episode_reward is not None:
        rewards.append(float(new_episode_reward))
    out = CurriculumState(state.level, state.steps_in_level + steps, state.window, state.rel_slope_tol,
                          state.step_cap, rewards)
    if out.level >= MAX_LEVEL:
        return out
    full = len(rewards) == state.window
    if (full and plateaued(list(rewards), state.rel_slope_tol)) or out.steps_in_level >= state.step_cap:
        return CurriculumState(out.level + 1, 0, state.window, state.rel_slope_tol, state.step_cap, deque())
    return out
