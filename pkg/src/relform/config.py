"""Run configuration: TOML-style files, defaults, validation and flag overrides.

Precedence, lowest to highest: built-in defaults, the config file, explicit
flag overrides.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .distill import DistillConfig
from .dynamics import VehicleParams, with_overrides
from .env import PROFILES, RewardConfig, ScenarioConfig
from .mappo import TrainerConfig
from .sensing import LidarConfig

MODES = ("train", "eval", "distill", "adapt-eval", "replay")
OUTPUT_ROOT_ENV = "RELFORM_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _fields(cls, exclude=()) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


TOP_LEVEL = {
    "mode": "train",
    "seed": 0,
    "level": 0,
    "curriculum": False,
    "output_dir": "runs",
    "checkpoint": "",
}

SECTIONS: dict[str, dict[str, Any]] = {
    "scenario": {
        "profile": "MPE",
        "n_agents": 3,
        "n_max": 0,  # 0 -> same as n_agents
        "formation_side": 0.0,  # 0 -> profile default
        "obstacle_radius": [],  # [] -> profile default; [lo, hi] otherwise
        "spawn_half_extent": 2.0,
        "dest_distance": 36.0,
        "corridor_width": 8.0,
        "episode_cap": 400,
        "goal_radius": 1.0,
        "decision_hz": 1.0,
        "control_hz": 100.0,
        "lidar_beams": 0,  # 0 -> profile default
        "lidar_range": 0.0,
        "topologies": {},
    },
    "vehicle": {k: None for k in _fields(VehicleParams)},
    "reward": _fields(RewardConfig),
    "trainer": _fields(TrainerConfig, exclude=("seed",)),
    "distill": {
        **_fields(DistillConfig, exclude=("seed",)),
        "dataset_episodes": 200,
        "dataset_steps": 100,
        "n_max": 5,
    },
    "eval": {"episodes": 10, "greedy": True},
    "adapt": {"n_agents": 5, "steps": 400, "disconnect": [144, 263]},
}


def _type_ok(value, default) -> bool:
    if default is None:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


@dataclass
class RunConfig:
    mode: str = "train"
    seed: int = 0
    level: int = 0
    curriculum: bool = False
    output_dir: str = "runs"
    checkpoint: str = ""
    sections: dict = field(default_factory=dict)
    source: str = ""

    def section(self, name: str) -> dict:
        return self.sections[name]

    @property
    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / self.output_dir if root else Path(self.output_dir)

    def scenario(self, n_agents: int | None = None, n_max: int | None = None) -> ScenarioConfig:
        s = self.sections["scenario"]
        profile = PROFILES[s["profile"]]
        vehicle = with_overrides(profile.vehicle, **self.sections["vehicle"])
        lidar = LidarConfig(s["lidar_beams"] or profile.lidar.beams, s["lidar_range"] or profile.lidar.max_range)
        n = n_agents or s["n_agents"]
        return ScenarioConfig(
            profile=s["profile"], n_agents=n, n_max=n_max or s["n_max"] or n, vehicle=vehicle, lidar=lidar,
            reward=RewardConfig(**self.sections["reward"]),
            topologies={int(k): v for k, v in s["topologies"].items()} or None,
            formation_side=s["formation_side"] or None, obstacle_radius=tuple(s["obstacle_radius"]) or None,
            spawn_half_extent=s["spawn_half_extent"], dest_distance=s["dest_distance"],
            corridor_width=s["corridor_width"], episode_cap=s["episode_cap"], goal_radius=s["goal_radius"],
            decision_hz=s["decision_hz"], control_hz=s["control_hz"],
        )

    def trainer(self) -> TrainerConfig:
        return TrainerConfig(seed=self.seed, **self.sections["trainer"])

    def distill(self) -> DistillConfig:
        keys = {f.name for f in dataclasses.fields(DistillConfig)}
        return DistillConfig(seed=self.seed, **{k: v for k, v in self.sections["distill"].items() if k in keys})


def _merge(target: dict, data: dict, where: str):
    for key, value in data.items():
        if where == "" and key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            _merge(target[key], value, key)
            continue
        defaults = TOP_LEVEL if where == "" else SECTIONS[where]
        name = key if where == "" else f"{where}.{key}"
        if key not in defaults:
            raise ConfigError(f"unknown key {name!r}")
        if not _type_ok(value, defaults[key]):
            raise ConfigError(f"{name}: expected {type(defaults[key]).__name__ if defaults[key] is not None else 'number'}, "
                              f"got {type(value).__name__}")
        target[key] = value


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare strings need no quoting on the command line
    return key.strip(), value


def _nest(dotted: dict) -> dict:
    out: dict = {}
    for key, value in dotted.items():
        head, _, tail = key.partition(".")
        if tail:
            out.setdefault(head, {})[tail] = value
        else:
            out[head] = value
    return out


def parse_config(path=None, overrides: dict | None = None, sets=()) -> RunConfig:
    """Load ``path`` (optional), then apply ``sets`` (``"a.b=v"`` strings) and ``overrides`` (dotted keys)."""
    merged: dict = {k: v for k, v in TOP_LEVEL.items()}
    for name, defaults in SECTIONS.items():
        merged[name] = dict(defaults)
    source = ""
    if path is not None:
        source = os.fspath(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        _merge(merged, data, "")
    flat = dict(_parse_override(s) for s in sets)
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    _merge(merged, _nest(flat), "")
    cfg = RunConfig(**{k: merged[k] for k in TOP_LEVEL}, sections={k: merged[k] for k in SECTIONS}, source=source)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.mode not in MODES:
        raise ConfigError(f"mode: must be one of {', '.join(MODES)}")
    if not 0 <= cfg.level <= 4:
        raise ConfigError("level: must be in 0..4")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed: must be a 64-bit unsigned integer")
    s = cfg.sections["scenario"]
    if s["profile"] not in PROFILES:
        raise ConfigError(f"scenario.profile: unknown profile {s['profile']!r}")
    if len(s["obstacle_radius"]) not in (0, 2):
        raise ConfigError("scenario.obstacle_radius: expected [lo, hi]")
    for key, builder in (("scenario", cfg.scenario), ("trainer", cfg.trainer), ("distill", cfg.distill)):
        try:
            builder()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    a = cfg.sections["adapt"]
    if a["steps"] < 1 or a["n_agents"] < 2:
        raise ConfigError("adapt: steps must be >= 1 and n_agents >= 2")
