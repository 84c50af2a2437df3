"""Command-line entry points: train, eval, distill, adapt-eval, replay."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, parse_config
from .distill import (
    HISTORY_FIELDS,
    distill,
    evaluate_adaptation,
    generate_teacher_dataset,
    student_agents,
)
from .env import FormationEnv
from .mappo import EPISODE_FIELDS, METRIC_FIELDS, Trainer, agents_from_checkpoint, run_episode
from .plotting import plot_adaptation, plot_distillation, plot_training, plot_trajectory
from .records import (
    REPLAY_FIELDS,
    TrajectoryRecorder,
    finite_mean,
    max_abs_error,
    meta_path,
    read_csv,
    replay_rewards,
    write_csv,
)
from .seeding import derive_rng

log = logging.getLogger("relform")

REPLAY_TOLERANCE = 1e-6


class CommandError(RuntimeError):
    pass


def _summary(label: str, **values) -> str:
    parts = [label] + [f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items()]
    return " ".join(parts)


def _outdir(cfg: RunConfig, override: str | None) -> Path:
    if override:
        cfg.output_dir = override
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- train ---------------------------------------------------------------

def cmd_train(args) -> str:
    cfg = parse_config(args.config, {"seed": args.seed, "level": args.level, "mode": "train"}, args.set)
    out = _outdir(cfg, args.output)
    if args.resume:
        trainer = Trainer.load_state(args.resume)
    else:
        trainer = Trainer(cfg.trainer(), cfg.scenario(), level=cfg.level, curriculum=cfg.curriculum)
    every = trainer.cfg.checkpoint_every

    def on_iter(tr):
        if every and tr.iteration % every == 0:
            tr.save_checkpoint(out / f"checkpoint_{tr.steps:09d}.npz")
            tr.save_state(out / "trainer_state.pkl")

    trainer.run(callback=on_iter)
    trainer.save_checkpoint(out / "checkpoint.npz")
    trainer.save_state(out / "trainer_state.pkl")
    write_csv(out / "metrics.csv", METRIC_FIELDS, trainer.metrics)
    write_csv(out / "episodes.csv", EPISODE_FIELDS, trainer.episodes)
    if trainer.episodes:
        plot_training(trainer.episodes, out / "training_curves.png")
    tail = trainer.episodes[-max(1, len(trainer.episodes) // 10):]
    return _summary("train", steps=trainer.steps, level=trainer.level,
                    mean_reward=finite_mean([e["reward"] for e in tail]),
                    formation_error=finite_mean([e["formation_error"] for e in tail]),
                    success_rate=finite_mean([float(e["success"]) for e in tail]))


# -- eval ----------------------------------------------------------------

def cmd_eval(args) -> str:
    cfg = parse_config(args.scenario, {"seed": args.seed, "level": args.level, "mode": "eval"}, args.set)
    out = _outdir(cfg, args.output)
    agents, meta = agents_from_checkpoint(args.checkpoint)
    n_max = int(meta.get("scenario", {}).get("n_max", agents.n_slots))
    scenario = cfg.scenario(n_max=n_max)
    if scenario.obs_dim != agents.policies[0].obs_dim:
        raise CommandError(f"checkpoint expects input width {agents.policies[0].obs_dim}, scenario gives "
                           f"{scenario.obs_dim}")
    ev = cfg.section("eval")
    env = FormationEnv(scenario, derive_rng(cfg.seed, "scenario", "eval"), cfg.level)
    rng = derive_rng(cfg.seed, "policy", "eval")
    rec = TrajectoryRecorder()
    rows = []
    for k in range(ev["episodes"]):
        res = run_episode(agents, env, greedy=ev["greedy"], rng=rng, observer=rec)
        tr = res["tracker"]
        rows.append({"episode": k, "level": cfg.level, "length": tr.length, "reward": tr.reward, "r_form": tr.r_form,
                     "r_navi": tr.r_navi, "r_avoid": tr.r_avoid,
                     "formation_error": tr.formation_error / max(tr.length, 1), "collisions": tr.collisions,
                     "success": int(res["success"])})
    write_csv(out / "metrics.csv", EPISODE_FIELDS, rows)
    rec.save(out / "trajectory.csv", scenario)
    plot_trajectory(rec.rows, rec.meta(scenario), out / "trajectory.png")
    return _summary("eval", episodes=len(rows), mean_reward=finite_mean([r["reward"] for r in rows]),
                    formation_error=finite_mean([r["formation_error"] for r in rows]),
                    success_rate=finite_mean([float(r["success"]) for r in rows]))


# -- distill -------------------------------------------------------------

def load_teachers(directory) -> list[tuple[Path, object, dict]]:
    paths = sorted(Path(directory).glob("*.npz"))
    if not paths:
        raise CommandError(f"no teacher checkpoints (*.npz) in {directory}")
    teachers = []
    for p in paths:
        agents, meta = agents_from_checkpoint(p)
        if "scenario" not in meta:
            raise CommandError(f"{p} carries no scenario metadata")
        teachers.append((p, agents, meta))
    teachers.sort(key=lambda t: t[2]["scenario"]["n_agents"])
    return teachers


def cmd_distill(args) -> str:
    cfg = parse_config(args.config, {"seed": args.seed, "mode": "distill"}, args.set)
    out = _outdir(cfg, args.output)
    d = cfg.section("distill")
    buffers = []
    for path, agents, meta in load_teachers(args.teachers):
        sc_meta = meta["scenario"]
        if sc_meta["n_max"] != d["n_max"]:
            raise CommandError(f"{path.name}: teacher layout has {sc_meta['n_max']} slots, distill.n_max is {d['n_max']}")
        scenario = cfg.scenario(n_agents=sc_meta["n_agents"], n_max=sc_meta["n_max"])
        rng = derive_rng(cfg.seed, "dataset", sc_meta["n_agents"])
        buf = generate_teacher_dataset(agents, scenario, d["dataset_episodes"], rng, level=cfg.level,
                                       episode_steps=d["dataset_steps"] or None)
        buf.source = path.name
        buf.save(out / f"dataset_n{sc_meta['n_agents']}.npz")
        buffers.append(buf)
    result = distill(buffers, cfg.distill())
    meta = {"kind": "student", "scenario": {"n_max": d["n_max"], "n_agents": d["n_max"],
                                            "profile": cfg.section("scenario")["profile"]},
            "teachers": [b.source for b in buffers], "best_episode": result.best_episode}
    nn.save_checkpoint(out / "student.npz", [result.student], [], meta)
    write_csv(out / "metrics.csv", HISTORY_FIELDS, result.history)
    summary_rows = [{"teacher": b.source, "n_agents": b.n_agents, "held_out_kl": result.held_out_kl[t],
                     "agreement": result.agreement[t]} for t, b in enumerate(buffers)]
    write_csv(out / "agreement.csv", ["teacher", "n_agents", "held_out_kl", "agreement"], summary_rows)
    plot_distillation(result.history, out / "distill_curves.png")
    return _summary("distill", teachers=len(buffers), best_episode=result.best_episode,
                    held_out_kl=float(np.mean(list(result.held_out_kl.values()))),
                    min_agreement=float(min(result.agreement.values())))


# -- adapt-eval ------------------------------------------------------------

def parse_disconnects(text: str) -> dict:
    """``"144,263"`` or ``"144:4,263:3"`` -> {step: agent or None}."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        step, _, agent = item.partition(":")
        try:
            out[int(step)] = int(agent) if agent else None
        except ValueError as exc:
            raise CommandError(f"bad disconnect entry {item!r}") from exc
    return out


def cmd_adapt_eval(args) -> str:
    cfg = parse_config(args.config, {"seed": args.seed, "level": args.level, "mode": "adapt-eval"}, args.set)
    out = _outdir(cfg, args.output)
    a = cfg.section("adapt")
    agents, meta = agents_from_checkpoint(args.student)
    n_max = int(meta.get("scenario", {}).get("n_max", agents.n_slots))
    agents = student_agents(agents.policies[0], n_max)
    schedule = parse_disconnects(args.disconnect) if args.disconnect is not None else {s: None for s in a["disconnect"]}
    scenario = cfg.scenario(n_agents=a["n_agents"], n_max=n_max)
    rec = TrajectoryRecorder()
    try:
        res = evaluate_adaptation(agents, scenario, schedule, cfg.seed, steps=a["steps"], level=cfg.level,
                                  observer=rec)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    rows = [{"step": t, "alive": int(c), "formation_error": e}
            for t, (c, e) in enumerate(zip(res.alive_counts, res.errors))]
    write_csv(out / "adaptation.csv", ["step", "alive", "formation_error"], rows)
    rec.save(out / "trajectory.csv", scenario)
    plot_adaptation(res.errors, res.schedule, out / "adaptation.png")
    return _summary("adapt-eval", steps=len(res.errors),
                    disconnects=";".join(f"{s}:{g}" for s, g in res.schedule.items()),
                    final_error=float(res.errors[-1]), mean_error=float(np.mean(res.errors)))


# -- replay ----------------------------------------------------------------

def cmd_replay(args) -> str:
    traj = Path(args.trajectory)
    if not traj.exists() or not meta_path(traj).exists():
        raise CommandError(f"need {traj} and its sidecar {meta_path(traj).name}")
    cfg = parse_config(args.config, {"mode": "replay"}, args.set)
    out = _outdir(cfg, args.output)
    rows = replay_rewards(traj)
    write_csv(out / "replay.csv", REPLAY_FIELDS, rows)
    with open(meta_path(traj)) as f:
        meta = json.load(f)
    plot_trajectory(read_csv(traj), meta, out / "replay_trajectory.png")
    err = max_abs_error(rows)
    if err > REPLAY_TOLERANCE:
        raise CommandError(f"replayed rewards differ from the log by up to {err:.3g}")
    return _summary("replay", rows=len(rows), max_abs_error=err)


# -- entry -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relform", description="Distributed formation control toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="TOML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. trainer.total_steps=50000 (repeatable)")
        sp.add_argument("--output", help=f"output directory (prefixed by ${OUTPUT_ROOT_ENV} when set)")

    t = sub.add_parser("train", help="train teachers with multi-agent PPO")
    common(t, config_required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--level", type=int)
    t.add_argument("--resume", help="trainer_state.pkl from an earlier run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll a checkpoint in a scenario")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenario", required=True, help="TOML file with [scenario] and [eval] tables")
    e.add_argument("--seed", type=int)
    e.add_argument("--level", type=int)
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("distill", help="distill teacher checkpoints into one student")
    d.add_argument("--teachers", required=True, help="directory of teacher checkpoints")
    common(d)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_distill)

    a = sub.add_parser("adapt-eval", help="scripted disconnects with a student policy")
    a.add_argument("--student", required=True)
    a.add_argument("--disconnect", help="comma-separated steps, optionally step:agent")
    common(a)
    a.add_argument("--seed", type=int)
    a.add_argument("--level", type=int)
    a.set_defaults(func=cmd_adapt_eval)

    r = sub.add_parser("replay", help="recompute rewards from a trajectory log")
    r.add_argument("--trajectory", required=True)
    common(r)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        print(args.func(args))
    except (ConfigError, CommandError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # sub-operation failure: report and exit nonzero
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
