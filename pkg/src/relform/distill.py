"""Teacher-to-student policy distillation across formation sizes."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dynamics import N_ACTIONS
from .env import FormationEnv, ScenarioConfig
from .mappo import Agents, policy_step, run_episode
from .seeding import derive_rng
from .sensing import observation_size

log = logging.getLogger(__name__)

DATASET_VERSION = 1
PROB_FLOOR = 1e-8
DIVERGENCE_RATIO = 1.1  # a plateau wobbling within 10% is not divergence


class DistillationError(RuntimeError):
    pass


# -- loss --------------------------------------------------------------

def kl_loss(p_teacher, p_student, floor: float = PROB_FLOOR):
    """``sum_k pT_k * ln(pT_k / max(pS_k, floor))`` over the last axis; terms with ``pT_k = 0`` vanish."""
    p_t = np.asarray(p_teacher, dtype=float)
    p_s = np.asarray(p_student, dtype=float)
    if p_t.shape != p_s.shape:
        raise ValueError(f"distribution shapes differ: {p_t.shape} vs {p_s.shape}")
    safe_t = np.where(p_t > 0, p_t, 1.0)
    terms = np.where(p_t > 0, p_t * (np.log(safe_t) - np.log(np.maximum(p_s, floor))), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_loss_grad(p_teacher, logits, valid, floor: float = PROB_FLOOR):
    """Mean KL over valid records and its exact gradient w.r.t. the student logits."""
    p_s = nn.softmax(logits)
    kl = kl_loss(p_teacher, p_s, floor)
    n = max(int(valid.sum()), 1)
    w = valid.astype(float) / n
    # floored entries are constant in the logits and drop out of the gradient
    u = p_teacher * (p_s >= floor)
    d = p_s * u.sum(axis=-1, keepdims=True) - u
    return float(np.sum(w * kl)), w[..., None] * d


# -- datasets ----------------------------------------------------------

@dataclass
class DistillBuffer:
    """Flat records from one teacher; ``starts`` marks where each agent-episode sequence begins."""

    obs: np.ndarray  # (R, observation_size(n_max)) padded observation vectors
    mask: np.ndarray  # (R, n_max) death mask in ego-cyclic order
    probs: np.ndarray  # (R, |A|) teacher action distribution
    starts: np.ndarray  # (S + 1,) sequence offsets
    n_agents: int
    n_max: int
    source: str = ""

    def __post_init__(self):
        if len(self.obs) != len(self.mask) or len(self.obs) != len(self.probs) or self.starts[-1] != len(self.obs):
            raise ValueError("inconsistent buffer arrays")

    @property
    def n_records(self) -> int:
        return len(self.obs)

    @property
    def n_sequences(self) -> int:
        return len(self.starts) - 1

    def inputs(self) -> np.ndarray:
        return np.concatenate([self.obs, self.mask.astype(float)], axis=1)

    def sequence(self, k: int) -> slice:
        return slice(int(self.starts[k]), int(self.starts[k + 1]))

    def save(self, path):
        header = {"version": DATASET_VERSION, "n_agents": self.n_agents, "n_max": self.n_max, "source": self.source}
        buf = io.BytesIO()
        np.savez(buf, obs=self.obs, mask=self.mask, probs=self.probs, starts=self.starts,
                 header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8))
        nn.atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "DistillBuffer":
        with np.load(path) as z:
            header = json.loads(z["header"].tobytes().decode())
            if header.get("version") != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {header.get('version')}")
            return cls(z["obs"], z["mask"].astype(bool), z["probs"], z["starts"], header["n_agents"],
                       header["n_max"], header.get("source", ""))


def generate_teacher_dataset(teacher: Agents, scenario: ScenarioConfig, episodes: int, rng: np.random.Generator,
                             level: int = 0, episode_steps: int | None = None, greedy: bool = False) -> DistillBuffer:
    """Roll the teacher in its own environment and record padded inputs with its action distributions.

    With ``episode_steps`` set, every episode runs exactly that long and the
    destination relays forward on arrival, so long horizons are covered.
    """
    if teacher.policies[0].obs_dim != scenario.obs_dim:
        raise ValueError(f"teacher input width {teacher.policies[0].obs_dim} does not match layout {scenario.obs_dim}")
    if episode_steps is not None:
        scenario = dataclasses.replace(scenario, relay_destination=True)
    env = FormationEnv(scenario, rng, level)
    n_obs = observation_size(scenario.n_max)
    N = scenario.n_max
    obs_l, mask_l, probs_l, starts = [], [], [], [0]
    for _ in range(episodes):
        obs = env.reset()
        h = np.zeros((1, N, nn.HIDDEN))
        masks = np.zeros(1)
        seq_obs, seq_probs, seq_alive = [], [], []
        steps = 0
        while True:
            actions, _, probs, h = policy_step(teacher, obs[None], h, masks, greedy, rng)
            seq_obs.append(obs)
            seq_probs.append(probs[0])
            seq_alive.append(env.world.alive.copy())
            alive = env.world.alive.copy()
            obs, _, done, _ = env.step(actions[0][alive])
            masks = np.ones(1)
            steps += 1
            if (episode_steps is None and done) or (episode_steps is not None and steps >= episode_steps):
                break
        seq_obs, seq_probs, seq_alive = np.array(seq_obs), np.array(seq_probs), np.array(seq_alive)
        for i in range(N):
            rows = np.flatnonzero(seq_alive[:, i])
            if len(rows) == 0:
                continue
            obs_l.append(seq_obs[rows, i, :n_obs])
            mask_l.append(seq_obs[rows, i, n_obs:] > 0.5)
            probs_l.append(seq_probs[rows, i])
            starts.append(starts[-1] + len(rows))
    return DistillBuffer(np.concatenate(obs_l), np.concatenate(mask_l), np.concatenate(probs_l),
                         np.array(starts), scenario.n_agents, scenario.n_max)


def _pad_sequences(buf: DistillBuffer, seqs, inputs: np.ndarray):
    lengths = [buf.starts[k + 1] - buf.starts[k] for k in seqs]
    T, B = int(max(lengths)), len(seqs)
    x = np.zeros((T, B, inputs.shape[1]))
    p = np.full((T, B, buf.probs.shape[1]), 1.0 / buf.probs.shape[1])
    valid = np.zeros((T, B), dtype=bool)
    for b, k in enumerate(seqs):
        sl = buf.sequence(k)
        L = sl.stop - sl.start
        x[:L, b], p[:L, b], valid[:L, b] = inputs[sl], buf.probs[sl], True
    return x, p, valid


# -- training ----------------------------------------------------------

@dataclass
class DistillConfig:
    episodes: int = 1500
    batch_records: int = 1000
    lr: float = 1e-3
    lr_final: float | None = None  # linear decay from lr to lr_final over the run when set
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-3
    max_grad_norm: float = 5.0
    held_out: float = 0.1
    eval_every: int = 50
    divergence_window: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.batch_records < 1 or self.episodes < 1:
            raise ValueError("episodes and batch_records must be positive")
        if not 0 < self.held_out < 1:
            raise ValueError("held_out must be in (0, 1)")


HISTORY_FIELDS = ["episode", "teacher", "train_kl", "held_out_kl", "mean_held_out_kl"]


@dataclass
class DistillResult:
    student: nn.Policy
    best_episode: int
    history: list = field(default_factory=list)
    held_out: dict = field(default_factory=dict)  # teacher index -> held-out sequence ids
    held_out_kl: dict = field(default_factory=dict)
    agreement: dict = field(default_factory=dict)


def evaluate_student(student: nn.Policy, buf: DistillBuffer, seqs) -> tuple[float, float]:
    """Mean KL and argmax agreement of the student against the teacher on the given sequences."""
    if len(seqs) == 0:
        return float("nan"), float("nan")
    inputs = buf.inputs()
    x, p, valid = _pad_sequences(buf, seqs, inputs)
    logits, _ = student.net.forward(student.obs_rms.normalize(x), np.zeros((len(seqs), nn.HIDDEN)))
    kl = kl_loss(p, nn.softmax(logits))
    agree = np.argmax(logits, axis=-1) == np.argmax(p, axis=-1)
    return float(kl[valid].mean()), float(agree[valid].mean())


def distill(buffers: list[DistillBuffer], cfg: DistillConfig, init: nn.Policy | None = None) -> DistillResult:
    """Fit one recurrent student to every teacher buffer under the KL loss, rotating buffers each episode."""
    if not buffers:
        raise ValueError("need at least one teacher buffer")
    layouts = {(b.obs.shape[1], b.mask.shape[1]) for b in buffers}
    if len(layouts) != 1:
        raise ValueError(f"teacher buffers disagree on the observation layout: {sorted(layouts)}")
    in_dim = sum(layouts.pop())
    rng = derive_rng(cfg.seed, "distill")
    train, held = [], {}
    for t, b in enumerate(buffers):
        order = rng.permutation(b.n_sequences)
        n_held = max(1, int(round(cfg.held_out * b.n_sequences)))
        if n_held >= b.n_sequences:
            raise ValueError(f"teacher buffer {t} has too few sequences for a held-out split")
        held[t], train_seqs = np.sort(order[:n_held]), order[n_held:]
        train.append(train_seqs)
    if init is not None:
        if init.obs_dim != in_dim:
            raise ValueError(f"initial policy input width {init.obs_dim} != {in_dim}")
        student = nn.Policy(in_dim, N_ACTIONS, derive_rng(cfg.seed, "init"))
        student.net = init.net.copy()
        student.obs_rms.load(init.obs_rms.state())
    else:
        student = nn.Policy(in_dim, N_ACTIONS, derive_rng(cfg.seed, "init"))
        for t, b in enumerate(buffers):
            inputs = b.inputs()
            student.obs_rms.update(np.concatenate([inputs[b.sequence(k)] for k in train[t]]))
    opt = nn.Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    cached_inputs = [b.inputs() for b in buffers]
    result = DistillResult(student, -1, held_out=held)
    best = (math.inf, None)
    evals: list[tuple[int, float]] = []

    def evaluate(episode, train_kl):
        nonlocal best
        kls = [evaluate_student(student, b, held[t])[0] for t, b in enumerate(buffers)]
        mean = float(np.mean(kls))
        for t, k in enumerate(kls):
            result.history.append({"episode": episode, "teacher": t, "train_kl": train_kl, "held_out_kl": k,
                                   "mean_held_out_kl": mean})
        if not math.isfinite(mean):
            raise DistillationError(f"non-finite held-out KL at episode {episode}")
        if mean < best[0]:
            best = (mean, {k: v.copy() for k, v in student.net.params.items()})
            result.best_episode = episode
        evals.append((episode, mean))
        old = [m for e, m in evals if e <= episode - cfg.divergence_window]
        if (old and mean > DIVERGENCE_RATIO * old[-1]
                and result.best_episode <= episode - cfg.divergence_window):
            tail = ", ".join(f"{e}:{m:.4g}" for e, m in evals[-5:])
            raise DistillationError(f"held-out KL rose over {cfg.divergence_window} episodes ({tail})")
        log.info("distill episode %d held-out KL %s", episode, " ".join(f"{k:.4f}" for k in kls))

    evaluate(0, float("nan"))
    for ep in range(1, cfg.episodes + 1):
        if cfg.lr_final is not None:
            opt.lr = cfg.lr + (cfg.lr_final - cfg.lr) * (ep - 1) / max(cfg.episodes - 1, 1)
        t = (ep - 1) % len(buffers)
        b = buffers[t]
        order = rng.permutation(train[t])
        lengths = b.starts[order + 1] - b.starts[order]
        take = int(np.searchsorted(np.cumsum(lengths), cfg.batch_records)) + 1
        seqs = order[:take]
        x, p, valid = _pad_sequences(b, seqs, cached_inputs[t])
        logits, _, cache = student.net.forward(student.obs_rms.normalize(x), np.zeros((len(seqs), nn.HIDDEN)),
                                               keep_cache=True)
        loss, dlogits = kl_loss_grad(p, logits, valid)
        if not math.isfinite(loss):
            raise DistillationError(f"non-finite training KL at episode {ep} (teacher {t})")
        grads = student.net.backward(cache, dlogits)
        nn.clip_grad_norm(grads, cfg.max_grad_norm)
        opt.step(student.net.params, grads)
        if ep % cfg.eval_every == 0 or ep == cfg.episodes:
            evaluate(ep, loss)
    student.net.params = best[1]
    for t, b in enumerate(buffers):
        result.held_out_kl[t], result.agreement[t] = evaluate_student(student, b, held[t])
    return result


# -- adaptation ----------------------------------------------------------

def resolve_schedule(schedule, n_agents: int, steps: int) -> dict[int, int]:
    """Map disconnect steps to agent ids; ``None`` picks the highest-index agent still connected."""
    alive = list(range(n_agents))
    out = {}
    for step in sorted(schedule):
        agent = schedule[step]
        if not 0 <= step < steps:
            raise ValueError(f"disconnect step {step} outside the episode (0..{steps - 1})")
        if len(alive) <= 2:
            raise ValueError("schedule would leave fewer than 2 connected agents")
        if agent is None:
            agent = alive[-1]
        if agent not in alive:
            raise ValueError(f"agent {agent} is not connected at step {step}")
        alive.remove(agent)
        out[int(step)] = int(agent)
    return out


@dataclass
class AdaptationResult:
    errors: np.ndarray  # formation error at every decision step, logged after any disconnect
    schedule: dict
    alive_counts: np.ndarray
    rewards: list


def evaluate_adaptation(agents: Agents, scenario: ScenarioConfig, schedule, seed: int, steps: int = 400,
                        level: int = 0, observer=None) -> AdaptationResult:
    """Run one fixed-length greedy episode with scripted disconnects; the destination relays on arrival."""
    plan = resolve_schedule(schedule, scenario.n_agents, steps)
    sc = dataclasses.replace(scenario, relay_destination=True)
    env = FormationEnv(sc, derive_rng(seed, "scenario", "adapt"), level)
    counts, rewards = [], []

    def watch(e, r, info):
        if r is not None:
            counts.append(e.world.n_alive)
            rewards.append(r)
        if observer is not None:
            observer(e, r, info)

    out = run_episode(agents, env, greedy=True, rng=None, max_steps=steps, disconnect_at=plan, observer=watch)
    return AdaptationResult(out["formation_errors"], plan, np.array(counts), rewards)


def student_agents(student: nn.Policy, n_slots: int) -> Agents:
    return Agents.from_policies([student], [], n_slots)

