"""Multi-agent PPO with recurrent actors and a centralized critic."""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .curriculum import CurriculumState, curriculum_advance
from .dynamics import N_ACTIONS
from .env import FormationEnv, ScenarioConfig, formation_error_of
from .seeding import derive_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 10
    minibatches: int = 4
    lr: float = 5e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_steps: int = 300_000
    rollout_length: int = 200
    n_envs: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-3
    popart_beta: float = 1e-2
    target_clip: float = 5.0
    shared_policy: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.minibatches < 1 or self.minibatches > self.n_envs:
            raise ValueError("minibatches must be between 1 and n_envs")

    @property
    def steps_per_iteration(self) -> int:
        return self.rollout_length * self.n_envs


def shared_observation(obs: np.ndarray) -> np.ndarray:
    """Critic input per agent: all agents' inputs, ego first then cyclic order.

    ``obs`` is ``(..., N, D)``; the result is ``(..., N, N * D)``.
    """
    n = obs.shape[-2]
    rolled = [np.roll(obs, -k, axis=-2) for k in range(n)]
    return np.concatenate(rolled, axis=-1)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, E, N, D)
    share_obs: np.ndarray  # (T, E, N, N*D)
    actions: np.ndarray  # (T, E, N)
    logp: np.ndarray
    values: np.ndarray  # normalized critic outputs
    values_denorm: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray  # (T, E) episode ended after step t
    masks: np.ndarray  # (T, E) 0 -> hidden reset before step t
    active: np.ndarray  # (T, E, N)
    h_actor: np.ndarray  # (E, N, H) at rollout start
    h_critic: np.ndarray
    last_values: np.ndarray  # (E, N) bootstrap, de-normalized
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_transitions(self) -> int:
        return int(np.prod(self.actions.shape))


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """GAE over a ``(T, E, ...)`` rollout.  ``dones[t]`` cuts the trace after step ``t``."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = len(rewards)
    d = np.asarray(dones, dtype=float).reshape(dones.shape + (1,) * (rewards.ndim - np.ndim(dones)))
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        nxt = last_values if t == T - 1 else values[t + 1]
        nonterm = 1.0 - d[t]
        delta = rewards[t] + gamma * nxt * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv, active=None):
    adv = np.asarray(adv, dtype=float)
    sel = adv if active is None else adv[active]
    mean, std = sel.mean(), sel.std()
    return (adv - mean) / (std + 1e-8)


class Agents:
    """Actors and critics for all agent slots (shared or per-slot parameters)."""

    def __init__(self, obs_dim: int, n_slots: int, cfg: TrainerConfig, rng: np.random.Generator):
        self.n_slots = n_slots
        groups = 1 if cfg.shared_policy else n_slots
        self.policies = [nn.Policy(obs_dim, N_ACTIONS, rng) for _ in range(groups)]
        self.critics = [nn.ValueFunction(obs_dim * n_slots, rng, cfg.popart_beta) for _ in range(groups)]

    @classmethod
    def from_policies(cls, policies, critics, n_slots: int) -> "Agents":
        agents = object.__new__(cls)
        agents.policies, agents.critics, agents.n_slots = list(policies), list(critics), n_slots
        return agents

    def slots(self, g: int) -> list[int]:
        return list(range(self.n_slots)) if len(self.policies) == 1 else [g]

    def group_of(self, slot: int) -> int:
        return 0 if len(self.policies) == 1 else slot


def policy_step(agents: Agents, obs, h, masks, greedy: bool, rng):
    """Act for every slot of a batch of envs; ``obs`` is ``(E, N, D)``."""
    E, N = obs.shape[:2]
    actions = np.zeros((E, N), dtype=int)
    logp = np.zeros((E, N))
    probs_all = np.zeros((E, N, N_ACTIONS))
    h_new = np.empty_like(h)
    m = np.repeat(np.asarray(masks, dtype=float)[:, None], N, axis=1)
    for g, pol in enumerate(agents.policies):
        sl = agents.slots(g)
        logits, hn = pol.step(obs[:, sl].reshape(-1, obs.shape[-1]), h[:, sl].reshape(-1, h.shape[-1]),
                              m[:, sl].reshape(-1))
        lp = nn.log_softmax(logits)
        p = np.exp(lp)
        a = np.argmax(p, axis=-1) if greedy else sample_categorical(p, rng)
        actions[:, sl] = a.reshape(E, len(sl))
        logp[:, sl] = np.take_along_axis(lp, a[:, None], axis=-1)[:, 0].reshape(E, len(sl))
        probs_all[:, sl] = p.reshape(E, len(sl), -1)
        h_new[:, sl] = hn.reshape(E, len(sl), -1)
    return actions, logp, probs_all, h_new


def critic_step(agents: Agents, share_obs, h, masks):
    E, N = share_obs.shape[:2]
    values = np.zeros((E, N))
    h_new = np.empty_like(h)
    m = np.repeat(np.asarray(masks, dtype=float)[:, None], N, axis=1)
    for g, cr in enumerate(agents.critics):
        sl = agents.slots(g)
        v, hn = cr.step(share_obs[:, sl].reshape(-1, share_obs.shape[-1]), h[:, sl].reshape(-1, h.shape[-1]),
                        m[:, sl].reshape(-1))
        values[:, sl] = v.reshape(E, len(sl))
        h_new[:, sl] = hn.reshape(E, len(sl), -1)
    return values, h_new


def denormalize_values(agents: Agents, values):
    out = np.empty_like(values)
    for g, cr in enumerate(agents.critics):
        sl = agents.slots(g)
        out[..., sl] = cr.popart.denormalize(values[..., sl])
    return out


@dataclass
class EpisodeTracker:
    """Running sums for the episode in progress in one env."""

    reward: float = 0.0
    r_form: float = 0.0
    r_navi: float = 0.0
    r_avoid: float = 0.0
    formation_error: float = 0.0
    collisions: int = 0
    length: int = 0

    def add(self, rewards, info, alive):
        self.reward += float(rewards[alive].mean())
        self.r_form += info["r_form"]
        self.r_navi += float(info["r_navi"][alive].mean())
        self.r_avoid += info["r_avoid"]
        self.formation_error += info["formation_error"]
        self.collisions += info["collisions"]
        self.length += 1


EPISODE_FIELDS = ["episode", "level", "length", "reward", "r_form", "r_navi", "r_avoid", "formation_error",
                  "collisions", "success"]


class RolloutWorker:
    """A set of environments plus their carried recurrent state."""

    def __init__(self, envs: list[FormationEnv], agents: Agents):
        self.envs = envs
        self.obs = np.stack([e.reset() for e in envs])
        E, N = len(envs), envs[0].n_max
        H = nn.HIDDEN
        self.h_actor = np.zeros((E, N, H))
        self.h_critic = np.zeros((E, N, H))
        self.masks = np.zeros(E)  # first step of every env starts an episode
        self.trackers = [EpisodeTracker() for _ in envs]

    def active(self) -> np.ndarray:
        return np.stack([e.world.alive for e in self.envs])


def collect_rollouts(agents: Agents, worker: RolloutWorker, length: int, rng: np.random.Generator,
                     on_episode=None, greedy: bool = False) -> RolloutBuffer:
    envs = worker.envs
    E, N, D = worker.obs.shape
    buf = RolloutBuffer(
        obs=np.zeros((length, E, N, D)),
        share_obs=np.zeros((length, E, N, N * D)),
        actions=np.zeros((length, E, N), dtype=int),
        logp=np.zeros((length, E, N)),
        values=np.zeros((length, E, N)),
        values_denorm=np.zeros((length, E, N)),
        rewards=np.zeros((length, E, N)),
        dones=np.zeros((length, E), dtype=bool),
        masks=np.zeros((length, E)),
        active=np.zeros((length, E, N), dtype=bool),
        h_actor=worker.h_actor.copy(),
        h_critic=worker.h_critic.copy(),
        last_values=np.zeros((E, N)),
    )
    for t in range(length):
        obs = worker.obs
        share = shared_observation(obs)
        active = worker.active()
        actions, logp, _, h_a = policy_step(agents, obs, worker.h_actor, worker.masks, greedy, rng)
        values, h_c = critic_step(agents, share, worker.h_critic, worker.masks)
        buf.obs[t], buf.share_obs[t], buf.actions[t], buf.logp[t] = obs, share, actions, logp
        buf.values[t], buf.masks[t], buf.active[t] = values, worker.masks, active
        worker.h_actor, worker.h_critic = h_a, h_c
        next_obs = np.empty_like(obs)
        next_masks = np.ones(E)
        for e, env in enumerate(envs):
            alive = env.world.alive.copy()
            o, r, done, info = env.step(actions[e][alive])
            buf.rewards[t, e] = r
            worker.trackers[e].add(r, info, alive)
            if done:
                buf.dones[t, e] = True
                if on_episode is not None:
                    on_episode(e, env, worker.trackers[e], info)
                worker.trackers[e] = EpisodeTracker()
                o = env.reset()
                next_masks[e] = 0.0
            next_obs[e] = o
        worker.obs, worker.masks = next_obs, next_masks
    last, _ = critic_step(agents, shared_observation(worker.obs), worker.h_critic, worker.masks)
    buf.values_denorm = denormalize_values(agents, buf.values)
    buf.last_values = denormalize_values(agents, last)
    return buf


def _chunk_indices(n_envs: int, minibatches: int, rng) -> list[np.ndarray]:
    return np.array_split(rng.permutation(n_envs), minibatches)


def actor_loss_grad(logits, actions, old_logp, adv, active, clip: float, entropy_coef: float):
    """Clipped-surrogate loss and its gradient w.r.t. the logits."""
    lp = nn.log_softmax(logits)
    p = np.exp(lp)
    n = max(int(active.sum()), 1)
    w = active.astype(float) / n
    new_logp = np.take_along_axis(lp, actions[..., None], axis=-1)[..., 0]
    ratio = np.exp(new_logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1 - clip, 1 + clip) * adv
    use_unclipped = surr1 <= surr2
    ent = -(p * lp).sum(axis=-1)
    loss_pi = -float(np.sum(w * np.minimum(surr1, surr2)))
    loss_ent = float(np.sum(w * ent))
    d_newlogp = -w * adv * ratio * use_unclipped
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    dlogits = d_newlogp[..., None] * (onehot - p)
    dlogits += entropy_coef * (w[..., None] * p * (lp + ent[..., None]))
    diag = {
        "policy_loss": loss_pi,
        "entropy": loss_ent,
        "ratio_mean": float(np.sum(w * ratio)),
        "approx_kl": float(np.sum(w * (old_logp - new_logp))),
        "clip_frac": float(np.sum(w * (np.abs(ratio - 1) > clip))),
    }
    return loss_pi - entropy_coef * loss_ent, dlogits, diag


def critic_loss_grad(values, old_values, targets, active, clip: float, value_coef: float):
    n = max(int(active.sum()), 1)
    w = active.astype(float) / n
    v_clip = old_values + np.clip(values - old_values, -clip, clip)
    e1 = values - targets
    e2 = v_clip - targets
    use1 = e1 * e1 >= e2 * e2
    loss = 0.5 * float(np.sum(w * np.where(use1, e1 * e1, e2 * e2)))
    inside = np.abs(values - old_values) < clip
    dv = w * np.where(use1, e1, e2 * inside)
    return value_coef * loss, value_coef * dv


def ppo_update(agents: Agents, buf: RolloutBuffer, cfg: TrainerConfig, optimizers, rng) -> dict:
    """Run the PPO epochs over one rollout; mutates the networks in place."""
    T, E, N = buf.actions.shape
    adv_all = normalize_advantages(buf.advantages, buf.active)
    diags: dict[str, list] = {}
    first_ratio = None
    for g in range(len(agents.policies)):
        pol, cr = agents.policies[g], agents.critics[g]
        opt_a, opt_c = optimizers[g]
        sl = agents.slots(g)
        cr.popart.update(buf.returns[:, :, sl][buf.active[:, :, sl]], cr.net)
        targets = np.clip(cr.popart.normalize(buf.returns[:, :, sl]), -cfg.target_clip, cfg.target_clip)
        old_v = cr.popart.normalize(buf.values_denorm[:, :, sl])
        obs_n = pol.obs_rms.normalize(buf.obs[:, :, sl])
        sobs_n = cr.obs_rms.normalize(buf.share_obs[:, :, sl])
        for _ in range(cfg.epochs):
            for chunk in _chunk_indices(E, cfg.minibatches, rng):
                B = len(chunk) * len(sl)
                act = buf.active[:, chunk][:, :, sl].reshape(T, B)
                masks = np.repeat(buf.masks[:, chunk][:, :, None], len(sl), axis=2).reshape(T, B)
                x = obs_n[:, chunk].reshape(T, B, -1)
                h0 = buf.h_actor[chunk][:, sl].reshape(B, -1)
                logits, _, cache = pol.net.forward(x, h0, masks, keep_cache=True)
                loss_a, dlogits, d = actor_loss_grad(
                    logits, buf.actions[:, chunk][:, :, sl].reshape(T, B), buf.logp[:, chunk][:, :, sl].reshape(T, B),
                    adv_all[:, chunk][:, :, sl].reshape(T, B), act, cfg.clip, cfg.entropy_coef)
                if first_ratio is None:
                    first_ratio = d["ratio_mean"]
                ga = pol.net.backward(cache, dlogits)
                xs = sobs_n[:, chunk].reshape(T, B, -1)
                hc0 = buf.h_critic[chunk][:, sl].reshape(B, -1)
                vout, _, ccache = cr.net.forward(xs, hc0, masks, keep_cache=True)
                loss_v, dv = critic_loss_grad(vout[..., 0], old_v[:, chunk].reshape(T, B),
                                              targets[:, chunk].reshape(T, B), act, cfg.clip, cfg.value_coef)
                if not (math.isfinite(loss_a) and math.isfinite(loss_v)):
                    raise TrainingError(f"non-finite loss: actor={loss_a} critic={loss_v} diag={d}")
                gc = cr.net.backward(ccache, dv[..., None])
                d["grad_norm_actor"] = nn.clip_grad_norm(ga, cfg.max_grad_norm)
                d["grad_norm_critic"] = nn.clip_grad_norm(gc, cfg.max_grad_norm)
                d["value_loss"] = loss_v
                opt_a.step(pol.net.params, ga)
                opt_c.step(cr.net.params, gc)
                for k, v in d.items():
                    diags.setdefault(k, []).append(v)
        # normalizer statistics move only after the epochs so stored log-probs stay valid during them
        pol.obs_rms.update(buf.obs[:, :, sl][buf.active[:, :, sl]])
        cr.obs_rms.update(buf.share_obs[:, :, sl][buf.active[:, :, sl]])
    out = {k: float(np.mean(v)) for k, v in diags.items()}
    out["first_ratio_mean"] = first_ratio
    return out


METRIC_FIELDS = ["iteration", "steps", "level", "episodes", "reward", "r_form", "r_navi", "r_avoid",
                 "formation_error", "collisions", "success_rate", "policy_loss", "value_loss", "entropy",
                 "approx_kl", "clip_frac"]


class Trainer:
    """Collect -> GAE -> update loop with curriculum feed and resumable state."""

    def __init__(self, cfg: TrainerConfig, scenario: ScenarioConfig, level: int = 0, curriculum: bool = False):
        self.cfg = cfg
        self.scenario = scenario
        init_rng = derive_rng(cfg.seed, "init")
        self.agents = Agents(scenario.obs_dim, scenario.n_max, cfg, init_rng)
        self.optimizers = [
            (nn.Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
             nn.Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps))
            for _ in self.agents.policies
        ]
        self.policy_rng = derive_rng(cfg.seed, "policy")
        self.minibatch_rng = derive_rng(cfg.seed, "minibatch")
        envs = [FormationEnv(scenario, derive_rng(cfg.seed, "scenario", e), level) for e in range(cfg.n_envs)]
        self.worker = RolloutWorker(envs, self.agents)
        self.use_curriculum = curriculum
        self.curriculum = CurriculumState(level=level)
        self.iteration = 0
        self.steps = 0
        self.episodes: list[dict] = []
        self.metrics: list[dict] = []

    @property
    def level(self) -> int:
        return self.curriculum.level

    def _on_episode(self, e, env, tr: EpisodeTracker, info):
        row = {
            "episode": len(self.episodes), "level": env.level, "length": tr.length, "reward": tr.reward,
            "r_form": tr.r_form, "r_navi": tr.r_navi, "r_avoid": tr.r_avoid,
            "formation_error": tr.formation_error / max(tr.length, 1), "collisions": tr.collisions,
            "success": int(bool(info["success"])),
        }
        self.episodes.append(row)
        if self.use_curriculum:
            self.curriculum = curriculum_advance(self.curriculum, tr.reward)
            for env_ in self.worker.envs:
                env_.level = self.curriculum.level

    def iterate(self) -> dict:
        cfg = self.cfg
        n_before = len(self.episodes)
        buf = collect_rollouts(self.agents, self.worker, cfg.rollout_length, self.policy_rng, self._on_episode)
        buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values_denorm, buf.dones, buf.last_values,
                                                  cfg.gamma, cfg.gae_lambda)
        diag = ppo_update(self.agents, buf, cfg, self.optimizers, self.minibatch_rng)
        self.steps += cfg.steps_per_iteration
        if self.use_curriculum:
            self.curriculum = curriculum_advance(self.curriculum, None, cfg.steps_per_iteration)
            for env in self.worker.envs:
                env.level = self.curriculum.level
        eps = self.episodes[n_before:]

        def avg(key):
            return float(np.mean([r[key] for r in eps])) if eps else float("nan")

        row = {
            "iteration": self.iteration, "steps": self.steps, "level": self.level, "episodes": len(eps),
            "reward": avg("reward"), "r_form": avg("r_form"), "r_navi": avg("r_navi"), "r_avoid": avg("r_avoid"),
            "formation_error": avg("formation_error"), "collisions": avg("collisions"), "success_rate": avg("success"),
            "policy_loss": diag["policy_loss"], "value_loss": diag["value_loss"], "entropy": diag["entropy"],
            "approx_kl": diag["approx_kl"], "clip_frac": diag["clip_frac"],
        }
        self.metrics.append(row)
        self.iteration += 1
        log.info("iter %d steps %d level %d episodes %d reward %.3f ferr %.3f", row["iteration"], row["steps"],
                 row["level"], row["episodes"], row["reward"], row["formation_error"])
        return row

    def run(self, total_steps: int | None = None, callback=None):
        total = self.cfg.total_steps if total_steps is None else total_steps
        while self.steps + self.cfg.steps_per_iteration <= total:
            self.iterate()
            if callback is not None:
                callback(self)
        return self

    def save_state(self, path):
        nn.atomic_write_bytes(path, pickle.dumps(self))

    @staticmethod
    def load_state(path) -> "Trainer":
        with open(path, "rb") as f:
            return pickle.load(f)

    def save_checkpoint(self, path, meta: dict | None = None):
        info = {"trainer": asdict(self.cfg), "scenario": scenario_meta(self.scenario), "steps": self.steps,
                "level": self.level}
        info.update(meta or {})
        nn.save_checkpoint(path, self.agents.policies, self.agents.critics, info)


def scenario_meta(sc: ScenarioConfig) -> dict:
    return {
        "profile": sc.profile, "n_agents": sc.n_agents, "n_max": sc.n_max,
        "formation_side": sc.formation_side,
        "topologies": {str(n): np.asarray(q).tolist() for n, q in sc.topologies.items()},
    }


def agents_from_checkpoint(path) -> tuple[Agents, dict]:
    policies, critics, meta, _ = nn.load_checkpoint(path)
    n_slots = int(meta.get("scenario", {}).get("n_max", len(policies)))
    return Agents.from_policies(policies, critics, n_slots), meta


def run_episode(agents: Agents, env: FormationEnv, greedy: bool = True, rng=None, level: int | None = None,
                max_steps: int | None = None, disconnect_at: dict | None = None, observer=None) -> dict:
    """Roll one episode with the given policies; ``disconnect_at`` maps step -> agent id."""
    obs = env.reset(level)
    N = env.n_max
    h = np.zeros((1, N, nn.HIDDEN))
    masks = np.zeros(1)
    tr = EpisodeTracker()
    errors = []
    info = {"success": False}
    steps = 0
    cap = max_steps or env.cfg.episode_cap
    if observer is not None:
        observer(env, None, None)
    while steps < cap:
        if disconnect_at and steps in disconnect_at:
            obs = env.disconnect(disconnect_at[steps])
        errors.append(formation_error_of(env.world))
        actions, _, _, h = policy_step(agents, obs[None], h, masks, greedy, rng)
        alive = env.world.alive.copy()
        obs, r, done, info = env.step(actions[0][alive])
        masks = np.ones(1)
        tr.add(r, info, alive)
        steps += 1
        if observer is not None:
            observer(env, r, info)
        if done and max_steps is None:
            break
    return {"tracker": tr, "success": bool(info["success"]), "formation_errors": np.array(errors)}

