"""Local actor-critic learner: PPO-clip with GAE and a proximal pull toward the global critic."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import _kernels as K
from .nn import Adam, ModelParams, backward, forward, init_mlp, params_from_dict, params_to_dict


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class PpoConfig:
    gamma: float = 0.90
    gae_lambda: float = 0.95
    clip_eps: float = 0.5
    lr_actor: float = 1e-3
    lr_critic: float = 3e-4
    c1: float = 0.5  # critic loss weight
    c2: float = 0.5  # entropy bonus weight
    mu: float = 0.005  # proximal weight toward the last adopted global critic
    epochs: int = 4
    minibatch: int = 30
    steps_per_train: int = 150  # N
    share_every: int = 1  # T, in iterations
    actor_hidden: tuple = (64, 32)
    critic_hidden: tuple = (256, 124)
    normalize_advantages: bool = True
    save_interval: int = 1500

    def validate(self) -> None:
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if not (self.lr_actor > 0 and self.lr_critic > 0):
            raise ValueError("learning rates must be positive")
        if min(self.c1, self.c2, self.mu) < 0:
            raise ValueError("c1, c2 and mu must be >= 0")
        if self.epochs < 1 or self.minibatch < 1 or self.steps_per_train < 1 or self.share_every < 1:
            raise ValueError("epochs, minibatch, steps_per_train and share_every must be >= 1")


def actor_network(obs_dim: int, action_dim: int, rng: np.random.Generator, hidden=(64, 32)) -> ModelParams:
    sizes = [obs_dim, *hidden, action_dim]
    return init_mlp(sizes, ["tanh"] * len(hidden) + ["softmax"], rng, "actor")


def critic_network(obs_dim: int, rng: np.random.Generator, hidden=(256, 124)) -> ModelParams:
    sizes = [obs_dim, *hidden, 1]
    return init_mlp(sizes, ["tanh"] * len(hidden) + ["identity"], rng, "critic")


def _as_batch(obs, mask=None):
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if mask is None:
        return x, None, single
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m[None, :]
    return x, m, single


def actor_log_probs(theta: ModelParams, obs, mask) -> np.ndarray:
    x, m, single = _as_batch(obs, mask)
    if m.shape != (x.shape[0], theta.out_dim):
        raise ValueError(f"mask shape {m.shape} does not match actor output {theta.out_dim}")
    if not m.any(axis=1).all():
        raise ValueError("every mask needs at least one allowed action")
    logits, _ = forward(theta, x)
    logp = K.masked_log_softmax(np.ascontiguousarray(logits), np.ascontiguousarray(m))
    return logp[0] if single else logp


def actor_forward(theta: ModelParams, obs, mask) -> np.ndarray:
    """Action probabilities; masked slots are exactly 0."""
    logp = actor_log_probs(theta, obs, mask)
    return np.exp(logp)


def critic_forward(w: ModelParams, obs):
    x, _, single = _as_batch(obs)
    v, _ = forward(w, x)
    return float(v[0, 0]) if single else v[:, 0]


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    p = np.asarray(probs, dtype=np.float64)
    total = p.sum()
    if not total > 0 or (p < 0).any():
        raise ValueError("cannot sample from a degenerate distribution")
    cdf = np.cumsum(p / total)
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, len(p) - 1)
    while p[a] == 0:  # never land on a zero-probability slot via rounding
        a -= 1
    return a, float(np.log(p[a]))


def gae(rewards, values, value_last: float, gamma: float, lam: float, dones=None):
    """Generalized advantage estimates and return targets (advantage + value).

    ``dones[t]`` truncates the sum after step t and drops the bootstrap.
    """
    r = np.ascontiguousarray(rewards, dtype=np.float64)
    v = np.ascontiguousarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError("rewards and values must have equal length")
    d = np.zeros_like(r) if dones is None else np.ascontiguousarray(dones, dtype=np.float64)
    adv = K.gae(r, v, d, float(value_last), float(gamma), float(lam))
    return adv, adv + v


@dataclass
class Batch:
    obs: np.ndarray
    mask: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.mask[idx], self.actions[idx], self.logp_old[idx], self.advantages[idx], self.returns[idx])


def ppo_loss_and_grads(theta: ModelParams, w: ModelParams, batch: Batch, cfg: PpoConfig, w_global: ModelParams | None = None):
    """Minibatch-mean of -clip + c1*value + -c2*entropy, plus mu*||w - w_global||^2.

    Returns (stats, actor_grads, critic_grads).
    """
    n = batch.obs.shape[0]
    logits, acache = forward(theta, batch.obs)
    logp = K.masked_log_softmax(np.ascontiguousarray(logits), batch.mask)
    dlogits, surr, ent, clipped = K.ppo_head(logp, batch.mask, batch.actions, batch.logp_old, batch.advantages,
                                             float(cfg.clip_eps), float(cfg.c2))
    g_theta = backward(theta, acache, dlogits / n)

    v, ccache = forward(w, batch.obs)
    err = batch.returns - v[:, 0]
    dv = (-2.0 * cfg.c1 / n) * err
    g_w = backward(w, ccache, dv[:, None])

    prox = 0.0
    if cfg.mu > 0 and w_global is not None:
        for g, a, b in zip(g_w, w.arrays(), w_global.arrays()):
            diff = a - b
            prox += float((diff * diff).sum())
            g += 2.0 * cfg.mu * diff
        prox *= cfg.mu
    policy_loss = -float(surr.mean())
    value_loss = cfg.c1 * float((err * err).mean())
    entropy = float(ent.mean())
    total = policy_loss + value_loss - cfg.c2 * entropy + prox
    stats = {
        "loss": total,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "proximal": prox,
        "clip_fraction": float(np.mean(clipped)),
    }
    return stats, g_theta, g_w


@dataclass
class Trajectory:
    obs: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    def append(self, obs, mask, action, log_prob, reward, done, value=np.nan) -> None:
        if log_prob > 1e-12:
            raise ValueError("log probabilities must be <= 0")
        self.obs.append(obs)
        self.masks.append(mask)
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))
        self.values.append(float(value))

    def clear(self) -> None:
        for lst in (self.obs, self.masks, self.actions, self.log_probs, self.rewards, self.values, self.dones):
            lst.clear()


def ppo_update(
    traj: Trajectory,
    theta: ModelParams,
    w: ModelParams,
    cfg: PpoConfig,
    rng: np.random.Generator,
    opt_actor: Adam,
    opt_critic: Adam,
    w_global: ModelParams | None = None,
    value_last: float = 0.0,
) -> dict:
    """K epochs of shuffled minibatch PPO on one trajectory; updates theta and w in place."""
    obs = np.asarray(traj.obs, dtype=np.float64)
    mask = np.asarray(traj.masks, dtype=bool)
    values = critic_forward(w, obs)
    adv, returns = gae(traj.rewards, values, value_last, cfg.gamma, cfg.gae_lambda, traj.dones)
    if cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    data = Batch(obs, mask, np.asarray(traj.actions, dtype=np.int64), np.asarray(traj.log_probs), adv, returns)
    n = len(traj)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = data.take(order[start:start + cfg.minibatch])
            stats, g_theta, g_w = ppo_loss_and_grads(theta, w, mb, cfg, w_global)
            if not np.isfinite(stats["loss"]):
                raise TrainingError(
                    "non-finite PPO loss",
                    {"stats": stats, "adv_range": (float(adv.min()), float(adv.max())),
                     "return_range": (float(returns.min()), float(returns.max()))},
                )
            opt_actor.step(theta, g_theta)
            opt_critic.step(w, g_w)
            history.append(stats)
    if not (theta.all_finite() and w.all_finite()):
        raise TrainingError("parameters became non-finite", {"last": history[-1] if history else None})
    out = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    out["mean_reward"] = float(np.mean(traj.rewards))
    return out


class PpoAgent:
    """One agent's actor, critic, optimizers and training-loop bookkeeping."""

    def __init__(self, agent_id: int, obs_dim: int, action_dim: int, cfg: PpoConfig, seed: int,
                 critic_init: ModelParams | None = None):
        cfg.validate()
        self.id = agent_id
        self.cfg = cfg
        self.rng = np.random.default_rng([seed, 104729, agent_id])
        self.theta = actor_network(obs_dim, action_dim, self.rng, cfg.actor_hidden)
        self.w = critic_init.copy() if critic_init is not None else critic_network(obs_dim, self.rng, cfg.critic_hidden)
        self.w_base = self.w.copy()  # last adopted global critic
        self.opt_actor = Adam(cfg.lr_actor)
        self.opt_critic = Adam(cfg.lr_critic)
        self.version = 0
        self.steps = 0  # local updates since the last adoption
        self.iteration = 0
        self.total_steps = 0
        self.traj = Trajectory()
        self.last_stats: dict = {}
        self._pending = None

    # -- acting

    def act(self, obs, explore: bool = True) -> int:
        logp = actor_log_probs(self.theta, obs.features, obs.action_mask)
        probs = np.exp(logp)
        if explore:
            a, lp = sample_action(probs, self.rng)
        else:
            a = int(np.argmax(np.where(obs.action_mask, probs, -1.0)))
            lp = float(logp[a])
        self._pending = (obs.features, obs.action_mask, a, lp)
        return a

    def record(self, reward: float, done: bool) -> None:
        feats, mask, a, lp = self._pending
        self.traj.append(feats, mask, a, lp, reward, done)
        self._pending = None
        self.total_steps += 1

    @property
    def ready(self) -> bool:
        return len(self.traj) >= self.cfg.steps_per_train

    # -- training-loop hooks

    def adopt(self, critic: ModelParams, version: int) -> bool:
        if version <= self.version:
            return False
        self.w = critic.copy()
        self.w_base = critic.copy()
        self.version = version
        self.steps = 0
        return True

    def check_newer_global(self, client) -> bool:
        if client is None:
            return False
        newest = client.newest_global()
        if newest is None:
            return False
        version, critic = newest
        return self.adopt(critic, version)

    def critic_delta(self) -> list[np.ndarray]:
        return self.w.minus(self.w_base)

    def train(self, next_features=None) -> dict:
        value_last = 0.0
        if self.traj.dones and not self.traj.dones[-1] and next_features is not None:
            value_last = critic_forward(self.w, next_features)
        stats = ppo_update(self.traj, self.theta, self.w, self.cfg, self.rng, self.opt_actor, self.opt_critic,
                           self.w_base, value_last)
        self.traj.clear()
        self.steps += 1
        self.iteration += 1
        self.last_stats = stats
        return stats

    def maybe_share(self, client) -> bool:
        if client is None or self.iteration % self.cfg.share_every:
            return False
        client.share(self.critic_delta(), self.steps, self.version)
        return True

    # -- checkpoints

    def state_dict(self) -> dict:
        return {
            "agent": self.id,
            "config": asdict(self.cfg),
            "actor": params_to_dict(self.theta),
            "critic": params_to_dict(self.w),
            "critic_base": params_to_dict(self.w_base),
            "optimizer_actor": self.opt_actor.state(),
            "optimizer_critic": self.opt_critic.state(),
            "global_version": self.version,
            "steps": self.steps,
            "total_steps": self.total_steps,
        }

    def load_state_dict(self, doc: dict) -> None:
        self.theta = params_from_dict(doc["actor"])
        self.w = params_from_dict(doc["critic"])
        self.w_base = params_from_dict(doc.get("critic_base", doc["critic"]))
        self.opt_actor.load_state(doc["optimizer_actor"])
        self.opt_critic.load_state(doc["optimizer_critic"])
        self.version = int(doc["global_version"])
        self.steps = int(doc["steps"])
        self.total_steps = int(doc.get("total_steps", 0))


def save_checkpoint(path, agents: list[PpoAgent], algorithm: str = "fauno", extra: dict | None = None) -> None:
    doc = {"format": "fauno-checkpoint/1", "algorithm": algorithm, "agents": [a.state_dict() for a in agents]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not str(doc.get("format", "")).startswith("fauno-checkpoint/"):
        raise ValueError(f"{path} is not a checkpoint file")
    return doc


@dataclass
class IterationStats:
    iteration: int
    episode_rewards: list
    train: dict
    shared: bool
    adopted: bool


def local_train_loop(env, agent: PpoAgent, federation=None, others=None, seed: int = 0) -> Iterator[IterationStats]:
    """Local training loop for one learning agent; yields after every PPO update.

    Runs until the caller stops iterating. Other agents in ``env`` act through
    ``others(obs) -> action`` (default: process locally).
    """
    client = federation.client(agent.id) if federation is not None else None
    episode = 0
    obs = env.reset(seed)
    ep_reward = 0.0
    while True:
        adopted = agent.check_newer_global(client)
        finished = []
        while not agent.ready:
            actions = {a: (others(o) if others else 0) for a, o in obs.items() if a != agent.id}
            actions[agent.id] = agent.act(obs[agent.id])
            obs, rewards, done, _ = env.step(actions)
            agent.record(rewards[agent.id], done)
            ep_reward += rewards[agent.id]
            if federation is not None:
                federation.tick()
            if done:
                finished.append(ep_reward)
                ep_reward = 0.0
                episode += 1
                obs = env.reset(seed + episode)
        stats = agent.train(obs[agent.id].features)
        shared = agent.maybe_share(client)
        yield IterationStats(agent.iteration, finished, stats, shared, adopted)
