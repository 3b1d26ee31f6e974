"""Reference policies: Least Queue, uniform random, and a synchronous federated dueling DQN."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels as K
from .fedbuff import FlTransport, ProtocolError, payload_bits
from .nn import Adam, ModelParams, backward, forward, init_mlp, params_from_dict, params_to_dict
from .ppo import TrainingError


def least_queue_action(obs) -> int:
    """Smallest queue_len/queue_cap among self and observable neighbours; lowest node id wins ties."""
    if not obs.has_task:
        return 0
    local = obs.local
    best = (local.queue_len / local.queue_cap, obs.agent, 0)
    for k, (nb, snap) in enumerate(zip(obs.neighbor_ids, obs.neighbor_snapshots), start=1):
        if snap is None or not obs.action_mask[k]:
            continue
        cand = (snap.queue_len / snap.queue_cap, nb, k)
        if cand < best:
            best = cand
    return best[2]


class LeastQueuePolicy:
    name = "least_queue"

    def act(self, obs) -> int:
        return least_queue_action(obs)


class RandomPolicy:
    name = "random"

    def __init__(self, seed: int = 0, agent_id: int = 0):
        self.rng = np.random.default_rng([seed, 15485863, agent_id])

    def act(self, obs) -> int:
        allowed = np.flatnonzero(obs.action_mask)
        return int(allowed[self.rng.integers(len(allowed))])


# ------------------------------------------------------------------ dueling network


@dataclass
class DuelingParams:
    trunk: ModelParams
    value: ModelParams
    advantage: ModelParams
    shape_tag: str = "dueling"

    def arrays(self) -> list[np.ndarray]:
        return self.trunk.arrays() + self.value.arrays() + self.advantage.arrays()

    def copy(self) -> "DuelingParams":
        return DuelingParams(self.trunk.copy(), self.value.copy(), self.advantage.copy(), self.shape_tag)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def to_dict(self) -> dict:
        return {"shape_tag": self.shape_tag, "trunk": params_to_dict(self.trunk),
                "value": params_to_dict(self.value), "advantage": params_to_dict(self.advantage)}

    @classmethod
    def from_dict(cls, doc: dict) -> "DuelingParams":
        return cls(params_from_dict(doc["trunk"]), params_from_dict(doc["value"]), params_from_dict(doc["advantage"]))


def dueling_network(obs_dim: int, action_dim: int, rng: np.random.Generator, hidden=(256, 124)) -> DuelingParams:
    trunk = init_mlp([obs_dim, *hidden], ["tanh"] * len(hidden), rng, "trunk")
    value = init_mlp([hidden[-1], 1], ["identity"], rng, "value_head")
    adv = init_mlp([hidden[-1], action_dim], ["identity"], rng, "advantage_head")
    return DuelingParams(trunk, value, adv)


def _dueling_forward(params: DuelingParams, x: np.ndarray, mask: np.ndarray):
    h, tcache = forward(params.trunk, x)
    v, vcache = forward(params.value, h)
    a, acache = forward(params.advantage, h)
    q = K.dueling_combine(np.ascontiguousarray(v[:, 0]), np.ascontiguousarray(a), np.ascontiguousarray(mask))
    return q, (tcache, vcache, acache)


def dueling_q(params: DuelingParams, obs, mask) -> np.ndarray:
    """Q = V + A - mean(A over allowed actions); masked slots are -inf."""
    x = np.asarray(obs, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    single = x.ndim == 1
    if single:
        x, m = x[None, :], m[None, :]
    if m.shape[1] != params.advantage.out_dim:
        raise ValueError("mask width does not match the advantage head")
    q, _ = _dueling_forward(params, x, m)
    return q[0] if single else q


def dueling_backward(params: DuelingParams, cache, dq: np.ndarray, mask: np.ndarray) -> list[np.ndarray]:
    tcache, vcache, acache = cache
    dv, da = K.dueling_backward(np.ascontiguousarray(dq), np.ascontiguousarray(mask))
    gv, dh_v = backward(params.value, vcache, dv[:, None], input_grad=True)
    ga, dh_a = backward(params.advantage, acache, da, input_grad=True)
    gt = backward(params.trunk, tcache, dh_v + dh_a)
    return gt + gv + ga


@dataclass
class DqnConfig:
    gamma: float = 0.90
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20000
    replay_capacity: int = 10000
    target_sync: int = 500
    lr: float = 3e-4
    round_period: int = 150
    batch_size: int = 32
    train_every: int = 1
    hidden: tuple = (256, 124)
    double: bool = True

    def validate(self) -> None:
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        for name in ("eps_decay_steps", "replay_capacity", "target_sync", "round_period", "batch_size", "train_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


def td_targets(params: DuelingParams, target: DuelingParams, rewards, next_obs, next_mask, dones, gamma: float,
               double: bool = True) -> np.ndarray:
    """r + gamma * Q_target(s', a*) with a* from the online net (double estimation); r at terminals."""
    q_next_target = dueling_q(target, next_obs, next_mask)
    if double:
        q_next_online = dueling_q(params, next_obs, next_mask)
        best = np.argmax(q_next_online, axis=1)
    else:
        best = np.argmax(q_next_target, axis=1)
    boot = q_next_target[np.arange(len(best)), best]
    return np.asarray(rewards, dtype=np.float64) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * boot


def td_loss_and_grads(params: DuelingParams, obs, mask, actions, targets):
    """mean((y - Q(s, a))^2) and its gradient for every parameter array."""
    x = np.asarray(obs, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    q, cache = _dueling_forward(params, x, m)
    n = x.shape[0]
    rows = np.arange(n)
    err = targets - q[rows, actions]
    loss = float((err * err).mean())
    dq = np.zeros_like(q)
    dq[rows, actions] = -2.0 * err / n
    return loss, dueling_backward(params, cache, dq, m)


def dqn_train_step(batch: dict, params: DuelingParams, target_params: DuelingParams, cfg: DqnConfig, opt: Adam) -> float:
    y = td_targets(params, target_params, batch["rewards"], batch["next_obs"], batch["next_mask"], batch["dones"],
                   cfg.gamma, cfg.double)
    loss, grads = td_loss_and_grads(params, batch["obs"], batch["mask"], batch["actions"], y)
    if not np.isfinite(loss):
        raise TrainingError("non-finite TD loss", {"reward_range": (float(np.min(batch["rewards"])),
                                                                   float(np.max(batch["rewards"])))})
    opt.step(params, grads)
    return loss


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.mask = np.zeros((capacity, action_dim), dtype=bool)
        self.next_mask = np.zeros((capacity, action_dim), dtype=bool)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self._i = 0

    def add(self, obs, mask, action, reward, next_obs, next_mask, done) -> None:
        i = self._i
        self.obs[i] = obs
        self.mask[i] = mask
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.next_mask[i] = next_mask
        self.dones[i] = float(done)
        self._i = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(0, self.size, size=n)
        return {"obs": self.obs[idx], "mask": self.mask[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_obs": self.next_obs[idx], "next_mask": self.next_mask[idx], "dones": self.dones[idx]}


class DqnAgent:
    def __init__(self, agent_id: int, obs_dim: int, action_dim: int, cfg: DqnConfig, seed: int,
                 init: DuelingParams | None = None):
        cfg.validate()
        self.id = agent_id
        self.cfg = cfg
        self.rng = np.random.default_rng([seed, 32452843, agent_id])
        self.params = init.copy() if init is not None else dueling_network(obs_dim, action_dim, self.rng, cfg.hidden)
        self.target = self.params.copy()
        self.opt = Adam(cfg.lr)
        self.replay = ReplayBuffer(cfg.replay_capacity, obs_dim, action_dim)
        self.env_steps = 0
        self.train_steps = 0
        self.last_loss = float("nan")
        self._pending = None

    @property
    def epsilon(self) -> float:
        frac = min(1.0, self.env_steps / self.cfg.eps_decay_steps)
        return self.cfg.eps_start + frac * (self.cfg.eps_end - self.cfg.eps_start)

    def act(self, obs, explore: bool = True) -> int:
        allowed = np.flatnonzero(obs.action_mask)
        if explore and self.rng.random() < self.epsilon:
            a = int(allowed[self.rng.integers(len(allowed))])
        else:
            a = int(np.argmax(dueling_q(self.params, obs.features, obs.action_mask)))
        self._pending = (obs.features, obs.action_mask, a)
        return a

    def record(self, reward: float, next_obs, done: bool) -> None:
        feats, mask, a = self._pending
        self._pending = None
        self.replay.add(feats, mask, a, reward, next_obs.features, next_obs.action_mask, done)
        self.env_steps += 1
        if self.replay.size >= self.cfg.batch_size and self.env_steps % self.cfg.train_every == 0:
            self.last_loss = dqn_train_step(self.replay.sample(self.cfg.batch_size, self.rng), self.params,
                                            self.target, self.cfg, self.opt)
            self.train_steps += 1
        if self.env_steps % self.cfg.target_sync == 0:
            self.target = self.params.copy()

    def adopt(self, params: DuelingParams) -> None:
        self.params = params.copy()

    def state_dict(self) -> dict:
        return {"agent": self.id, "config": asdict(self.cfg), "params": self.params.to_dict(),
                "target": self.target.to_dict(), "optimizer": self.opt.state(), "env_steps": self.env_steps}

    def load_state_dict(self, doc: dict) -> None:
        self.params = DuelingParams.from_dict(doc["params"])
        self.target = DuelingParams.from_dict(doc["target"])
        self.opt.load_state(doc["optimizer"])
        self.env_steps = int(doc["env_steps"])


def fedavg_round(models: list, weights: list[float]):
    """Element-wise weighted mean of identically shaped models."""
    if not models:
        raise ProtocolError("no models to average")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(models) or (w < 0).any() or not w.sum() > 0:
        raise ProtocolError("weights must be non-negative, one per model, with a positive sum")
    shapes = [a.shape for a in models[0].arrays()]
    for m in models[1:]:
        if [a.shape for a in m.arrays()] != shapes:
            raise ProtocolError("models differ in shape")
    w = w / w.sum()
    out = models[0].copy()
    for i, dst in enumerate(out.arrays()):
        acc = np.zeros_like(dst)
        for wk, m in zip(w, models):
            acc += wk * m.arrays()[i]
        dst[...] = acc
    return out


class ScofCoordinator:
    """Synchronous FedAvg rounds for DQN agents, timed by the FL transport.

    Every ``round_period`` steps all agents upload their network; the manager
    waits for every upload, averages, and sends the result back. An agent is
    blocked from the moment it uploads until the averaged model reaches it.
    """

    def __init__(self, agents: dict[int, DqnAgent], transport: FlTransport, round_period: int, node: int | None = None,
                 audit: list | None = None):
        self.agents = agents
        self.transport = transport
        self.round_period = round_period
        self.node = transport.topology.global_manager if node is None else node
        self.audit = audit if audit is not None else []
        self.round = 0
        self._uploads: dict[int, tuple] = {}
        self._expected: set[int] = set()
        self._blocked: set[int] = set()
        self.rounds_completed = 0
        self.bits = None

    def _log(self, event: str, agent: int | None = None) -> None:
        self.audit.append({"tick": self.transport.now, "event": event, "agent": agent, "version": self.round,
                           "k": len(self._uploads)})

    def blocked(self, agent: int) -> bool:
        return agent in self._blocked

    def start_round(self) -> None:
        self.round += 1
        self._uploads.clear()
        self._expected = set(self.agents)
        for aid, agent in sorted(self.agents.items()):
            bits = payload_bits(agent.params.n_params())
            weight = max(1, agent.replay.size)
            self.transport.register(aid, self.node, bits, (self.round, aid, agent.params.copy(), weight), channel="manager")
            self._blocked.add(aid)
            self._log("submit", aid)

    def tick(self, step: int) -> None:
        """Advance after environment step ``step`` (1-based, global)."""
        self.transport.advance(1)
        for uid in self.transport.poll(self.node, channel="manager"):
            rnd, aid, params, weight = self.transport.take(uid)
            if rnd == self.round:
                self._uploads[aid] = (params, weight)
        if self._expected and set(self._uploads) == self._expected:
            ids = sorted(self._uploads)
            avg = fedavg_round([self._uploads[i][0] for i in ids], [self._uploads[i][1] for i in ids])
            self._log("aggregate")
            self._expected = set()
            self._uploads.clear()
            bits = payload_bits(avg.n_params())
            for aid in sorted(self.agents):
                self.transport.register(self.node, aid, bits, (self.round, avg), channel="agent")
            self._log("broadcast")
            self.rounds_completed += 1
        for aid, agent in self.agents.items():
            for uid in self.transport.poll(aid, channel="agent"):
                rnd, avg = self.transport.take(uid)
                if rnd == self.round and aid in self._blocked:
                    agent.adopt(avg)
                    self._blocked.discard(aid)
                    self._log("adopt", aid)
        if not self._blocked and not self._expected and step % self.round_period == 0:
            self.start_round()
