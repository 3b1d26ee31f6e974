"""Per-agent offloading environment on top of the tick engine.

Each agent owns one worker. Once per tick it decides the fate of the first
queued task that has not been decided yet: keep it (action 0) or ship it to
the k-th neighbour in ascending id order (action k). With nothing to decide,
action 0 is a no-op and every other slot is masked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .simcore import SimConfig, TaskStatus, World, WorkerSnapshot, advance_tick
from .topology import ConfigurationError, Topology


class ContractViolation(RuntimeError):
    pass


@dataclass
class RewardWeights:
    wait: float = 1.0
    comm: float = 3.0
    exc: float = 0.5
    overload: float = 30.0
    utility: float = 100.0
    overload_eps: float = 1e-6

    def validate(self) -> None:
        for name in ("wait", "comm", "exc", "overload", "utility"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"reward weight {name} must be >= 0")
        if not self.overload_eps > 0:
            raise ConfigurationError("overload_eps must be positive")


@dataclass
class EnvConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    episode_length: int = 150
    completion_bonus: bool = True
    # cycles that make up one queued task when turning queue length into ticks;
    # None means the workload's mean task work
    work_unit: float | None = None
    max_power_dbm: float = 50.0

    def validate(self) -> None:
        self.sim.validate()
        self.weights.validate()
        if self.episode_length < 1:
            raise ConfigurationError("episode_length must be >= 1")


# ------------------------------------------------------------------ cost terms


def delay_terms(
    local_queue: float,
    local_capacity: float,
    work: float,
    target_queue: float | None = None,
    target_capacity: float | None = None,
    comm_ticks: float = 0.0,
    work_unit: float = 1.0,
) -> tuple[float, float, float]:
    """(T_wait, T_comm, T_exc) for one decision; ``target_*`` is None for local processing."""
    wait = local_queue * work_unit / local_capacity
    if target_capacity is None:
        return wait, 0.0, 0.0
    wait += target_queue * work_unit / target_capacity
    exc = work / target_capacity - work / local_capacity
    return wait, float(comm_ticks), exc


def weighted_delay(terms: tuple[float, float, float], weights: RewardWeights) -> float:
    wait, comm, exc = terms
    return weights.wait * wait + weights.comm * comm + weights.exc * exc


def overload_value(queue_len: float, service: float, queue_cap: float, eps: float = 1e-6) -> float:
    """Penalty -ln(p)/3 on the target's expected post-action free-queue fraction p."""
    expected = min(max(0.0, queue_len - service) + 1.0, queue_cap)
    p = max(eps, (queue_cap - expected) / queue_cap)
    return -math.log(p) / 3.0


# ------------------------------------------------------------------ observations


@dataclass
class Observation:
    agent: int
    features: np.ndarray
    action_mask: np.ndarray
    has_task: bool
    local: WorkerSnapshot
    neighbor_ids: tuple[int, ...]
    neighbor_snapshots: list
    task_id: int | None = None


LOCAL_FEATURES = 5
NEIGHBOR_FEATURES = 7
TASK_FEATURES = 6


def _norm(x: float, hi: float) -> float:
    if hi <= 0:
        return 0.0
    v = x / hi
    return 0.0 if v < 0 else (1.0 if v > 1 else v)


class OffloadEnv:
    def __init__(self, topology: Topology, config: EnvConfig | None = None):
        self.topology = topology
        self.config = config or EnvConfig()
        self.config.validate()
        self.agents = topology.agents
        if not self.agents:
            raise ConfigurationError("topology has no agent-hosting nodes")
        self.max_neighbors = topology.max_degree(self.agents)
        self.action_dim = 1 + self.max_neighbors
        self.obs_dim = LOCAL_FEATURES + NEIGHBOR_FEATURES * self.max_neighbors + TASK_FEATURES
        profiles = [n.profile for n in topology.nodes]
        self._qcap_max = max(p.queue_cap for p in profiles)
        self._cores_max = max(p.cores for p in profiles)
        self._freq_max = max(p.freq for p in profiles)
        shape = self.config.sim.workload.max_shape()
        self._rho_max, self._ain_max, self._aout_max, self._cpi_max, self._deadline_max = shape
        self._alpha_max = max(self._ain_max, self._aout_max)
        wu = self.config.work_unit
        self.work_unit = float(wu) if wu is not None else float(self.config.sim.workload.mean_work())
        self.world: World | None = None
        self.episode_rewards: dict[int, float] = {}
        self._pending: dict[int, int | None] = {}

    # -- lifecycle

    def reset(self, seed: int = 0) -> dict[int, Observation]:
        self.world = World(self.topology, self.config.sim, seed)
        self.episode_rewards = {a: 0.0 for a in self.agents}
        return {a: self.observe(a) for a in self.agents}

    @property
    def done(self) -> bool:
        return self.world.tick >= self.config.episode_length

    # -- observation

    def _mask(self, agent: int, task) -> np.ndarray:
        mask = np.zeros(self.action_dim, dtype=bool)
        mask[0] = True
        if task is None or task.hops >= self.config.sim.hop_limit:
            return mask
        known = self.world.snapshots[agent]
        for k, nb in enumerate(self.topology.adjacency[agent], start=1):
            if nb in known:
                mask[k] = True
        return mask

    def observe(self, agent: int) -> Observation:
        world = self.world
        w = world.workers[agent]
        local = world.snapshot(agent)
        task = world.offloadable(agent)
        self._pending[agent] = None if task is None else task.id
        qm, cm, fm, pm = self._qcap_max, self._cores_max, self._freq_max, self.config.max_power_dbm
        feats = [_norm(len(w.queue), qm), _norm(w.queue_cap, qm), _norm(w.cores, cm), _norm(w.freq, fm), _norm(w.tx_power, pm)]
        nbr_ids = self.topology.adjacency[agent]
        known = world.snapshots[agent]
        snaps = []
        for nb in nbr_ids:
            s = known.get(nb)
            snaps.append(s)
            if s is None:
                feats.extend((0.0,) * NEIGHBOR_FEATURES)
                continue
            lat = world.latency(agent, nb, task.input_bits) if task is not None else 0.0
            feats.extend(
                (1.0, _norm(s.queue_len, qm), _norm(s.queue_cap, qm), _norm(s.cores, cm), _norm(s.freq, fm),
                 _norm(s.tx_power, pm), _norm(lat, self._deadline_max))
            )
        feats.extend((0.0,) * (NEIGHBOR_FEATURES * (self.max_neighbors - len(nbr_ids))))
        if task is None:
            feats.extend((0.0,) * TASK_FEATURES)
        else:
            remaining = task.created_at + task.deadline - world.tick
            feats.extend(
                (1.0, _norm(task.instructions, self._rho_max), _norm(task.input_bits, self._alpha_max),
                 _norm(task.output_bits, self._alpha_max), _norm(task.cpi, self._cpi_max),
                 _norm(remaining, self._deadline_max))
            )
        return Observation(
            agent=agent,
            features=np.asarray(feats, dtype=np.float64),
            action_mask=self._mask(agent, task),
            has_task=task is not None,
            local=local,
            neighbor_ids=nbr_ids,
            neighbor_snapshots=snaps,
            task_id=None if task is None else task.id,
        )

    # -- costs

    def _target(self, agent: int, action: int) -> int:
        if action == 0:
            return agent
        nbrs = self.topology.adjacency[agent]
        if not 1 <= action <= len(nbrs):
            raise ContractViolation(f"agent {agent}: action {action} does not name a neighbour")
        return nbrs[action - 1]

    def _decision_task(self, agent: int):
        task = self.world.offloadable(agent)
        if task is None:
            raise ContractViolation(f"agent {agent} has no task to decide")
        return task

    def delay_cost(self, agent: int, action: int, task=None) -> float:
        world = self.world
        task = task or self._decision_task(agent)
        if not self._mask(agent, task)[action]:
            raise ContractViolation(f"agent {agent}: action {action} is masked")
        target = self._target(agent, action)
        w = world.workers[agent]
        if target == agent:
            terms = delay_terms(len(w.queue), w.capacity, task.work, work_unit=self.work_unit)
        else:
            t = world.workers[target]
            comm = world.latency(agent, target, task.output_bits)
            terms = delay_terms(len(w.queue), w.capacity, task.work, len(t.queue), t.capacity, comm, self.work_unit)
        return weighted_delay(terms, self.config.weights)

    def overload_penalty(self, agent: int, action: int) -> float:
        target = self._target(agent, action)
        t = self.world.workers[target]
        service = 1.0 if self.world.head_completes_this_tick(target) else 0.0
        return overload_value(len(t.queue), service, t.queue_cap, self.config.weights.overload_eps)

    def decision_cost(self, agent: int, action: int, task=None) -> float:
        """Cost part of the reward, d + chi_O * O."""
        return self.delay_cost(agent, action, task) + self.config.weights.overload * self.overload_penalty(agent, action)

    # -- transition

    def step(self, actions: dict[int, int | None]):
        if self.world is None:
            raise ContractViolation("step() before reset()")
        for a in actions:
            if a not in self._pending:
                raise ContractViolation(f"action for unknown agent {a}")
        costs = {a: 0.0 for a in self.agents}
        decided = {}

        def act(world: World) -> None:
            plan = []
            for agent in self.agents:
                choice = actions.get(agent)
                tid = self._pending.get(agent)
                if choice is None or tid is None:
                    continue
                choice = int(choice)
                task = world.tasks[tid]
                if task.status is not TaskStatus.QUEUED or task.decided:
                    raise ContractViolation(f"agent {agent}: observed task {tid} is no longer decidable")
                costs[agent] = self.decision_cost(agent, choice, task)
                plan.append((agent, task, self._target(agent, choice)))
            for agent, task, target in plan:
                decided[agent] = target
                if target == agent:
                    world.decide_local(agent, task)
                else:
                    world.offload(agent, task, target)

        events = advance_tick(self.world, act)
        bonus = {a: 0 for a in self.agents}
        completed = 0
        for ev in events:
            if ev.kind == "complete":
                completed += 1
                owner = ev.detail["owner"]
                if owner in bonus:
                    bonus[owner] += 1
        r_u = self.config.weights.utility if self.config.completion_bonus else 0.0
        rewards = {a: -costs[a] + r_u * bonus[a] for a in self.agents}
        for a, r in rewards.items():
            self.episode_rewards[a] += r
        obs = {a: self.observe(a) for a in self.agents}
        info = {
            "events": events,
            "decisions": decided,
            "completed": completed,
            "dropped_queue": sum(ev.kind == "drop_queue" for ev in events),
            "dropped_deadline": sum(ev.kind == "drop_deadline" for ev in events),
        }
        return obs, rewards, self.done, info

    def summary(self, episode: int) -> dict:
        c = self.world.counts
        done_tasks = [t for t in self.world.tasks.values() if t.status is TaskStatus.COMPLETED]
        created = len(self.world.tasks)
        return {
            "episode": episode,
            "finished_ratio": (len(done_tasks) / created) if created else 0.0,
            "avg_response_ticks": (sum(t.completed_at - t.created_at for t in done_tasks) / len(done_tasks))
            if done_tasks else None,
            "drops_queue": c[TaskStatus.DROPPED_QUEUE_FULL],
            "drops_deadline": c[TaskStatus.DROPPED_DEADLINE],
            "reward_per_agent": {str(a): r for a, r in self.episode_rewards.items()},
        }
