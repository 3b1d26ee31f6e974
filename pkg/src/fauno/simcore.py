"""Discrete-time engine: tasks, bounded worker queues, links and messages.

One call to :func:`advance_tick` runs a single tick in a fixed phase order::

    1. deliver due messages
    2. generate client tasks
    3. agents act (optional hook)
    4. workers process their queues
    5. expire tasks older than their deadline
    6. emit neighbour state shares

All randomness comes from generators owned by the world, so a world built
from the same topology, config and seed replays bit-identically.
"""
from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, NamedTuple

import numpy as np


class SimulationError(RuntimeError):
    pass


class RoutingError(SimulationError):
    pass


class TaskStatus(str, Enum):
    CREATED = "created"
    QUEUED = "queued"
    IN_TRANSIT = "in_transit"
    PROCESSING = "processing"
    COMPLETED = "completed"
    DROPPED_QUEUE_FULL = "dropped_queue_full"
    DROPPED_DEADLINE = "dropped_deadline"

    @property
    def terminal(self) -> bool:
        return self in _TERMINAL


_TERMINAL = {TaskStatus.COMPLETED, TaskStatus.DROPPED_QUEUE_FULL, TaskStatus.DROPPED_DEADLINE}

# in_transit covers both an offloaded task and its result travelling home
_TRANSITIONS = {
    TaskStatus.CREATED: {TaskStatus.QUEUED, TaskStatus.DROPPED_QUEUE_FULL, TaskStatus.DROPPED_DEADLINE},
    TaskStatus.QUEUED: {TaskStatus.IN_TRANSIT, TaskStatus.PROCESSING, TaskStatus.DROPPED_DEADLINE},
    TaskStatus.IN_TRANSIT: {
        TaskStatus.QUEUED,
        TaskStatus.COMPLETED,
        TaskStatus.DROPPED_QUEUE_FULL,
        TaskStatus.DROPPED_DEADLINE,
    },
    TaskStatus.PROCESSING: {TaskStatus.IN_TRANSIT, TaskStatus.DROPPED_DEADLINE},
}


@dataclass(slots=True)
class Task:
    id: int
    instructions: float
    input_bits: float
    output_bits: float
    cpi: float
    deadline: int
    origin: int
    created_at: int
    status: TaskStatus = TaskStatus.CREATED
    path: list[int] = field(default_factory=list)  # nodes that held the task, origin first
    hops: int = 0
    decided: bool = False  # current holder already chose local processing
    owner: int | None = None  # node that processed it
    completed_at: int | None = None
    result_idx: int = -1  # position in ``path`` currently holding the result

    def __post_init__(self):
        if min(self.instructions, self.input_bits, self.output_bits, self.cpi) <= 0 or self.deadline <= 0:
            raise ValueError(f"task {self.id}: size, cpi and deadline must be positive")

    @property
    def work(self) -> float:
        return self.instructions * self.cpi

    def set_status(self, new: TaskStatus) -> None:
        if new not in _TRANSITIONS.get(self.status, ()):
            raise SimulationError(f"task {self.id}: illegal transition {self.status.value} -> {new.value}")
        self.status = new


@dataclass(slots=True)
class WorkerState:
    id: int
    queue_cap: int
    cores: int
    freq: float
    tx_power: float
    queue: deque = field(default_factory=deque)  # task ids, FIFO
    remaining_work: float = 0.0

    @property
    def capacity(self) -> float:
        """Aggregate service rate N_phi * phi, cycles per tick."""
        return self.cores * self.freq

    @property
    def full(self) -> bool:
        return len(self.queue) >= self.queue_cap


@dataclass(frozen=True, slots=True)
class Link:
    src: int
    dst: int
    bandwidth: float  # Hz
    gain: float = 0.0  # dB
    noise: float = 20.0  # dBm

    def reversed(self) -> "Link":
        return Link(self.dst, self.src, self.bandwidth, self.gain, self.noise)


@dataclass(frozen=True, slots=True)
class WorkerSnapshot:
    node: int
    queue_len: int
    queue_cap: int
    cores: int
    freq: float
    tx_power: float
    snapshot_tick: int


@dataclass(slots=True)
class Message:
    src: int
    dst: int
    size: float
    kind: str  # task | result | state_share | fl_update
    payload: Any
    deliver_at: int


class Event(NamedTuple):
    tick: int
    kind: str
    node: int
    task_id: int | None = None
    detail: Any = None

    def to_json(self) -> str:
        return json.dumps(
            {"tick": self.tick, "kind": self.kind, "task_id": self.task_id, "node": self.node, "detail": self.detail},
            sort_keys=True,
        )


def shannon_rate(bandwidth: float, tx_power: float, gain: float, noise: float) -> float:
    """Link capacity in bits per second."""
    snr = 10.0 ** ((tx_power + gain - noise) / 10.0)
    return bandwidth * math.log2(1.0 + snr)


def comm_latency(size_bits: float, link: Link, ticks_per_second: float, tx_power: float = 40.0) -> int:
    """Ticks needed to push ``size_bits`` over ``link`` (Shannon-Hartley, ceil, floor 1)."""
    if not size_bits > 0:
        raise ValueError(f"size_bits must be positive, got {size_bits}")
    if not link.bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {link.bandwidth}")
    if not ticks_per_second > 0:
        raise ValueError(f"ticks_per_second must be positive, got {ticks_per_second}")
    rate = shannon_rate(link.bandwidth, tx_power, link.gain, link.noise)
    if not (math.isfinite(rate) and rate > 0):
        raise ValueError(f"link capacity is not finite/positive: {rate}")
    seconds = size_bits / rate
    return max(1, math.ceil(seconds * ticks_per_second))


def enqueue_task(worker: WorkerState, task: Task) -> bool:
    """Append ``task`` to the worker's FIFO, or drop it when the queue is full."""
    if task.status not in (TaskStatus.CREATED, TaskStatus.IN_TRANSIT):
        raise SimulationError(f"task {task.id} cannot be enqueued from status {task.status.value}")
    if worker.full:
        task.set_status(TaskStatus.DROPPED_QUEUE_FULL)
        return False
    task.set_status(TaskStatus.QUEUED)
    task.decided = False
    worker.queue.append(task.id)
    return True


def route_path(topology, src: int, dst: int) -> list[int]:
    """Shortest hop-count path, ties broken by the lexicographically smallest id sequence."""
    adj = topology.adjacency
    if src not in adj or dst not in adj:
        raise RoutingError(f"unknown node in route {src}->{dst}")
    if src == dst:
        return [src]
    dist = {dst: 0}
    frontier = deque([dst])
    while frontier:
        u = frontier.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                frontier.append(v)
    if src not in dist:
        raise RoutingError(f"no path from {src} to {dst}")
    path = [src]
    node = src
    while node != dst:
        node = min(v for v in adj[node] if dist.get(v, -1) == dist[node] - 1)
        path.append(node)
    return path


# ------------------------------------------------------------------ workload


@dataclass
class SyntheticWorkload:
    """Task shapes drawn around fixed means with optional uniform multiplicative jitter."""

    instructions: float = 8e6
    input_bits: float = 1.2e7
    output_bits: float = 1.2e7
    cpi: float = 1.0
    deadline: int = 100
    jitter: float = 0.0

    def draw(self, rng: np.random.Generator, count: int, tick: int, client: int):
        if count == 0:
            return []
        if self.jitter > 0:
            f = rng.uniform(1.0 - self.jitter, 1.0 + self.jitter, size=(count, 3))
        else:
            f = np.ones((count, 3))
        return [
            (self.instructions * f[i, 0], self.input_bits * f[i, 1], self.output_bits * f[i, 2], self.cpi, self.deadline)
            for i in range(count)
        ]

    def max_shape(self):
        s = 1.0 + self.jitter
        return self.instructions * s, self.input_bits * s, self.output_bits * s, self.cpi, self.deadline

    def mean_work(self) -> float:
        return self.instructions * self.cpi


# ------------------------------------------------------------------ world


@dataclass
class SimConfig:
    lam: float = 1.0  # Poisson arrivals per client per tick
    ticks_per_second: float = 10.0
    share_period: int = 1
    snapshot_bits: float = 1024.0
    hop_limit: int = 4
    workload: Any = field(default_factory=SyntheticWorkload)

    def validate(self) -> None:
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.ticks_per_second > 0:
            raise ValueError("ticks_per_second must be positive")
        if self.share_period < 1:
            raise ValueError("share_period must be >= 1")
        if self.hop_limit < 0:
            raise ValueError("hop_limit must be >= 0")


class World:
    """Mutable simulation state for one episode."""

    def __init__(self, topology, config: SimConfig, seed: int = 0):
        config.validate()
        self.topology = topology
        self.config = config
        self.seed = seed
        self.tick = 0
        self.workers: dict[int, WorkerState] = {}
        for node in topology.nodes:
            p = node.profile
            self.workers[node.id] = WorkerState(node.id, p.queue_cap, p.cores, p.freq, p.tx_power)
        self.node_ids = sorted(self.workers)
        self.clients = [n.id for n in topology.nodes if n.profile.receives_client_tasks]
        self.clients.sort()
        # one arrival stream per client so task streams never depend on agent actions
        self.client_rngs = {c: np.random.default_rng([seed, 7919, c]) for c in self.clients}
        self.tasks: dict[int, Task] = {}
        self.next_task_id = 0
        self._messages: list = []
        self._msg_seq = 0
        self._expiry: list = []
        # snapshots[observer][neighbor] -> latest WorkerSnapshot received
        self.snapshots: dict[int, dict[int, WorkerSnapshot]] = {n: {} for n in self.node_ids}
        self.events: list[Event] = []
        self.counts = {s: 0 for s in TaskStatus}
        self._latency_cache: dict[tuple[int, int, float], int] = {}

    # -- helpers

    def latency(self, src: int, dst: int, size_bits: float) -> int:
        key = (src, dst, size_bits)
        lat = self._latency_cache.get(key)
        if lat is None:
            link = self.topology.link(src, dst)
            lat = comm_latency(size_bits, link, self.config.ticks_per_second, self.workers[src].tx_power)
            self._latency_cache[key] = lat
        return lat

    def send(self, src: int, dst: int, size: float, kind: str, payload: Any, latency: int | None = None) -> Message:
        if latency is None:
            latency = self.latency(src, dst, size)
        msg = Message(src, dst, size, kind, payload, self.tick + latency)
        heapq.heappush(self._messages, (msg.deliver_at, self._msg_seq, msg))
        self._msg_seq += 1
        return msg

    def in_flight(self) -> int:
        return len(self._messages)

    def _status(self, task: Task, new: TaskStatus) -> None:
        self.counts[task.status] -= 1
        task.set_status(new)
        self.counts[new] += 1

    def _log(self, kind: str, node: int, task_id: int | None = None, detail: Any = None) -> None:
        self.events.append(Event(self.tick, kind, node, task_id, detail))

    def enqueue(self, node: int, task: Task) -> bool:
        worker = self.workers[node]
        old = task.status
        ok = enqueue_task(worker, task)
        self.counts[old] -= 1
        self.counts[task.status] += 1
        self._log("queued" if ok else "drop_queue", node, task.id)
        return ok

    def snapshot(self, node: int) -> WorkerSnapshot:
        w = self.workers[node]
        return WorkerSnapshot(node, len(w.queue), w.queue_cap, w.cores, w.freq, w.tx_power, self.tick)

    def offloadable(self, node: int) -> Task | None:
        """First queued task at ``node`` that still awaits a decision."""
        for tid in self.workers[node].queue:
            task = self.tasks[tid]
            if task.status is TaskStatus.QUEUED and not task.decided:
                return task
        return None

    def head_completes_this_tick(self, node: int) -> bool:
        w = self.workers[node]
        if not w.queue:
            return False
        head = self.tasks[w.queue[0]]
        remaining = w.remaining_work if head.status is TaskStatus.PROCESSING else head.work
        return remaining <= w.capacity

    # -- actions

    def decide_local(self, node: int, task: Task) -> None:
        task.decided = True
        self._log("decide_local", node, task.id)

    def offload(self, node: int, task: Task, target: int) -> Message:
        if target not in self.topology.adjacency[node]:
            raise SimulationError(f"node {target} is not a neighbour of {node}")
        self.workers[node].queue.remove(task.id)
        self._status(task, TaskStatus.IN_TRANSIT)
        task.hops += 1
        self._log("offload", node, task.id, {"to": target})
        return self.send(node, target, task.input_bits, "task", task.id)

    # -- phases

    def _deliver(self) -> None:
        msgs = self._messages
        while msgs and msgs[0][0] <= self.tick:
            _, _, msg = heapq.heappop(msgs)
            if msg.kind == "task":
                task = self.tasks[msg.payload]
                if task.status.terminal:
                    continue
                task.path.append(msg.dst)
                self.enqueue(msg.dst, task)
            elif msg.kind == "result":
                task = self.tasks[msg.payload]
                if task.status.terminal:
                    continue
                task.result_idx -= 1
                if self.tick - task.created_at > task.deadline:
                    # late result: the expiry phase of this tick would have claimed it anyway
                    self._status(task, TaskStatus.DROPPED_DEADLINE)
                    self._log("drop_deadline", msg.dst, task.id)
                elif msg.dst == task.origin:
                    self._status(task, TaskStatus.COMPLETED)
                    task.completed_at = self.tick
                    self._log("complete", msg.dst, task.id, {"owner": task.owner})
                else:
                    self._forward_result(task)
            elif msg.kind == "state_share":
                self.snapshots[msg.dst][msg.src] = msg.payload
            else:
                raise SimulationError(f"unknown message kind {msg.kind!r}")

    def _forward_result(self, task: Task) -> None:
        # walk back along the offload path, one hop per message
        here = task.path[task.result_idx]
        nxt = task.path[task.result_idx - 1]
        self._log("result_hop", here, task.id, {"to": nxt})
        self.send(here, nxt, task.output_bits, "result", task.id)

    def _generate(self) -> list[Task]:
        created = []
        for c in self.clients:
            created.extend(generate_tasks(self, c, self.config.lam, self.client_rngs[c]))
        for task in created:
            self.enqueue(task.origin, task)
        return created

    def _process(self) -> None:
        for node in self.node_ids:
            w = self.workers[node]
            budget = w.capacity
            while budget > 0 and w.queue:
                task = self.tasks[w.queue[0]]
                if task.status is not TaskStatus.PROCESSING:
                    self._status(task, TaskStatus.PROCESSING)
                    w.remaining_work = task.work
                    self._log("process_start", node, task.id)
                used = min(budget, w.remaining_work)
                w.remaining_work -= used
                budget -= used
                if w.remaining_work <= 1e-9 * task.work:
                    w.remaining_work = 0.0
                    w.queue.popleft()
                    self._finish(node, task)
                else:
                    break

    def _finish(self, node: int, task: Task) -> None:
        task.owner = node
        task.result_idx = len(task.path) - 1
        self._status(task, TaskStatus.IN_TRANSIT)
        self._log("process_end", node, task.id)
        if node == task.origin:
            # hand-off to the co-located client lands next tick
            task.result_idx = 1
            self.send(node, node, task.output_bits, "result", task.id, latency=1)
        else:
            self._forward_result(task)

    def _expire(self) -> None:
        heap = self._expiry
        while heap and heap[0][0] <= self.tick:
            _, tid = heapq.heappop(heap)
            task = self.tasks[tid]
            if task.status.terminal:
                continue
            if task.status in (TaskStatus.QUEUED, TaskStatus.PROCESSING):
                holder = task.path[-1]
                w = self.workers[holder]
                if w.queue and w.queue[0] == tid and task.status is TaskStatus.PROCESSING:
                    w.remaining_work = 0.0
                w.queue.remove(tid)
            self._status(task, TaskStatus.DROPPED_DEADLINE)
            self._log("drop_deadline", task.path[-1] if task.path else task.origin, tid)

    def _share(self) -> None:
        if self.tick % self.config.share_period:
            return
        adj = self.topology.adjacency
        for node in self.node_ids:
            snap = self.snapshot(node)
            for nb in adj[node]:
                self.send(node, nb, self.config.snapshot_bits, "state_share", snap)

    def register(self, task: Task) -> None:
        self.tasks[task.id] = task
        self.counts[TaskStatus.CREATED] += 1
        heapq.heappush(self._expiry, (task.created_at + task.deadline + 1, task.id))
        self._log("created", task.origin, task.id)

    # -- invariants (cheap enough to call every tick in tests)

    def check_invariants(self) -> None:
        buckets = {s: 0 for s in TaskStatus}
        for t in self.tasks.values():
            buckets[t.status] += 1
        if buckets != self.counts:
            raise SimulationError(f"status counters drifted: {buckets} vs {self.counts}")
        if buckets[TaskStatus.CREATED]:
            raise SimulationError("tasks left in 'created' after a tick")
        for w in self.workers.values():
            if len(w.queue) > w.queue_cap:
                raise SimulationError(f"queue bound violated at node {w.id}")
            head_processing = bool(w.queue) and self.tasks[w.queue[0]].status is TaskStatus.PROCESSING
            if (w.remaining_work > 0) != head_processing:
                raise SimulationError(f"remaining_work inconsistent at node {w.id}")
        for t in self.tasks.values():
            if t.status is TaskStatus.COMPLETED and t.completed_at - t.created_at > t.deadline:
                raise SimulationError(f"task {t.id} completed past its deadline")


def generate_tasks(world: World, client: int, lam: float, rng: np.random.Generator) -> list[Task]:
    """Draw this tick's Poisson(lam) arrivals for ``client`` and register them."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    workload = world.config.workload
    if hasattr(workload, "arrivals"):
        shapes = workload.arrivals(world.tick, client)
    else:
        shapes = workload.draw(rng, int(rng.poisson(lam)), world.tick, client)
    out = []
    for rho, a_in, a_out, cpi, deadline in shapes:
        task = Task(world.next_task_id, rho, a_in, a_out, cpi, int(deadline), client, world.tick, path=[client])
        world.next_task_id += 1
        world.register(task)
        out.append(task)
    return out


def advance_tick(world: World, act: Callable[[World], None] | None = None) -> list[Event]:
    """Run one tick; returns the events it produced."""
    start = len(world.events)
    world._deliver()
    world._generate()
    if act is not None:
        act(world)
    world._process()
    world._expire()
    world._share()
    world.tick += 1
    return world.events[start:]
