"""Buffered semi-asynchronous aggregation of critic updates.

Agents ship critic displacements to a node-resident global manager through an
:class:`FlTransport`, which charges every update the multi-hop link latency of
its serialized size. Once the buffer holds at least K distinct agents the
manager folds them into the global critic, bumps the version and sends the
new critic back to every agent.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .nn import ModelParams
from .simcore import comm_latency, route_path


class ProtocolError(RuntimeError):
    pass


HEADER_BITS = 1024
BITS_PER_PARAM = 64


def payload_bits(n_params: int) -> float:
    return float(BITS_PER_PARAM * n_params + HEADER_BITS)


@dataclass
class FlUpdate:
    update_id: int
    agent_id: int
    delta: list  # per-layer arrays, critic layout
    steps: int
    version: int
    size_bits: float
    submitted_tick: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ProtocolError(f"update {self.update_id}: steps must be >= 1")


class SubmitResult(str, Enum):
    STAGED = "staged"
    REPLACED = "replaced_older"
    REJECTED_STALE = "rejected_stale"
    DISCARDED = "discarded"


class UpdateBuffer:
    def __init__(self, threshold: int, shapes: list[tuple] | None = None, staleness: str = "reject"):
        if threshold < 1:
            raise ValueError("buffer threshold K must be >= 1")
        if staleness not in ("reject", "scale"):
            raise ValueError("staleness must be 'reject' or 'scale'")
        self.threshold = threshold
        self.shapes = shapes
        self.staleness = staleness
        self.entries: dict[int, FlUpdate] = {}
        self.stale_weight: dict[int, float] = {}
        self.rejected = 0

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def ready(self) -> bool:
        return self.k >= self.threshold

    def submit(self, upd: FlUpdate, current_version: int) -> SubmitResult:
        if self.shapes is not None:
            got = [tuple(np.shape(d)) for d in upd.delta]
            if got != [tuple(s) for s in self.shapes]:
                raise ProtocolError(f"update {upd.update_id} from agent {upd.agent_id} has shapes {got}")
        weight = 1.0
        if upd.version < current_version:
            if self.staleness == "reject":
                self.rejected += 1
                return SubmitResult.REJECTED_STALE
            weight = 1.0 / math.sqrt(1.0 + current_version - upd.version)
        old = self.entries.get(upd.agent_id)
        if old is None:
            self.entries[upd.agent_id] = upd
            self.stale_weight[upd.agent_id] = weight
            return SubmitResult.STAGED
        if upd.steps > old.steps:
            self.entries[upd.agent_id] = upd
            self.stale_weight[upd.agent_id] = weight
            return SubmitResult.REPLACED
        return SubmitResult.DISCARDED

    def clear(self) -> None:
        self.entries.clear()
        self.stale_weight.clear()


def compute_coefficients(buffer: UpdateBuffer) -> dict[int, float]:
    """Step-proportional weights p_k summing to one."""
    if buffer.k == 0:
        raise ProtocolError("cannot weigh an empty buffer")
    raw = {a: u.steps * buffer.stale_weight.get(a, 1.0) for a, u in buffer.entries.items()}
    total = sum(raw.values())
    return {a: r / total for a, r in raw.items()}


@dataclass
class GlobalCritic:
    weights: ModelParams
    version: int = 0
    server_lr: float = 1.0


def aggregate(global_critic: GlobalCritic, buffer: UpdateBuffer) -> GlobalCritic:
    """w + lr * sum_k p_k * delta_k, version + 1; clears the buffer."""
    if not buffer.ready:
        raise ProtocolError(f"aggregation needs k >= {buffer.threshold}, buffer holds {buffer.k}")
    coeffs = compute_coefficients(buffer)
    new = global_critic.weights.copy()
    for agent in sorted(buffer.entries):
        new.add_(buffer.entries[agent].delta, global_critic.server_lr * coeffs[agent])
    buffer.clear()
    return GlobalCritic(new, global_critic.version + 1, global_critic.server_lr)


# ------------------------------------------------------------------ transport


class FlTransport:
    """Delivers opaque payloads between nodes after a configurable delay.

    The default delay is the sum over the routed hops of the link latency for
    the payload size, with a one-tick floor.
    """

    def __init__(self, topology, ticks_per_second: float = 10.0,
                 delay_fn: Callable[[int, int, float], int] | None = None):
        self.topology = topology
        self.ticks_per_second = ticks_per_second
        self.delay_fn = delay_fn or self.multihop_delay
        self.now = 0
        self._next_id = 0
        self._pending: list = []
        self._inbox: dict[tuple[int, str], list[int]] = {}
        self.payloads: dict[int, object] = {}
        self.meta: dict[int, dict] = {}

    def multihop_delay(self, src: int, dst: int, bits: float) -> int:
        path = route_path(self.topology, src, dst)
        total = 0
        for a, b in zip(path[:-1], path[1:]):
            tx = self.topology.node(a).profile.tx_power
            total += comm_latency(bits, self.topology.link(a, b), self.ticks_per_second, tx)
        return max(1, total)

    def register(self, src: int, dst: int, bits: float, payload=None, channel: str = "agent") -> int:
        if not bits > 0:
            raise ValueError("payload size must be positive")
        delay = int(self.delay_fn(src, dst, bits))
        uid = self._next_id
        self._next_id += 1
        due = self.now + delay
        heapq.heappush(self._pending, (due, uid, dst, channel))
        self.payloads[uid] = payload
        self.meta[uid] = {"src": src, "dst": dst, "bits": bits, "sent": self.now, "due": due, "channel": channel}
        return uid

    def advance(self, ticks: int = 1) -> None:
        self.now += ticks
        while self._pending and self._pending[0][0] <= self.now:
            _, uid, dst, channel = heapq.heappop(self._pending)
            self._inbox.setdefault((dst, channel), []).append(uid)

    def poll(self, node: int, channel: str = "agent") -> list[int]:
        """Ids delivered to ``node`` since the last poll, each returned once."""
        return self._inbox.pop((node, channel), [])

    def take(self, uid: int):
        return self.payloads.pop(uid)

    def in_flight(self) -> int:
        return len(self._pending)


# ------------------------------------------------------------------ manager / clients


class GlobalManager:
    def __init__(self, critic: ModelParams, agents: list[int], transport: FlTransport, threshold: int | None = None,
                 server_lr: float = 1.0, node: int | None = None, staleness: str = "reject",
                 audit: list | None = None):
        self.agents = list(agents)
        self.transport = transport
        self.node = transport.topology.global_manager if node is None else node
        self.global_critic = GlobalCritic(critic.copy(), 0, server_lr)
        shapes = [a.shape for a in critic.arrays()]
        k = threshold if threshold is not None else math.ceil(len(self.agents) / 2)
        self.buffer = UpdateBuffer(k, shapes, staleness)
        self.audit = audit if audit is not None else []
        self.aggregations = 0
        self.critic_bits = payload_bits(critic.n_params())

    def _log(self, event: str, agent: int | None = None) -> None:
        self.audit.append({"tick": self.transport.now, "event": event, "agent": agent,
                           "version": self.global_critic.version, "k": self.buffer.k})

    def receive(self, upd: FlUpdate) -> SubmitResult:
        res = self.buffer.submit(upd, self.global_critic.version)
        name = {SubmitResult.STAGED: "submit", SubmitResult.REPLACED: "replace",
                SubmitResult.REJECTED_STALE: "reject_stale", SubmitResult.DISCARDED: "discard"}[res]
        self._log(name, upd.agent_id)
        if self.buffer.ready:
            self.global_critic = aggregate(self.global_critic, self.buffer)
            self.aggregations += 1
            self._log("aggregate")
            self.broadcast()
        return res

    def broadcast(self) -> list[int]:
        gc = self.global_critic
        ids = []
        for agent in self.agents:
            payload = (gc.version, gc.weights.copy())
            ids.append(self.transport.register(self.node, agent, self.critic_bits, payload, channel="agent"))
        self._log("broadcast")
        return ids

    def process(self) -> None:
        for uid in self.transport.poll(self.node, channel="manager"):
            self.receive(self.transport.take(uid))


class FederatedClient:
    def __init__(self, agent_id: int, transport: FlTransport, manager: GlobalManager):
        self.agent_id = agent_id
        self.transport = transport
        self.manager = manager
        self._newest: tuple[int, ModelParams] | None = None
        self._returned = -1

    def share(self, delta: list, steps: int, version: int) -> int:
        bits = payload_bits(sum(np.size(d) for d in delta))
        upd = FlUpdate(-1, self.agent_id, [np.array(d, copy=True) for d in delta], steps, version, bits,
                       self.transport.now)
        uid = self.transport.register(self.agent_id, self.manager.node, bits, upd, channel="manager")
        upd.update_id = uid
        return uid

    def newest_global(self):
        """Highest-version critic delivered so far, if newer than the last one handed out."""
        for uid in self.transport.poll(self.agent_id, channel="agent"):
            version, weights = self.transport.take(uid)
            self.manager._log("deliver", self.agent_id)
            if self._newest is None or version > self._newest[0]:
                self._newest = (version, weights)
        if self._newest is None or self._newest[0] <= self._returned:
            return None
        self._returned = self._newest[0]
        self.manager.audit.append({"tick": self.transport.now, "event": "adopt", "agent": self.agent_id,
                                   "version": self._newest[0], "k": self.manager.buffer.k})
        return self._newest


class Federation:
    """Transport, manager and per-agent clients advanced together on the simulation clock."""

    def __init__(self, topology, critic: ModelParams, agents: list[int], ticks_per_second: float = 10.0,
                 threshold: int | None = None, server_lr: float = 1.0, staleness: str = "reject",
                 delay_fn=None):
        self.audit: list[dict] = []
        self.transport = FlTransport(topology, ticks_per_second, delay_fn)
        self.manager = GlobalManager(critic, agents, self.transport, threshold, server_lr, staleness=staleness,
                                     audit=self.audit)
        self.clients = {a: FederatedClient(a, self.transport, self.manager) for a in agents}

    def client(self, agent_id: int) -> FederatedClient:
        return self.clients[agent_id]

    def tick(self) -> None:
        self.transport.advance(1)
        self.manager.process()

    def stats(self) -> dict:
        return {
            "aggregations": self.manager.aggregations,
            "rejections": self.manager.buffer.rejected,
            "version": self.manager.global_critic.version,
        }

    def write_audit(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.audit:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
