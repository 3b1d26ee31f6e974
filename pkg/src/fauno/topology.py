"""Network builders: clustered star hierarchies and random geometric graphs."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .simcore import Link


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    cores: int
    freq: float  # per-core instructions per tick
    queue_cap: int = 10
    tx_power: float = 40.0  # dBm
    receives_client_tasks: bool = False
    hosts_agent: bool = True

    def __post_init__(self):
        if self.cores <= 0 or self.freq <= 0 or self.queue_cap <= 0:
            raise ConfigurationError(f"profile {self.name!r}: cores, freq and queue_cap must be positive")

    @property
    def capacity(self) -> float:
        return self.cores * self.freq


# CPU capability of each device class in millis; only the ratios carry meaning.
DEVICE_MILLIS = {
    "rpi4": 7200,
    "rpi5_6gb": 9600,
    "rpi6_8gb": 9600,
    "nuc": 14800,
    "cloudlet": 290400,
}
DEVICE_CORES = {"rpi4": 4, "rpi5_6gb": 4, "rpi6_8gb": 4, "nuc": 4, "cloudlet": 32}
SBC_VARIANTS = ("rpi4", "rpi5_6gb", "rpi6_8gb")


def default_profiles(instr_per_milli: float = 1e3, queue_cap: int = 10, tx_power: float = 40.0) -> dict[str, DeviceProfile]:
    """Profiles for every device class; aggregate capacity is millis * instr_per_milli."""
    out = {}
    for name, millis in DEVICE_MILLIS.items():
        cores = DEVICE_CORES[name]
        out[name] = DeviceProfile(
            name=name,
            cores=cores,
            freq=millis * instr_per_milli / cores,
            queue_cap=queue_cap,
            tx_power=tx_power,
            receives_client_tasks=name in SBC_VARIANTS,
        )
    return out


@dataclass(frozen=True)
class LinkDefaults:
    bandwidth: float = 4e6
    gain: float = 0.0
    noise: float = 20.0


@dataclass(frozen=True)
class Node:
    id: int
    profile: DeviceProfile
    x: float = 0.0
    y: float = 0.0


@dataclass
class Topology:
    nodes: list[Node]
    links: dict[tuple[int, int], Link]
    global_manager: int
    adjacency: dict[int, tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        adj: dict[int, set] = {n.id: set() for n in self.nodes}
        for (a, b), link in list(self.links.items()):
            if a == b:
                raise ConfigurationError(f"self-link at node {a}")
            if a not in adj or b not in adj:
                raise ConfigurationError(f"link {a}-{b} references an unknown node")
            self.links.setdefault((b, a), link.reversed())
            adj[a].add(b)
            adj[b].add(a)
        self.adjacency = {n: tuple(sorted(s)) for n, s in adj.items()}
        self._by_id = {n.id: n for n in self.nodes}
        if len(self._by_id) != len(self.nodes):
            raise ConfigurationError("duplicate node ids")
        self.validate()

    def node(self, node_id: int) -> Node:
        return self._by_id[node_id]

    def link(self, src: int, dst: int) -> Link:
        try:
            return self.links[(src, dst)]
        except KeyError:
            raise ConfigurationError(f"no link {src}->{dst}") from None

    @property
    def agents(self) -> list[int]:
        return sorted(n.id for n in self.nodes if n.profile.hosts_agent)

    @property
    def clients(self) -> list[int]:
        return sorted(n.id for n in self.nodes if n.profile.receives_client_tasks)

    def max_degree(self, among=None) -> int:
        ids = self.adjacency if among is None else among
        return max((len(self.adjacency[i]) for i in ids), default=0)

    def reachable_from(self, start: int) -> set[int]:
        seen = {start}
        todo = deque([start])
        while todo:
            u = todo.popleft()
            for v in self.adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    todo.append(v)
        return seen

    def is_connected(self) -> bool:
        return len(self.reachable_from(self.nodes[0].id)) == len(self.nodes) if self.nodes else True

    def validate(self) -> None:
        if self.global_manager not in self._by_id:
            raise ConfigurationError(f"global manager {self.global_manager} is not a node")
        missing = set(self._by_id) - self.reachable_from(self.global_manager)
        if missing:
            raise ConfigurationError(f"topology is disconnected; unreachable from manager: {sorted(missing)}")

    # -- serialization

    def to_dict(self) -> dict:
        seen = set()
        links = []
        for (a, b), link in sorted(self.links.items()):
            if (b, a) in seen:
                continue
            seen.add((a, b))
            links.append({"src": a, "dst": b, "bandwidth_hz": link.bandwidth, "gain_db": link.gain, "noise_dbm": link.noise})
        return {
            "nodes": [{"id": n.id, "profile": asdict(n.profile), "x": n.x, "y": n.y} for n in self.nodes],
            "links": links,
            "global_manager": self.global_manager,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        try:
            nodes = [Node(int(n["id"]), DeviceProfile(**n["profile"]), float(n["x"]), float(n["y"])) for n in doc["nodes"]]
            links = {}
            for l in doc["links"]:
                a, b = int(l["src"]), int(l["dst"])
                links[(a, b)] = Link(a, b, float(l["bandwidth_hz"]), float(l.get("gain_db", 0.0)), float(l.get("noise_dbm", 20.0)))
            return cls(nodes, links, int(doc["global_manager"]))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed topology document: {exc}") from exc

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Topology":
        return cls.from_dict(json.loads(Path(path).read_text()))


def neighbors(topology: Topology, node: int) -> tuple[int, ...]:
    """Link-adjacent nodes in ascending id order (this order indexes offload actions)."""
    try:
        return topology.adjacency[node]
    except KeyError:
        raise ValueError(f"unknown node {node}") from None


def _link(a: int, b: int, d: LinkDefaults) -> Link:
    return Link(a, b, d.bandwidth, d.gain, d.noise)


def _check_profiles(profiles: dict[str, DeviceProfile], needed) -> None:
    missing = [k for k in needed if k not in profiles]
    if missing:
        raise ConfigurationError(f"profile set lacks {missing}")


def build_cluster_topology(
    n_clusters: int,
    profiles: dict[str, DeviceProfile] | None = None,
    link_defaults: LinkDefaults = LinkDefaults(),
    sbcs_per_cluster: int = 8,
    sbc_profile: str = "rpi4",
) -> Topology:
    """Stars of SBCs around a NUC hub per cluster; every hub links to one cloudlet.

    Ids: cloudlet 0, then per cluster the hub followed by its SBCs.
    """
    if not 1 <= n_clusters <= 8:
        raise ConfigurationError(f"n_clusters must be in 1..8, got {n_clusters}")
    profiles = profiles or default_profiles()
    _check_profiles(profiles, (sbc_profile, "nuc", "cloudlet"))
    sbc = replace(profiles[sbc_profile], receives_client_tasks=True)
    nuc = replace(profiles["nuc"], receives_client_tasks=False)
    cloud = replace(profiles["cloudlet"], receives_client_tasks=False)

    nodes = [Node(0, cloud, 50.0, 95.0)]
    links = {}
    nid = 1
    for c in range(n_clusters):
        hub = nid
        cx = 100.0 * (c + 0.5) / n_clusters
        nodes.append(Node(hub, nuc, cx, 60.0))
        links[(0, hub)] = _link(0, hub, link_defaults)
        nid += 1
        for s in range(sbcs_per_cluster):
            angle = math.pi * (s + 0.5) / sbcs_per_cluster
            nodes.append(Node(nid, sbc, cx + 10 * math.cos(angle), 40.0 - 10 * math.sin(angle)))
            links[(hub, nid)] = _link(hub, nid, link_defaults)
            nid += 1
    return Topology(nodes, links, global_manager=0)


RANDOM_COMPOSITION = {10: (5, 5), 15: (10, 5)}


def build_random_topology(
    n_nodes: int,
    rng: np.random.Generator,
    area: tuple[float, float] = (100.0, 100.0),
    comm_radius: float = 40.0,
    profiles: dict[str, DeviceProfile] | None = None,
    link_defaults: LinkDefaults = LinkDefaults(),
    n_nucs: int | None = None,
    max_attempts: int = 1000,
) -> Topology:
    """Uniformly placed nodes linked within ``comm_radius``; resampled until connected."""
    if n_nodes < 2:
        raise ConfigurationError("random topologies need at least 2 nodes")
    profiles = profiles or default_profiles()
    _check_profiles(profiles, SBC_VARIANTS + ("nuc",))
    if n_nucs is None:
        n_nucs = RANDOM_COMPOSITION.get(n_nodes, (None, 5))[1]
        n_nucs = min(n_nucs, n_nodes - 1)
    n_sbc = n_nodes - n_nucs
    if n_sbc < 1 or n_nucs < 0:
        raise ConfigurationError(f"cannot split {n_nodes} nodes into {n_nucs} NUCs and >=1 SBC")

    # SBC variants in equal proportions, order shuffled
    variants = [SBC_VARIANTS[i % len(SBC_VARIANTS)] for i in range(n_sbc)]
    rng.shuffle(variants)
    kinds = variants + ["nuc"] * n_nucs
    w, h = area
    r2 = comm_radius * comm_radius
    for _ in range(max_attempts):
        pos = rng.uniform(0.0, 1.0, size=(n_nodes, 2)) * np.array([w, h])
        nodes = []
        for i, kind in enumerate(kinds):
            prof = replace(profiles[kind], receives_client_tasks=kind in SBC_VARIANTS)
            nodes.append(Node(i, prof, float(pos[i, 0]), float(pos[i, 1])))
        links = {}
        for i in range(n_nodes):
            for j in range(i + 1, n_nodes):
                d = pos[i] - pos[j]
                if d @ d <= r2:
                    links[(i, j)] = _link(i, j, link_defaults)
        # the manager sits on the highest-capacity node (lowest id on ties)
        manager = max(nodes, key=lambda n: (n.profile.capacity, -n.id)).id
        try:
            return Topology(nodes, links, manager)
        except ConfigurationError:
            continue
    raise ConfigurationError(
        f"no connected layout for {n_nodes} nodes with radius {comm_radius} on {w}x{h} after {max_attempts} attempts"
    )
