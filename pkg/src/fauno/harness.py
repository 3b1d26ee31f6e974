"""Experiment orchestration: configs, seeded runs, metrics, traces and reports."""
from __future__ import annotations

import copy
import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from .baselines import DqnAgent, DqnConfig, LeastQueuePolicy, RandomPolicy, ScofCoordinator
from .env import EnvConfig, OffloadEnv, RewardWeights
from .fedbuff import Federation, FlTransport
from .ppo import PpoAgent, PpoConfig, critic_network, load_checkpoint, save_checkpoint
from .simcore import Event, SimConfig, SyntheticWorkload
from .topology import ConfigurationError, LinkDefaults, Topology, build_cluster_topology, build_random_topology, default_profiles

ALGORITHMS = ("fauno", "least_queue", "scof", "random")


class IntegrityError(RuntimeError):
    pass


class IngestionError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


# ------------------------------------------------------------------ traces

TRACE_HEADER = ("arrival_tick", "client_id", "instructions", "input_bits", "output_bits", "cpi", "deadline_ticks")


@dataclass
class TraceWorkload:
    """Replays recorded arrivals; the same trace restarts with every episode."""

    by_tick: dict = field(default_factory=dict)  # (tick, client) -> [(rho, a_in, a_out, cpi, deadline)]
    instruction_scale: float = 1.0
    n_tasks: int = 0

    def arrivals(self, tick: int, client: int) -> list:
        return self.by_tick.get((tick, client), [])

    def clients(self) -> set[int]:
        return {c for _, c in self.by_tick}

    def _rows(self):
        for shapes in self.by_tick.values():
            yield from shapes

    def max_shape(self):
        rows = list(self._rows()) or [(1.0, 1.0, 1.0, 1.0, 1)]
        return tuple(max(r[i] for r in rows) for i in range(5))

    def mean_work(self) -> float:
        rows = list(self._rows())
        return float(np.mean([r[0] * r[3] for r in rows])) if rows else 1.0


def load_trace(path, instruction_scale: float = 0.1) -> TraceWorkload:
    if not instruction_scale > 0:
        raise ValueError("instruction_scale must be positive")
    wl = TraceWorkload(instruction_scale=instruction_scale)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
            raise IngestionError(f"expected header {','.join(TRACE_HEADER)}", 1)
        last_tick = -1
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TRACE_HEADER):
                raise IngestionError(f"expected {len(TRACE_HEADER)} columns, got {len(row)}", lineno)
            try:
                tick, client, deadline = int(row[0]), int(row[1]), int(row[6])
                rho, a_in, a_out, cpi = (float(x) for x in row[2:6])
            except ValueError as exc:
                raise IngestionError(str(exc), lineno) from None
            if tick < 0 or client < 0:
                raise IngestionError("arrival_tick and client_id must be >= 0", lineno)
            if min(rho, a_in, a_out, cpi) <= 0 or deadline < 1:
                raise IngestionError("task sizes, cpi and deadline must be positive", lineno)
            if tick < last_tick:
                raise IngestionError(f"arrival_tick {tick} after {last_tick}: rows must be sorted", lineno)
            last_tick = tick
            wl.by_tick.setdefault((tick, client), []).append((rho * instruction_scale, a_in, a_out, cpi, deadline))
            wl.n_tasks += 1
    return wl


# ------------------------------------------------------------------ config

DEFAULTS = {
    "name": "desk",
    "algorithm": "fauno",
    "lam": 1.0,
    "episodes": 20,
    "steps_per_episode": 150,
    "ticks_per_second": 10.0,
    "seeds": [0, 1, 2],
    "topology": {"builder": "cluster", "n_clusters": 1, "sbcs_per_cluster": 8, "sbc_profile": "rpi4",
                 "n_nodes": 10, "comm_radius": 40.0, "seed": 0, "path": None},
    "devices": {"instr_per_milli": 1e3, "queue_cap": 10, "tx_power_dbm": 40.0},
    "links": {"bandwidth_hz": 4e6, "gain_db": 0.0, "noise_dbm": 20.0},
    "reward": {"wait": 1.0, "comm": 3.0, "exc": 0.5, "overload": 30.0, "utility": 100.0, "completion_bonus": True},
    "workload": {"source": "synthetic", "instructions": 8e6, "input_bits": 1.2e7, "output_bits": 1.2e7,
                 "cpi": 1.0, "deadline": 100, "jitter": 0.5, "path": None, "instruction_scale": 0.1},
    "sim": {"hop_limit": 4, "share_period": 1, "snapshot_bits": 1024.0},
    "ppo": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(PpoConfig()).items()},
    "dqn": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(DqnConfig()).items()},
    "federation": {"threshold": None, "server_lr": 1e-5, "staleness": "reject"},
    "evaluation": {"mode": "training", "episodes": 5, "greedy": False},
    "outputs": {"event_log": "last", "checkpoints": True},
}

# settings the harness supplies where the source material is silent
HARNESS_CHOSEN_VALUES = (
    "ppo.gae_lambda", "ppo.epochs", "ppo.normalize_advantages", "federation.threshold", "federation.staleness",
    "dqn.eps_start", "dqn.eps_end", "dqn.eps_decay_steps", "dqn.replay_capacity", "dqn.target_sync", "dqn.lr",
    "dqn.round_period", "dqn.batch_size", "devices.queue_cap", "workload.instruction_scale",
)

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "fauno experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "algorithm": {"enum": list(ALGORITHMS)},
        "lam": _pos,
        "episodes": _posint,
        "steps_per_episode": _posint,
        "ticks_per_second": _pos,
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "topology": _section({
            "builder": {"enum": ["cluster", "random", "file"]},
            "n_clusters": _posint, "sbcs_per_cluster": _posint, "sbc_profile": {"type": "string"},
            "n_nodes": {"type": "integer", "minimum": 2}, "comm_radius": _pos, "seed": {"type": "integer"},
            "path": {"type": ["string", "null"]},
        }),
        "devices": _section({"instr_per_milli": _pos, "queue_cap": _posint, "tx_power_dbm": _num}),
        "links": _section({"bandwidth_hz": _pos, "gain_db": _num, "noise_dbm": _num}),
        "reward": _section({"wait": _nonneg, "comm": _nonneg, "exc": _nonneg, "overload": _nonneg,
                            "utility": _nonneg, "completion_bonus": {"type": "boolean"}}),
        "workload": _section({
            "source": {"enum": ["synthetic", "trace"]},
            "instructions": _pos, "input_bits": _pos, "output_bits": _pos, "cpi": _pos,
            "deadline": _posint, "jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "path": {"type": ["string", "null"]}, "instruction_scale": _pos,
        }),
        "sim": _section({"hop_limit": {"type": "integer", "minimum": 0}, "share_period": _posint,
                         "snapshot_bits": _pos}),
        "ppo": _section({
            "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "gae_lambda": {"type": "number", "minimum": 0, "maximum": 1},
            "clip_eps": _pos, "lr_actor": _pos, "lr_critic": _pos, "c1": _nonneg, "c2": _nonneg, "mu": _nonneg,
            "epochs": _posint, "minibatch": _posint, "steps_per_train": _posint, "share_every": _posint,
            "actor_hidden": {"type": "array", "items": _posint, "minItems": 1},
            "critic_hidden": {"type": "array", "items": _posint, "minItems": 1},
            "normalize_advantages": {"type": "boolean"}, "save_interval": _posint,
        }),
        "dqn": _section({
            "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "eps_start": {"type": "number", "minimum": 0, "maximum": 1},
            "eps_end": {"type": "number", "minimum": 0, "maximum": 1},
            "eps_decay_steps": _posint, "replay_capacity": _posint, "target_sync": _posint, "lr": _pos,
            "round_period": _posint, "batch_size": _posint, "train_every": _posint,
            "hidden": {"type": "array", "items": _posint, "minItems": 1}, "double": {"type": "boolean"},
        }),
        "federation": _section({"threshold": {"type": ["integer", "null"], "minimum": 1}, "server_lr": _pos,
                                "staleness": {"enum": ["reject", "scale"]}}),
        "evaluation": _section({"mode": {"enum": ["training", "frozen"]}, "episodes": _posint,
                                "greedy": {"type": "boolean"}}),
        "outputs": _section({"event_log": {"enum": ["none", "last", "all"]}, "checkpoints": {"type": "boolean"}}),
    },
}


def config_schema() -> dict:
    return copy.deepcopy(CONFIG_SCHEMA)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    name: str
    algorithm: str
    lam: float
    episodes: int
    steps_per_episode: int
    ticks_per_second: float
    seeds: list
    topology: dict
    devices: dict
    links: dict
    reward: dict
    workload: dict
    sim: dict
    ppo: dict
    dqn: dict
    federation: dict
    evaluation: dict
    outputs: dict

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        merged = _merge(DEFAULTS, doc)
        try:
            jsonschema.validate(merged, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigurationError(f"{where}: {exc.message}") from None
        base = Path(base_dir) if base_dir is not None else None
        for section in ("topology", "workload"):
            p = merged[section].get("path")
            if p is not None and base is not None and not Path(p).is_absolute():
                merged[section]["path"] = str(base / p)
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def validate(self) -> None:
        if self.topology["builder"] == "file":
            p = self.topology.get("path")
            if not p or not Path(p).is_file():
                raise ConfigurationError(f"topology file not found: {p}")
        if self.workload["source"] == "trace":
            p = self.workload.get("path")
            if not p or not Path(p).is_file():
                raise ConfigurationError(f"trace file not found: {p}")
        if self.dqn["eps_end"] > self.dqn["eps_start"]:
            raise ConfigurationError("dqn.eps_end must not exceed dqn.eps_start")

    # -- builders

    def build_topology(self) -> Topology:
        t, d, l = self.topology, self.devices, self.links
        if t["builder"] == "file":
            return Topology.load(t["path"])
        profiles = default_profiles(d["instr_per_milli"], d["queue_cap"], d["tx_power_dbm"])
        links = LinkDefaults(l["bandwidth_hz"], l["gain_db"], l["noise_dbm"])
        if t["builder"] == "cluster":
            return build_cluster_topology(t["n_clusters"], profiles, links, t["sbcs_per_cluster"], t["sbc_profile"])
        return build_random_topology(t["n_nodes"], np.random.default_rng(t["seed"]), comm_radius=t["comm_radius"],
                                     profiles=profiles, link_defaults=links)

    def build_workload(self):
        w = self.workload
        if w["source"] == "trace":
            return load_trace(w["path"], w["instruction_scale"])
        return SyntheticWorkload(w["instructions"], w["input_bits"], w["output_bits"], w["cpi"], w["deadline"], w["jitter"])

    def env_config(self) -> EnvConfig:
        s, r = self.sim, self.reward
        sim = SimConfig(self.lam, self.ticks_per_second, s["share_period"], s["snapshot_bits"], s["hop_limit"],
                        self.build_workload())
        weights = RewardWeights(r["wait"], r["comm"], r["exc"], r["overload"], r["utility"])
        return EnvConfig(sim, weights, self.steps_per_episode, r["completion_bonus"])

    def ppo_config(self) -> PpoConfig:
        doc = dict(self.ppo, actor_hidden=tuple(self.ppo["actor_hidden"]), critic_hidden=tuple(self.ppo["critic_hidden"]))
        return PpoConfig(**doc)

    def dqn_config(self) -> DqnConfig:
        return DqnConfig(**dict(self.dqn, hidden=tuple(self.dqn["hidden"])))


def full_scale_preset() -> ExperimentConfig:
    """Full-scale settings: 2 clusters, 40 episodes of 10,000 ticks, table-valued task shapes."""
    return ExperimentConfig.from_dict({
        "name": "full-scale",
        "episodes": 40,
        "steps_per_episode": 10000,
        "topology": {"builder": "cluster", "n_clusters": 2},
        "workload": {"source": "synthetic", "instructions": 8e7, "input_bits": 1.2e9, "output_bits": 1.2e9,
                     "cpi": 1.0, "deadline": 100, "jitter": 0.0},
        "federation": {"server_lr": 1e-5},
        "evaluation": {"mode": "training"},
        "outputs": {"event_log": "none", "checkpoints": True},
    })


def build_env(config: ExperimentConfig) -> OffloadEnv:
    topo = config.build_topology()
    env = OffloadEnv(topo, config.env_config())
    wl = env.config.sim.workload
    if isinstance(wl, TraceWorkload):
        stray = wl.clients() - set(topo.clients)
        if stray:
            raise ConfigurationError(f"trace names clients that are not task-receiving nodes: {sorted(stray)}")
    return env


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ------------------------------------------------------------------ metrics

END_KIND = "episode_end"


def end_marker(world) -> Event:
    return Event(world.tick, END_KIND, -1, None, {"created": len(world.tasks)})


def _field(ev, name):
    return ev[name] if isinstance(ev, dict) else getattr(ev, name)


def compute_metrics(events) -> dict:
    """Episode metrics from an event log that ends with an episode_end marker."""
    events = list(events)
    if not events or _field(events[-1], "kind") != END_KIND:
        raise IntegrityError("event log is truncated: no episode_end marker")
    created_at = {}
    responses = []
    drops_queue = drops_deadline = 0
    for ev in events[:-1]:
        kind = _field(ev, "kind")
        if kind == "created":
            created_at[_field(ev, "task_id")] = _field(ev, "tick")
        elif kind == "complete":
            tid = _field(ev, "task_id")
            if tid not in created_at:
                raise IntegrityError(f"task {tid} completes without a creation record")
            responses.append(_field(ev, "tick") - created_at[tid])
        elif kind == "drop_queue":
            drops_queue += 1
        elif kind == "drop_deadline":
            drops_deadline += 1
        elif kind == END_KIND:
            raise IntegrityError("episode_end marker in the middle of a log")
    declared = _field(events[-1], "detail")["created"]
    if declared != len(created_at):
        raise IntegrityError(f"log holds {len(created_at)} creations, marker declares {declared}")
    created, completed = len(created_at), len(responses)
    return {
        "created": created,
        "completed": completed,
        "finished_ratio": completed / created if created else 0.0,
        "avg_response_ticks": float(np.mean(responses)) if responses else None,
        "drops_queue": drops_queue,
        "drops_deadline": drops_deadline,
    }


def _stat(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}


# ------------------------------------------------------------------ controllers


class _Heuristic:
    learns = False

    def __init__(self, policies: dict):
        self.policies = policies

    def act(self, obs: dict, explore: bool) -> dict:
        return {a: self.policies[a].act(o) for a, o in obs.items()}

    def observe(self, rewards, obs, done) -> None:
        pass

    def start_episode(self) -> None:
        pass

    def after_tick(self, step: int) -> None:
        pass

    def stats(self) -> dict:
        return {}

    def save(self, path) -> None:
        pass


class _Fauno(_Heuristic):
    learns = True

    def __init__(self, env: OffloadEnv, config: ExperimentConfig, seed: int):
        cfg = config.ppo_config()
        self.env = env
        w0 = critic_network(env.obs_dim, np.random.default_rng([seed, 2]), cfg.critic_hidden)
        self.agents = {a: PpoAgent(a, env.obs_dim, env.action_dim, cfg, seed, w0) for a in env.agents}
        fed = config.federation
        self.federation = Federation(env.topology, w0, env.agents, config.ticks_per_second, fed["threshold"],
                                     fed["server_lr"], fed["staleness"])
        self.learning = True

    def act(self, obs, explore):
        return {a: self.agents[a].act(o, explore) for a, o in obs.items()}

    def start_episode(self):
        for a, agent in self.agents.items():
            agent.check_newer_global(self.federation.client(a))

    def observe(self, rewards, obs, done):
        if not self.learning:
            return
        for a, agent in self.agents.items():
            agent.record(rewards[a], done)
            if agent.ready:
                agent.train(obs[a].features)
                client = self.federation.client(a)
                agent.maybe_share(client)
                agent.check_newer_global(client)

    def after_tick(self, step):
        if self.learning:
            self.federation.tick()

    def stats(self):
        return self.federation.stats()

    def save(self, path):
        save_checkpoint(path, [self.agents[a] for a in sorted(self.agents)], "fauno",
                        {"global_version": self.federation.manager.global_critic.version})

    def load(self, doc):
        for st in doc["agents"]:
            self.agents[st["agent"]].load_state_dict(st)


class _Scof(_Heuristic):
    learns = True

    def __init__(self, env: OffloadEnv, config: ExperimentConfig, seed: int):
        cfg = config.dqn_config()
        self.agents = {a: DqnAgent(a, env.obs_dim, env.action_dim, cfg, seed) for a in env.agents}
        # one shared starting point, as in any FedAvg setup
        first = self.agents[env.agents[0]].params
        for agent in self.agents.values():
            agent.adopt(first)
            agent.target = first.copy()
        self.audit: list[dict] = []
        transport = FlTransport(env.topology, config.ticks_per_second)
        self.coordinator = ScofCoordinator(self.agents, transport, cfg.round_period, audit=self.audit)
        self.learning = True
        self._acted: set[int] = set()

    def act(self, obs, explore):
        out = {}
        self._acted = set()
        for a, o in obs.items():
            if self.learning and self.coordinator.blocked(a):
                out[a] = None
                continue
            out[a] = self.agents[a].act(o, explore)
            self._acted.add(a)
        return out

    def observe(self, rewards, obs, done):
        if not self.learning:
            return
        for a in self._acted:
            self.agents[a].record(rewards[a], obs[a], done)

    def after_tick(self, step):
        if self.learning:
            self.coordinator.tick(step)

    def stats(self):
        return {"rounds": self.coordinator.rounds_completed}

    def save(self, path):
        save_checkpoint(path, [self.agents[a] for a in sorted(self.agents)], "scof")

    def load(self, doc):
        for st in doc["agents"]:
            self.agents[st["agent"]].load_state_dict(st)


def make_controller(algorithm: str, env: OffloadEnv, config: ExperimentConfig, seed: int):
    if algorithm == "fauno":
        return _Fauno(env, config, seed)
    if algorithm == "scof":
        return _Scof(env, config, seed)
    if algorithm == "least_queue":
        return _Heuristic({a: LeastQueuePolicy() for a in env.agents})
    if algorithm == "random":
        return _Heuristic({a: RandomPolicy(seed, a) for a in env.agents})
    raise ConfigurationError(f"unknown algorithm {algorithm!r}")


# ------------------------------------------------------------------ runs


def run_episode(env: OffloadEnv, ctl, episode_seed: int, explore: bool, step0: int = 0, on_step=None):
    obs = env.reset(episode_seed)
    ctl.start_episode()
    step = step0
    done = False
    while not done:
        actions = ctl.act(obs, explore)
        obs, rewards, done, _ = env.step(actions)
        ctl.observe(rewards, obs, done)
        step += 1
        ctl.after_tick(step)
        if on_step is not None:
            on_step(step)
    events = list(env.world.events)
    events.append(end_marker(env.world))
    return events, step


def _episode_row(env, events, phase: str, episode: int, algorithm: str, seed: int) -> dict:
    m = compute_metrics(events)
    rewards = list(env.episode_rewards.values())
    return {"algorithm": algorithm, "seed": seed, "phase": phase, "episode": episode, "lam": env.config.sim.lam,
            **m, "mean_reward": float(np.mean(rewards))}


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write((rec.to_json() if isinstance(rec, Event) else json.dumps(rec, sort_keys=True)) + "\n")


def run_experiment(config: ExperimentConfig, seed: int | None = None, out=None, algorithm: str | None = None) -> dict:
    """Train (if the algorithm learns) and evaluate one seed; returns the report dict."""
    algorithm = algorithm or config.algorithm
    seed = config.seeds[0] if seed is None else seed
    env = build_env(config)
    ctl = make_controller(algorithm, env, config, seed)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_mode = config.outputs["event_log"]
    save_every = config.ppo["save_interval"]
    ckpt = (out / "checkpoint.json") if out is not None and config.outputs["checkpoints"] and ctl.learns else None

    def on_step(step):
        if ckpt is not None and step % save_every == 0:
            ctl.save(ckpt)

    rows, kept_events = [], []
    step = 0
    for ep in range(config.episodes):
        events, step = run_episode(env, ctl, derive_seed(seed, ep), True, step, on_step)
        rows.append(_episode_row(env, events, "train", ep, algorithm, seed))
        if log_mode == "all":
            kept_events.extend(events)
        elif log_mode == "last":
            kept_events = events

    mode = config.evaluation["mode"]
    if mode == "frozen":
        if hasattr(ctl, "learning"):
            ctl.learning = False
        explore = not config.evaluation["greedy"]
        for i in range(config.evaluation["episodes"]):
            events, _ = run_episode(env, ctl, derive_seed(seed, 1_000_003, i), explore)
            rows.append(_episode_row(env, events, "eval", i, algorithm, seed))
            if log_mode == "all":
                kept_events.extend(events)
            elif log_mode == "last":
                kept_events = events
    scored = [r for r in rows if r["phase"] == ("eval" if mode == "frozen" else "train")]
    report = {
        "format": "fauno-report/1",
        "name": config.name,
        "algorithm": algorithm,
        "seed": seed,
        "lam": config.lam,
        "topology": _topology_label(config),
        "n_nodes": len(env.topology.nodes),
        "n_agents": len(env.agents),
        "evaluation_mode": mode,
        "total_steps": step,
        "aggregate": {k: _stat(r[k] for r in scored)
                      for k in ("finished_ratio", "avg_response_ticks", "drops_queue", "drops_deadline", "mean_reward")},
        "federation": ctl.stats(),
        "harness_chosen_values": [k for k in HARNESS_CHOSEN_VALUES if _relevant(k, algorithm)],
        "episodes": rows,
        "config": config.to_dict(),
    }
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        write_metrics_csv(out / "metrics.csv", rows)
        write_plot_csv(out / "plot.csv", scored)
        if log_mode != "none":
            _write_jsonl(out / "events.jsonl", kept_events)
        if algorithm == "fauno":
            _write_jsonl(out / "federation.jsonl", ctl.federation.audit)
        elif algorithm == "scof":
            _write_jsonl(out / "federation.jsonl", ctl.audit)
        if ckpt is not None:
            ctl.save(ckpt)
    return report


def _relevant(key: str, algorithm: str) -> bool:
    head = key.split(".")[0]
    if head in ("ppo", "federation"):
        return algorithm == "fauno"
    if head == "dqn":
        return algorithm == "scof"
    return True


def _topology_label(config: ExperimentConfig) -> str:
    t = config.topology
    if t["builder"] == "cluster":
        return f"cluster{t['n_clusters']}"
    if t["builder"] == "random":
        return f"random{t['n_nodes']}"
    return Path(t["path"]).stem


def evaluate_checkpoint(checkpoint, config: ExperimentConfig, seed: int | None = None) -> dict:
    doc = load_checkpoint(checkpoint)
    algorithm = doc.get("algorithm", "fauno")
    if algorithm not in ("fauno", "scof"):
        raise ConfigurationError(f"checkpoint algorithm {algorithm!r} cannot be evaluated")
    seed = config.seeds[0] if seed is None else seed
    env = build_env(config)
    ctl = make_controller(algorithm, env, config, seed)
    ctl.load(doc)
    ctl.learning = False
    explore = not config.evaluation["greedy"]
    rows = []
    for i in range(config.evaluation["episodes"]):
        events, _ = run_episode(env, ctl, derive_seed(seed, 1_000_003, i), explore)
        rows.append(_episode_row(env, events, "eval", i, algorithm, seed))
    return {
        "format": "fauno-report/1", "name": config.name, "algorithm": algorithm, "seed": seed, "lam": config.lam,
        "topology": _topology_label(config), "evaluation_mode": "checkpoint",
        "aggregate": {k: _stat(r[k] for r in rows) for k in ("finished_ratio", "avg_response_ticks", "mean_reward")},
        "episodes": rows,
    }


# ------------------------------------------------------------------ sweeps


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of dotted-key overrides, e.g. {"lam": [0.5, 1], "topology.n_clusters": [1, 2]}."""
    if not grid:
        return [{}]
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigurationError(f"grid entry {k!r} must be a non-empty list")
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        over: dict = {}
        for k, v in zip(keys, combo):
            node = over
            parts = k.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = v
        cells.append(over)
    return cells


def _cell_name(over: dict, prefix="") -> str:
    bits = []
    for k in sorted(over):
        v = over[k]
        bits.append(_cell_name(v, f"{prefix}{k}.") if isinstance(v, dict) else f"{prefix}{k}={v}")
    return "_".join(bits) or "base"


def run_sweep(config_doc: dict, grid: dict, out, base_dir=None) -> list[dict]:
    out = Path(out)
    reports = []
    for over in expand_grid(grid):
        cfg = ExperimentConfig.from_dict(_merge(config_doc, over), base_dir)
        cell = out / _cell_name(over).replace("/", "-")
        for seed in cfg.seeds:
            reports.append(run_experiment(cfg, seed, cell / f"seed{seed}"))
    return reports


# ------------------------------------------------------------------ outputs

METRICS_HEADER = ("algorithm", "seed", "phase", "episode", "lam", "created", "completed", "finished_ratio",
                  "avg_response_ticks", "drops_queue", "drops_deadline", "mean_reward")
REPORT_CSV_HEADER = ("name", "algorithm", "topology", "lam", "seed", "evaluation_mode", "finished_ratio_mean",
                     "finished_ratio_std", "avg_response_ticks_mean", "avg_response_ticks_std", "drops_queue_mean",
                     "drops_deadline_mean", "mean_reward_mean")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_cell(r[k]) for k in METRICS_HEADER])


def write_plot_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("episode", "metric", "value"))
        for r in rows:
            for m in ("finished_ratio", "avg_response_ticks", "drops_queue", "drops_deadline", "mean_reward"):
                w.writerow((r["episode"], m, _cell(r[m])))


def load_reports(path) -> list[dict]:
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("report.json"))
    return [json.loads(f.read_text()) for f in files]


def _fmt(stat: dict, digits: int) -> str:
    if stat["mean"] is None:
        return "n/a"
    return f"{stat['mean']:.{digits}f}±{stat['std']:.{digits}f}"


def emit_report(reports, fmt: str, path=None) -> str:
    """Render reports as json, csv or a mean±std table (algorithm rows, topology/λ columns)."""
    if isinstance(reports, dict):
        reports = [reports]
    if fmt == "json":
        text = json.dumps(reports, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_CSV_HEADER)
        for r in reports:
            agg = r["aggregate"]
            w.writerow([_cell(x) for x in (
                r["name"], r["algorithm"], r["topology"], r["lam"], r["seed"], r["evaluation_mode"],
                agg["finished_ratio"]["mean"], agg["finished_ratio"]["std"], agg["avg_response_ticks"]["mean"],
                agg["avg_response_ticks"]["std"], agg.get("drops_queue", {}).get("mean"),
                agg.get("drops_deadline", {}).get("mean"), agg["mean_reward"]["mean"])])
        text = buf.getvalue()
    elif fmt == "table":
        text = _table(reports)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


def _table(reports) -> str:
    cols = sorted({(r["topology"], r["lam"]) for r in reports})
    algs = sorted({r["algorithm"] for r in reports})
    lines = []
    for metric, digits in (("finished_ratio", 3), ("avg_response_ticks", 2)):
        header = ["algorithm"] + [f"{t} λ={lam:g}" for t, lam in cols]
        body = []
        for alg in algs:
            row = [alg]
            for t, lam in cols:
                # seed-level means, then mean±std across seeds
                vals = [r["aggregate"][metric]["mean"] for r in reports
                        if r["algorithm"] == alg and r["topology"] == t and r["lam"] == lam]
                row.append(_fmt(_stat(vals), digits) if vals else "-")
            body.append(row)
        widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
        lines.append(metric)
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        lines.append("  ".join("-" * w for w in widths))
        lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body)
        lines.append("")
    return "\n".join(lines)
