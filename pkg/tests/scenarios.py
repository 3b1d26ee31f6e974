"""Randomized scenario checks shared by the unit suites and the acceptance module.

Each function returns a list of human-readable violations (empty on success).
"""
import hashlib
import math
from collections import deque

import numpy as np

from conftest import central_diff, make_topology, max_rel_err, profile
from fauno.baselines import dueling_network, td_loss_and_grads
from fauno.env import ContractViolation
from fauno.fedbuff import Federation, FlUpdate, SubmitResult, payload_bits
from fauno.harness import ExperimentConfig, build_env
from fauno.nn import Layer, ModelParams
from fauno.ppo import Batch, PpoConfig, actor_log_probs, actor_network, critic_network, ppo_loss_and_grads
from fauno.simcore import Link, SimulationError, comm_latency
from fauno.topology import build_random_topology


def toy_critic(rng, dims=(3, 2)):
    return ModelParams([Layer(rng.normal(size=dims), rng.normal(size=dims[1]), "identity")], "critic")


def bfs_hops(topology, src):
    dist = {src: 0}
    todo = deque([src])
    while todo:
        u = todo.popleft()
        for v in topology.adjacency[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                todo.append(v)
    return dist


# ---------------------------------------------------------------- gradients


def random_masks(rng, n, a):
    m = rng.random((n, a)) < 0.6
    m[np.arange(n), rng.integers(0, a, n)] = True
    return m


def synthetic_batch(rng, theta, n=4, obs_dim=10, clip_eps=0.2):
    a_dim = theta.out_dim
    while True:
        obs = rng.normal(size=(n, obs_dim))
        mask = random_masks(rng, n, a_dim)
        logp = actor_log_probs(theta, obs, mask)
        actions = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
        logp_old = logp[np.arange(n), actions] + rng.normal(scale=0.3, size=n)
        ratio = np.exp(logp[np.arange(n), actions] - logp_old)
        # keep every ratio clear of the clip kinks so differences are smooth
        if np.all(np.minimum(np.abs(ratio - 1 + clip_eps), np.abs(ratio - 1 - clip_eps)) > 1e-3):
            return Batch(obs, mask, actions.astype(np.int64), logp_old, rng.normal(size=n), rng.normal(size=n) * 3)


def _flat(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def ppo_fd_error(seed: int, obs_dim: int = 10, a_dim: int = 4, mu: float = 0.0):
    """Max relative error of the combined PPO loss gradient against central differences.

    Covers every actor and critic parameter at the default layer widths; returns
    (actor error, critic error, loss stats).
    """
    rng = np.random.default_rng(seed)
    cfg = PpoConfig(clip_eps=0.2, c1=0.5, c2=0.3, mu=mu)
    theta = actor_network(obs_dim, a_dim, rng)
    w = critic_network(obs_dim, rng)
    w_global = w.copy()
    for a in w_global.arrays():
        a += rng.normal(scale=0.05, size=a.shape)
    batch = synthetic_batch(rng, theta, obs_dim=obs_dim, clip_eps=cfg.clip_eps)
    stats, g_theta, g_w = ppo_loss_and_grads(theta, w, batch, cfg, w_global)
    loss = lambda: ppo_loss_and_grads(theta, w, batch, cfg, w_global)[0]["loss"]
    err_theta = max_rel_err(_flat(g_theta), _flat(central_diff(loss, theta.arrays())))
    err_w = max_rel_err(_flat(g_w), _flat(central_diff(loss, w.arrays())))
    return err_theta, err_w, stats


def td_fd_error(seed: int, obs_dim: int = 12, a_dim: int = 5) -> float:
    """Max relative error of the TD loss gradient of a default-width dueling net."""
    rng = np.random.default_rng(seed)
    net = dueling_network(obs_dim, a_dim, rng)
    x = rng.normal(size=(4, obs_dim))
    mask = random_masks(rng, 4, a_dim)
    mask[:, 0] = True
    actions = np.array([np.flatnonzero(m)[-1] for m in mask])
    y = rng.normal(size=4) * 3
    _, grads = td_loss_and_grads(net, x, mask, actions, y)
    numeric = central_diff(lambda: td_loss_and_grads(net, x, mask, actions, y)[0], net.arrays())
    return max_rel_err(_flat(grads), _flat(numeric))


# ---------------------------------------------------------------- FedBuff protocol


def fedbuff_schedule(seed: int, n_ops: int = 60) -> list[str]:
    """Drive a manager with random submits and transport ticks; compare with a reference map."""
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 7))
    k_threshold = int(rng.integers(1, m + 1))
    lr = float(rng.choice([1.0, 0.5, 1e-5]))
    # a line keeps hop distances (and so broadcast arrival ticks) varied
    topo = make_topology([(i, i + 1) for i in range(m)], [profile()] * (m + 1), manager=0)
    agents = list(range(1, m + 1))
    critic = toy_critic(rng)
    fed = Federation(topo, critic, agents, threshold=k_threshold, server_lr=lr)
    mgr = fed.manager
    errors = []

    ref_entries: dict[int, tuple[int, list]] = {}
    ref_version = 0
    ref_weights = [a.copy() for a in critic.arrays()]
    adopted = {a: 0 for a in agents}
    uid = 0

    for op in range(n_ops):
        if rng.random() < 0.7:
            agent = int(rng.choice(agents))
            steps = int(rng.integers(1, 6))
            version = int(rng.choice([ref_version, ref_version, adopted[agent], max(0, ref_version - 1)]))
            delta = [rng.normal(size=a.shape) for a in ref_weights]
            upd = FlUpdate(uid, agent, delta, steps, version, payload_bits(sum(d.size for d in delta)))
            uid += 1
            # reference model
            if version < ref_version:
                expect = SubmitResult.REJECTED_STALE
            elif agent not in ref_entries:
                expect = SubmitResult.STAGED
                ref_entries[agent] = (steps, delta)
            elif steps > ref_entries[agent][0]:
                expect = SubmitResult.REPLACED
                ref_entries[agent] = (steps, delta)
            else:
                expect = SubmitResult.DISCARDED
            aggregate_due = len(ref_entries) >= k_threshold
            if aggregate_due:
                total = sum(s for s, _ in ref_entries.values())
                for a in sorted(ref_entries):
                    s, d = ref_entries[a]
                    for w, dd in zip(ref_weights, d):
                        w += lr * (s / total) * dd
                ref_entries.clear()
                ref_version += 1
            before = mgr.global_critic.version
            got = mgr.receive(upd)
            if got is not expect:
                errors.append(f"op {op}: submit returned {got.value}, reference {expect.value}")
            if mgr.buffer.k != len(mgr.buffer.entries) or mgr.buffer.k != len(ref_entries):
                errors.append(f"op {op}: buffer holds {mgr.buffer.k}, reference {len(ref_entries)}")
            for a, (s, _) in ref_entries.items():
                if a not in mgr.buffer.entries or mgr.buffer.entries[a].steps != s:
                    errors.append(f"op {op}: buffer entry for agent {a} differs from reference")
            after = mgr.global_critic.version
            if after != ref_version:
                errors.append(f"op {op}: version {after}, reference {ref_version}")
            if after > before and mgr.buffer.k:
                errors.append(f"op {op}: buffer not cleared after aggregation")
            if after == before and aggregate_due:
                errors.append(f"op {op}: aggregation missing at k >= K")
            for w, g in zip(ref_weights, mgr.global_critic.weights.arrays()):
                if not np.allclose(w, g, rtol=1e-12, atol=1e-12):
                    errors.append(f"op {op}: global weights diverge from reference")
                    break
        else:
            for _ in range(int(rng.integers(1, 4))):
                fed.tick()
            for a in agents:
                newest = fed.client(a).newest_global()
                if newest is not None:
                    if newest[0] <= adopted[a]:
                        errors.append(f"op {op}: agent {a} handed version {newest[0]} after {adopted[a]}")
                    adopted[a] = newest[0]
    for rec in fed.audit:
        if rec["event"] == "aggregate" and rec["k"] != 0:
            errors.append("audit: aggregate logged with a non-empty buffer")
    return errors


# ---------------------------------------------------------------- transport fidelity


def two_hop_delivery(seed: int) -> list[str]:
    """A payload between agents two hops apart arrives after the summed per-hop latencies."""
    rng = np.random.default_rng(seed)
    errors = []
    topo = build_random_topology(int(rng.integers(5, 16)), rng, comm_radius=45.0)
    # give every link its own bandwidth so per-hop latencies differ
    for (a, b) in list(topo.links):
        if a < b:
            bw = float(rng.uniform(1e5, 4e6))
            topo.links[(a, b)] = Link(a, b, bw)
            topo.links[(b, a)] = Link(b, a, bw)
    fed = Federation(topo, toy_critic(rng), topo.agents)
    tr = fed.transport
    pairs = []
    for src in topo.agents:
        dist = bfs_hops(topo, src)
        pairs += [(src, d) for d, h in dist.items() if h == 2]
    if not pairs:
        return errors
    src, dst = pairs[int(rng.integers(len(pairs)))]
    bits = float(rng.uniform(1e4, 5e6))
    mids = [v for v in topo.adjacency[src] if dst in topo.adjacency[v]]
    mid = min(mids)  # the routed path breaks ties by lowest id
    expect = 0
    for a, b in ((src, mid), (mid, dst)):
        link = topo.link(a, b)
        snr = topo.node(a).profile.tx_power + link.gain - link.noise
        rate = link.bandwidth * math.log2(1 + 10 ** (snr / 10))
        expect += max(1, math.ceil(bits / rate * 10.0))
    uid = tr.register(src, dst, bits, "probe")
    for t in range(1, expect + 1):
        tr.advance(1)
        got = tr.poll(dst)
        if t < expect and got:
            errors.append(f"seed {seed}: delivered at {t}, oracle {expect}")
            return errors
        if t == expect and got != [uid]:
            errors.append(f"seed {seed}: not delivered at oracle tick {expect}")
    return errors


def broadcast_order(seed: int) -> list[str]:
    """Agents adopt a broadcast in non-decreasing order of hop distance from the manager."""
    rng = np.random.default_rng(seed)
    topo = build_random_topology(int(rng.integers(5, 16)), rng, comm_radius=45.0)
    critic = toy_critic(rng, (int(rng.integers(2, 40)), 8))
    fed = Federation(topo, critic, topo.agents, threshold=1)
    mgr = fed.manager
    mgr.receive(FlUpdate(0, topo.agents[0], [np.zeros_like(a) for a in critic.arrays()], 1, 0, 1.0))
    adopt_tick = {}
    for _ in range(10_000):
        fed.tick()
        for a in topo.agents:
            if a not in adopt_tick and fed.client(a).newest_global() is not None:
                adopt_tick[a] = fed.transport.now
        if len(adopt_tick) == len(topo.agents):
            break
    dist = bfs_hops(topo, mgr.node)
    errors = []
    if len(adopt_tick) != len(topo.agents):
        errors.append(f"seed {seed}: only {len(adopt_tick)} of {len(topo.agents)} agents adopted")
    per_hop = comm_latency(mgr.critic_bits, Link(0, 1, 4e6), 10.0)
    for a, t in adopt_tick.items():
        if t != max(1, dist[a] * per_hop):
            errors.append(f"seed {seed}: agent {a} at {dist[a]} hops adopted at {t}")
        for b, u in adopt_tick.items():
            if dist[a] < dist[b] and t > u:
                errors.append(f"seed {seed}: agent {a} ({dist[a]} hops) adopted after agent {b} ({dist[b]} hops)")
    return errors


# ---------------------------------------------------------------- simulator invariants

TERMINAL_KINDS = ("complete", "drop_queue", "drop_deadline")


def expected_mask(env, agent, task):
    """Action mask rebuilt from first principles: stay, or any neighbour with a known state."""
    mask = [True] + [False] * (env.action_dim - 1)
    if task is not None and task.hops < env.config.sim.hop_limit:
        for k, nb in enumerate(env.topology.adjacency[agent], start=1):
            mask[k] = nb in env.world.snapshots[agent]
    return mask


def env_invariant_run(topology: dict, seed: int, ticks: int, lam: float = 1.0, probe_every: int = 50,
                      scan_every: int = 500):
    """Drive an env with a random mask-respecting policy; returns (violations, sha256 of the event log)."""
    cfg = ExperimentConfig.from_dict({"steps_per_episode": ticks, "lam": lam, "topology": topology})
    env = build_env(cfg)
    rng = np.random.default_rng(seed + 7)
    obs = env.reset(seed)
    errors = []
    created, terminal = {}, {}
    digest = hashlib.sha256()
    done = False
    while not done and len(errors) < 20:
        world = env.world
        probe = world.tick % probe_every == 0
        actions = {}
        for a, o in obs.items():
            task = world.tasks[o.task_id] if o.has_task else None
            if list(o.action_mask) != expected_mask(env, a, task):
                errors.append(f"tick {world.tick}: agent {a} mask {o.action_mask.astype(int).tolist()} is unsound")
            if task is None:
                continue
            legal = np.flatnonzero(o.action_mask)
            if probe:
                for act in range(env.action_dim):
                    try:
                        cost = env.delay_cost(a, act, task)
                        if not o.action_mask[act]:
                            errors.append(f"tick {world.tick}: agent {a} masked action {act} accepted")
                        elif not np.isfinite(cost):
                            errors.append(f"tick {world.tick}: agent {a} action {act} has cost {cost}")
                    except ContractViolation:
                        if o.action_mask[act]:
                            errors.append(f"tick {world.tick}: agent {a} legal action {act} refused")
            actions[a] = int(rng.choice(legal))
        obs, _, done, info = env.step(actions)
        # the full scan walks every task ever created, so it runs periodically; the per-tick
        # checks below cover the queue bound and the event-log rules
        if world.tick % scan_every == 0 or done:
            try:
                world.check_invariants()
            except SimulationError as exc:
                errors.append(f"tick {world.tick}: {exc}")
        for w in world.workers.values():
            if len(w.queue) > w.queue_cap:
                errors.append(f"tick {world.tick}: node {w.id} holds {len(w.queue)} > {w.queue_cap}")
        for ev in info["events"]:
            digest.update(ev.to_json().encode())
            tid = ev.task_id
            if ev.kind == "created":
                if tid in created:
                    errors.append(f"task {tid} created twice")
                created[tid] = ev.tick
            elif tid is not None:
                if tid not in created:
                    errors.append(f"task {tid}: {ev.kind} before creation")
                if tid in terminal:
                    errors.append(f"task {tid}: {ev.kind} after terminal {terminal[tid]}")
                if ev.kind in TERMINAL_KINDS:
                    terminal[tid] = ev.kind
                if ev.kind == "complete" and ev.tick - created[tid] > world.tasks[tid].deadline:
                    errors.append(f"task {tid} completed {ev.tick - created[tid]} ticks after creation")
    world = env.world
    live = [t for t in world.tasks.values() if not t.status.terminal]
    if len(created) != len(world.tasks) or len(created) != len(terminal) + len(live):
        errors.append(f"conservation: {len(created)} created, {len(terminal)} terminal, {len(live)} live")
    return errors, digest.hexdigest()
