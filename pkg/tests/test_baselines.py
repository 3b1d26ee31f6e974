import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fauno import _kernels as K
from fauno.baselines import (DqnAgent, DqnConfig, DuelingParams, LeastQueuePolicy, RandomPolicy, ReplayBuffer,
                             dqn_train_step, dueling_network, dueling_q, fedavg_round, least_queue_action,
                             td_targets)
from fauno.env import Observation
from fauno.fedbuff import ProtocolError
from fauno.harness import ExperimentConfig, build_env, make_controller, run_episode
from fauno.nn import Adam, Layer, ModelParams
from fauno.ppo import TrainingError
from fauno.simcore import WorkerSnapshot
from oracles import dueling_oracle
from scenarios import td_fd_error


def _snap(node, q, cap):
    return WorkerSnapshot(node, q, cap, 1, 1.0, 40.0, 0)


def _obs(agent, own, nbrs, has_task=True):
    """own = (q, cap); nbrs = [(id, q, cap) or (id, None)]."""
    snaps = [None if len(n) == 2 else _snap(n[0], n[1], n[2]) for n in nbrs]
    mask = np.array([True] + [s is not None and has_task for s in snaps])
    return Observation(agent, np.zeros(3), mask, has_task, _snap(agent, *own), tuple(n[0] for n in nbrs), snaps)


# ---------------------------------------------------------------- least queue


def test_lq_prefers_lower_ratio_self():
    assert least_queue_action(_obs(0, (2, 10), [(1, 1, 4)])) == 0


def test_lq_picks_emptier_neighbour():
    assert least_queue_action(_obs(0, (5, 10), [(1, 1, 4), (2, 0, 10)])) == 2


def test_lq_ties_go_to_lowest_id():
    assert least_queue_action(_obs(5, (2, 10), [(1, 2, 10), (3, 2, 10)])) == 1
    assert least_queue_action(_obs(0, (2, 10), [(1, 2, 10)])) == 0


def test_lq_lone_node_and_unknown_neighbours():
    assert least_queue_action(_obs(0, (9, 10), [])) == 0
    assert least_queue_action(_obs(0, (9, 10), [(1, None)])) == 0
    assert least_queue_action(_obs(0, (9, 10), [(1, 0, 10)], has_task=False)) == 0


@settings(max_examples=200, deadline=None)
@given(own=st.tuples(st.integers(0, 10), st.integers(1, 10)),
       nbrs=st.lists(st.tuples(st.integers(0, 10), st.integers(1, 10)), max_size=5))
def test_lq_matches_ratio_oracle(own, nbrs):
    own = (min(own[0], own[1]), own[1])
    nb = [(i + 1, min(q, c), c) for i, (q, c) in enumerate(nbrs)]
    obs = _obs(0, own, nb)
    a = least_queue_action(obs)
    cands = [(own[0] / own[1], 0, 0)] + [(q / c, i, k) for k, (i, q, c) in enumerate(nb, start=1)]
    assert a == min(cands)[2]
    assert least_queue_action(obs) == a
    assert LeastQueuePolicy().act(obs) == a


def test_random_policy_respects_mask_and_seed():
    obs = _obs(0, (1, 10), [(1, 1, 10), (2, None), (3, 0, 10)])
    draws = [RandomPolicy(4, 0).act(obs) for _ in range(3)]
    assert draws[0] == draws[1] == draws[2]
    pol = RandomPolicy(1, 0)
    seen = {pol.act(obs) for _ in range(200)}
    assert seen == {0, 1, 3}


# ---------------------------------------------------------------- dueling network


def _small_net(rng, obs_dim=6, a_dim=4, hidden=(16, 8)):
    return dueling_network(obs_dim, a_dim, rng, hidden)


def test_dueling_zero_advantage_collapses_to_value(rng):
    net = _small_net(rng)
    for a in net.advantage.arrays():
        a[...] = 0
    x = rng.normal(size=6)
    q = dueling_q(net, x, [True] * 4)
    v = float((np.tanh(np.tanh(x @ net.trunk.layers[0].weight + net.trunk.layers[0].bias) @ net.trunk.layers[1].weight
                       + net.trunk.layers[1].bias) @ net.value.layers[0].weight + net.value.layers[0].bias)[0])
    assert np.allclose(q, v, rtol=1e-12)


def test_dueling_invariant_to_advantage_shift(rng):
    net = _small_net(rng)
    x = rng.normal(size=(5, 6))
    mask = np.array([[True, False, True, True]] * 5)
    q1 = dueling_q(net, x, mask)
    net.advantage.layers[0].bias += 3.7
    q2 = dueling_q(net, x, mask)
    assert np.allclose(q1[mask], q2[mask], rtol=1e-12, atol=1e-12)
    assert np.isneginf(q1[~mask]).all()


def test_dueling_combination_matches_oracle(rng):
    for _ in range(150):
        n, a = int(rng.integers(1, 6)), int(rng.integers(1, 7))
        v, adv = rng.normal(size=n), rng.normal(size=(n, a)) * 10
        mask = rng.random((n, a)) < 0.6
        mask[np.arange(n), rng.integers(0, a, n)] = True
        got = K.dueling_combine(v, adv, mask)
        ref = dueling_oracle(v, adv, mask)
        assert np.allclose(got[mask], ref[mask], rtol=1e-9, atol=1e-12)
        assert np.isneginf(got[~mask]).all()
        i = int(rng.integers(n))
        allowed = np.flatnonzero(mask[i])
        for x in allowed:
            for y in allowed:
                assert got[i, x] - got[i, y] == pytest.approx(adv[i, x] - adv[i, y], rel=1e-9, abs=1e-12)


def test_dueling_mask_width_mismatch(rng):
    with pytest.raises(ValueError):
        dueling_q(_small_net(rng), np.zeros(6), [True] * 3)


def test_td_loss_gradient_finite_differences():
    assert td_fd_error(1234, obs_dim=12) < 1e-5  # full-size trunk on a desk-size observation


def test_td_targets_terminal_and_gamma_zero(rng):
    net = _small_net(rng)
    target = _small_net(rng)
    nxt = rng.normal(size=(3, 6))
    mask = np.ones((3, 4), dtype=bool)
    r = np.array([1.0, -2.0, 0.5])
    assert td_targets(net, target, r, nxt, mask, np.ones(3), 0.9).tolist() == r.tolist()
    assert td_targets(net, target, r, nxt, mask, np.zeros(3), 0.0).tolist() == r.tolist()


def test_td_targets_double_estimation(rng):
    net, target = _small_net(rng), _small_net(rng)
    nxt = rng.normal(size=(4, 6))
    mask = np.ones((4, 4), dtype=bool)
    y = td_targets(net, target, np.zeros(4), nxt, mask, np.zeros(4), 0.5, double=True)
    q_on, q_tg = dueling_q(net, nxt, mask), dueling_q(target, nxt, mask)
    assert np.allclose(y, 0.5 * q_tg[np.arange(4), q_on.argmax(axis=1)], rtol=1e-14)
    y2 = td_targets(net, target, np.zeros(4), nxt, mask, np.zeros(4), 0.5, double=False)
    assert np.allclose(y2, 0.5 * q_tg.max(axis=1), rtol=1e-14)


def test_single_transition_overfit(rng):
    cfg = DqnConfig(gamma=0.9)
    net = dueling_network(8, 3, rng, (32, 16))
    batch = {"obs": rng.normal(size=(1, 8)), "mask": np.ones((1, 3), bool), "actions": np.array([1]),
             "rewards": np.array([2.5]), "next_obs": rng.normal(size=(1, 8)), "next_mask": np.ones((1, 3), bool),
             "dones": np.array([1.0])}
    opt = Adam(cfg.lr)
    losses = [dqn_train_step(batch, net, net.copy(), cfg, opt) for _ in range(500)]
    assert losses[-1] < 1e-4


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_td_loss(rng):
    net = _small_net(rng)
    batch = {"obs": np.zeros((1, 6)), "mask": np.ones((1, 4), bool), "actions": np.array([0]),
             "rewards": np.array([np.inf]), "next_obs": np.zeros((1, 6)), "next_mask": np.ones((1, 4), bool),
             "dones": np.array([1.0])}
    with pytest.raises(TrainingError):
        dqn_train_step(batch, net, net.copy(), DqnConfig(), Adam(1e-3))


def test_replay_ring_buffer(rng):
    buf = ReplayBuffer(3, 2, 2)
    for i in range(5):
        buf.add([i, i], [True, True], 0, float(i), [0, 0], [True, False], False)
    assert buf.size == 3
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]
    s = buf.sample(10, rng)
    assert s["obs"].shape == (10, 2) and set(s["rewards"]) <= {2.0, 3.0, 4.0}


def test_epsilon_schedule():
    agent = DqnAgent(0, 4, 2, DqnConfig(eps_decay_steps=100), seed=0, init=None)
    assert agent.epsilon == 1.0
    agent.env_steps = 50
    assert agent.epsilon == pytest.approx(0.525)
    agent.env_steps = 1000
    assert agent.epsilon == pytest.approx(0.05)


def test_dqn_config_validation():
    with pytest.raises(ValueError):
        DqnConfig(eps_start=0.1, eps_end=0.5).validate()
    with pytest.raises(ValueError):
        DqnConfig(target_sync=0).validate()


def test_dueling_params_roundtrip(rng):
    net = _small_net(rng)
    again = DuelingParams.from_dict(net.to_dict())
    assert all((a == b).all() for a, b in zip(net.arrays(), again.arrays()))


# ---------------------------------------------------------------- FedAvg


def _model(values):
    return ModelParams([Layer(np.array([values], dtype=float), np.zeros(len(values)), "identity")])


def test_fedavg_examples():
    m = _model([1.0, -2.0])
    assert fedavg_round([m, m.copy(), m.copy()], [1, 5, 2]).flat().tolist() == m.flat().tolist()
    mid = fedavg_round([_model([0.0, 4.0]), _model([2.0, 0.0])], [1, 1])
    assert mid.layers[0].weight.tolist() == [[1.0, 2.0]]
    out = fedavg_round([_model([1.0, 2.0]), _model([3.0, -1.0]), _model([0.0, 6.0])], [1, 2, 3])
    assert np.allclose(out.layers[0].weight[0], [(1 + 6 + 0) / 6, (2 - 2 + 18) / 6], rtol=0, atol=1e-12)


def test_fedavg_errors():
    with pytest.raises(ProtocolError):
        fedavg_round([], [])
    with pytest.raises(ProtocolError):
        fedavg_round([_model([1.0]), _model([1.0, 2.0])], [1, 1])
    with pytest.raises(ProtocolError):
        fedavg_round([_model([1.0])], [0])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5))
def test_fedavg_convex_hull(seed, n):
    rng = np.random.default_rng(seed)
    models = [_model(rng.normal(size=3).tolist()) for _ in range(n)]
    w = rng.uniform(0, 1, n) + 1e-3
    out = fedavg_round(models, w).flat()
    stack = np.stack([m.flat() for m in models])
    assert (out >= stack.min(axis=0) - 1e-12).all() and (out <= stack.max(axis=0) + 1e-12).all()
    assert np.allclose(out, (w / w.sum()) @ stack, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- SCOF synchrony


def _scof_config(**over):
    doc = {"algorithm": "scof", "episodes": 1, "steps_per_episode": 150, "seeds": [0],
           "topology": {"builder": "cluster", "n_clusters": 1, "sbcs_per_cluster": 3},
           "dqn": {"round_period": 20, "hidden": [16, 8], "batch_size": 8}}
    doc.update(over)
    return ExperimentConfig.from_dict(doc)


def test_scof_rounds_are_synchronous():
    cfg = _scof_config()
    env = build_env(cfg)
    ctl = make_controller("scof", env, cfg, 0)
    original = ctl.act

    def logged_act(obs, explore):
        out = original(obs, explore)
        for a, choice in out.items():
            if choice is not None:
                ctl.audit.append({"event": "step", "agent": a})
        return out

    ctl.act = logged_act
    run_episode(env, ctl, 0, explore=True)
    assert ctl.coordinator.rounds_completed >= 2
    waiting = set()
    order = []
    for rec in ctl.audit:
        a = rec.get("agent")
        if rec["event"] == "submit":
            waiting.add(a)
        elif rec["event"] == "adopt":
            assert a in waiting
            waiting.discard(a)
        elif rec["event"] == "step":
            assert a not in waiting, "agent acted between its upload and the round's broadcast"
        elif rec["event"] == "aggregate":
            order.append("aggregate")
        elif rec["event"] == "broadcast":
            assert order and order[-1] == "aggregate"
            order.append("broadcast")
    assert {rec["agent"] for rec in ctl.audit if rec["event"] == "adopt"} == set(ctl.agents)
