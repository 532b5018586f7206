import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from lunardtn.errors import CapacityError, ConfigError, InsufficientData
from lunardtn.gnn import Dims, PaddedGraph, Params, forward_batch, stack_graphs
from lunardtn.marl import (DDQNTrainer, Experience, NodeView, ReplayBuffer, RewardConfig,
                           TrainerConfig, buffer_term, compute_reward, epsilon_at, node_features,
                           observe_state, record_experience, select_action, td_target, ttl_term)

SMALL = Dims(embed=8, heads=2, head_dim=4, out_dim=8, hidden=8, n_max=6, dropout=0.0)


def view(n_nodes=4, ttl=None, occ=None, link=None):
    lander = n_nodes - 1
    ttl = np.array(ttl if ttl is not None else [5] * (n_nodes - 1) + [100])
    occ = np.array(occ if occ is not None else [0] * n_nodes)
    link = np.array(link if link is not None else [False] * (n_nodes - 1) + [True])
    return NodeView(ttl, occ, np.full(n_nodes, 10.0), np.full(n_nodes, 5.0), link, 50, 100, 40.0)


def test_features_are_scaled():
    v = view(ttl=[150, 0, 50, 100], occ=[50, 25, 0, 0])
    f = node_features(0, 0, 3, v)
    assert f[0] == 10 and f[1] == 0 and f[3] == 10 and f[4] == 10
    g = node_features(3, 0, 3, v)
    assert g[1] == 10 and g[2] == 10
    assert node_features(1, 0, 3, v)[4] == 5
    for n in range(4):
        x = node_features(n, 0, 3, v)
        assert np.all((x >= 0) & (x <= 10))


def test_isolated_rover_only_hold():
    g = observe_state(0, [], 3, view())
    assert g.valid.sum() == 1 and g.node_ids == (0,)


def test_ttl_masking():
    v = view(ttl=[3, 0, 4, 100])
    g = observe_state(0, [2, 1], 3, v, n_max=6)
    assert g.node_ids == (0, 1, 2)
    assert list(g.valid[:3]) == [True, False, True]
    assert not g.adjacency[1].any() and not g.adjacency[:, 1].any()


def test_no_masking_when_all_neighbors_ttl_zero():
    v = view(ttl=[0, 0, 0, 100])
    g = observe_state(0, [1, 2], 3, v, n_max=6)
    assert g.valid[:3].all()
    assert g.adjacency[0, 1] and g.adjacency[0, 2] and not g.adjacency[1, 2]


def test_neighborhood_capacity():
    v = view(n_nodes=8, ttl=[1] * 7 + [100], occ=[0] * 8, link=[False] * 7 + [True])
    with pytest.raises(CapacityError):
        observe_state(0, list(range(1, 8)), 7, v, n_max=6)


def test_reward_examples():
    cfg = RewardConfig()
    assert ttl_term(0, cfg, 100) == cfg.r_nottl
    assert ttl_term(100, cfg, 100) == pytest.approx(cfg.r_ttl)
    assert ttl_term(500, cfg, 100) == pytest.approx(cfg.r_ttl)
    assert buffer_term(0, 50, cfg) == 0
    assert buffer_term(50, 50, cfg) == pytest.approx(cfg.r_usage)


def test_compute_reward_cases():
    cfg = RewardConfig()
    v = view(ttl=[0, 100, 5, 100], occ=[10, 50, 0, 0], link=[False, True, False, True])
    assert compute_reward(0, 3, 3, v, cfg) == pytest.approx(cfg.r_ttl + cfg.r_deliver + cfg.r_conn)
    hold = buffer_term(10, 50, cfg) + cfg.r_nottl + cfg.r_hold
    assert compute_reward(0, 0, 3, v, cfg) == pytest.approx(hold)
    fwd = cfg.r_usage + cfg.r_ttl + cfg.r_fwd + cfg.r_conn
    assert compute_reward(0, 1, 3, v, cfg) == pytest.approx(fwd)


def test_reward_config_signs():
    with pytest.raises(ConfigError):
        RewardConfig(r_hold=0.1)
    with pytest.raises(ConfigError):
        RewardConfig(r_deliver=-1)
    with pytest.raises(ConfigError):
        RewardConfig(alpha_b=0)


reward_cfgs = st.builds(
    RewardConfig,
    r_deliver=st.floats(0, 50), r_conn=st.floats(0, 10), r_ttl=st.floats(0, 10),
    r_nottl=st.floats(-10, 0), r_usage=st.floats(-10, 0), r_hold=st.floats(-5, 0),
    r_fwd=st.floats(-5, 0), alpha_ttl=st.floats(0.1, 3), alpha_b=st.floats(0.1, 3))


@settings(max_examples=200, deadline=None)
@given(cfg=reward_cfgs)
def test_delivery_beats_hopeless_hold(cfg):
    v = view(ttl=[0, 0, 0, 100], occ=[50, 0, 0, 0])
    deliver = compute_reward(0, 3, 3, v, cfg)
    hold = compute_reward(0, 0, 3, v, cfg)
    if cfg.r_deliver + cfg.r_conn + cfg.r_ttl == 0 and cfg.r_nottl == cfg.r_usage == cfg.r_hold == 0:
        return  # every term zero: nothing to order
    assert deliver > hold


# magnitudes bounded away from zero so the strict orderings survive rounding
graded_cfgs = st.builds(RewardConfig, r_ttl=st.floats(1e-3, 10), r_usage=st.floats(-10, -1e-3),
                        alpha_ttl=st.floats(0.1, 3), alpha_b=st.floats(0.1, 3))


@settings(max_examples=100, deadline=None)
@given(cfg=graded_cfgs, a=st.integers(1, 100), b=st.integers(1, 100))
def test_reward_terms_monotone(cfg, a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert ttl_term(lo, cfg, 100) < ttl_term(hi, cfg, 100)
    if hi <= 50:
        assert buffer_term(lo, 50, cfg) > buffer_term(hi, 50, cfg)


def test_select_action_greedy_and_single():
    rng = np.random.default_rng(0)
    q = np.array([5.0, 2.0, -1.0])
    assert select_action(q, np.ones(3, bool), 0.0, rng) == 0
    assert select_action(np.array([1.0, 1.0]), np.ones(2, bool), 0.0, rng) == 0
    only = np.array([False, True, False])
    assert all(select_action(q, only, 1.0, rng) == 1 for _ in range(50))


def test_select_action_uniform_when_exploring():
    rng = np.random.default_rng(1)
    valid = np.array([True, False, True, True, True])
    draws = [select_action(np.zeros(5), valid, 1.0, rng) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=5)
    assert counts[1] == 0
    assert chisquare(counts[valid]).pvalue > 0.001


@given(step=st.integers(0, 10**6), d=st.integers(0, 10**6))
def test_epsilon_schedule(step, d):
    cfg = TrainerConfig()
    assert epsilon_at(step + d, cfg) <= epsilon_at(step, cfg)
    assert epsilon_at(step, cfg) >= cfg.epsilon_min
    assert epsilon_at(0, cfg) == cfg.epsilon_start


def test_td_target_cases():
    r = np.array([1.0, 2.0])
    qo = np.array([[1.0, 5.0], [3.0, 0.0]])
    qt = np.array([[7.0, 11.0], [13.0, 17.0]])
    valid = np.ones((2, 2), bool)
    assert np.allclose(td_target(r, qo, qt, valid, [False, False], 0.0), r)
    assert np.allclose(td_target(r, qo, qt, valid, [True, True], 0.9), r)
    # online picks action 1 for row 0 and action 0 for row 1; target values evaluate them
    assert np.allclose(td_target(r, qo, qt, valid, [False, False], 0.5), [1 + 5.5, 2 + 6.5])
    # a masked action is never selected
    masked = np.array([[True, False], [True, True]])
    assert np.allclose(td_target(r, qo, qt, masked, [False, False], 0.5), [1 + 3.5, 2 + 6.5])


def test_td_target_collapses_to_dqn_when_nets_agree():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(5, 4))
    r = rng.normal(size=5)
    got = td_target(r, q, q, np.ones((5, 4), bool), np.zeros(5, bool), 0.9)
    assert np.allclose(got, r + 0.9 * q.max(1))


def test_replay_ring_and_uniform_sampling():
    g = PaddedGraph(np.zeros((2, 7)), np.eye(2, dtype=bool), np.ones(2, bool))
    rb = ReplayBuffer(3)
    for i in range(5):
        record_experience(rb, g, 0, float(i), g, False)
    assert [e.reward for e in rb.items] == [3.0, 4.0, 2.0]
    rb = ReplayBuffer(10)
    for i in range(10):
        rb.append(Experience(g, 0, float(i), None, True))
    idx = rb.sample_indices(20_000, np.random.default_rng(0))
    assert chisquare(np.bincount(idx, minlength=10)).pvalue > 0.001


def test_experience_rejects_invalid_action():
    g = PaddedGraph(np.zeros((2, 7)), np.eye(2, dtype=bool), np.array([True, False]))
    with pytest.raises(ValueError):
        Experience(g, 1, 0.0, None, True)


def synthetic_batch(rng, size=32):
    batch = []
    for _ in range(size):
        n = int(rng.integers(1, 6))
        x = np.zeros((6, 7))
        x[:n] = rng.uniform(0, 10, (n, 7))
        valid = np.zeros(6, bool)
        valid[:n] = True
        adj = np.zeros((6, 6), bool)
        adj[0, :n] = adj[:n, 0] = True
        adj[np.arange(n), np.arange(n)] = True
        g = PaddedGraph(x, adj, valid)
        batch.append(Experience(g, int(rng.integers(n)), float(rng.uniform(-3, 15)), None, True))
    return batch


def trainer(lr=1e-3, **kw):
    cfg = TrainerConfig(learning_rate=lr, batch_size=8, target_sync=50, **kw)
    return DDQNTrainer(Params.init(SMALL, seed=0), cfg, np.random.default_rng(0),
                       np.random.default_rng(1))


def test_train_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(5)
    batch = synthetic_batch(rng)
    t = trainer()
    first = t.train_step(batch)
    for _ in range(199):
        last = t.train_step(batch)
    assert last <= 0.5 * first


def test_zero_learning_rate_leaves_params():
    t = trainer(lr=0.0)
    before = t.params.digest()
    loss = t.train_step(synthetic_batch(np.random.default_rng(0), 8))
    assert loss > 0 and t.params.digest() == before


def test_zero_error_batch_is_a_fixed_point():
    t = trainer()
    batch = synthetic_batch(np.random.default_rng(2), 8)
    x, adj, valid = stack_graphs([e.state for e in batch])
    q, _ = forward_batch(t.params, x, adj, valid)
    for i, e in enumerate(batch):
        e.reward = float(q[i, e.action])
    before = t.params.digest()
    assert t.train_step(batch) == pytest.approx(0.0, abs=1e-10)
    assert t.params.digest() == before


def test_insufficient_replay():
    t = trainer()
    with pytest.raises(InsufficientData):
        t.train_step()


def test_target_network_only_changes_at_sync():
    t = trainer()
    batch = synthetic_batch(np.random.default_rng(3), 8)
    for e in batch:
        t.replay.append(e)
    snapshot = t.target.to_bytes()
    for step in range(1, 121):
        t.train_step()
        if step % 50 == 0:
            assert t.target.to_bytes() == t.params.to_bytes()
            snapshot = t.target.to_bytes()
        else:
            assert t.target.to_bytes() == snapshot
