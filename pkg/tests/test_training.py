import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_graph, random_graph
from mipsroute.agent import Agent, init_params
from mipsroute.proxgraph import GraphConfig, ProximityGraph, build_ipnsw
from mipsroute.search import IpcBudget, PathStep, RoutingPath, collect_path
from mipsroute.training import (Adam, RewardConfig, ShortestPathTable, TrainConfig, TrainingError,
                                bfs_distances, reinforce_update, returns_with_baseline,
                                score_path, shaping_telescope_check, step_reward, train)
from mipsroute.vecstore import Dataset, GroundTruthTable, QuerySet, synthetic


def _floyd_warshall(g: ProximityGraph) -> np.ndarray:
    n = g.n
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0)
    for v in range(n):
        for w in g.neighbors(v):
            D[v, w] = 1
    for k in range(n):
        D = np.minimum(D, D[:, k:k + 1] + D[k:k + 1, :])
    return D


def test_bfs_examples():
    t = bfs_distances(chain_graph(3), 2)
    assert t.distances.tolist() == [2, 1, 0]
    assert bfs_distances(chain_graph(3), 1)[1] == 0


@pytest.mark.parametrize("directed", [False, True])
def test_bfs_matches_floyd_warshall(directed):
    r = np.random.default_rng(5)
    g = random_graph(100, 0.03, r, directed=directed)
    D = _floyd_warshall(g)
    for target in r.choice(100, 5, replace=False):
        t = bfs_distances(g, int(target))
        ref = np.where(np.isinf(D[:, target]), -1, D[:, target]).astype(int)
        np.testing.assert_array_equal(t.distances, ref)
        for u in range(g.n):
            for w in g.neighbors(u):
                if t.reachable(int(w)):
                    assert t[u] <= t[int(w)] + 1


def test_step_reward_examples():
    X = np.array([[0.0, 1.0], [2.0, 0.0]])
    assert step_reward(X, np.array([1.0, 0.0]), 0, 1) == 2.0
    chain = ShortestPathTable(np.array([2, 1, 0]), 2)
    flat = np.zeros((3, 1))
    q = np.zeros(1)
    cfg = RewardConfig(alpha=1.0, gamma=0.9)
    assert step_reward(flat, q, 0, 1, chain, False, cfg) == pytest.approx(1.1)
    assert step_reward(flat, q, 1, 2, chain, True, cfg) == pytest.approx(1.0)


def test_step_reward_unreachable_falls_back():
    X = np.array([[0.0], [1.0], [3.0]])
    q = np.array([1.0])
    table = ShortestPathTable(np.array([-1, 1, 0]), 2)
    cfg = RewardConfig(alpha=1.0)
    assert step_reward(X, q, 0, 1, table, False, cfg) == 1.0
    assert step_reward(X, q, 0, 1, table, True, cfg) == 1.0


def test_reward_modes():
    X = np.array([[0.0], [2.0]])
    q = np.array([1.0])
    table = ShortestPathTable(np.array([3, 1]), 1)
    kw = dict(table=table, terminal=False)
    full = step_reward(X, q, 0, 1, cfg=RewardConfig(0.5, 0.9, mode="full"), **kw)
    shaping = step_reward(X, q, 0, 1, cfg=RewardConfig(0.5, 0.9, mode="shaping"), **kw)
    naive = step_reward(X, q, 0, 1, cfg=RewardConfig(0.5, 0.9, mode="naive"), **kw)
    assert naive == 2.0
    assert shaping == pytest.approx(-0.5 * (0.9 * 1 - 3))
    assert full == pytest.approx(naive + shaping)


def test_telescope_examples():
    t = bfs_distances(chain_graph(5), 4)
    assert shaping_telescope_check([0, 1, 2, 3], t, 1.0, 0.9) == pytest.approx(4.0, abs=1e-12)
    assert shaping_telescope_check([0, 1, 2, 3], t, 0.0, 0.9) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0), st.floats(0.0, 1.0))
def test_shaped_return_is_unshaped_plus_constant(seed, alpha, gamma):
    r = np.random.default_rng(seed)
    g = random_graph(25, 0.2, r)
    X = r.standard_normal((25, 3))
    q = r.standard_normal(3)
    target = int(r.integers(25))
    table = bfs_distances(g, target)
    logits = r.standard_normal(25)
    path = collect_path(lambda c: np.exp(logits[c]) / np.exp(logits[c]).sum(), g,
                        IpcBudget.unlimited(), r, v0=int(r.integers(25)))
    states = path.states
    if len(states) < 2 or not all(table.reachable(s) for s in states):
        return
    ips = X @ q
    cfg = RewardConfig(alpha, gamma, 0)
    shaped = [step_reward(X, q, a, b, table, i == len(states) - 2, cfg)
              for i, (a, b) in enumerate(zip(states, states[1:]))]
    plain = [ips[b] - ips[a] for a, b in zip(states, states[1:])]
    total_s = math.fsum(gamma ** t * x for t, x in enumerate(shaped))
    total_p = math.fsum(gamma ** t * x for t, x in enumerate(plain))
    assert total_s - total_p == pytest.approx(alpha * table[states[0]], abs=1e-9)


def test_returns_examples():
    assert returns_with_baseline(np.array([1.0]), np.array([0.25]), 0.5).tolist() == [0.75]
    r, b = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.0, 1.0])
    np.testing.assert_array_equal(returns_with_baseline(r, b, 0.0), r - b)


def test_returns_match_double_loop(rng):
    for _ in range(20):
        r, b = rng.standard_normal(5), rng.standard_normal(5)
        gamma = float(rng.random())
        ref = [sum(gamma ** (i - t) * (r[i] - b[i]) for i in range(t, 5)) for t in range(5)]
        np.testing.assert_allclose(returns_with_baseline(r, b, gamma), ref, atol=1e-12)


def _step(state, cands, probs, choice):
    return PathStep(state, np.asarray(cands), np.asarray(probs, dtype=float), choice)


def test_baseline_is_mean_of_draws(rng):
    X = rng.standard_normal((6, 2))
    ips = X @ rng.standard_normal(2)
    path = RoutingPath(0, [_step(0, [1, 2, 3], [0.2, 0.3, 0.5], 1),
                           _step(2, [4, 5], [0.6, 0.4], 0)])
    cfg = RewardConfig(0.7, 0.9, 7)
    traj = score_path(path, ips, None, cfg, rng)
    assert len(traj.baseline_draws) == 2
    for t, step in enumerate(path.steps):
        draws = traj.baseline_draws[t]
        assert len(draws) == 7
        alt = [ips[step.candidates[p]] - ips[step.state] for p in draws]
        assert traj.baselines[t] == math.fsum(alt) / 7
    no_base = score_path(path, ips, None, RewardConfig(0.7, 0.9, 0), rng)
    assert np.all(no_base.baselines == 0)


def test_baseline_draws_follow_policy():
    rng = np.random.default_rng(3)
    path = RoutingPath(0, [_step(0, [1, 2], [0.8, 0.2], 0)])
    ips = np.zeros(3)
    picks = np.concatenate([score_path(path, ips, None, RewardConfig(baseline_samples=50), rng)
                            .baseline_draws[0] for _ in range(400)])
    assert abs((picks == 0).mean() - 0.8) < 0.01


def test_alpha_zero_rewards_ignore_ground_truth(rng):
    X = rng.standard_normal((60, 4))
    g = build_ipnsw(Dataset(X), GraphConfig(5))
    q = rng.standard_normal(4)
    ips = X @ q
    table = bfs_distances(g, int(np.argmax(ips)))
    agent = Agent(init_params(4, rng), g, X)
    path = collect_path(agent.policy(q), g, IpcBudget(40), rng)
    cfg = RewardConfig(alpha=0.0)
    a = score_path(path, ips, table, cfg, np.random.default_rng(1))
    b = score_path(path, ips, None, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(a.rewards, b.rewards)
    np.testing.assert_array_equal(a.baselines, b.baselines)


def test_adam_schedule_and_zero_gradient():
    opt = Adam(lr=0.1, decay_rate=0.5, decay_steps=2)
    w = {"x": np.array([1.0, 2.0])}
    opt.step(w, {"x": np.zeros(2)})
    np.testing.assert_array_equal(w["x"], [1.0, 2.0])
    opt.step(w, {"x": np.zeros(2)})
    assert opt.current_lr() == pytest.approx(0.1 * 0.5)


def test_adam_ascends():
    opt = Adam(lr=0.05)
    w = {"x": np.array([0.0])}
    for _ in range(200):
        opt.step(w, {"x": -2 * (w["x"] - 3.0)})
    assert abs(w["x"][0] - 3.0) < 0.1


def test_reinforce_zero_returns_leave_params(rng):
    X = rng.standard_normal((40, 3))
    g = build_ipnsw(Dataset(X), GraphConfig(4))
    agent = Agent(init_params(3, rng), g, X)
    before = agent.params.copy()
    q = rng.standard_normal(3)
    path = collect_path(agent.policy(q), g, IpcBudget(30), rng)
    from mipsroute.training import Trajectory
    traj = Trajectory(path, np.zeros(len(path)), np.zeros(len(path)))
    assert reinforce_update(agent, Adam(), [q], [traj], 0.9)
    for k, v in before.weights.items():
        np.testing.assert_array_equal(agent.params.weights[k], v)


def test_reinforce_rejects_non_finite(rng):
    X = rng.standard_normal((40, 3))
    g = build_ipnsw(Dataset(X), GraphConfig(4))
    agent = Agent(init_params(3, rng), g, X)
    q = rng.standard_normal(3)
    path = collect_path(agent.policy(q), g, IpcBudget(30), rng)
    assert len(path)
    from mipsroute.training import Trajectory
    bad = Trajectory(path, np.full(len(path), np.nan), np.zeros(len(path)))
    before = agent.params.copy()
    assert not reinforce_update(agent, Adam(), [q], [bad], 0.9)
    for k, v in before.weights.items():
        np.testing.assert_array_equal(agent.params.weights[k], v)


def _small_setup(seed=0):
    ds, qs = synthetic(200, 6, 80, seed=seed)
    g = build_ipnsw(ds, GraphConfig(6))
    tr, va = qs.subset(range(60), "train"), qs.subset(range(60, 80), "validation")
    gt = GroundTruthTable({i: (int(np.argmax(ds.items @ q)),) for i, q in enumerate(tr.queries)},
                          len(tr), ds.n)
    return ds, g, tr, va, gt


def test_train_zero_batches_returns_init():
    ds, g, tr, va, gt = _small_setup()
    res = train(ds, g, tr, gt, TrainConfig(batches=0, seed=4))
    ref = init_params(ds.dim, np.random.default_rng(np.random.SeedSequence(4).spawn(3)[0]), tau=0.15)
    for k, v in ref.weights.items():
        np.testing.assert_array_equal(res.params.weights[k], v)


def test_train_empty_set():
    ds, g, tr, va, gt = _small_setup()
    with pytest.raises(TrainingError):
        train(ds, g, QuerySet(np.zeros((0, 6))), None, TrainConfig(batches=1))


def test_train_is_reproducible():
    ds, g, tr, va, gt = _small_setup()
    cfg = TrainConfig(batches=6, batch_size=5, eval_every=3, seed=2)
    a = train(ds, g, tr, gt, cfg, validation=va)
    b = train(ds, g, tr, gt, cfg, validation=va)
    assert a.history == b.history and a.best_batch == b.best_batch
    for k in a.final_params.weights:
        np.testing.assert_array_equal(a.final_params.weights[k], b.final_params.weights[k])
    assert any(not np.array_equal(a.final_params.weights[k], w)
               for k, w in train(ds, g, tr, gt, TrainConfig(batches=0, seed=2)).params.weights.items())
