import math

import numpy as np
import pytest
from scipy.stats import chisquare

from anonmatch.errors import ConfigError, ContractError
from anonmatch.learners import (
    A2cLearner,
    DeA2cLearner,
    DeDqnLearner,
    DqnLearner,
    HyperParams,
    MeanActionTable,
    MmfqLearner,
    ReplayMemory,
    TabularQ,
    a2c_update,
    decay_tau,
    dedqn_target,
    dedqn_train_batch,
    density_loss,
    dqn_target,
    epsilon_at,
    k_step_returns,
    make_learner,
    mmfq_train_batch,
    predicted_density,
    tabular_q_update,
)
from anonmatch.learners.a2c import policy_loss_grad, value_loss_grad
from anonmatch.learners.dqn import density_logits
from anonmatch.learners.tabular import density_bucket
from anonmatch.matchenv import Experience
from anonmatch.numkit import backward, entropy, forward
from anonmatch.oracles import a2c_bandit, loss_gradient_suite, tabular_vs_value_iteration

Z = 4


def exp(z=0, d=1, a=0, r=0.0, z2=0, d2=1, n=4, agent=0, t=0):
    return Experience(agent, z, d, a, r, z2, d2, n, t, t + 1)


def small_hp(**kw):
    base = dict(hidden=[8], dropout=0.0, min_fill=1, batch_size=4, lr_q=1e-2, lr_policy=1e-2, lr_value=1e-2)
    base.update(kw)
    return HyperParams(**base)


def zero_net(net):
    for p in net.params():
        p[...] = 0.0


class TestEpsilon:
    def test_start_and_floor(self):
        assert epsilon_at(0, 100.0) == 1.0
        assert epsilon_at(10**9, 100.0) == 0.05

    def test_tau_hits_floor_at_budget(self):
        budget = 200_000
        tau = decay_tau(budget)
        assert tau == pytest.approx(budget / math.log(20))
        assert abs(epsilon_at(budget, tau) - 0.05) <= 1e-6
        assert epsilon_at(budget // 2, tau) > 0.05

    def test_monotone(self):
        tau = decay_tau(1000)
        vals = [epsilon_at(t, tau) for t in range(0, 3000, 7)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            epsilon_at(-1, 10.0)


class TestAct:
    def test_epsilon_one_is_uniform(self):
        learner = DqnLearner(1, Z, small_hp(eps_tau=float("inf")), 0, budget=10)
        acts = np.concatenate([learner.act([0], [1], [1], 0) for _ in range(10_000)])
        counts = np.bincount(acts, minlength=Z)
        assert chisquare(counts).pvalue > 0.001

    def test_epsilon_zero_argmax(self):
        learner = DqnLearner(1, 3, small_hp(eps_start=1e-12, eps_floor=1e-12), 0, budget=10)
        zero_net(learner.net)
        learner.net.biases[-1][0, :3] = [1.0, 3.0, 2.0]
        assert all(learner.act([0], [0], [1], 0)[0] == 1 for _ in range(50))

    def test_ties_break_to_lowest_zone(self):
        learner = DqnLearner(1, 3, small_hp(eps_start=1e-12, eps_floor=1e-12), 0, budget=10)
        zero_net(learner.net)
        assert learner.act([0], [2], [1], 0)[0] == 0

    def test_a2c_equal_logits_uniform(self):
        learner = A2cLearner(1, Z, small_hp(), 3, budget=10)
        zero_net(learner.policy)
        acts = np.concatenate([learner.act([0], [0], [1], t) for t in range(10_000)])
        assert chisquare(np.bincount(acts, minlength=Z)).pvalue > 0.001

    def test_policy_on_simplex(self):
        learner = A2cLearner(3, Z, small_hp(), 1, budget=10)
        p = learner.policy_probs([0, 1, 2], [0, 3, 1], [1, 2, 3])
        assert (p > 0).all() and np.allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_tabular_greedy(self):
        learner = TabularQ(4, 3, HyperParams(eps_start=1e-9, eps_floor=1e-9), 0, budget=10)
        learner.q[0, 1, density_bucket(0.25, 5)] = [0.0, 0.0, 5.0]
        assert learner.act([0], [1], [1], 0)[0] == 2


class TestTabular:
    def test_single_update(self):
        table = np.zeros((2, 2))
        td = tabular_q_update(table, 0, 1, 1.0, 1, 0.1, 0.9)
        assert table[0, 1] == pytest.approx(0.1) and td == 1.0

    def test_alpha_zero_no_change(self):
        table = np.arange(4.0).reshape(2, 2)
        before = table.copy()
        tabular_q_update(table, 0, 0, 5.0, 1, 0.0, 0.9)
        assert np.array_equal(table, before)

    def test_buckets(self):
        assert list(density_bucket(np.array([0.0, 0.19, 0.2, 0.99, 1.0]), 5)) == [0, 0, 1, 4, 4]

    def test_value_iteration_oracle(self):
        gap, q_tab, q_vi = tabular_vs_value_iteration()
        # hand solution: V1 = 2 / (1 - 0.81), V0 = 0.9 V1
        assert q_vi[1, 0] == pytest.approx(2 / 0.19)
        assert gap < 1e-3

    def test_record_respects_training_flag(self):
        learner = TabularQ(1, 2, HyperParams(), 0, budget=10)
        learner.training = False
        learner.record([exp(r=1.0, n=1)])
        assert not learner.q.any()


def dqn_single(kind="dqn", **kw):
    cls = {"dqn": DqnLearner, "dedqn": DeDqnLearner, "mmfq": MmfqLearner}[kind]
    return cls(1, Z, small_hp(**kw), 0, budget=100)


class TestDqnTargets:
    def test_target_arithmetic(self):
        learner = dqn_single(gamma=0.99)
        zero_net(learner.target)
        learner.target.biases[-1][0, 2] = 10.0
        assert dqn_target(learner, [exp(r=2.0)])[0] == pytest.approx(11.9)

    def test_gamma_zero_and_zero_net(self):
        learner = dqn_single(gamma=0.0)
        assert dqn_target(learner, [exp(r=3.5)])[0] == 3.5
        learner = dqn_single()
        zero_net(learner.target)
        assert dqn_target(learner, [exp(r=-1.25)])[0] == -1.25

    def test_dedqn_target_arithmetic(self):
        learner = DeDqnLearner(1, 10, small_hp(gamma=0.5, beta=0.01), 0, budget=100)
        zero_net(learner.target)
        # uniform density prediction gives H = ln 10; max q = 10 so gamma * max = 5
        learner.target.biases[-1][0, :10] = 10.0
        y = dedqn_target(learner, [exp(r=1.0, n=10)])[0]
        assert y == pytest.approx(1 + 0.01 * math.log(10) + 5, abs=1e-12)
        assert y == pytest.approx(6.023026, abs=1e-6)

    def test_beta_zero_equals_dqn_target(self):
        learner = dqn_single("dedqn", beta=0.0)
        batch = [exp(z=1, a=2, r=0.3, z2=3, d2=2), exp(z=0, a=1, r=1.0, z2=2, d2=1)]
        assert np.array_equal(dedqn_target(learner, batch), dqn_target(learner, batch))

    def test_entropy_term_bounded(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            learner = DeDqnLearner(1, Z, small_hp(beta=0.01, gamma=0.0), seed, budget=100)
            batch = [exp(z=int(rng.integers(Z)), a=int(rng.integers(Z)), d=int(rng.integers(5))) for _ in range(8)]
            bonus = dedqn_target(learner, batch)
            assert (bonus >= 0).all() and (bonus <= 0.01 * math.log(Z) + 1e-15).all()


class TestDensity:
    def test_zero_net_uniform(self):
        learner = dqn_single("dedqn")
        zero_net(learner.net)
        p = predicted_density(learner.net, [0], [0.5], [2], Z)
        assert np.allclose(p, 1 / Z)
        assert entropy(p[0]) == pytest.approx(math.log(Z), abs=1e-12)

    def test_random_nets_on_simplex(self):
        rng = np.random.default_rng(1)
        for seed in range(200):
            learner = DeDqnLearner(1, Z, small_hp(), seed, budget=10)
            p = predicted_density(learner.net, rng.integers(0, Z, 5), rng.random(5), rng.integers(0, Z, 5), Z)
            assert (p >= 0).all() and np.allclose(p.sum(-1), 1.0, atol=1e-12)

    def test_loss_examples(self):
        learner = dqn_single("dedqn")
        zero_net(learner.net)
        # uniform prediction 1/Z matches observed density 1/Z
        assert density_loss(learner.net, [exp(z2=1, d2=1, n=Z)], Z) == pytest.approx(0.0, abs=1e-15)
        # predicted 0.3 at the observed coordinate vs observed 0.5
        learner.net.biases[-1][0, Z:] = 0.0
        logits = np.log(np.array([0.3, 0.7 / 3, 0.7 / 3, 0.7 / 3]))
        learner.net.biases[-1][0, Z + 2 * Z : Z + 3 * Z] = logits
        loss = density_loss(learner.net, [exp(a=2, z2=0, d2=2, n=4)], Z)
        assert loss == pytest.approx(0.04)

    def test_block_selection(self):
        learner = dqn_single("dedqn")
        x = np.zeros(Z + 1)
        x[0], x[Z] = 1.0, 0.5
        out = forward(learner.net, x)
        up = np.zeros_like(out)
        up[learner.net.heads["density"].start + 1 * Z : learner.net.heads["density"].start + 2 * Z] = 1.0
        g = backward(learner.net, x, up).weights[-1][0]
        rows = np.flatnonzero(np.abs(g).sum(axis=1))
        start = learner.net.heads["density"].start
        assert set(rows) <= set(range(start + Z, start + 2 * Z)) and len(rows) > 0

    def test_density_logits_selects_block(self):
        learner = dqn_single("dedqn")
        out = np.arange(Z + Z * Z, dtype=float)[None]
        assert list(density_logits(learner.net, out, [3], Z)[0]) == list(range(Z + 3 * Z, Z + 4 * Z))


class TestGradients:
    def test_all_losses_match_finite_differences(self):
        worst = loss_gradient_suite(trials=30, seed=11)
        assert set(worst) == {"q", "density", "combined", "value", "value_density", "policy"}
        assert max(worst.values()) < 1e-4

    def test_k1_zero_value_advantage_is_reward(self):
        returns = k_step_returns([2.5], 0.0, 0.9)
        assert returns[0] == 2.5

    def test_k_step_returns(self):
        assert np.allclose(k_step_returns([1.0, 0.0, 2.0], 10.0, 0.5), [1 + 0.5 * 0 + 0.25 * 2 + 0.125 * 10,
                                                                      0 + 0.5 * 2 + 0.25 * 10, 2 + 5])

    def test_zero_advantage_zero_policy_gradient(self):
        logits = np.random.default_rng(0).normal(size=(1, 3, Z))
        _, g = policy_loss_grad(logits, np.array([[0, 1, 2]]), np.zeros((1, 3)), np.ones((1, 3)))
        assert not g.any()

    def test_masked_rows_ignored(self):
        v = np.array([[1.0, 5.0]])
        loss, g = value_loss_grad(v, np.array([[2.0, -100.0]]), np.array([[1.0, 0.0]]))
        assert loss[0] == 1.0 and g[0, 1] == 0.0


class TestTraining:
    def test_overfit_one_sample(self):
        decreasing = 0
        for seed in range(100):
            learner = DeDqnLearner(1, Z, small_hp(lr_q=1e-3, beta=0.0, lam=1.0, target_sync=10**6), seed,
                                   budget=100)
            e = [exp(z=1, d=2, a=3, r=1.0, z2=2, d2=3)]
            losses = [dedqn_train_batch(learner, e) for _ in range(100)]
            q = np.array([l[0] for l in losses])
            d = np.array([l[1] for l in losses])
            decreasing += bool(q[-1] < q[0] and d[-1] < d[0] and (np.diff(q) <= 1e-12).all())
        assert decreasing >= 95

    def test_target_frozen_between_syncs(self):
        learner = dqn_single(target_sync=5)
        x = np.eye(Z + 1)[:, : Z + 1]
        before = forward(learner.target, x)
        batch = [exp(z=1, a=2, r=1.0, z2=0)]
        for _ in range(4):
            dedqn_train_batch(learner, batch)
            assert np.array_equal(forward(learner.target, x), before)
        dedqn_train_batch(learner, batch)
        assert np.array_equal(forward(learner.target, x), forward(learner.net, x))

    @pytest.mark.parametrize("seed", range(3))
    def test_bandit(self, seed):
        assert a2c_bandit(seed, updates=5_000) > 0.95

    def test_a2c_update_empty_rollout(self):
        learner = A2cLearner(1, Z, small_hp(), 0, budget=10)
        with pytest.raises(ContractError):
            a2c_update(learner, [])

    def test_dea2c_update_runs(self):
        learner = DeA2cLearner(2, Z, small_hp(batch_size=2), 0, budget=10)
        exps = [exp(agent=i % 2, z=i % Z, a=(i + 1) % Z, z2=(i + 1) % Z, r=float(i)) for i in range(12)]
        learner.record(exps)
        losses = learner.train(0)
        assert losses is not None and all(np.isfinite(list(losses.values())))


class TestMmfq:
    def test_uniform_table_zero_net_target_is_reward(self):
        learner = dqn_single("mmfq")
        zero_net(learner.net)
        zero_net(learner.target)
        table = MeanActionTable(Z)
        losses = mmfq_train_batch(learner, [exp(r=2.0)], table)
        assert losses["q_loss"] == pytest.approx(4.0)

    def test_table_rows_are_simplex(self):
        rng = np.random.default_rng(0)
        table = MeanActionTable(Z)
        table.log(rng.integers(0, Z, 50), rng.integers(0, Z, 50))
        table.roll()
        assert np.allclose(table.rows.sum(axis=1), 1.0)
        table.log([1, 1, 1], [2, 2, 0])
        table.roll()
        assert np.allclose(table.rows[1], [1 / 3, 0, 2 / 3, 0])
        assert np.allclose(table.rows[0], 1 / Z)

    def test_mean_action_input_matters(self):
        sensitive = 0
        rng = np.random.default_rng(5)
        for seed in range(100):
            learner = MmfqLearner(1, Z, small_hp(hidden=[32, 32]), seed, budget=10)
            base = np.zeros(2 * Z + 1)
            base[1], base[Z] = 1.0, 0.3
            other = base.copy()
            base[Z + 1 :] = rng.dirichlet(np.ones(Z))
            other[Z + 1 :] = rng.dirichlet(np.ones(Z))
            q_base = learner.net.head(forward(learner.net, base), "q")
            q_other = learner.net.head(forward(learner.net, other), "q")
            sensitive += bool(np.abs(q_base - q_other).max() > 0)
        assert sensitive >= 99


class TestReplay:
    def test_fifo_eviction(self):
        mem = ReplayMemory(1, 2)
        for r in (1.0, 2.0, 3.0):
            mem.push(0, 0, 0.0, 0, r, 0, 0.0)
        assert len(mem) == 2 and sorted(mem.r[0]) == [2.0, 3.0]

    def test_uniform_sampling(self):
        mem = ReplayMemory(1, 10)
        for i in range(10):
            mem.push(0, 0, 0.0, 0, float(i), 0, 0.0)
        idx = mem.sample_indices(100_000, np.random.default_rng(0))
        assert chisquare(np.bincount(idx[0], minlength=10)).pvalue > 0.01

    def test_sample_before_fill_is_deferred(self):
        mem = ReplayMemory(2, 10)
        mem.push(0, 0, 0.0, 0, 1.0, 0, 0.0)
        assert mem.sample(4, np.random.default_rng(0)) is None
        assert not mem.ready(4).any()

    def test_learner_defers_until_min_fill(self):
        learner = DqnLearner(1, Z, small_hp(min_fill=10, batch_size=4), 0, budget=10)
        learner.record([exp(r=1.0) for _ in range(9)])
        assert learner.train(0) is None
        learner.record([exp(r=1.0)])
        assert learner.train(0) is not None


def _drive(learner, steps=60, seed=0):
    """Feed a learner a deterministic stream of decisions and return its actions."""
    rng = np.random.default_rng(seed)
    n, zones = learner.n_agents, learner.n_zones
    zone = rng.integers(0, zones, n)
    pending = {}
    actions = []
    for t in range(steps):
        agents = np.flatnonzero(rng.random(n) < 0.6)
        counts = rng.integers(1, n + 1, len(agents))
        exps = []
        for a, c in zip(agents, counts):
            if a in pending:
                z, d, act = pending[a]
                exps.append(Experience(int(a), z, d, act, float(rng.random()), int(zone[a]), int(c), n, t - 1, t))
        learner.record(exps)
        acts = learner.act(agents, zone[agents], counts, t)
        actions.append(acts.copy())
        for a, c, act in zip(agents, counts, acts):
            pending[a] = (int(zone[a]), int(c), int(act))
            zone[a] = act
        learner.train(t)
    learner.end_period()
    return np.concatenate(actions)


class TestReductions:
    @pytest.mark.parametrize("base,de", [(DqnLearner, DeDqnLearner), (A2cLearner, DeA2cLearner)])
    def test_zero_weights_identical_trajectories(self, base, de):
        hp = dict(hidden=[8], dropout=0.5, min_fill=4, batch_size=4, beta=0.0, lam=0.0, k=3, target_sync=7)
        a = base(5, Z, HyperParams(density_head=True, **hp), 42, budget=60)
        b = de(5, Z, HyperParams(**hp), 42, budget=60)
        assert np.array_equal(_drive(a), _drive(b))
        na, nb = (a.net, b.net) if base is DqnLearner else (a.value, b.value)
        for p, q in zip(na.params(), nb.params()):
            assert np.array_equal(p, q)


class TestFactory:
    @pytest.mark.parametrize("kind", ["tabq", "dqn", "a2c", "dedqn", "dea2c", "mmfq"])
    def test_every_kind_builds_and_acts(self, kind):
        learner = make_learner(kind, 3, Z, small_hp(), 0, budget=100)
        acts = learner.act(np.array([0, 2]), np.array([1, 3]), np.array([1, 2]), 0)
        assert acts.shape == (2,) and ((0 <= acts) & (acts < Z)).all()

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_learner("ppo", 3, Z, small_hp(), 0, budget=100)

    def test_invalid_hyper(self):
        with pytest.raises(ConfigError):
            make_learner("dqn", 3, Z, HyperParams(gamma=1.0), 0, budget=100)

    def test_shared_parameters(self):
        learner = make_learner("dqn", 4, Z, small_hp(shared=True), 0, budget=100)
        assert learner.net.members == 1
        _drive(learner, steps=20)
