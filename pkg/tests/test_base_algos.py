"""Value updates of the wrapped base algorithms and the coefficient baselines."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from famo2o.base_algos import (
    anneal_beta,
    cql_loss_and_grad,
    cql_universal_objective_and_grad,
    cql_universal_update,
    expectile_loss,
    expectile_loss_and_grad,
    fixed_beta_sweep,
    iql_value_update,
    random_beta_baseline,
    td_loss_and_grad,
    td_q_update,
    td_targets,
    update_target,
)
from famo2o.config import RunConfig
from famo2o.core import QCritic, UniversalModel
from famo2o.numkit import Adam, BalanceSpace, ContractError, Mlp


class TestExpectile:
    def test_symmetric_case_is_half_mse(self):
        rng = np.random.default_rng(0)
        v = Mlp([3, 4, 1], rng)
        obs, target = rng.standard_normal((6, 3)), rng.standard_normal(6)
        loss, grads = expectile_loss_and_grad(v, obs, target, 0.5)
        out, cache = v.forward(obs)
        diff = target - out[:, 0]
        np.testing.assert_allclose(loss, 0.5 * np.mean(diff ** 2))
        mse_grads, _ = v.backward(cache, (-2.0 * diff / 6)[:, None])
        np.testing.assert_allclose(grads, 0.5 * mse_grads, rtol=1e-12)

    def test_scalar_formula(self):
        np.testing.assert_allclose(expectile_loss(np.array([1.0, -1.0]), 0.7), [0.7, 0.3])

    def test_tau_range(self):
        with pytest.raises(ContractError):
            expectile_loss_and_grad(Mlp([1, 1]), np.ones((1, 1)), np.ones(1), 1.0)

    def test_fits_golden_section_minimiser(self):
        samples = np.array([0.0, 1.0])
        golden = minimize_scalar(lambda c: float(np.mean(expectile_loss(samples - c, 0.7))),
                                 bracket=(-1.0, 0.5, 2.0), method="golden", tol=1e-10).x
        v = Mlp([1, 1])
        obs = np.ones((2, 1))
        # the loss gradient vanishes at the golden-section minimiser
        v.biases[0][...] = golden
        _, grads = expectile_loss_and_grad(v, obs, samples, 0.7)
        assert np.max(np.abs(grads)) < 1e-6
        # and training from zero reaches it
        v.params[:] = 0.0
        opt = Adam(v.n_params, lr=1e-2)
        for k in range(4000):
            if k == 3000:
                opt.lr = 1e-4
            iql_value_update(v, opt, obs, samples, 0.7)
        np.testing.assert_allclose(v(np.ones((1, 1)))[0, 0], golden, atol=1e-3)


class TestTd:
    def test_terminal_and_myopic(self):
        np.testing.assert_array_equal(td_targets(np.array([1.0]), np.array([1.0]), np.array([55.0]), 0.99), [1.0])
        r = np.array([0.3, -2.0])
        np.testing.assert_array_equal(td_targets(r, np.zeros(2), np.array([4.0, 9.0]), 0.0), r)

    def test_two_state_chain_matches_value_iteration(self):
        # states 0, 1; actions 0 (stay) and 1 (switch); reward 1 for being in state 1
        P = np.zeros((2, 2, 2))
        P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 1] = P[1, 1, 0] = 1.0
        R = np.array([[0.0, 0.0], [1.0, 1.0]])
        pi = np.array([[0.3, 0.7], [0.6, 0.4]])
        gamma = 0.9
        q_vi = np.zeros((2, 2))
        for _ in range(2000):
            q_vi = R + gamma * P @ np.sum(pi * q_vi, axis=1)
        q = QCritic(2, discrete=True, n_actions=2, hidden=(), rng=None)
        opt = Adam(q.net.n_params, lr=0.05)
        obs = np.eye(2)[[0, 0, 1, 1]]
        acts = np.array([0, 1, 0, 1])
        nxt = np.array([0, 1, 1, 0])
        for k in range(6000):
            if k == 5000:
                opt.lr = 1e-3
            vals = q.all_values(np.eye(2))
            v_next = np.sum(pi * vals, axis=1)[nxt]
            targets = td_targets(R[[0, 0, 1, 1], acts], np.zeros(4), v_next, gamma)
            td_q_update(q, opt, obs, acts, targets)
        np.testing.assert_allclose(q.all_values(np.eye(2)), q_vi, atol=1e-3)


class TestCql:
    def _critic(self):
        return QCritic(3, discrete=True, n_actions=2, hidden=(5,), rng=np.random.default_rng(1))

    def test_zero_weight_equals_td(self):
        q = self._critic()
        rng = np.random.default_rng(2)
        obs, acts, tgt = rng.standard_normal((4, 3)), rng.integers(0, 2, 4), rng.standard_normal(4)
        loss, grads, _ = cql_loss_and_grad(q, obs, acts, tgt, 0.0)
        td_loss, td_grads = td_loss_and_grad(q, obs, acts, tgt)
        assert loss == td_loss
        np.testing.assert_array_equal(grads, td_grads)

    def test_constant_q_penalty_gradient(self):
        q = QCritic(3, discrete=True, n_actions=2, hidden=(), rng=None)
        q.net.biases[0][...] = 0.4
        obs = np.random.default_rng(3).standard_normal((5, 3))
        acts = np.array([0, 1, 1, 0, 1])
        targets = np.full(5, 0.4)  # TD part vanishes too
        loss, grads, penalty = cql_loss_and_grad(q, obs, acts, targets, 1.0)
        np.testing.assert_allclose(penalty, np.log(2.0))
        # softmax(Q) - onehot sums to zero over actions, so the bias gradient sums to zero per sample
        np.testing.assert_allclose(grads[-2:].sum(), 0.0, atol=1e-15)

    def test_tabular_recursion(self):
        # one state, three actions, data only on action 0 with reward 1 (terminal)
        alpha, lr = 0.5, 0.1
        q = QCritic(1, discrete=True, n_actions=3, hidden=(), rng=None)
        table = np.zeros(3)
        td_only = np.zeros(3)
        obs = np.ones((1, 1))
        for _ in range(20):
            _, grads, _ = cql_loss_and_grad(q, obs, np.array([0]), np.array([1.0]), alpha)
            q.net.params -= lr * grads
            # hand recursion: d/dQ [(Q0 - 1)^2 + alpha (lse(Q) - Q0)]
            g = alpha * np.exp(table - logsumexp(table))
            g[0] += 2.0 * (table[0] - 1.0) - alpha
            # the critic has weight and bias on a constant input of 1, so both move
            table = table - 2.0 * lr * g
            g_td = np.zeros(3)
            g_td[0] = 2.0 * (td_only[0] - 1.0)
            td_only = td_only - 2.0 * lr * g_td
        np.testing.assert_allclose(q.all_values(obs)[0], table, atol=1e-12)
        gap_cql = table[0] - table[1:].max()
        gap_td = td_only[0] - td_only[1:].max()
        assert gap_cql > gap_td

    def test_entropy_only_limit(self):
        rng = np.random.default_rng(4)
        space = BalanceSpace(0.5, 1.5, 4)
        u = UniversalModel(2, space, discrete=False, action_dim=1, action_scale=1.0, hidden=(6,), rng=rng)
        q = QCritic(2, discrete=False, action_dim=1, hidden=(6,), rng=rng)
        obs = rng.standard_normal((64, 2))
        noise = rng.standard_normal((64, 1))
        q.net.params[:] = 0.0
        _, g0 = cql_universal_objective_and_grad(u, q, obs, 1.0, noise)
        # a constant critic leaves only the entropy term, whatever the constant
        q.net.biases[-1][...] = 5.0
        _, g_const = cql_universal_objective_and_grad(u, q, obs, 1.0, noise)
        np.testing.assert_allclose(g0, g_const, atol=1e-14)
        # which widens the policy
        before = u._split(u.forward(obs, 1.0)[0])[1].mean()
        u.net.params -= 1e-3 * g0
        after = u._split(u.forward(obs, 1.0)[0])[1].mean()
        assert after > before


class _QuadraticCritic:
    """Stand-in critic ``Q(a) = -(a - 0.3)^2`` with the QCritic interface."""

    discrete = False

    def forward(self, obs, actions):
        a = np.atleast_2d(actions)[:, 0]
        return -(a - 0.3) ** 2, a

    def backward(self, cache, dvalues, param_grad=True, input_grad=True):
        return None, (dvalues * -2.0 * (cache - 0.3))[:, None]


def test_cql_policy_quadratic_soft_optimum():
    rng = np.random.default_rng(5)
    space = BalanceSpace(0.5, 1.5, 2)
    u = UniversalModel(1, space, discrete=False, action_dim=1, action_scale=1.0, hidden=(), rng=rng)
    opt = Adam(u.net.n_params, lr=1e-2)
    obs = np.ones((32, 1))
    for _ in range(3000):
        cql_universal_update(u, _QuadraticCritic(), opt, obs, 200.0, rng.standard_normal((32, 1)))
    assert abs(u.mode(obs[:1], 200.0)[0, 0] - 0.3) < 0.05


class TestTargets:
    def test_full_rate_copies(self):
        rng = np.random.default_rng(0)
        a, b = Mlp([2, 3, 1], rng), Mlp([2, 3, 1], rng)
        update_target(a, b, 1.0)
        np.testing.assert_array_equal(a.params, b.params)

    def test_exponential_trail(self):
        rng = np.random.default_rng(1)
        target, online = Mlp([2, 2], rng), Mlp([2, 2], rng)
        t0 = target.params.copy()
        for _ in range(10):
            update_target(target, online, 5e-3)
        expected = (1 - 5e-3) ** 10 * t0 + (1 - (1 - 5e-3) ** 10) * online.params
        np.testing.assert_allclose(target.params, expected, rtol=1e-12)


class TestBaselines:
    def test_anneal_schedule(self):
        assert anneal_beta(1.0, 5.0, 0, 11) == 1.0
        assert anneal_beta(1.0, 5.0, 10, 11) == 5.0
        assert anneal_beta(1.0, 5.0, 5, 11) == 3.0

    @pytest.fixture
    def small(self):
        return RunConfig(n_offline=40, n_online=60, hidden=(8,), dataset_episodes=10, eval_interval=1000,
                         log_interval=20, explicit=frozenset())

    def test_fixed_sweep(self, small):
        runs = fixed_beta_sweep(small, values=(2.0, 3.0, 4.0), seed=0)
        assert [r.space.beta_min for r in runs] == [2.0, 3.0, 4.0]
        run = runs[1].run()
        assert run.b is None
        betas = np.concatenate([run.beta_logs["offline"].values(), run.beta_logs["online"].values()])
        np.testing.assert_array_equal(betas, 3.0)

    def test_random_selector(self, small):
        from famo2o.trainer import TrainRun

        cfg = small.with_overrides(n_online=300)
        rand = random_beta_baseline(cfg, seed=1).run()
        online = rand.beta_logs["online"].values()
        assert online.min() >= 1.0 and online.max() <= 5.0
        assert stats.kstest(online, stats.uniform(loc=1.0, scale=4.0).cdf).pvalue > 0.01
        # offline phase is shared with the adaptive run
        fam = TrainRun(cfg, 1)
        rnd = random_beta_baseline(cfg, seed=1)
        for _ in range(cfg.n_offline):
            fam.offline_step()
            rnd.offline_step()
        np.testing.assert_array_equal(fam.u.net.params, rnd.u.net.params)
        np.testing.assert_array_equal(fam.q.net.params, rnd.q.net.params)
        np.testing.assert_array_equal(fam.beta_logs["offline"].values(), rnd.beta_logs["offline"].values())
