"""Value learning for the wrapped base algorithms and the coefficient baselines.

* IQL-style: an expectile regression of ``V`` onto target-``Q`` values and a
  TD regression of ``Q`` onto ``r + gamma * V(s')``.
* AWAC-style: ``Q`` regressed onto ``r + gamma * E_pi Q_target(s', a')``; the
  advantage baseline is the mean ``Q`` over policy samples.
* CQL-style: the TD loss plus a conservative gap between a soft maximum of
  ``Q`` over sampled actions and ``Q`` on the dataset action, and an
  entropy-regularised policy objective scaled per state by ``alpha_s``.

Coefficient baselines (fixed, random selector, annealing) are thin
constructors around :class:`famo2o.trainer.TrainRun`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .core import QCritic, UniversalModel, balance_update
from .numkit import (
    Adam,
    ContractError,
    Mlp,
    NonFiniteError,
    gaussian_log_prob,
    log_softmax,
    soft_update,
    softmax,
    tanh_log_jacobian,
)

SOFT_UPDATE_RATE = 5e-3
N_PENALTY_UNIFORM = 8
N_PENALTY_POLICY = 8
N_AWAC_SAMPLES = 4


# --- expectile value regression -----------------------------------------------

def expectile_loss(diff: np.ndarray, tau: float) -> np.ndarray:
    """``|tau - 1{u < 0}| * u^2`` elementwise."""
    return np.abs(tau - (diff < 0)) * diff * diff


def expectile_loss_and_grad(v: Mlp, obs, q_target_sa, tau: float, forward=None) -> tuple[float, np.ndarray]:
    """``mean |tau - 1{u<0}| u^2`` with ``u = Q_target(s,a) - V(s)``; ``forward``
    may carry a cached ``v.forward(obs)`` result."""
    if not 0.0 < tau < 1.0:
        raise ContractError(f"expectile must lie in (0, 1), got {tau}")
    obs = np.atleast_2d(obs)
    out, cache = v.forward(obs) if forward is None else forward
    diff = q_target_sa - out[:, 0]
    weight = np.abs(tau - (diff < 0))
    dout = (-2.0 * weight * diff / obs.shape[0])[:, None]
    grads, _ = v.backward(cache, dout, input_grad=False)
    return float(np.mean(weight * diff * diff)), grads


def iql_value_update(v: Mlp, opt: Adam, obs, q_target_sa, tau: float = 0.7, forward=None) -> float:
    loss, grads = expectile_loss_and_grad(v, obs, q_target_sa, tau, forward)
    opt.step(v.params, grads)
    return loss


# --- TD regression ------------------------------------------------------------

def td_targets(rewards, dones, next_values, gamma: float) -> np.ndarray:
    """``r + gamma * (1 - done) * next_value``."""
    if not 0.0 <= gamma < 1.0:
        raise ContractError(f"discount must lie in [0, 1), got {gamma}")
    return rewards + gamma * (1.0 - dones) * next_values


def td_loss_and_grad(q: QCritic, obs, actions, targets) -> tuple[float, np.ndarray]:
    values, cache = q.forward(obs, actions)
    err = values - targets
    grads, _ = q.backward(cache, 2.0 * err / len(err), input_grad=False)
    return float(np.mean(err * err)), grads


def td_q_update(q: QCritic, opt: Adam, obs, actions, targets) -> float:
    loss, grads = td_loss_and_grad(q, obs, actions, targets)
    opt.step(q.net.params, grads)
    return loss


def expected_q(q: QCritic, u: UniversalModel, obs, beta, rng: np.random.Generator | None,
               n_samples: int = 1) -> np.ndarray:
    """``E_{a ~ pi_u(.|s, enc(beta))} Q(s, a)``: exact for discrete actions,
    a sample mean otherwise."""
    obs = np.atleast_2d(obs)
    if u.discrete:
        return np.sum(u.probs(obs, beta) * q.all_values(obs), axis=1)
    total = np.zeros(obs.shape[0])
    for _ in range(n_samples):
        total += q(obs, u.sample(obs, beta, rng))
    return total / n_samples


# --- conservative Q regression -------------------------------------------------

def penalty_actions(u: UniversalModel, obs, beta, rng: np.random.Generator):
    """Uniform and policy action samples with their log densities.

    Returns ``actions`` of shape ``(B, N, action_dim)`` and ``log_density``
    of shape ``(B, N)`` for the importance-corrected soft maximum.
    """
    obs = np.atleast_2d(obs)
    n, d, scale = obs.shape[0], u.action_dim, u.action_scale
    uni = rng.uniform(-scale, scale, size=(n, N_PENALTY_UNIFORM, d))
    uni_logp = np.full((n, N_PENALTY_UNIFORM), -d * np.log(2.0 * scale))
    rep_obs = np.repeat(obs, N_PENALTY_POLICY, axis=0)
    rep_beta = np.repeat(np.broadcast_to(beta, (n,)), N_PENALTY_POLICY)
    pol = u.sample(rep_obs, rep_beta, rng)
    pol_logp = u.log_prob(rep_obs, rep_beta, pol).reshape(n, N_PENALTY_POLICY)
    actions = np.concatenate([uni, pol.reshape(n, N_PENALTY_POLICY, d)], axis=1)
    return actions, np.concatenate([uni_logp, pol_logp], axis=1)


def cql_loss_and_grad(q: QCritic, obs, actions, targets, alpha_cql: float,
                      sampled=None) -> tuple[float, np.ndarray, float]:
    """TD loss plus ``alpha_cql * mean(softmax_a Q(s, a) - Q(s, a_data))``.

    Discrete critics enumerate every action; continuous critics need
    ``sampled = (actions (B,N,d), log_density (B,N))``.  Returns
    ``(loss, grads, penalty)``.
    """
    obs = np.atleast_2d(obs)
    n = obs.shape[0]
    td, grads = td_loss_and_grad(q, obs, actions, targets)
    if alpha_cql == 0.0:
        return td, grads, 0.0
    if q.discrete:
        idx = np.asarray(actions).reshape(-1).astype(np.int64)
        out, cache = q.net.forward(obs)
        lse = logsumexp(out, axis=1)
        gap = lse - out[np.arange(n), idx]
        dout = softmax(out)
        dout[np.arange(n), idx] -= 1.0
        pgrads, _ = q.net.backward(cache, alpha_cql * dout / n, input_grad=False)
    else:
        acts, log_density = sampled
        m = acts.shape[1]
        flat_obs = np.repeat(obs, m, axis=0)
        vals, cache = q.forward(flat_obs, acts.reshape(n * m, -1))
        scores = vals.reshape(n, m) - log_density
        lse = logsumexp(scores, axis=1) - np.log(m)
        w = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
        pgrads, _ = q.backward(cache, (alpha_cql * w / n).reshape(-1), input_grad=False)
        data_vals, dcache = q.forward(obs, actions)
        dgrads, _ = q.backward(dcache, np.full(n, -alpha_cql / n), input_grad=False)
        pgrads = pgrads + dgrads
        gap = lse - data_vals
    penalty = float(np.mean(gap))
    return td + alpha_cql * penalty, grads + pgrads, penalty


def cql_q_update(q: QCritic, opt: Adam, obs, actions, targets, alpha_cql: float, sampled=None) -> tuple[float, float]:
    loss, grads, penalty = cql_loss_and_grad(q, obs, actions, targets, alpha_cql, sampled)
    opt.step(q.net.params, grads)
    return loss, penalty


# --- entropy-regularised policy step ------------------------------------------

def cql_universal_objective_and_grad(u: UniversalModel, q: QCritic, obs, alpha, noise=None) -> tuple[float, np.ndarray]:
    """``mean E_a[alpha_s * Q(s, a) - log pi_u(a|s, enc(alpha_s))]`` and the
    descent gradient of its negation.

    Continuous policies use ``a = scale * tanh(m + sigma * noise)``; discrete
    policies take the exact expectation over actions.
    """
    obs = np.atleast_2d(obs)
    n = obs.shape[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,))
    out, ucache = u.forward(obs, alpha)
    if u.discrete:
        logp = log_softmax(out)
        p = np.exp(logp)
        g = alpha[:, None] * q.all_values(obs) - logp
        values = np.sum(p * g, axis=1)
        dout = p * (g - values[:, None])
    else:
        mean, log_std, mask = u._split(out)
        std = np.exp(log_std)
        pre = mean + std * noise
        th = np.tanh(pre)
        actions = u.action_scale * th
        qv, qcache = q.forward(obs, actions)
        _, dq_da = q.backward(qcache, np.ones(n), param_grad=False)
        logp = gaussian_log_prob(pre, mean, log_std) - tanh_log_jacobian(pre, u.action_scale)
        values = alpha * qv - logp
        # d(-log pi)/d pre = -2 tanh(pre); d(-log pi)/d log_std = +1 at fixed noise
        dpre = alpha[:, None] * dq_da * u.action_scale * (1.0 - th * th) - 2.0 * th
        dls = (dpre * std * noise + 1.0) * mask
        dout = np.concatenate([dpre, dls], axis=1)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite value in the CQL policy objective")
    grads, _ = u.net.backward(ucache, -dout / n, input_grad=False)
    return float(values.mean()), grads


def cql_universal_update(u: UniversalModel, q: QCritic, opt: Adam, obs, alpha, noise=None) -> float:
    try:
        objective, grads = cql_universal_objective_and_grad(u, q, obs, alpha, noise)
    except NonFiniteError:
        return float("nan")
    opt.step(u.net.params, grads)
    return objective


def cql_balance_update(b, u, q, opt, obs, noise_b, noise_u=None):
    """Same rule as :func:`famo2o.core.balance_update` over the CQL coefficient range."""
    return balance_update(b, u, q, opt, obs, noise_b, noise_u)


def update_target(target: Mlp, online: Mlp, rate: float = SOFT_UPDATE_RATE) -> None:
    soft_update(target, online, rate)


# --- coefficient baselines ----------------------------------------------------

def fixed_beta_baseline(config, beta: float | None = None, **kwargs):
    """Same pipeline with ``beta_s`` pinned to one value and no balance model."""
    from .trainer import TrainRun

    value = config.beta_midpoint if beta is None else beta
    return TrainRun(config.with_overrides(balance=f"fixed:{value!r}"), **kwargs)


def fixed_beta_sweep(config, values=None, **kwargs) -> list:
    values = values if values is not None else (config.beta_min, config.beta_midpoint, config.beta_max)
    return [fixed_beta_baseline(config, v, **kwargs) for v in values]


def random_beta_baseline(config, **kwargs):
    """Balance model replaced by a uniform coefficient draw per online sample."""
    from .trainer import TrainRun

    return TrainRun(config.with_overrides(balance="random"), **kwargs)


def annealing_baseline(config, **kwargs):
    """Coefficient raised linearly from ``beta_min`` to ``beta_max`` across the online phase."""
    from .trainer import TrainRun

    return TrainRun(config.with_overrides(balance="anneal"), **kwargs)


def anneal_beta(space_min: float, space_max: float, step: int, n_steps: int) -> float:
    if n_steps <= 1:
        return space_max
    frac = min(max(step / (n_steps - 1), 0.0), 1.0)
    return space_min + (space_max - space_min) * frac

