"""Universal model, balance model and their update rules.

The universal model ``pi_u(a | s, enc(beta))`` is one network conditioned on
the sinusoidal encoding of a balance coefficient.  The balance model
``pi_b(beta | s)`` is a one-dimensional tanh-Gaussian whose output is mapped
affinely onto ``[beta_min, beta_max]``.

* :func:`universal_update` performs one ascent step on the advantage-weighted
  log-likelihood ``mean(w * log pi_u(a | s, enc(beta_s)))`` with the imitation
  weight ``w = min(exp(beta_s * (Q - V)), w_max)`` held fixed.
* :func:`balance_update` performs one ascent step on ``mean(Q(s, pi_u(s,
  enc(b(s)))))``, differentiating through the reparameterised coefficient,
  the encoding and the universal model while only the balance model moves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Adam,
    BalanceSpace,
    ContractError,
    Mlp,
    NonFiniteError,
    clamp_log_std,
    encode_balance,
    encode_balance_grad,
    gaussian_log_prob,
    log_softmax,
    softmax,
    tanh_log_jacobian,
    unsquash,
)

__all__ = [
    "BalanceSpace",
    "UniversalModel",
    "BalanceModel",
    "QCritic",
    "act",
    "sample_offline_beta",
    "universal_loss_and_grad",
    "universal_update",
    "balance_objective_and_grad",
    "balance_update",
    "imitation_weights",
]

DEFAULT_W_MAX = 100.0
UNSQUASH_MARGIN = 1e-3


class UniversalModel:
    """Policy over actions given a state and an encoded balance coefficient."""

    def __init__(self, obs_dim: int, space: BalanceSpace, *, discrete: bool, n_actions: int = 0,
                 action_dim: int = 0, action_scale: float = 1.0, hidden=(64, 64),
                 rng: np.random.Generator | None = None):
        self.obs_dim = obs_dim
        self.space = space
        self.discrete = discrete
        self.n_actions = n_actions
        self.action_dim = 1 if discrete else action_dim
        self.action_scale = action_scale
        out = n_actions if discrete else 2 * action_dim
        if out <= 0:
            raise ContractError("universal model needs a positive action count/dimension")
        self.net = Mlp([obs_dim + space.enc_dim, *hidden, out], rng)

    def inputs(self, obs: np.ndarray, beta: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (obs.shape[0],))
        return np.concatenate([obs, encode_balance(beta, self.space.enc_dim, self.space)], axis=1)

    def forward(self, obs, beta):
        return self.net.forward(self.inputs(obs, beta))

    def _split(self, out: np.ndarray):
        d = self.action_dim
        log_std, mask = clamp_log_std(out[:, d:])
        return out[:, :d], log_std, mask

    def log_prob(self, obs, beta, actions) -> np.ndarray:
        out, _ = self.forward(obs, beta)
        if self.discrete:
            idx = np.asarray(actions).reshape(-1).astype(np.int64)
            return log_softmax(out)[np.arange(len(idx)), idx]
        mean, log_std, _ = self._split(out)
        pre = unsquash(np.atleast_2d(actions), self.action_scale, UNSQUASH_MARGIN)
        return gaussian_log_prob(pre, mean, log_std) - tanh_log_jacobian(pre, self.action_scale)

    def probs(self, obs, beta) -> np.ndarray:
        if not self.discrete:
            raise ContractError("probs() is only defined for discrete actions")
        return softmax(self.forward(obs, beta)[0])

    def sample(self, obs, beta, rng: np.random.Generator) -> np.ndarray:
        """Stochastic actions: category indices or squashed Gaussian draws."""
        out, _ = self.forward(obs, beta)
        if self.discrete:
            p = softmax(out)
            u = rng.random(p.shape[0])
            idx = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
            return np.minimum(idx, self.n_actions - 1)
        mean, log_std, _ = self._split(out)
        pre = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return self.action_scale * np.tanh(pre)

    def mode(self, obs, beta) -> np.ndarray:
        out, _ = self.forward(obs, beta)
        if self.discrete:
            return np.argmax(out, axis=1)
        mean, _, _ = self._split(out)
        return self.action_scale * np.tanh(mean)


class BalanceModel:
    """State-conditioned tanh-Gaussian over the balance interval."""

    def __init__(self, obs_dim: int, space: BalanceSpace, hidden=(64, 64),
                 rng: np.random.Generator | None = None, init_scale: float = 1e-3,
                 init_log_std: float = 0.0):
        self.space = space
        self.net = Mlp([obs_dim, *hidden, 2], rng, last_layer_scale=init_scale if rng is not None else None)
        if rng is not None:
            self.net.biases[-1][1] = init_log_std

    def _head(self, obs):
        out, cache = self.net.forward(np.atleast_2d(obs))
        log_std, mask = clamp_log_std(out[:, 1])
        return out[:, 0], log_std, mask, cache

    def squash(self, pre: np.ndarray) -> np.ndarray:
        return self.space.beta_min + self.space.width * 0.5 * (np.tanh(pre) + 1.0)

    def sample(self, obs, noise: np.ndarray) -> np.ndarray:
        """Reparameterised draw ``squash(m + sigma * noise)``."""
        mean, log_std, _, _ = self._head(obs)
        return self.squash(mean + np.exp(log_std) * noise)

    def mean(self, obs) -> np.ndarray:
        return self.squash(self._head(obs)[0])

    def log_std(self, obs) -> np.ndarray:
        return self._head(obs)[1]


class QCritic:
    """``Q(s, a)``: one output per action for discrete tasks, ``Mlp(s ++ a)`` otherwise."""

    def __init__(self, obs_dim: int, *, discrete: bool, n_actions: int = 0, action_dim: int = 0,
                 hidden=(64, 64), rng: np.random.Generator | None = None, net: Mlp | None = None):
        self.discrete = discrete
        self.n_actions = n_actions
        self.action_dim = action_dim
        if net is None:
            dims = [obs_dim, *hidden, n_actions] if discrete else [obs_dim + action_dim, *hidden, 1]
            net = Mlp(dims, rng)
        self.net = net

    def copy(self) -> "QCritic":
        return QCritic(0, discrete=self.discrete, n_actions=self.n_actions,
                       action_dim=self.action_dim, net=self.net.copy())

    def all_values(self, obs) -> np.ndarray:
        return self.net(np.atleast_2d(obs))

    def forward(self, obs, actions):
        """Values ``(B,)`` plus a cache for :meth:`backward`."""
        obs = np.atleast_2d(obs)
        if self.discrete:
            idx = np.asarray(actions).reshape(-1).astype(np.int64)
            out, cache = self.net.forward(obs)
            return out[np.arange(len(idx)), idx], (cache, idx, out.shape)
        out, cache = self.net.forward(np.concatenate([obs, np.atleast_2d(actions)], axis=1))
        return out[:, 0], (cache, None, out.shape)

    def __call__(self, obs, actions) -> np.ndarray:
        return self.forward(obs, actions)[0]

    def backward(self, cache, dvalues: np.ndarray, param_grad: bool = True, input_grad: bool = True):
        """Returns ``(param grads, d/d action)``; the action part is None for
        discrete critics or when ``input_grad`` is False."""
        net_cache, idx, shape = cache
        g = np.zeros(shape)
        if self.discrete:
            g[np.arange(len(idx)), idx] = dvalues
            grads, _ = self.net.backward(net_cache, g, param_grad, input_grad=False)
            return grads, None
        g[:, 0] = dvalues
        grads, gin = self.net.backward(net_cache, g, param_grad, input_grad)
        return grads, (gin[:, -self.action_dim:] if input_grad else None)


# --- composition --------------------------------------------------------------

def act(obs, u: UniversalModel, b: BalanceModel | None, mode: str = "stochastic",
        rng: np.random.Generator | None = None, beta_rng: np.random.Generator | None = None,
        beta: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``beta_s`` (from ``b`` or a supplied constant) then an action from ``u``.

    ``mode='deterministic'`` uses the balance mean and the policy mode.
    """
    obs = np.atleast_2d(obs)
    if beta is not None:
        betas = np.full(obs.shape[0], float(beta))
    elif b is None:
        raise ContractError("either a balance model or a fixed beta is required")
    elif mode == "deterministic":
        betas = b.mean(obs)
    elif mode == "stochastic":
        betas = b.sample(obs, beta_rng.standard_normal(obs.shape[0]))
    else:
        raise ContractError(f"unknown act mode {mode!r}")
    if not np.all(np.isfinite(betas)):
        raise NonFiniteError(f"balance model produced non-finite output {betas}")
    actions = u.mode(obs, betas) if mode == "deterministic" else u.sample(obs, betas, rng)
    if not np.all(np.isfinite(actions)):
        raise NonFiniteError(f"universal model produced non-finite action {actions} at beta {betas}")
    return actions, betas


def sample_offline_beta(space: BalanceSpace, m: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform coefficients on the balance interval."""
    if m <= 0:
        raise ContractError("sample size must be positive")
    return space.beta_min + space.width * rng.random(m)


# --- weighted likelihood step -------------------------------------------------

def imitation_weights(beta: np.ndarray, adv: np.ndarray, w_max: float = DEFAULT_W_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Capped ``exp(beta * adv)`` and a mask of capped entries."""
    expo = beta * adv
    log_cap = np.log(w_max)
    capped = expo > log_cap
    return np.exp(np.minimum(expo, log_cap)), capped


def universal_loss_and_grad(u: UniversalModel, obs, actions, beta, weights) -> tuple[float, np.ndarray]:
    """``-mean(w * log pi_u(a|s, enc(beta)))`` and its parameter gradient."""
    obs = np.atleast_2d(obs)
    n = obs.shape[0]
    out, cache = u.forward(obs, beta)
    if u.discrete:
        idx = np.asarray(actions).reshape(-1).astype(np.int64)
        logp_all = log_softmax(out)
        logp = logp_all[np.arange(n), idx]
        dlogits = -np.exp(logp_all)
        dlogits[np.arange(n), idx] += 1.0
        dout = -(weights / n)[:, None] * dlogits
    else:
        mean, log_std, mask = u._split(out)
        pre = unsquash(np.atleast_2d(actions), u.action_scale, UNSQUASH_MARGIN)
        inv_std = np.exp(-log_std)
        z = (pre - mean) * inv_std
        logp = gaussian_log_prob(pre, mean, log_std) - tanh_log_jacobian(pre, u.action_scale)
        coef = -(weights / n)[:, None]
        dout = np.concatenate([coef * z * inv_std, coef * (z * z - 1.0) * mask], axis=1)
    grads, _ = u.net.backward(cache, dout, input_grad=False)
    return float(-np.mean(weights * logp)), grads


@dataclass
class UpdateStats:
    loss: float
    mean_weight: float = float("nan")
    frac_capped: float = 0.0
    n_skipped: int = 0
    betas: np.ndarray | None = None


def universal_update(u: UniversalModel, opt: Adam, obs, actions, beta, q_sa, v_s,
                     w_max: float = DEFAULT_W_MAX) -> UpdateStats:
    """One step on the advantage-weighted likelihood; weights are treated as data."""
    obs = np.atleast_2d(obs)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (obs.shape[0],))
    adv = np.asarray(q_sa, dtype=np.float64) - np.asarray(v_s, dtype=np.float64)
    keep = np.isfinite(adv) & np.isfinite(beta)
    n_skipped = int(np.count_nonzero(~keep))
    if not keep.any():
        return UpdateStats(float("nan"), n_skipped=n_skipped)
    if n_skipped:
        obs, actions, beta, adv = obs[keep], np.asarray(actions)[keep], beta[keep], adv[keep]
    weights, capped = imitation_weights(beta, adv, w_max)
    loss, grads = universal_loss_and_grad(u, obs, actions, beta, weights)
    opt.step(u.net.params, grads)
    return UpdateStats(loss, float(weights.mean()), float(capped.mean()), n_skipped)


# --- balance step -------------------------------------------------------------

def _policy_value_and_beta_grad(u: UniversalModel, q: QCritic, obs, beta, noise_u, q_all=None):
    """Per-sample ``Q(s, pi_u(s, enc(beta)))`` and its derivative in ``beta``.

    Discrete policies use the exact expectation over actions.  Continuous
    policies use the reparameterised action ``scale * tanh(m + sigma * noise_u)``
    (the mean action when ``noise_u`` is None).
    """
    n = obs.shape[0]
    out, ucache = u.forward(obs, beta)
    if u.discrete:
        p = softmax(out)
        qa = q.all_values(obs) if q_all is None else q_all
        values = np.sum(p * qa, axis=1)
        dout = p * (qa - values[:, None])
    else:
        mean, log_std, mask = u._split(out)
        std = np.exp(log_std)
        pre = mean if noise_u is None else mean + std * noise_u
        th = np.tanh(pre)
        actions = u.action_scale * th
        values, qcache = q.forward(obs, actions)
        _, dq_da = q.backward(qcache, np.ones(n), param_grad=False)
        dpre = dq_da * u.action_scale * (1.0 - th * th)
        dls = np.zeros_like(dpre) if noise_u is None else dpre * std * noise_u * mask
        dout = np.concatenate([dpre, dls], axis=1)
    _, gin = u.net.backward(ucache, dout, param_grad=False)
    dbeta = np.sum(gin[:, u.obs_dim:] * encode_balance_grad(beta, u.space), axis=1)
    return values, dbeta


def balance_objective_and_grad(b: BalanceModel, u: UniversalModel, q: QCritic, obs, noise_b,
                               noise_u=None, q_all=None) -> tuple[float, np.ndarray, np.ndarray]:
    """``mean Q(s, pi_u(s, enc(beta_s)))`` with ``beta_s = b(s; noise_b)``.

    Returns the objective, the descent gradient (of the negated objective)
    for ``b``'s parameters and the coefficients used.  ``noise_b=None`` uses
    the balance mean.  ``q_all`` may carry precomputed per-action values of
    a discrete critic.
    """
    obs = np.atleast_2d(obs)
    n = obs.shape[0]
    mean, log_std, mask, bcache = b._head(obs)
    std = np.exp(log_std)
    pre = mean if noise_b is None else mean + std * noise_b
    th = np.tanh(pre)
    beta = b.squash(pre)
    values, dbeta = _policy_value_and_beta_grad(u, q, obs, beta, noise_u, q_all)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite Q value in balance update")
    dpre = dbeta * 0.5 * b.space.width * (1.0 - th * th)
    dls = np.zeros(n) if noise_b is None else dpre * std * noise_b * mask
    dout = -np.stack([dpre, dls], axis=1) / n
    grads, _ = b.net.backward(bcache, dout, input_grad=False)
    return float(values.mean()), grads, beta


def balance_update(b: BalanceModel, u: UniversalModel, q: QCritic, opt: Adam, obs, noise_b,
                   noise_u=None, q_all=None) -> UpdateStats:
    """One ascent step for ``b`` only; ``u`` and ``q`` are read, never written."""
    try:
        objective, grads, beta = balance_objective_and_grad(b, u, q, obs, noise_b, noise_u, q_all)
    except NonFiniteError:
        return UpdateStats(float("nan"), n_skipped=np.atleast_2d(obs).shape[0])
    opt.step(b.net.params, grads)
    return UpdateStats(objective, betas=beta)


__all__ += ["LOG_STD_MIN", "LOG_STD_MAX", "UpdateStats", "DEFAULT_W_MAX"]
