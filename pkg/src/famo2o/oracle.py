"""Exact solvers for KL-constrained policy improvement on finite MDPs.

Two problems are solved.  The point-wise problem maximises
``sum_s d(s) sum_a pi(a|s) A(s,a)`` subject to one KL budget per state,
``KL(pi(.|s) || pi_b(.|s)) <= eps_s``.  The distributional problem replaces
the per-state budgets by a single bound on the ``d``-weighted average KL.

Both optima are exponential tilts ``pi_b * exp(beta * A) / Z`` of the
behaviour policy: a separate temperature per state in the first case and a
shared temperature in the second.  Temperatures are found by bisection
because the KL of a tilt is nondecreasing in the temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import FiniteMdp
from .numkit import ContractError

BETA_BRACKET = (0.0, 1e6)
KL_TOL = 1e-10
MAX_BISECTION = 200
SPREAD_TOL = 1e-14


class SingularSystemError(ArithmeticError):
    """Policy evaluation hit a (numerically) singular linear system."""


@dataclass
class ConstrainedSolution:
    policy: np.ndarray  # (S, A)
    per_state_kl: np.ndarray  # (S,)
    objective: float
    per_state_temperature: np.ndarray  # (S,), inf marks the greedy limit
    log_partition: np.ndarray  # (S,), log Z_s (nan in the greedy limit)
    greedy: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def advantages(mdp: FiniteMdp, pi_ref: np.ndarray | None = None) -> np.ndarray:
    """``Q^pi - V^pi`` by exact policy evaluation (the behaviour policy by default)."""
    pi = mdp.pi_beta if pi_ref is None else np.asarray(pi_ref, dtype=np.float64)
    if np.any(pi <= 0):
        raise ContractError("reference policy must be fully supported")
    S = mdp.n_states
    system = np.eye(S) - mdp.gamma * mdp.state_transition(pi)
    if np.linalg.cond(system) > 1e12:
        raise SingularSystemError("policy-evaluation system is singular")
    v = np.linalg.solve(system, np.sum(pi * mdp.R, axis=1))
    q = mdp.R + mdp.gamma * mdp.P @ v
    return q - np.sum(pi * q, axis=1, keepdims=True)


def kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def tilt(pi_b: np.ndarray, adv: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """``pi_b * exp(beta * adv) / Z`` and ``log Z`` for one state."""
    logits = np.log(pi_b) + beta * adv
    peak = logits.max()
    w = np.exp(logits - peak)
    total = w.sum()
    return w / total, float(peak + np.log(total))


def greedy_limit(pi_b: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """Large-temperature limit: behaviour mass restricted to the best actions."""
    top = adv >= adv.max() - SPREAD_TOL * max(1.0, abs(adv.max()))
    out = np.where(top, pi_b, 0.0)
    return out / out.sum()


def _tilt_kl(pi_b: np.ndarray, adv: np.ndarray, beta: float) -> float:
    pi, log_z = tilt(pi_b, adv, beta)
    # KL(tilt || pi_b) = beta * E_pi[A] - log Z
    return max(beta * float(pi @ adv) - log_z, 0.0)


def _bisect(kl_of, target: float) -> float:
    """Largest-found temperature whose KL lies within ``KL_TOL`` below ``target``."""
    lo, hi = BETA_BRACKET
    for _ in range(MAX_BISECTION):
        mid = 0.5 * (lo + hi)
        value = kl_of(mid)
        if value <= target:
            lo = mid
            if target - value <= KL_TOL:
                break
        else:
            hi = mid
    return lo


def _state_solution(pi_b: np.ndarray, adv: np.ndarray, beta: float) -> tuple[np.ndarray, float, bool]:
    if np.isinf(beta):
        return greedy_limit(pi_b, adv), np.nan, True
    pi, log_z = tilt(pi_b, adv, beta)
    return pi, log_z, False


def _assemble(mdp: FiniteMdp, adv: np.ndarray, betas: np.ndarray) -> ConstrainedSolution:
    S = mdp.n_states
    policy = np.empty_like(mdp.pi_beta)
    log_z = np.empty(S)
    greedy = np.zeros(S, dtype=bool)
    for s in range(S):
        policy[s], log_z[s], greedy[s] = _state_solution(mdp.pi_beta[s], adv[s], betas[s])
    per_kl = np.array([kl(policy[s], mdp.pi_beta[s]) for s in range(S)])
    objective = float(mdp.d @ np.sum(policy * adv, axis=1))
    return ConstrainedSolution(policy, per_kl, objective, betas, log_z, greedy)


def _flat(adv_row: np.ndarray) -> bool:
    return float(adv_row.max() - adv_row.min()) <= SPREAD_TOL * max(1.0, float(np.abs(adv_row).max()))


def greedy_kl(pi_b: np.ndarray, adv: np.ndarray) -> float:
    """KL of the greedy limit, ``-log pi_b(argmax set)``."""
    return kl(greedy_limit(pi_b, adv), pi_b)


def solve_pointwise(mdp: FiniteMdp, adv: np.ndarray, eps) -> ConstrainedSolution:
    """Per-state KL budgets; each state is solved independently."""
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (mdp.n_states,))
    if np.any(eps < 0) or not np.all(np.isfinite(eps)):
        raise ContractError("KL budgets must be finite and nonnegative")
    betas = np.zeros(mdp.n_states)
    for s in range(mdp.n_states):
        pi_b, a = mdp.pi_beta[s], adv[s]
        if eps[s] == 0.0 or _flat(a):
            betas[s] = 0.0
        elif eps[s] >= greedy_kl(pi_b, a):
            betas[s] = np.inf
        else:
            betas[s] = _bisect(lambda b: _tilt_kl(pi_b, a, b), eps[s])
    return _assemble(mdp, adv, betas)


def solve_distributional(mdp: FiniteMdp, adv: np.ndarray, eps: float) -> ConstrainedSolution:
    """One bound on the ``d``-weighted KL, met with a single shared temperature."""
    if eps < 0 or not np.isfinite(eps):
        raise ContractError("KL budget must be finite and nonnegative")
    S = mdp.n_states
    active = np.array([not _flat(adv[s]) for s in range(S)])

    def aggregate(beta: float) -> float:
        return sum(mdp.d[s] * _tilt_kl(mdp.pi_beta[s], adv[s], beta) for s in range(S) if active[s])

    max_kl = sum(mdp.d[s] * greedy_kl(mdp.pi_beta[s], adv[s]) for s in range(S) if active[s])
    if eps == 0.0 or not active.any():
        beta = 0.0
    elif eps >= max_kl:
        beta = np.inf
    else:
        beta = _bisect(aggregate, eps)
    betas = np.where(active, beta, 0.0)
    return _assemble(mdp, adv, betas)


# --- certification ------------------------------------------------------------

@dataclass
class Prop1Report:
    J_dist: float
    J_point_matched: float
    J_point_improved: float
    holds: bool
    strict_improvement: bool
    budgets: list

    def as_dict(self) -> dict:
        return {
            "J_dist": self.J_dist,
            "J_point_matched": self.J_point_matched,
            "J_point_improved": self.J_point_improved,
            "holds": self.holds,
            "strict_improvement": self.strict_improvement,
        }


def reallocation_family(mdp: FiniteMdp, adv: np.ndarray, budgets: np.ndarray,
                        fractions=(0.1, 0.25, 0.5, 0.75, 1.0)) -> list[np.ndarray]:
    """Budget sets with the same ``d``-weighted total, moved toward one state.

    The preferred receiver is the state with the widest advantage spread; the
    other states are tried too so the search is not limited to one guess.
    """
    spread = adv.max(axis=1) - adv.min(axis=1)
    order = [int(np.argmax(spread))] + [s for s in range(mdp.n_states) if s != int(np.argmax(spread))]
    family = []
    for receiver in order:
        others = np.arange(mdp.n_states) != receiver
        for lam in fractions:
            new = budgets.copy()
            moved = lam * float(mdp.d[others] @ budgets[others])
            new[others] *= 1.0 - lam
            new[receiver] += moved / mdp.d[receiver]
            family.append(new)
    return family


def verify_prop1(mdp: FiniteMdp, adv: np.ndarray, eps: float, tol: float = 1e-9,
                 improvement: float = 1e-6) -> Prop1Report:
    """Point-wise budgets read off the distributional optimum do at least as well."""
    if eps < 0:
        raise ContractError("KL budget must be nonnegative")
    dist = solve_distributional(mdp, adv, eps)
    budgets = dist.per_state_kl.copy()
    if float(mdp.d @ budgets) > eps + 1e-7:
        raise ContractError("distributional solution exceeds its budget")
    matched = solve_pointwise(mdp, adv, budgets).objective
    best = matched
    for alt in reallocation_family(mdp, adv, budgets):
        best = max(best, solve_pointwise(mdp, adv, alt).objective)
    return Prop1Report(dist.objective, matched, best, matched >= dist.objective - tol,
                       best >= dist.objective + improvement, budgets.tolist())


@dataclass
class Prop2Report:
    max_l1_gap: float
    normalization_residuals: np.ndarray
    temperatures: np.ndarray

    def as_dict(self) -> dict:
        return {
            "max_l1_gap": self.max_l1_gap,
            "max_normalization_residual": float(np.max(self.normalization_residuals)),
        }


def verify_prop2(mdp: FiniteMdp, adv: np.ndarray, eps) -> Prop2Report:
    """Compare the bisection solution with the explicit tilt at the recorded temperatures."""
    sol = solve_pointwise(mdp, adv, eps)
    gaps = np.empty(mdp.n_states)
    for s in range(mdp.n_states):
        beta = sol.per_state_temperature[s]
        if np.isinf(beta):
            explicit = greedy_limit(mdp.pi_beta[s], adv[s])
        else:
            # pi_b * exp(beta * A) / Z evaluated in log space
            explicit = np.exp(np.log(mdp.pi_beta[s]) + beta * adv[s] - sol.log_partition[s])
        gaps[s] = np.abs(sol.policy[s] - explicit).sum()
    residuals = np.abs(sol.policy.sum(axis=1) - 1.0)
    return Prop2Report(float(gaps.max()), residuals, sol.per_state_temperature)


def simplex_grid(n_actions: int, n_points: int = 10_000) -> np.ndarray:
    """Lattice points of the probability simplex, about ``n_points`` of them."""
    from math import comb

    k = 1
    while comb(k + 1 + n_actions - 1, n_actions - 1) <= n_points:
        k += 1
    pts = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            pts.append(prefix + [remaining])
            return
        for i in range(remaining + 1):
            rec(prefix + [i], remaining - i, slots - 1)

    rec([], k, n_actions)
    return np.asarray(pts, dtype=np.float64) / k


def grid_state_optimum(pi_b: np.ndarray, adv: np.ndarray, eps: float, grid: np.ndarray) -> tuple[float, np.ndarray]:
    """Best feasible grid point for one state's KL-constrained objective."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(grid > 0, grid * (np.log(grid) - np.log(pi_b)), 0.0)
    feasible = terms.sum(axis=1) <= eps
    values = np.where(feasible, grid @ adv, -np.inf)
    i = int(np.argmax(values))
    return float(values[i]), grid[i]


def grid_certify(mdp: FiniteMdp, adv: np.ndarray, eps, n_points: int = 10_000) -> dict:
    """Per-state objective gaps between the solver and a simplex grid search.

    ``excess`` is how much the best feasible grid point beats the solver (it
    should never be positive beyond round-off); ``shortfall`` is how far the
    grid falls below the solver, which shrinks with the grid resolution.
    """
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (mdp.n_states,))
    sol = solve_pointwise(mdp, adv, eps)
    grid = simplex_grid(mdp.n_actions, n_points)
    excess, shortfall = [], []
    for s in range(mdp.n_states):
        g_val, _ = grid_state_optimum(mdp.pi_beta[s], adv[s], eps[s], grid)
        value = float(sol.policy[s] @ adv[s])
        excess.append(g_val - value)
        shortfall.append(value - g_val)
    return {"max_excess": float(max(excess)), "max_shortfall": float(max(shortfall)), "grid_size": len(grid)}


def random_instance(rng: np.random.Generator, max_states: int = 5, max_actions: int = 4, gamma: float = 0.9) -> FiniteMdp:
    from .envs import random_finite_mdp

    return random_finite_mdp(int(rng.integers(2, max_states + 1)), int(rng.integers(2, max_actions + 1)), gamma, rng)


def asymmetric_instance(eps_gamma: float = 0.9) -> tuple[FiniteMdp, np.ndarray]:
    """Two states with advantage spreads (+1, -1) and (+0.01, -0.01) under a
    uniform behaviour policy."""
    P = np.full((2, 2, 2), 0.5)
    R = np.zeros((2, 2))
    pi = np.full((2, 2), 0.5)
    d = np.full(2, 0.5)
    mdp = FiniteMdp(P, R, eps_gamma, pi, d)
    adv = np.array([[1.0, -1.0], [0.01, -0.01]])
    return mdp, adv


def symmetric_instance(gamma: float = 0.9) -> tuple[FiniteMdp, np.ndarray]:
    """Two states sharing the same advantage profile and behaviour policy."""
    P = np.full((2, 2, 2), 0.5)
    pi = np.array([[0.3, 0.7], [0.3, 0.7]])
    mdp = FiniteMdp(P, np.zeros((2, 2)), gamma, pi, np.full(2, 0.5))
    adv = np.array([[0.7, -0.3], [0.7, -0.3]])
    return mdp, adv
