"""Desk-scale environments: a two-crossing grid maze with guided data
collection, a continuous point-mass task and random finite MDPs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .datastore import Transition
from .numkit import ContractError

# up, down, left, right as (d_row, d_col)
MAZE_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
MAZE_ACTION_NAMES = ("up", "down", "left", "right")


# --- maze ---------------------------------------------------------------------

def _default_walls() -> frozenset:
    return frozenset({(0, 3), (2, 3), (3, 3), (5, 3)})


@dataclass(frozen=True)
class MazeSpec:
    """Grid maze split by a wall column pierced at two crossings.

    The default 6x6 layout blocks column 3 except at rows 1 and 4, so the
    crossings sit in the second and fifth rows.  Agents start in the top row
    left of the wall and the goal is the bottom-right corner.
    """

    width: int = 6
    height: int = 6
    walls: frozenset = field(default_factory=_default_walls)
    start_row: int = 0
    start_cols: tuple = (0, 1, 2)
    goal: tuple = (5, 5)
    upper_crossing: tuple = (1, 3)
    lower_crossing: tuple = (4, 3)
    max_episode_steps: int = 50
    step_reward: float = -1.0
    goal_reward: float = 10.0

    def __post_init__(self):
        if self.upper_crossing == self.lower_crossing:
            raise ContractError("crossings must differ")
        dist = bfs_distances(self)
        for c in self.start_cells:
            if c not in dist:
                raise ContractError(f"goal unreachable from start cell {c}")
        for crossing in (self.upper_crossing, self.lower_crossing):
            if crossing in self.walls or crossing not in dist:
                raise ContractError(f"crossing {crossing} is not on a path to the goal")

    @property
    def start_cells(self) -> list[tuple]:
        return [(self.start_row, c) for c in self.start_cols]

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def open_cells(self) -> list[tuple]:
        return [(r, c) for r in range(self.height) for c in range(self.width) if (r, c) not in self.walls]

    def wall_col(self) -> int:
        return self.lower_crossing[1]


def _move(spec: MazeSpec, cell, action: int, walls=None) -> tuple:
    dr, dc = MAZE_MOVES[action]
    nxt = (cell[0] + dr, cell[1] + dc)
    if not spec.in_bounds(nxt) or nxt in (spec.walls if walls is None else walls):
        return tuple(cell)
    return nxt


def maze_step(spec: MazeSpec, state, action: int, t: int = 0) -> tuple[tuple, float, bool]:
    """Move one cell (or stay when blocked).  ``t`` is the index of this step
    within the episode and drives the time limit."""
    state = tuple(int(v) for v in state)
    if not spec.in_bounds(state) or state in spec.walls:
        raise ContractError(f"invalid maze state {state}")
    if not isinstance(action, (int, np.integer)) or not 0 <= action < 4:
        raise ContractError(f"maze action must be one of 0..3, got {action!r}")
    nxt = _move(spec, state, int(action))
    if nxt == tuple(spec.goal):
        return nxt, spec.goal_reward, True
    return nxt, spec.step_reward, t + 1 >= spec.max_episode_steps


def bfs_distances(spec: MazeSpec, target=None, walls=None) -> dict[tuple, int]:
    """Shortest step counts from every reachable cell to ``target`` (the goal by default)."""
    target = tuple(spec.goal if target is None else target)
    dist = {target: 0}
    queue = deque([target])
    while queue:
        cell = queue.popleft()
        for a in range(4):
            prev = _move(spec, cell, a, walls)
            # moves are reversible, so neighbours of ``cell`` reach it in one step
            if prev != cell and prev not in dist:
                dist[prev] = dist[cell] + 1
                queue.append(prev)
    return dist


def shortest_path_action(spec: MazeSpec, cell, dist: dict | None = None) -> int:
    """First action (in up/down/left/right order) that decreases goal distance."""
    dist = bfs_distances(spec) if dist is None else dist
    cell = tuple(cell)
    for a in range(4):
        nxt = _move(spec, cell, a)
        if dist.get(nxt, 1 << 30) < dist[cell]:
            return a
    raise ContractError(f"no improving action from {cell}")


def guidance_zone(spec: MazeSpec) -> frozenset:
    """Cells where the collector follows the shortest path through the lower crossing."""
    wc = spec.wall_col()
    lr = spec.lower_crossing[0]
    zone = set()
    for r, c in spec.open_cells():
        if c < wc and r >= lr - 1:
            zone.add((r, c))
        elif c > wc and r >= lr:
            zone.add((r, c))
    zone.add(tuple(spec.lower_crossing))
    return frozenset(zone)


def optimal_return(spec: MazeSpec, start) -> float:
    steps = bfs_distances(spec)[tuple(start)]
    return spec.step_reward * (steps - 1) + spec.goal_reward


def route_of(spec: MazeSpec, cells) -> str:
    """Label an episode by the first crossing it traversed."""
    for c in cells:
        if c == tuple(spec.lower_crossing):
            return "lower"
        if c == tuple(spec.upper_crossing):
            return "upper"
    return "none"


DATASET_MODES = ("mixed", "guided", "random")


def collect_maze_dataset(
    spec: MazeSpec, n_episodes: int, rng: np.random.Generator, mode: str = "mixed", first_episode: int = 0
) -> tuple[list[Transition], dict[int, str]]:
    """Roll out the data-collection policy.

    ``mixed``: the agent moves uniformly at random until it enters the
    guidance zone around the lower crossing; from then on it follows the
    shortest path through that crossing.  Guidance is tied to the zone, not
    to the episode, so every cell holds either guided or random transitions
    and never a blend.  Which crossing an episode uses is left to the random
    walk and recorded afterwards.  ``guided``: every action follows the
    shortest path via the lower crossing.  ``random``: uniformly random
    actions only.

    Returns the transitions and a route label (first crossing traversed)
    per episode id.
    """
    if mode not in DATASET_MODES:
        raise ContractError(f"unknown dataset mode {mode!r}")
    if n_episodes < 0:
        raise ContractError("n_episodes must be nonnegative")
    zone = guidance_zone(spec)
    lower_dist = _lower_route_distances(spec)
    starts = spec.start_cells
    data: list[Transition] = []
    routes: dict[int, str] = {}
    for k in range(n_episodes):
        ep = first_episode + k
        cell = starts[int(rng.integers(len(starts)))]
        visited = [cell]
        for t in range(spec.max_episode_steps):
            guided = mode == "guided" or (mode == "mixed" and cell in zone)
            if guided:
                a = _descend(spec, cell, lower_dist)
            else:
                a = int(rng.integers(4))
            nxt, r, done = maze_step(spec, cell, a, t)
            terminal = nxt == tuple(spec.goal)
            data.append(Transition(cell, a, float(r), nxt, terminal, ep, t, guided))
            visited.append(nxt)
            cell = nxt
            if done:
                break
        routes[ep] = route_of(spec, visited)
    return data, routes


def _lower_route_distances(spec: MazeSpec) -> dict:
    """Distances along paths forced through the lower crossing."""
    return bfs_distances(spec, walls=spec.walls | {tuple(spec.upper_crossing)})


def _descend(spec: MazeSpec, cell, dist: dict) -> int:
    for a in range(4):
        nxt = _move(spec, cell, a)
        if nxt in dist and dist[nxt] < dist[cell]:
            return a
    raise ContractError(f"no improving action from {cell}")


class MazeEnv:
    """Episodic wrapper with one-hot cell features and 4 discrete actions."""

    discrete = True
    n_actions = 4
    action_dim = 1
    raw_state_dim = 2

    def __init__(self, spec: MazeSpec | None = None):
        self.spec = spec or MazeSpec()
        self.obs_dim = self.spec.n_cells
        self._cell = None
        self._t = 0

    def featurize(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw)
        idx = (raw[..., 0] * self.spec.width + raw[..., 1]).astype(np.int64)
        out = np.zeros(idx.shape + (self.obs_dim,))
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out

    def reset(self, rng: np.random.Generator | None = None, start=None) -> tuple:
        if start is None:
            starts = self.spec.start_cells
            start = starts[int(rng.integers(len(starts)))]
        self._cell = tuple(start)
        self._t = 0
        return self._cell

    def step(self, action) -> tuple[tuple, float, bool, bool]:
        """Returns ``(next_state, reward, episode_over, terminal)``."""
        nxt, r, done = maze_step(self.spec, self._cell, int(action), self._t)
        self._t += 1
        self._cell = nxt
        return nxt, r, done, nxt == tuple(self.spec.goal)

    def eval_starts(self) -> list[tuple]:
        return self.spec.start_cells

    def best_return(self) -> float:
        return float(np.mean([optimal_return(self.spec, c) for c in self.spec.start_cells]))

    def worst_return(self) -> float:
        return self.spec.step_reward * self.spec.max_episode_steps


# --- point mass ---------------------------------------------------------------

@dataclass(frozen=True)
class PointMassSpec:
    """Point in the box [-1, 1]^2 moved by bounded velocity commands."""

    goal: tuple = (0.5, 0.5)
    action_scale: float = 0.1
    max_episode_steps: int = 50
    goal_radius: float = 0.05


class ClampCounter:
    """Counts out-of-range inputs that were clamped instead of rejected."""

    def __init__(self):
        self.count = 0


ACTION_CLAMPS = ClampCounter()


def pointmass_step(spec: PointMassSpec, state, action, t: int = 0) -> tuple[np.ndarray, float, bool]:
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    if np.any(np.abs(a) > spec.action_scale):
        ACTION_CLAMPS.count += 1
        a = np.clip(a, -spec.action_scale, spec.action_scale)
    nxt = np.clip(s + a, -1.0, 1.0)
    dist = float(np.linalg.norm(nxt - np.asarray(spec.goal)))
    done = dist <= spec.goal_radius or t + 1 >= spec.max_episode_steps
    return nxt, -dist, done


def greedy_pointmass_action(spec: PointMassSpec, state) -> np.ndarray:
    """Straight line toward the goal at the largest speed the box allows."""
    d = np.asarray(spec.goal) - np.asarray(state, dtype=np.float64)
    peak = np.max(np.abs(d))
    if peak <= spec.action_scale:
        return d
    return d * (spec.action_scale / peak)


def collect_pointmass_dataset(
    spec: PointMassSpec, n_episodes: int, rng: np.random.Generator, noise: float = 0.05, first_episode: int = 0
) -> tuple[list[Transition], dict[int, str]]:
    """Half noisy-greedy, half uniformly random episodes from random starts."""
    data: list[Transition] = []
    labels: dict[int, str] = {}
    for k in range(n_episodes):
        ep = first_episode + k
        greedy = k % 2 == 0
        labels[ep] = "greedy" if greedy else "random"
        s = rng.uniform(-1.0, 1.0, size=2)
        for t in range(spec.max_episode_steps):
            if greedy:
                a = greedy_pointmass_action(spec, s) + noise * rng.standard_normal(2)
            else:
                a = rng.uniform(-spec.action_scale, spec.action_scale, size=2)
            a = np.clip(a, -spec.action_scale, spec.action_scale)
            nxt, r, done = pointmass_step(spec, s, a, t)
            terminal = float(np.linalg.norm(nxt - np.asarray(spec.goal))) <= spec.goal_radius
            data.append(Transition(tuple(float(v) for v in s), tuple(float(v) for v in a), r,
                                   tuple(float(v) for v in nxt), terminal, ep, t, greedy))
            s = nxt
            if done:
                break
    return data, labels


class PointMassEnv:
    discrete = False
    raw_state_dim = 2
    action_dim = 2
    n_actions = 0

    def __init__(self, spec: PointMassSpec | None = None):
        self.spec = spec or PointMassSpec()
        self.obs_dim = 2
        self.action_scale = self.spec.action_scale
        self._s = None
        self._t = 0

    def featurize(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64)

    def reset(self, rng: np.random.Generator | None = None, start=None):
        self._s = rng.uniform(-1.0, 1.0, size=2) if start is None else np.asarray(start, dtype=np.float64)
        self._t = 0
        return tuple(float(v) for v in self._s)

    def step(self, action):
        nxt, r, done = pointmass_step(self.spec, self._s, action, self._t)
        self._t += 1
        self._s = nxt
        terminal = float(np.linalg.norm(nxt - np.asarray(self.spec.goal))) <= self.spec.goal_radius
        return tuple(float(v) for v in nxt), r, done, terminal

    def eval_starts(self) -> list[tuple]:
        return [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (0.9, 0.9), (-0.5, 0.0)]


def rollout_return(env, policy, start) -> tuple[float, list]:
    """Run one episode from ``start`` with ``policy(raw_state) -> action``."""
    s = env.reset(start=start)
    total, states = 0.0, [s]
    while True:
        s, r, done, _ = env.step(policy(s))
        total += r
        states.append(s)
        if done:
            return total, states


# --- finite MDPs --------------------------------------------------------------

@dataclass
class FiniteMdp:
    """Tabular MDP with a behaviour policy and its state distribution."""

    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    gamma: float
    pi_beta: np.ndarray  # (S, A)
    d: np.ndarray  # (S,)

    def __post_init__(self):
        S, A = self.R.shape
        if self.P.shape != (S, A, S) or self.pi_beta.shape != (S, A) or self.d.shape != (S,):
            raise ContractError("inconsistent FiniteMdp shapes")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        for name, rows in (("P", self.P), ("pi_beta", self.pi_beta)):
            if np.any(rows < 0) or np.max(np.abs(rows.sum(-1) - 1.0)) > 1e-9:
                raise ContractError(f"{name} rows must be probability vectors")
        if np.any(self.pi_beta <= 0):
            raise ContractError("behaviour policy must have full support")
        if abs(self.d.sum() - 1.0) > 1e-9 or np.any(self.d < 0):
            raise ContractError("state distribution must sum to 1")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    def state_transition(self, pi: np.ndarray) -> np.ndarray:
        return np.einsum("sa,sat->st", pi, self.P)


def _floored_rows(raw: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    rows = np.maximum(raw, floor)
    return rows / rows.sum(-1, keepdims=True)


def state_distribution(P: np.ndarray, pi: np.ndarray, gamma: float, kind: str = "discounted",
                       d0: np.ndarray | None = None) -> np.ndarray:
    """Discounted visitation ``(1-g)(I - g P_pi^T)^-1 d0`` or the stationary distribution."""
    S = P.shape[0]
    P_pi = np.einsum("sa,sat->st", pi, P)
    if kind == "discounted":
        d0 = np.full(S, 1.0 / S) if d0 is None else d0
        d = np.linalg.solve(np.eye(S) - gamma * P_pi.T, (1.0 - gamma) * d0)
    elif kind == "stationary":
        M = np.vstack([P_pi.T - np.eye(S), np.ones((1, S))])
        rhs = np.zeros(S + 1)
        rhs[-1] = 1.0
        d = np.linalg.lstsq(M, rhs, rcond=None)[0]
    else:
        raise ContractError(f"unknown state distribution kind {kind!r}")
    d = np.maximum(d, 0.0)
    return d / d.sum()


def random_finite_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator,
                      distribution: str = "discounted") -> FiniteMdp:
    if not (2 <= n_states <= 6 and 2 <= n_actions <= 4):
        raise ContractError("random_finite_mdp supports 2..6 states and 2..4 actions")
    P = _floored_rows(rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)))
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    pi = _floored_rows(rng.dirichlet(np.ones(n_actions), size=n_states))
    d = state_distribution(P, pi, gamma, distribution)
    return FiniteMdp(P, R, gamma, pi, d)
