"""Diagnostics: imitation weights, action distances, coefficient statistics,
per-cell coefficient maps for the maze and per-trajectory run comparisons."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datastore import Transition, trajectory_returns
from .envs import MAZE_MOVES, MazeSpec

OVERFLOW_SENTINEL = math.inf


def imitation_weight(beta: float, q: float, v: float) -> tuple[float, bool]:
    """Uncapped ``exp(beta * (q - v))`` and an overflow flag."""
    expo = beta * (q - v)
    if expo > 709.0:
        return OVERFLOW_SENTINEL, True
    return math.exp(expo), False


def imitation_weights(beta: np.ndarray, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised :func:`imitation_weight`; overflowing entries become +inf."""
    with np.errstate(over="ignore"):
        return np.exp(np.asarray(beta) * (np.asarray(q) - np.asarray(v)))


def maze_action_vector(action: int) -> np.ndarray:
    """Unit displacement ``(d_row, d_col)`` of a maze action."""
    return np.asarray(MAZE_MOVES[int(action)], dtype=np.float64)


def action_distance(mode_fn: Callable, trajectory: Sequence[Transition], discrete: bool | None = None) -> float:
    """Mean squared distance between the policy's modal action and the recorded one.

    ``mode_fn(state)`` returns the modal action.  Discrete actions are
    compared through their unit displacement vectors.
    """
    if len(trajectory) == 0:
        raise ValueError("action distance needs a nonempty trajectory")
    if discrete is None:
        discrete = isinstance(trajectory[0].a, (int, np.integer))
    total = 0.0
    for tr in trajectory:
        mode = mode_fn(tr.s)
        if discrete:
            diff = maze_action_vector(mode) - maze_action_vector(tr.a)
        else:
            diff = np.asarray(mode, dtype=np.float64) - np.asarray(tr.a, dtype=np.float64)
        total += float(diff @ diff)
    return total / len(trajectory)


@dataclass
class BetaSummary:
    mean: float
    std: float
    count: int


def beta_statistics(logs: dict[str, np.ndarray]) -> dict[str, BetaSummary]:
    """Mean and population standard deviation per labelled coefficient log."""
    out = {}
    for label, values in logs.items():
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        out[label] = BetaSummary(float(v.mean()), float(v.std()), int(v.size)) if v.size else BetaSummary(
            float("nan"), float("nan"), 0)
    return out


def maze_beta_map(policy: Callable, spec: MazeSpec, starts=None) -> np.ndarray:
    """Per-cell mean coefficient over deterministic rollouts.

    ``policy(cell) -> (action, beta)``.  Rollouts start at ``starts`` (every
    open non-goal cell by default) and run to the goal or the step limit.
    Cells never visited hold NaN.
    """
    from .envs import MazeEnv

    env = MazeEnv(spec)
    total = np.zeros((spec.height, spec.width))
    count = np.zeros((spec.height, spec.width))
    if starts is None:
        starts = [c for c in spec.open_cells() if c != tuple(spec.goal)]
    for start in starts:
        cell = env.reset(start=start)
        while True:
            action, beta = policy(cell)
            total[cell] += beta
            count[cell] += 1
            cell, _, over, _ = env.step(action)
            if over:
                break
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def guided_fraction_map(dataset: Sequence[Transition], spec: MazeSpec) -> np.ndarray:
    """Fraction of dataset transitions leaving each cell that were guided (NaN if unvisited)."""
    guided = np.zeros((spec.height, spec.width))
    count = np.zeros((spec.height, spec.width))
    for tr in dataset:
        cell = (int(tr.s[0]), int(tr.s[1]))
        count[cell] += 1
        guided[cell] += 1.0 if tr.guided else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, guided / np.maximum(count, 1), np.nan)


def guided_vs_unguided(beta_map: np.ndarray, guided_frac: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """Mean coefficient over guided-route cells and over unguided-route cells.

    A cell counts as guided when at least ``threshold`` of its dataset
    transitions were guided; cells missing from either map are ignored.
    """
    valid = ~np.isnan(beta_map) & ~np.isnan(guided_frac)
    guided = valid & (guided_frac >= threshold)
    unguided = valid & (guided_frac < threshold)
    g = float(beta_map[guided].mean()) if guided.any() else float("nan")
    u = float(beta_map[unguided].mean()) if unguided.any() else float("nan")
    return g, u


@dataclass
class TrajectoryDiagnostics:
    episode: int
    ret: float
    mean_imitation_weight: float
    mean_action_distance: float
    delta_weight: float = 0.0
    delta_distance: float = 0.0


def per_trajectory(dataset: Sequence[Transition], weight_fn: Callable, mode_fn: Callable,
                   discrete: bool) -> list[TrajectoryDiagnostics]:
    """Per-episode mean imitation weight and action distance for one run.

    ``weight_fn(transitions) -> weights`` evaluates a batch of transitions.
    """
    episodes: dict[int, list[Transition]] = {}
    for tr in dataset:
        episodes.setdefault(tr.episode, []).append(tr)
    returns = trajectory_returns(dataset)
    rows = []
    for ep, trs in episodes.items():
        w = np.asarray(weight_fn(trs), dtype=np.float64)
        rows.append(TrajectoryDiagnostics(ep, returns[ep], float(np.mean(w)),
                                          action_distance(mode_fn, trs, discrete)))
    return rows


def diff_vs_baseline(rows_a: Sequence[TrajectoryDiagnostics],
                     rows_b: Sequence[TrajectoryDiagnostics]) -> list[TrajectoryDiagnostics]:
    """Per-trajectory differences ``a - b`` (matched by episode id)."""
    by_ep = {r.episode: r for r in rows_b}
    out = []
    for r in rows_a:
        other = by_ep[r.episode]
        out.append(TrajectoryDiagnostics(r.episode, r.ret, r.mean_imitation_weight, r.mean_action_distance,
                                         r.mean_imitation_weight - other.mean_imitation_weight,
                                         r.mean_action_distance - other.mean_action_distance))
    return out


def bin_by_return(rows: Sequence[TrajectoryDiagnostics], n_bins: int = 10) -> list[dict]:
    """Average deltas within equal-width return bins."""
    if not rows:
        return []
    rets = np.array([r.ret for r in rows])
    lo, hi = float(rets.min()), float(rets.max())
    edges = np.linspace(lo, hi, n_bins + 1) if hi > lo else np.array([lo, lo + 1.0])
    idx = np.clip(np.searchsorted(edges, rets, side="right") - 1, 0, len(edges) - 2)
    out = []
    for k in range(len(edges) - 1):
        members = [r for r, i in zip(rows, idx) if i == k]
        if not members:
            continue
        out.append({
            "bin_low": float(edges[k]),
            "bin_high": float(edges[k + 1]),
            "n": len(members),
            "mean_delta_weight": float(np.mean([m.delta_weight for m in members])),
            "mean_delta_distance": float(np.mean([m.delta_distance for m in members])),
        })
    return out


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("%.10g" % v if isinstance(v, float) else v) for k, v in row.items()})
