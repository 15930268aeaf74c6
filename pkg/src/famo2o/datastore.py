"""Transition storage: JSONL datasets, a FIFO replay buffer and per-episode
return statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Transition:
    """One environment step.

    ``s``/``s_next`` are tuples of numbers (a maze cell is ``(row, col)``),
    ``a`` is an int for discrete actions or a tuple of floats otherwise.
    ``done`` marks a true terminal; time-limit cut-offs keep ``done=False``.
    ``guided`` optionally records whether the collecting policy was under
    guidance at this step.
    """

    s: tuple
    a: int | tuple
    r: float
    s_next: tuple
    done: bool
    episode: int
    t: int = 0
    guided: bool | None = None

    def __post_init__(self):
        values = list(self.s) + list(self.s_next) + [self.r]
        values += [self.a] if isinstance(self.a, (int, np.integer)) else list(self.a)
        if not all(math.isfinite(float(v)) for v in values):
            raise ValueError(f"non-finite field in transition {self}")


class DatasetFormatError(ValueError):
    """A dataset line could not be parsed."""


def _to_json(tr: Transition) -> str:
    row = {
        "episode": int(tr.episode),
        "t": int(tr.t),
        "s": list(tr.s),
        "a": tr.a if isinstance(tr.a, int) else list(tr.a),
        "r": tr.r,
        "s_next": list(tr.s_next),
        "done": bool(tr.done),
    }
    if tr.guided is not None:
        row["guided"] = bool(tr.guided)
    return json.dumps(row)


def _from_json(obj: dict) -> Transition:
    a = obj["a"]
    return Transition(
        s=tuple(obj["s"]),
        a=a if isinstance(a, int) else tuple(a),
        r=obj["r"],
        s_next=tuple(obj["s_next"]),
        done=bool(obj["done"]),
        episode=int(obj["episode"]),
        t=int(obj.get("t", 0)),
        guided=obj.get("guided"),
    )


def save_jsonl(path, transitions: Iterable[Transition]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in transitions:
            fh.write(_to_json(tr) + "\n")


def load_jsonl(path) -> list[Transition]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed transition ({exc})") from exc
    return out


def trajectory_returns(transitions: Iterable[Transition]) -> dict[int, float]:
    """Undiscounted return per episode id, in order of first appearance."""
    totals: dict[int, float] = {}
    for tr in transitions:
        totals[tr.episode] = totals.get(tr.episode, 0.0) + float(tr.r)
    return totals


def write_returns_csv(path, transitions: Sequence[Transition], labels: dict[int, str] | None = None) -> None:
    """Per-episode return table with an optional label column (e.g. route)."""
    returns = trajectory_returns(transitions)
    lengths: dict[int, int] = {}
    for tr in transitions:
        lengths[tr.episode] = lengths.get(tr.episode, 0) + 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "return", "length", "label"])
        for ep, ret in returns.items():
            writer.writerow([ep, repr(ret), lengths[ep], (labels or {}).get(ep, "")])


class ReplayBuffer:
    """Fixed-capacity FIFO store with array-backed columns.

    States and actions are kept in their raw form (cell coordinates or
    positions; action indices are stored as a single float column).
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int, discrete: bool):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.discrete = discrete
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.guided = np.full(capacity, -1, dtype=np.int8)
        self._start = 0
        self.size = 0
        self.n_evicted = 0

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        if self.size < self.capacity:
            i = (self._start + self.size) % self.capacity
            self.size += 1
        else:
            i = self._start
            self._start = (self._start + 1) % self.capacity
            self.n_evicted += 1
        self.s[i] = tr.s
        self.a[i] = tr.a
        self.r[i] = tr.r
        self.s_next[i] = tr.s_next
        self.done[i] = float(tr.done)
        self.episode[i] = tr.episode
        self.t[i] = tr.t
        self.guided[i] = -1 if tr.guided is None else int(tr.guided)

    def extend(self, transitions: Iterable[Transition]) -> None:
        for tr in transitions:
            self.add(tr)

    def sample_indices(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=m)

    def _slot(self, logical: np.ndarray) -> np.ndarray:
        return (self._start + np.asarray(logical)) % self.capacity

    def columns(self, logical: np.ndarray) -> dict[str, np.ndarray]:
        """Column arrays for logical positions (0 = oldest stored item)."""
        k = self._slot(logical)
        return {"s": self.s[k], "a": self.a[k], "r": self.r[k], "s_next": self.s_next[k], "done": self.done[k]}

    def transition(self, logical: int) -> Transition:
        k = int(self._slot(logical))
        if self.discrete:
            a = int(self.a[k, 0])
            s, s_next = tuple(int(v) for v in self.s[k]), tuple(int(v) for v in self.s_next[k])
        else:
            a = tuple(float(v) for v in self.a[k])
            s, s_next = tuple(float(v) for v in self.s[k]), tuple(float(v) for v in self.s_next[k])
        g = int(self.guided[k])
        return Transition(s, a, float(self.r[k]), s_next, bool(self.done[k]),
                          int(self.episode[k]), int(self.t[k]), None if g < 0 else bool(g))

    def transitions(self) -> list[Transition]:
        """All stored items, oldest first."""
        return [self.transition(i) for i in range(self.size)]


def sample_minibatch(buffer: ReplayBuffer, m: int, rng: np.random.Generator) -> list[Transition]:
    """``m`` uniform draws with replacement."""
    return [buffer.transition(int(i)) for i in buffer.sample_indices(m, rng)]
