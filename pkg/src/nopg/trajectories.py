"""Episode-structured datasets and their JSON Lines format.

Each line holds one episode::

    {"s": [[...], ...], "a": [[...], ...], "r": [...], "gamma": [...],
     "s_final": [...], "logp": [...] | null}

``s`` are the observations before each step, ``s_final`` the observation
after the last step, ``logp`` the behavior log-probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, DatasetFormatError


@dataclass(frozen=True, eq=False)
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    discounts: np.ndarray
    final_state: np.ndarray
    log_probs: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        a = np.asarray(self.actions, dtype=float).reshape(s.shape[0], -1)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float).reshape(-1))
        object.__setattr__(self, "discounts", np.asarray(self.discounts, dtype=float).reshape(-1))
        object.__setattr__(self, "final_state", np.asarray(self.final_state, dtype=float).reshape(-1))
        T = s.shape[0]
        if T == 0 or self.rewards.size != T or self.discounts.size != T:
            raise ValueError("episode arrays have inconsistent lengths")
        if self.log_probs is not None:
            lp = np.asarray(self.log_probs, dtype=float).reshape(-1)
            if lp.size != T or not np.all(np.isfinite(lp)):
                raise ValueError("behavior log-probs must be finite, one per step")
            object.__setattr__(self, "log_probs", lp)

    def __len__(self):
        return self.states.shape[0]

    @property
    def next_states(self) -> np.ndarray:
        return np.vstack([self.states[1:], self.final_state[None, :]])

    def to_json(self) -> dict:
        return {"s": self.states.tolist(), "a": self.actions.tolist(), "r": self.rewards.tolist(),
                "gamma": self.discounts.tolist(), "s_final": self.final_state.tolist(),
                "logp": None if self.log_probs is None else self.log_probs.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        return cls(d["s"], d["a"], d["r"], d["gamma"], d["s_final"], d.get("logp"))


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    episodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(self.episodes))
        if not self.episodes:
            raise ValueError("a trajectory dataset needs at least one episode")

    def __len__(self):
        return len(self.episodes)

    @property
    def n_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    @property
    def has_log_probs(self) -> bool:
        return all(e.log_probs is not None for e in self.episodes)

    def head(self, n_steps: int) -> "TrajectoryDataset":
        """The first ``n_steps`` transitions, cutting the last kept episode short."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        out, left = [], n_steps
        for ep in self.episodes:
            if left <= 0:
                break
            if len(ep) <= left:
                out.append(ep)
            else:
                lp = None if ep.log_probs is None else ep.log_probs[:left]
                out.append(Episode(ep.states[:left], ep.actions[:left], ep.rewards[:left],
                                   ep.discounts[:left], ep.states[left], lp))
            left -= len(out[-1])
        return TrajectoryDataset(out)

    def to_dataset(self, max_transitions: int | None = None) -> Dataset:
        """Flatten episodes into transitions (optionally keeping the first ``max_transitions``)."""
        cols = [np.concatenate([getattr(e, f) for e in self.episodes])
                for f in ("states", "actions", "rewards", "next_states", "discounts")]
        if max_transitions is not None:
            cols = [c[:max_transitions] for c in cols]
        return Dataset(*cols)


def save_trajectories(trajs: TrajectoryDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in trajs.episodes:
            fh.write(json.dumps(ep.to_json()) + "\n")


def load_trajectories(path) -> TrajectoryDataset:
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                episodes.append(Episode.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"bad episode ({exc})", lineno) from None
    return TrajectoryDataset(episodes)
