"""Offline transition datasets: data model, CSV persistence and subsampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed.

    Attributes
    ----------
    lineno : int or None
        1-based line number of the offending row, if known.
    """

    def __init__(self, message: str, lineno: int | None = None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class DatasetDomainError(ValueError):
    """Raised when dataset values violate the transition invariants."""


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    discount: float


def _frozen(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise DatasetDomainError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable batch of transitions ``(s, a, r, s', gamma)`` stored column-wise.

    Parameters
    ----------
    states, next_states : ndarray, shape (n, d_s)
    actions : ndarray, shape (n, d_a)
    rewards, discounts : ndarray, shape (n,)
    gamma_c : float, optional
        Discount ceiling. Defaults to the largest observed discount.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    discounts: np.ndarray
    gamma_c: float = None

    def __post_init__(self):
        s = _frozen(self.states, 2)
        a = _frozen(self.actions, 2)
        r = _frozen(self.rewards, 1)
        sn = _frozen(self.next_states, 2)
        g = _frozen(self.discounts, 1)
        n = s.shape[0]
        if n == 0:
            raise DatasetDomainError("dataset must contain at least one transition")
        if a.shape[0] != n or r.shape[0] != n or sn.shape[0] != n or g.shape[0] != n:
            raise DatasetDomainError("all columns must have the same number of rows")
        if sn.shape[1] != s.shape[1]:
            raise DatasetDomainError("state and next_state dimensions differ")
        for name, arr in (("states", s), ("actions", a), ("rewards", r),
                          ("next_states", sn), ("discounts", g)):
            if not np.all(np.isfinite(arr)):
                raise DatasetDomainError(f"non-finite entries in {name}")
        if np.any(g < 0) or np.any(g >= 1):
            raise DatasetDomainError("discounts must lie in [0, 1)")
        gamma_c = float(g.max()) if self.gamma_c is None else float(self.gamma_c)
        if not 0 <= gamma_c < 1:
            raise DatasetDomainError(f"gamma_c must lie in [0, 1), got {gamma_c}")
        if g.max() > gamma_c:
            raise DatasetDomainError("a discount exceeds gamma_c")
        for name, arr in (("states", s), ("actions", a), ("rewards", r),
                          ("next_states", sn), ("discounts", g)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma_c", gamma_c)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def d_s(self) -> int:
        return self.states.shape[1]

    @property
    def d_a(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], float(self.discounts[i]))

    def __iter__(self) -> Iterator[Transition]:
        for i in range(self.n):
            yield self[i]

    @classmethod
    def from_transitions(cls, transitions, gamma_c: float | None = None) -> "Dataset":
        transitions = list(transitions)
        if not transitions:
            raise DatasetDomainError("dataset must contain at least one transition")
        return cls(
            states=np.array([t[0] for t in transitions], dtype=float).reshape(len(transitions), -1),
            actions=np.array([t[1] for t in transitions], dtype=float).reshape(len(transitions), -1),
            rewards=np.array([t[2] for t in transitions], dtype=float),
            next_states=np.array([t[3] for t in transitions], dtype=float).reshape(len(transitions), -1),
            discounts=np.array([t[4] for t in transitions], dtype=float),
            gamma_c=gamma_c,
        )

    def select(self, idx) -> "Dataset":
        """Return the rows ``idx`` as a new dataset with gamma_c recomputed."""
        idx = np.asarray(idx)
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx],
                       self.next_states[idx], self.discounts[idx])

    def with_rewards(self, rewards) -> "Dataset":
        return Dataset(self.states, self.actions, rewards, self.next_states,
                       self.discounts, self.gamma_c)

    def with_discounts(self, discounts) -> "Dataset":
        return Dataset(self.states, self.actions, self.rewards, self.next_states,
                       discounts)

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact comparison of all fields."""
        return (self.gamma_c == other.gamma_c and all(
            np.array_equal(x, y) for x, y in (
                (self.states, other.states), (self.actions, other.actions),
                (self.rewards, other.rewards), (self.next_states, other.next_states),
                (self.discounts, other.discounts))))


def csv_header(d_s: int, d_a: int) -> list[str]:
    return ([f"s{i}" for i in range(d_s)] + [f"a{i}" for i in range(d_a)] + ["r"]
            + [f"sn{i}" for i in range(d_s)] + ["gamma"])


def save_dataset(d: Dataset, path) -> None:
    """Write ``d`` as CSV with round-trip exact decimal precision."""
    if not isinstance(d, Dataset):
        raise TypeError("expected a Dataset")
    table = np.column_stack([d.states, d.actions, d.rewards, d.next_states, d.discounts])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(csv_header(d.d_s, d.d_a)) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path, d_s: int, d_a: int) -> Dataset:
    """Read a CSV dataset written by :func:`save_dataset`.

    Lines starting with ``#`` and blank lines are skipped. A header line is
    optional; if present it must match the column template for ``(d_s, d_a)``.
    """
    width = 2 * d_s + d_a + 2
    header = csv_header(d_s, d_a)
    rows = []
    linenos = []
    with open(Path(path), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = [f.strip() for f in text.split(",")]
            if not rows and fields[0] == header[0]:
                if fields != header:
                    raise DatasetFormatError(
                        f"header {fields} does not match template {header}", lineno)
                continue
            if len(fields) != width:
                raise DatasetFormatError(
                    f"expected {width} columns, found {len(fields)}", lineno)
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise DatasetFormatError(f"non-numeric value ({exc})", lineno) from None
            linenos.append(lineno)
    if not rows:
        raise DatasetDomainError(f"{path}: no transitions found")
    table = np.array(rows)
    gam = table[:, -1]
    bad = np.flatnonzero((gam >= 1) | (gam < 0) | ~np.isfinite(gam))
    if bad.size:
        raise DatasetDomainError(
            f"line {linenos[bad[0]]}: discount {gam[bad[0]]} outside [0, 1)")
    return Dataset(
        states=table[:, :d_s],
        actions=table[:, d_s:d_s + d_a],
        rewards=table[:, d_s + d_a],
        next_states=table[:, d_s + d_a + 1:2 * d_s + d_a + 1],
        discounts=gam,
    )


def subsample(d: Dataset, n: int, seed: int) -> Dataset:
    """Uniform random ``n``-subset without replacement (deterministic per seed)."""
    if not 1 <= n <= d.n:
        raise ValueError(f"n must lie in [1, {d.n}], got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(d.n, size=n, replace=False)
    return d.select(idx)


def concatenate(datasets) -> Dataset:
    datasets = list(datasets)
    return Dataset(
        np.concatenate([d.states for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.rewards for d in datasets]),
        np.concatenate([d.next_states for d in datasets]),
        np.concatenate([d.discounts for d in datasets]),
    )
