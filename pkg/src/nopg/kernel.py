"""Product-Gaussian kernels and per-dimension bandwidth selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class DegenerateColumnWarning(UserWarning):
    """A column had zero spread, so CV fell back to the largest grid value."""


def as_bandwidths(values, d: int | None = None) -> np.ndarray:
    """Validate and return a read-only bandwidth vector."""
    h = np.array(values, dtype=float, copy=True).reshape(-1)
    if h.size == 0 or not np.all(np.isfinite(h)) or np.any(h <= 0):
        raise ValueError(f"bandwidths must be positive and finite, got {h}")
    if d is not None and h.size != d:
        raise ValueError(f"expected {d} bandwidths, got {h.size}")
    h.flags.writeable = False
    return h


def gaussian_product_eval(x, center, h) -> float:
    """Density of an axis-aligned Gaussian with scales ``h`` centred at ``center``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    c = np.asarray(center, dtype=float).reshape(-1)
    h = as_bandwidths(h)
    if not (x.size == c.size == h.size):
        raise ValueError("x, center and h must have the same length")
    z = (x - c) / h
    return float(np.exp(-0.5 * z @ z - np.sum(np.log(h)) - h.size * LOG_SQRT_2PI))


def log_kernel_matrix(x, centers, h) -> np.ndarray:
    """Log product-Gaussian densities between query rows and centre rows.

    Parameters
    ----------
    x : array_like, shape (m, d)
    centers : array_like, shape (n, d)
    h : array_like, shape (d,)

    Returns
    -------
    ndarray, shape (m, n)
        Entry ``[l, i]`` is ``log N(x_l; centers_i, diag(h**2))``.
    """
    # elementwise differences keep the result exact for distant queries
    h = np.asarray(h, dtype=float)
    x = np.atleast_2d(x) / h
    c = np.atleast_2d(centers) / h
    sq = np.zeros((x.shape[0], c.shape[0]), dtype=np.result_type(x, c))
    for k in range(x.shape[1]):
        diff = x[:, k, None] - c[None, :, k]
        sq += diff * diff
    return -0.5 * sq - np.sum(np.log(h)) - h.size * LOG_SQRT_2PI


def apply_h_factor(h, factor) -> np.ndarray:
    """Element-wise rescaling of bandwidths by a positive scalar or vector."""
    h = as_bandwidths(h)
    f = np.broadcast_to(np.asarray(factor, dtype=float), h.shape)
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise ValueError("h_factor must be positive")
    return as_bandwidths(h * f)


DEFAULT_CV_GRID = np.logspace(-3, 1, 25)


def cv_log_likelihood(column, h_values, folds: int, seed: int) -> np.ndarray:
    """Mean held-out log-density of a 1-D Gaussian KDE for each bandwidth.

    Rows are assigned to ``folds`` groups by a seeded permutation; each group is
    scored under the KDE built from the remaining rows.
    """
    col = np.asarray(column, dtype=float).reshape(-1)
    n = col.size
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    fold_of[rng.permutation(n)] = np.arange(n) % folds
    h_values = np.asarray(h_values, dtype=float)
    scores = np.zeros(h_values.size)
    for f in range(folds):
        test = col[fold_of == f]
        train = col[fold_of != f]
        sq = (test[:, None] - train[None, :]) ** 2
        for j, h in enumerate(h_values):
            ll = logsumexp(-0.5 * sq / h**2, axis=1) - np.log(train.size) - np.log(h) - LOG_SQRT_2PI
            scores[j] += ll.sum()
    return scores / n


def select_bandwidths_cv(columns, folds: int = 5, grid=None, seed: int = 0,
                         relative: bool = True) -> np.ndarray:
    """Pick one bandwidth per column by leave-fold-out KDE likelihood.

    Parameters
    ----------
    columns : array_like, shape (n, d)
    folds : int
        Number of CV folds, ``2 <= folds <= n``.
    grid : sequence of float, optional
        Candidate bandwidths. With ``relative=True`` (default) they are
        multiplied by each column's standard deviation.
    seed : int
        Seed for the fold assignment.

    Returns
    -------
    ndarray, shape (d,)
        Selected bandwidths. Ties go to the larger bandwidth. Constant columns
        get the largest grid value and raise :class:`DegenerateColumnWarning`.
    """
    x = np.asarray(columns, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    grid = DEFAULT_CV_GRID if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("grid must be a non-empty list of positive values")
    out = np.empty(d)
    for k in range(d):
        sigma = x[:, k].std()
        if sigma == 0:
            warnings.warn(f"column {k} is constant; using the largest grid value",
                          DegenerateColumnWarning, stacklevel=2)
            out[k] = grid.max()
            continue
        cand = np.sort(grid * (sigma if relative else 1.0))
        scores = cv_log_likelihood(x[:, k], cand, folds, seed + k)
        best = np.flatnonzero(scores >= scores.max())
        out[k] = cand[best[-1]]
    return as_bandwidths(out)


@dataclass(frozen=True, eq=False)
class KernelModel:
    """Bandwidths of the state, action and next-state kernels."""

    h_state: np.ndarray
    h_action: np.ndarray
    h_next: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h_state", as_bandwidths(self.h_state))
        object.__setattr__(self, "h_action", as_bandwidths(self.h_action))
        object.__setattr__(self, "h_next", as_bandwidths(self.h_next, self.h_state.size))

    def check(self, dataset) -> None:
        if self.h_state.size != dataset.d_s or self.h_action.size != dataset.d_a:
            raise ValueError("kernel bandwidths do not match dataset dimensions")

    @classmethod
    def uniform(cls, kappa: float, d_s: int, d_a: int) -> "KernelModel":
        return cls(np.full(d_s, kappa), np.full(d_a, kappa), np.full(d_s, kappa))

    @classmethod
    def from_dataset(cls, dataset, state_factor=1.0, action_factor=1.0,
                     folds: int = 5, grid=None, seed: int = 0) -> "KernelModel":
        """CV-selected bandwidths rescaled by the given h_factors.

        The next-state kernel reuses the state bandwidths.
        """
        h_s = select_bandwidths_cv(dataset.states, folds, grid, seed)
        h_a = select_bandwidths_cv(dataset.actions, folds, grid, seed + 1000)
        h_s = apply_h_factor(h_s, state_factor)
        return cls(h_s, apply_h_factor(h_a, action_factor), h_s)
