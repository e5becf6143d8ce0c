"""Dataset generators: uniform grids and behavior-policy rollouts."""

from __future__ import annotations

import numpy as np

from ..dataset import Dataset
from ..policy import Policy
from ..trajectories import Episode, TrajectoryDataset
from .pendulum import PendulumParams, pendulum_observe, pendulum_step


def gen_uniform_grid(n_w: int, n_wd: int, n_u: int,
                     params: PendulumParams = PendulumParams()) -> Dataset:
    """One pendulum transition per point of a (angle, velocity, torque) grid."""
    if min(n_w, n_wd, n_u) < 1:
        raise ValueError("grid sizes must be positive")
    w = np.linspace(-np.pi, np.pi, n_w)
    wd = np.linspace(-params.max_speed, params.max_speed, n_wd)
    u = np.linspace(-params.max_torque, params.max_torque, n_u)
    W, WD, U = np.meshgrid(w, wd, u, indexing="ij")
    phys = np.column_stack([W.ravel(), WD.ravel()])
    torque = U.ravel()
    nxt, r, g = pendulum_step(phys, torque, params=params)
    return Dataset(pendulum_observe(phys), torque[:, None], r, pendulum_observe(nxt), g)


class UniformPolicy:
    """Uniform random actions on a box (a behavior policy with known density)."""

    stochastic = True

    def __init__(self, low, high):
        self.low = np.atleast_1d(np.asarray(low, dtype=float))
        self.high = np.atleast_1d(np.asarray(high, dtype=float))

    def act(self, s, rng):
        return rng.uniform(self.low, self.high)

    def log_prob(self, s, a):
        return float(-np.sum(np.log(self.high - self.low)))


class GaussianMixturePolicy:
    """State-independent mixture of diagonal Gaussians."""

    stochastic = True

    def __init__(self, means, stds, weights=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.stds = np.atleast_2d(np.asarray(stds, dtype=float))
        k = self.means.shape[0]
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)

    def act(self, s, rng):
        j = rng.choice(self.weights.size, p=self.weights)
        return self.means[j] + self.stds[j] * rng.standard_normal(self.means.shape[1])

    def log_prob(self, s, a):
        a = np.asarray(a, dtype=float)
        z = (a - self.means) / self.stds
        comp = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(self.stds), axis=1) \
            - 0.5 * self.means.shape[1] * np.log(2 * np.pi)
        m = comp.max()
        return float(m + np.log(np.sum(self.weights * np.exp(comp - m))))


def _act(behavior, obs, rng):
    if isinstance(behavior, Policy):
        return np.atleast_1d(behavior.act(obs, rng))
    if hasattr(behavior, "act"):
        return np.atleast_1d(behavior.act(obs, rng))
    return np.atleast_1d(behavior(obs, rng))


def _log_prob(behavior, obs, a):
    if hasattr(behavior, "log_prob") and getattr(behavior, "stochastic", True):
        return float(behavior.log_prob(obs, a))
    return None


def gen_rollout_dataset(env, behavior, episodes: int, max_steps: int, seed: int,
                        start=None, stop_on_terminal: bool = True):
    """Roll out ``behavior`` for ``episodes`` episodes of at most ``max_steps``.

    Returns the flattened :class:`Dataset` and the :class:`TrajectoryDataset`
    with per-step behavior log-probabilities (when the behavior has a density).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        x = env.reset(rng) if start is None else np.asarray(start, dtype=float)
        obs, acts, rews, discs, logps = [], [], [], [], []
        for _ in range(max_steps):
            o = env.observe(x)
            a = _act(behavior, o, rng)
            lp = _log_prob(behavior, o, a)
            x, r, g = env.step(x, a, rng)
            obs.append(o)
            acts.append(a)
            rews.append(r)
            discs.append(g)
            logps.append(lp)
            if stop_on_terminal and g == 0:
                break
        lp = None if any(v is None for v in logps) else logps
        out.append(Episode(obs, acts, rews, discs, env.observe(x), lp))
    trajs = TrajectoryDataset(out)
    return trajs.to_dataset(), trajs
