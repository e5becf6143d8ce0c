"""Common environment interface."""

from __future__ import annotations

import numpy as np


class EnvModel:
    """Simulator with separate physical state and observation.

    Subclasses implement ``reset``, ``step`` and optionally ``observe``.
    ``step(x, a, rng)`` returns ``(x_next, reward, discount)`` where the
    discount is 0 on terminal transitions and ``gamma`` otherwise.
    """

    name = "env"
    d_s = 1          # observation dimension
    d_a = 1
    gamma = 0.99
    action_low = -np.inf
    action_high = np.inf

    def reset(self, rng) -> np.ndarray:
        raise NotImplementedError

    def observe(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def step(self, x, a, rng=None):
        raise NotImplementedError

    def initial_distribution(self):
        """Initial-state distribution in observation space (for the NPBE)."""
        raise NotImplementedError

    def clip_action(self, a) -> np.ndarray:
        return np.clip(np.asarray(a, dtype=float), self.action_low, self.action_high)


def rollout(env: EnvModel, policy, x0, steps: int, rng=None, stop_on_terminal: bool = True):
    """Run ``policy`` (a callable on observations) from physical state ``x0``.

    Returns a dict with arrays ``states`` (physical, steps+1), ``obs``,
    ``actions``, ``rewards`` and ``discounts``; it may be shorter than
    ``steps`` when a terminal transition is reached.
    """
    x = np.asarray(x0, dtype=float)
    xs, obs, acts, rews, discs = [x], [env.observe(x)], [], [], []
    for _ in range(steps):
        a = np.atleast_1d(np.asarray(policy(obs[-1]), dtype=float))
        x, r, g = env.step(x, a, rng)
        xs.append(x)
        obs.append(env.observe(x))
        acts.append(a)
        rews.append(r)
        discs.append(g)
        if stop_on_terminal and g == 0:
            break
    return {"states": np.array(xs), "obs": np.array(obs), "actions": np.array(acts),
            "rewards": np.array(rews), "discounts": np.array(discs)}
