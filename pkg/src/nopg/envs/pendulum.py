"""Torque-limited pendulum swing-up (Pendulum-v0 conventions).

The physical state is ``(omega, omega_dot)`` with ``omega = 0`` upright; the
observation fed to policies and stored in datasets is
``(cos omega, sin omega, omega_dot)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..npbe import FixedState
from .base import EnvModel


@dataclass(frozen=True)
class PendulumParams:
    g: float = 10.0
    m: float = 1.0
    l: float = 1.0
    dt: float = 0.05
    max_speed: float = 8.0
    max_torque: float = 2.0
    gamma: float = 0.99


def angle_normalize(x):
    return ((np.asarray(x) + np.pi) % (2 * np.pi)) - np.pi


def pendulum_reward(omega, omega_dot, torque):
    """Negative quadratic cost in wrapped angle, velocity and torque."""
    return -(angle_normalize(omega) ** 2 + 0.1 * omega_dot ** 2 + 0.001 * torque ** 2)


def pendulum_step(s, a, dt: float | None = None, params: PendulumParams = PendulumParams()):
    """Semi-implicit Euler step. Returns ``(s_next, reward, gamma)``.

    Works on a single state ``(2,)`` or a batch ``(m, 2)`` with torques ``(m,)``
    or ``(m, 1)``.
    """
    p = params
    dt = p.dt if dt is None else dt
    s = np.asarray(s, dtype=float)
    th, thdot = s[..., 0], s[..., 1]
    u = np.clip(np.asarray(a, dtype=float).reshape(th.shape), -p.max_torque, p.max_torque)
    r = pendulum_reward(th, thdot, u)
    new_thdot = thdot + (-3 * p.g / (2 * p.l) * np.sin(th + np.pi) + 3.0 / (p.m * p.l ** 2) * u) * dt
    new_th = th + new_thdot * dt
    new_thdot = np.clip(new_thdot, -p.max_speed, p.max_speed)
    s_next = np.stack([new_th, new_thdot], axis=-1)
    if s_next.ndim == 1:
        return s_next, float(r), p.gamma
    return s_next, r, np.full(th.shape, p.gamma)


def pendulum_energy(s, params: PendulumParams = PendulumParams()):
    """Conserved quantity of the unforced continuous-time dynamics (per unit inertia)."""
    s = np.asarray(s, dtype=float)
    return 0.5 * s[..., 1] ** 2 + 1.5 * params.g / params.l * np.cos(s[..., 0])


def pendulum_observe(s):
    s = np.asarray(s, dtype=float)
    return np.stack([np.cos(s[..., 0]), np.sin(s[..., 0]), s[..., 1]], axis=-1)


BOTTOM = np.array([np.pi, 0.0])
TOP = np.array([0.0, 0.0])


class PendulumEnv(EnvModel):
    name = "pendulum"
    d_s = 3
    d_a = 1

    def __init__(self, params: PendulumParams = PendulumParams(), start=BOTTOM):
        self.params = params
        self.gamma = params.gamma
        self.action_low, self.action_high = -params.max_torque, params.max_torque
        self.start = np.asarray(start, dtype=float)

    def reset(self, rng=None):
        return self.start.copy()

    def observe(self, x):
        return pendulum_observe(x)

    def step(self, x, a, rng=None):
        return pendulum_step(x, np.asarray(a).reshape(-1)[0], params=self.params)

    def initial_distribution(self):
        return FixedState(pendulum_observe(self.start))
