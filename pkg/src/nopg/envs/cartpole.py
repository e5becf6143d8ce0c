"""Cart-pole stabilization with ``theta = 0`` upright and reward ``cos(theta)``.

Frictionless rigid-body model integrated with RK4 under zero-order-hold force.
State ``(x, x_dot, theta, theta_dot)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..npbe import StateSampler
from .base import EnvModel


@dataclass(frozen=True)
class CartpoleParams:
    g: float = 9.81
    m_cart: float = 0.57
    m_pole: float = 0.127
    half_length: float = 0.1778
    dt: float = 0.01
    substeps: int = 2
    max_force: float = 5.0
    gamma: float = 0.99
    fail_angle: float = np.deg2rad(3.0)


def cartpole_derivative(state, force, p: CartpoleParams = CartpoleParams()):
    x, xd, th, thd = state
    total = p.m_cart + p.m_pole
    sin, cos = np.sin(th), np.cos(th)
    tmp = (force + p.m_pole * p.half_length * thd ** 2 * sin) / total
    thdd = (p.g * sin - cos * tmp) / (p.half_length * (4.0 / 3.0 - p.m_pole * cos ** 2 / total))
    xdd = tmp - p.m_pole * p.half_length * thdd * cos / total
    return np.array([xd, xdd, thd, thdd])


def cartpole_step(s, a, params: CartpoleParams = CartpoleParams(), terminate: bool = False):
    """Advance one control period. Returns ``(s_next, reward, discount)``.

    With ``terminate`` the discount is 0 once ``|theta|`` exceeds the failure
    angle (used for data collection only).
    """
    p = params
    s = np.asarray(s, dtype=float)
    f = float(np.clip(np.asarray(a, dtype=float).reshape(-1)[0], -p.max_force, p.max_force))
    h = p.dt / p.substeps
    y = s.copy()
    for _ in range(p.substeps):
        k1 = cartpole_derivative(y, f, p)
        k2 = cartpole_derivative(y + 0.5 * h * k1, f, p)
        k3 = cartpole_derivative(y + 0.5 * h * k2, f, p)
        k4 = cartpole_derivative(y + h * k3, f, p)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    r = float(np.cos(s[2]))
    disc = 0.0 if terminate and abs(y[2]) > p.fail_angle else p.gamma
    return y, r, disc


class CartpoleEnv(EnvModel):
    name = "cartpole"
    d_s = 4
    d_a = 1

    def __init__(self, params: CartpoleParams = CartpoleParams(), terminate: bool = False):
        self.params = params
        self.terminate = terminate
        self.gamma = params.gamma
        self.action_low, self.action_high = -params.max_force, params.max_force

    def reset(self, rng=None):
        x = np.zeros(4)
        if rng is not None:
            x[2] = rng.uniform(-0.5, 0.5) * self.params.fail_angle
        return x

    def step(self, x, a, rng=None):
        return cartpole_step(x, a, self.params, self.terminate)

    def initial_distribution(self):
        amp = 0.5 * self.params.fail_angle

        def draw(rng, m):
            out = np.zeros((m, 4))
            out[:, 2] = rng.uniform(-amp, amp, size=m)
            return out

        return StateSampler(draw)
