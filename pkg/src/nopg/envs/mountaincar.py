"""Continuous mountain car with reward -1 per step and a terminal goal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..npbe import StateSampler
from .base import EnvModel


@dataclass(frozen=True)
class MountainCarParams:
    min_position: float = -1.2
    max_position: float = 0.6
    max_speed: float = 0.07
    goal_position: float = 0.45
    power: float = 0.0015
    gamma: float = 0.99
    start_low: float = -0.6
    start_high: float = -0.4


def mountaincar_step(s, a, params: MountainCarParams = MountainCarParams()):
    """One update of ``(position, velocity)``. Returns ``(s_next, -1, discount)``.

    The discount is 0 when the goal position is reached.
    """
    p = params
    pos, vel = float(s[0]), float(s[1])
    force = min(max(float(np.asarray(a).reshape(-1)[0]), -1.0), 1.0)
    vel += force * p.power - 0.0025 * np.cos(3 * pos)
    vel = min(max(vel, -p.max_speed), p.max_speed)
    pos += vel
    pos = min(max(pos, p.min_position), p.max_position)
    if pos == p.min_position and vel < 0:
        vel = 0.0
    done = pos >= p.goal_position
    return np.array([pos, vel]), -1.0, 0.0 if done else p.gamma


class MountainCarEnv(EnvModel):
    name = "mountaincar"
    d_s = 2
    d_a = 1

    def __init__(self, params: MountainCarParams = MountainCarParams()):
        self.params = params
        self.gamma = params.gamma
        self.action_low, self.action_high = -1.0, 1.0

    def reset(self, rng=None):
        p = self.params
        if rng is None:
            return np.array([0.5 * (p.start_low + p.start_high), 0.0])
        return np.array([rng.uniform(p.start_low, p.start_high), 0.0])

    def step(self, x, a, rng=None):
        return mountaincar_step(x, a, self.params)

    def initial_distribution(self):
        p = self.params

        def draw(rng, m):
            return np.column_stack([rng.uniform(p.start_low, p.start_high, size=m), np.zeros(m)])

        return StateSampler(draw)
