"""Environments, their oracles and dataset generators."""

from .base import EnvModel, rollout
from .cartpole import CartpoleEnv, CartpoleParams, cartpole_step
from .generate import GaussianMixturePolicy, UniformPolicy, gen_rollout_dataset, gen_uniform_grid
from .lqg import (LqgEnv, LqgSpec, LqgUnstableError, lqg_q_oracle, lqg_true_gradient,
                  mix_behavior_policy, paper_lqg, riccati_value)
from .mountaincar import MountainCarEnv, MountainCarParams, mountaincar_step
from .pendulum import PendulumEnv, PendulumParams, pendulum_step

__all__ = [
    "EnvModel", "rollout", "CartpoleEnv", "CartpoleParams", "cartpole_step",
    "GaussianMixturePolicy", "UniformPolicy", "gen_rollout_dataset", "gen_uniform_grid",
    "LqgEnv", "LqgSpec", "LqgUnstableError", "lqg_q_oracle", "lqg_true_gradient",
    "mix_behavior_policy", "paper_lqg", "riccati_value", "MountainCarEnv",
    "MountainCarParams", "mountaincar_step", "PendulumEnv", "PendulumParams", "pendulum_step",
]
