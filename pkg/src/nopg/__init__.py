"""Nonparametric off-policy policy gradient for batch reinforcement learning."""

from .analysis import (GradientStudyConfig, a_bias_bound, bandwidth_sweep, bootstrap_percentile_ci,
                       run_gradient_study, value_bias_bound)
from .baselines import dpg_oracle_q_gradient, gpomdp_bn_gradient, gpomdp_nis_gradient
from .config import NopgConfig
from .dataset import Dataset, load_dataset, save_dataset, subsample
from .kernel import KernelModel, apply_h_factor, gaussian_product_eval, select_bandwidths_cv
from .npbe import (FixedState, StateSampler, build_transition_operator, cg_solve,
                   initial_responsibilities, q_value_at, responsibilities_at, solve_npbe,
                   state_distribution_at, value_at)
from .policy import Policy, PolicyLayout, init_policy
from .trajectories import Episode, TrajectoryDataset
from .training import adam_step, nopg_gradient, surrogate_objective, train

__version__ = "0.1.0"
