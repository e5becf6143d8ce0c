"""Comparison gradient estimators: importance-sampled G(PO)MDP and DPG with an oracle Q.

The G(PO)MDP estimators work on episode-structured data. At each time step
``t`` the cumulative importance ratios ``rho_{e,t} = prod_{i<=t} pi/pi_b`` of
the episodes still running are normalized to sum to one, and the estimate is

    g = sum_t sum_e w_{e,t} * (Gamma_{e,t} r_{e,t} - b_t) * G_{e,t}

with ``Gamma_{e,t}`` the product of the discounts before step ``t`` and
``G_{e,t} = sum_{i<=t} grad log pi(a_i|s_i)``. ``b_t = 0`` for the plain
normalized estimator.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .envs.lqg import LqgSpec, gain_matrix, lqg_q_action_gradient
from .trajectories import Episode, TrajectoryDataset
from .training import GradientVector

__all__ = ["TrajectoryDataset", "Episode", "gpomdp_nis_gradient", "gpomdp_bn_gradient",
           "gpomdp_baselines", "normalized_weights", "dpg_oracle_q_gradient"]


def _padded_terms(trajs: TrajectoryDataset, policy, gamma=None):
    """Stack per-step quantities into (N, T) / (N, T, p) arrays padded with zeros.

    Returns log ratios, discounted rewards, cumulative scores and the mask of
    valid steps.
    """
    if not policy.stochastic:
        raise TypeError("importance sampling needs a stochastic target policy")
    if not trajs.has_log_probs:
        raise ValueError("behavior log-probabilities are missing")
    N = len(trajs)
    T = max(len(e) for e in trajs.episodes)
    p = policy.theta.size
    log_rho = np.full((N, T), -np.inf)
    disc_r = np.zeros((N, T))
    scores = np.zeros((N, T, p))
    mask = np.zeros((N, T), dtype=bool)
    for k, ep in enumerate(trajs.episodes):
        L = len(ep)
        lr = policy.log_prob(ep.states, ep.actions) - ep.log_probs
        log_rho[k, :L] = np.cumsum(lr)
        g = ep.discounts if gamma is None else np.full(L, float(gamma))
        # discount applied to the reward of step t: prod_{j<t} gamma_j
        Gam = np.concatenate([[1.0], np.cumprod(g[:-1])])
        disc_r[k, :L] = Gam * ep.rewards
        scores[k, :L] = np.cumsum(policy.grad_log_prob(ep.states, ep.actions), axis=0)
        mask[k, :L] = True
    return log_rho, disc_r, scores, mask


def normalized_weights(log_rho: np.ndarray, mask: np.ndarray):
    """Per-step self-normalized weights and the steps where all weights vanish.

    Parameters
    ----------
    log_rho : ndarray, shape (N, T)
        Cumulative log importance ratios (``-inf`` where the ratio is zero).
    mask : ndarray of bool, shape (N, T)
        Valid (episode, step) entries.

    Returns
    -------
    w : ndarray, shape (N, T)
        Columns sum to one over valid entries, or are all zero.
    degenerate : ndarray of int
        Steps with no positive weight.
    """
    lr = np.where(mask, log_rho, -np.inf)
    norm = logsumexp(lr, axis=0)
    bad = ~np.isfinite(norm)
    w = np.zeros_like(lr)
    ok = ~bad
    w[:, ok] = np.exp(lr[:, ok] - norm[ok])
    return w, np.flatnonzero(bad & mask.any(axis=0))


def gpomdp_baselines(w, disc_r, scores) -> np.ndarray:
    """Variance-minimizing per-component baselines, shape (T, p).

    ``b_t = sum_e w^2 G^2 Gamma r / sum_e w^2 G^2`` per parameter component;
    components with no score mass get 0.
    """
    w2 = (w * w)[:, :, None]
    G2 = scores * scores
    num = np.sum(w2 * G2 * disc_r[:, :, None], axis=0)
    den = np.sum(w2 * G2, axis=0)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _gpomdp(trajs, policy, gamma, baseline: bool) -> GradientVector:
    log_rho, disc_r, scores, mask = _padded_terms(trajs, policy, gamma)
    w, degenerate = normalized_weights(log_rho, mask)
    adv = disc_r[:, :, None]
    if baseline:
        adv = adv - gpomdp_baselines(w, disc_r, scores)[None, :, :]
    g = np.einsum("et,etp->p", w, adv * scores)
    j = float(np.sum(w * disc_r))
    return GradientVector(g, j, info={"degenerate_steps": degenerate})


def gpomdp_nis_gradient(trajs: TrajectoryDataset, policy, gamma=None) -> GradientVector:
    """G(PO)MDP with per-step normalized importance weights.

    ``gamma`` replaces the recorded discounts when given. ``j_hat`` holds the
    matching weighted estimate of the discounted return; ``info`` lists steps
    whose weights all vanished (they contribute nothing).
    """
    return _gpomdp(trajs, policy, gamma, baseline=False)


def gpomdp_bn_gradient(trajs: TrajectoryDataset, policy, gamma=None) -> GradientVector:
    """Normalized G(PO)MDP with per-step, per-component baselines from the same data."""
    return _gpomdp(trajs, policy, gamma, baseline=True)


def dpg_oracle_q_gradient(dataset, lqg: LqgSpec, policy, noise: bool = False) -> GradientVector:
    """Semi-gradient ``mean_i dQ/da(s_i, pi(s_i)) * dpi/dtheta`` with the exact LQG Q.

    ``Q`` is the closed-form action value of the current (linear) policy; the
    states are the dataset's, so no discounting of the state distribution
    takes place.
    """
    if dataset.d_s != lqg.d_s or dataset.d_a != lqg.d_a:
        raise ValueError("dataset dimensions do not match the LQG")
    if policy.stochastic:
        raise TypeError("DPG needs a deterministic policy")
    Theta = gain_matrix(lqg, policy.theta)
    S = dataset.states
    dq = lqg_q_action_gradient(lqg, Theta, S, policy.mean(S), noise)
    return GradientVector(policy.vjp(S, dq) / dataset.n, float("nan"))
