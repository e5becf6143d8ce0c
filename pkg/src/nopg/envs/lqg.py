"""Discounted linear-quadratic task with closed-form value and oracles.

Dynamics ``s' = A s + B a`` with reward ``-(s^T Q s + a^T R a)`` under the
linear policy ``a = Theta s + eps``, ``eps ~ N(0, Sigma)`` (``Sigma`` is the
action-noise covariance; ``noise=False`` gives the deterministic policy).
For a stable discounted closed loop

    V(s) = -s^T P s - c,
    P = Q + Theta^T R Theta + gamma (A + B Theta)^T P (A + B Theta),
    c = (tr(R Sigma) + gamma tr(B^T P B Sigma)) / (1 - gamma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..npbe import FixedState
from ..policy import Policy, PolicyLayout
from .base import EnvModel


class LqgUnstableError(ValueError):
    """The discounted closed loop is not stable, so the value is infinite."""


@dataclass(frozen=True, eq=False)
class LqgSpec:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Sigma: np.ndarray
    s0: np.ndarray
    gamma: float = 0.9
    horizon: int = 50

    def __post_init__(self):
        for name in ("A", "B", "Q", "R", "Sigma"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "s0", np.asarray(self.s0, dtype=float).reshape(-1))
        d_s, d_a = self.B.shape
        if self.A.shape != (d_s, d_s) or self.Q.shape != (d_s, d_s):
            raise ValueError("A and Q must be d_s x d_s")
        if self.R.shape != (d_a, d_a) or self.Sigma.shape != (d_a, d_a):
            raise ValueError("R and Sigma must be d_a x d_a")
        if self.s0.size != d_s:
            raise ValueError("s0 has the wrong length")
        if not (np.allclose(self.Q, self.Q.T) and np.allclose(self.R, self.R.T)):
            raise ValueError("Q and R must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12 or np.linalg.eigvalsh(self.R).min() < -1e-12:
            raise ValueError("Q and R must be positive semidefinite")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def d_s(self) -> int:
        return self.B.shape[0]

    @property
    def d_a(self) -> int:
        return self.B.shape[1]

    @property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.Sigma))


def paper_lqg() -> LqgSpec:
    """Two-dimensional instance used for the gradient study."""
    return LqgSpec(A=np.diag([1.2, 1.1]), B=np.eye(2), Q=np.eye(2), R=0.1 * np.eye(2),
                   Sigma=np.eye(2), s0=np.array([-1.0, -1.0]), gamma=0.9, horizon=50)


THETA_TARGET = np.array([-0.6, -0.8])
THETA_BEHAVIOR = np.array([-0.35, -0.5])


def gain_matrix(lqg: LqgSpec, theta) -> np.ndarray:
    """Accept either a diagonal-gain vector or a full gain matrix."""
    theta = np.asarray(theta, dtype=float)
    K = np.diag(theta) if theta.ndim == 1 else theta
    if K.shape != (lqg.d_a, lqg.d_s):
        raise ValueError(f"gain must be {lqg.d_a} x {lqg.d_s}")
    return K


def discounted_radius(lqg: LqgSpec, Theta) -> float:
    K = gain_matrix(lqg, Theta)
    return float(np.sqrt(lqg.gamma) * np.max(np.abs(np.linalg.eigvals(lqg.A + lqg.B @ K))))


def riccati_value(lqg: LqgSpec, Theta, noise: bool = True, tol: float = 1e-12,
                  max_iter: int = 100000):
    """Value matrix ``P`` and return ``J`` from ``s0`` by fixed-point iteration.

    Returns
    -------
    P : ndarray
        Solution of the discounted Lyapunov equation (residual <= tol scale).
    J : float
        ``-s0^T P s0 - c`` with the noise constant ``c`` (zero if ``noise`` is False).
    """
    K = gain_matrix(lqg, Theta)
    rho = discounted_radius(lqg, K)
    if rho >= 1:
        raise LqgUnstableError(f"discounted closed-loop spectral radius {rho:.4f} >= 1")
    F = lqg.A + lqg.B @ K
    C = lqg.Q + K.T @ lqg.R @ K
    g = lqg.gamma
    P = C.copy()
    for _ in range(max_iter):
        P_new = C + g * F.T @ P @ F
        if not np.all(np.isfinite(P_new)):
            raise LqgUnstableError("Riccati iteration diverged")
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P_new))):
            P = P_new
            break
        P = P_new
    else:
        raise LqgUnstableError("Riccati iteration did not converge")
    P = 0.5 * (P + P.T)
    c = noise_constant(lqg, P) if noise else 0.0
    return P, float(-lqg.s0 @ P @ lqg.s0 - c)


def noise_constant(lqg: LqgSpec, P) -> float:
    S = lqg.Sigma
    return float((np.trace(lqg.R @ S) + lqg.gamma * np.trace(lqg.B.T @ P @ lqg.B @ S))
                 / (1.0 - lqg.gamma))


def riccati_residual(lqg: LqgSpec, Theta, P) -> float:
    K = gain_matrix(lqg, Theta)
    F = lqg.A + lqg.B @ K
    return float(np.max(np.abs(lqg.Q + K.T @ lqg.R @ K + lqg.gamma * F.T @ P @ F - P)))


def lqg_return(lqg: LqgSpec, theta, noise: bool = True) -> float:
    return riccati_value(lqg, theta, noise)[1]


def lqg_true_gradient(lqg: LqgSpec, theta, noise: bool = True, step: float = 1e-6) -> np.ndarray:
    """Gradient of ``J`` in the diagonal gains by Richardson-extrapolated central differences."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = 1.0

        def d(h):
            return (lqg_return(lqg, theta + h * e, noise) - lqg_return(lqg, theta - h * e, noise)) / (2 * h)

        g[k] = (4.0 * d(step / 2) - d(step)) / 3.0
    return g


def lqg_q_oracle(lqg: LqgSpec, Theta, s, a, noise: bool = True):
    """``Q(s, a) = -(s^T Q s + a^T R a) + gamma V(A s + B a)`` for one pair or a batch."""
    P, _ = riccati_value(lqg, Theta, noise)
    c = noise_constant(lqg, P) if noise else 0.0
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    sn = s @ lqg.A.T + a @ lqg.B.T
    q = (-np.einsum("ij,jk,ik->i", s, lqg.Q, s) - np.einsum("ij,jk,ik->i", a, lqg.R, a)
         + lqg.gamma * (-np.einsum("ij,jk,ik->i", sn, P, sn) - c))
    return float(q[0]) if q.size == 1 else q


def lqg_q_action_gradient(lqg: LqgSpec, Theta, s, a, noise: bool = True) -> np.ndarray:
    """``dQ/da`` at each row of (s, a)."""
    P, _ = riccati_value(lqg, Theta, noise)
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    sn = s @ lqg.A.T + a @ lqg.B.T
    return -2.0 * a @ lqg.R - 2.0 * lqg.gamma * sn @ P @ lqg.B


def lqg_optimal_gain(lqg: LqgSpec) -> np.ndarray:
    """Gain of the optimal discounted controller (noise does not change it)."""
    g = lqg.gamma
    As, Bs = np.sqrt(g) * lqg.A, np.sqrt(g) * lqg.B
    P = scipy.linalg.solve_discrete_are(As, Bs, lqg.Q, lqg.R)
    return -np.linalg.solve(lqg.R + g * lqg.B.T @ P @ lqg.B, g * lqg.B.T @ P @ lqg.A)


def mix_behavior_policy(theta, theta_prime, alpha: float, sigma=None) -> Policy:
    """Gaussian linear-diagonal policy with gains ``(1-alpha) theta + alpha theta'``.

    ``sigma`` is the per-dimension noise std (defaults to ones).
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    theta = np.asarray(theta, dtype=float)
    gains = (1.0 - alpha) * theta + alpha * np.asarray(theta_prime, dtype=float)
    sigma = np.ones_like(theta) if sigma is None else np.asarray(sigma, dtype=float)
    layout = PolicyLayout(theta.size, theta.size, kind="stochastic", arch="linear_diag",
                          fixed_std=tuple(sigma))
    return Policy(layout, gains)


def linear_policy(theta, stochastic: bool = False, sigma=None) -> Policy:
    theta = np.asarray(theta, dtype=float)
    if stochastic:
        sigma = np.ones_like(theta) if sigma is None else np.asarray(sigma, dtype=float)
        return Policy(PolicyLayout(theta.size, theta.size, kind="stochastic", arch="linear_diag",
                                   fixed_std=tuple(sigma)), theta)
    return Policy(PolicyLayout(theta.size, theta.size, arch="linear_diag"), theta)


class LqgEnv(EnvModel):
    name = "lqg"

    def __init__(self, spec: LqgSpec | None = None):
        self.spec = paper_lqg() if spec is None else spec
        self.d_s, self.d_a, self.gamma = self.spec.d_s, self.spec.d_a, self.spec.gamma

    def reset(self, rng=None):
        return self.spec.s0.copy()

    def step(self, x, a, rng=None):
        sp = self.spec
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        r = -(x @ sp.Q @ x + a @ sp.R @ a)
        return sp.A @ x + sp.B @ a, float(r), sp.gamma

    def initial_distribution(self):
        return FixedState(self.spec.s0)


def lqg_mc_returns(lqg: LqgSpec, Theta, episodes: int, rng, horizon: int | None = None,
                   noise: bool = True) -> np.ndarray:
    """Discounted returns of ``episodes`` vectorized rollouts from ``s0``.

    The default horizon makes the truncated tail below 1e-12 of a step reward.
    """
    K = gain_matrix(lqg, Theta)
    T = horizon if horizon is not None else int(np.ceil(np.log(1e-12) / np.log(lqg.gamma))) + 1
    L = np.linalg.cholesky(lqg.Sigma) if noise else np.zeros_like(lqg.Sigma)
    s = np.tile(lqg.s0, (episodes, 1))
    ret = np.zeros(episodes)
    disc = 1.0
    for _ in range(T):
        a = s @ K.T + rng.standard_normal((episodes, lqg.d_a)) @ L.T
        r = -np.einsum("ij,jk,ik->i", s, lqg.Q, s) - np.einsum("ij,jk,ik->i", a, lqg.R, a)
        ret += disc * r
        disc *= lqg.gamma
        s = s @ lqg.A.T + a @ lqg.B.T
    return ret
