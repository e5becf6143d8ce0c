"""Policy gradient of the NPBE return and the offline ADAM loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import NopgConfig
from .npbe import (NoiseBlock, NpbeSolution, StateLogitCache, effective_dataset,
                   initial_queries, make_noise_block, operator_blocks, responsibility_matrix,
                   solve_npbe)
from .rng import stream

# cache dense responsibility blocks between the solve and the gradient pass
# when they fit in this many entries
CACHE_ENTRIES = 1 << 24


class TrainingError(RuntimeError):
    """Optimization produced a non-finite objective."""


@dataclass(eq=False)
class GradientVector:
    """A gradient estimate with the return estimate it came with.

    ``solution`` is the NPBE solution for NOPG estimates; ``info`` carries
    estimator-specific diagnostics.
    """

    g: np.ndarray
    j_hat: float
    solution: NpbeSolution | None = field(default=None, repr=False)
    info: dict = field(default_factory=dict, repr=False)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.g))


def _action_cotangent(eps, coef, actions_data, actions_query, h_action):
    """d/da_l of sum_j coef_lj * eps_lj for softmax weights eps (m, n).

    ``coef`` may be (m, n) or (n,) (shared by all queries).
    """
    g = eps @ coef if coef.ndim == 1 else np.einsum("ij,ij->i", eps, coef)
    w = eps * (coef - g[:, None])
    # sum_j w_lj (a_j - a_l) / h^2
    return (w @ actions_data - w.sum(axis=1)[:, None] * actions_query) / h_action**2


def _gradient_terms(data, kernels, policy, noise, op, q, mu, terms=("eps0", "operator"),
                    blocks=None, cache=None):
    """Reverse pass for g = d(eps0)^T q + mu^T dP q with q, mu held fixed.

    ``blocks`` are responsibility blocks kept from the operator build; they
    are recomputed when absent.
    """
    h_a = kernels.h_action
    states, cot_m, cot_s = [], [], []

    def push(S, Z, dA):
        states.append(S)
        cot_m.append(dA)
        cot_s.append(dA * Z)

    if "eps0" in terms:
        Sq, Aq, Zq = initial_queries(policy, noise)
        eps = responsibility_matrix(data, kernels, Sq, Aq)
        push(Sq, Zq, _action_cotangent(eps, q / Sq.shape[0], data.actions, Aq, h_a))

    if "operator" in terms and op.active.size:
        per_row = noise.next_action.shape[1] * noise.next_action.shape[2]
        gam = data.discounts
        # position of each active row inside op.support
        where = np.empty(data.n, dtype=np.int64)
        where[op.active] = np.arange(op.active.size)
        if blocks is None:
            blocks = operator_blocks(data, kernels, policy, noise, op.active, cache)
        for rows, Sq, Aq, Zq, eps in blocks:
            pos = where[rows]
            idx = op.support[pos]
            U = op.kept_mass[pos]
            qk = q[idx]
            qbar = np.einsum("ij,ij->i", op.kept_u[pos], qk) / U
            scale = mu[rows] * gam[rows] / U
            coef = np.zeros((rows.size, data.n))
            np.put_along_axis(coef, idx, scale[:, None] * (qk - qbar[:, None]) / per_row, axis=1)
            coef = np.repeat(coef, per_row, axis=0)
            push(Sq, Zq, _action_cotangent(eps, coef, data.actions, Aq, h_a))

    if not states:
        return np.zeros(policy.theta.size)
    S = np.concatenate(states)
    dA = np.concatenate(cot_m)
    dZ = np.concatenate(cot_s) if policy.stochastic else None
    return policy.vjp(S, dA, dZ)


def nopg_gradient(dataset, kernels, policy, config: NopgConfig | None = None, mu0=None,
                  noise: NoiseBlock | None = None, solution: NpbeSolution | None = None,
                  terms=("eps0", "operator"), x0_q=None, x0_mu=None,
                  cache: StateLogitCache | None = None) -> GradientVector:
    """Full gradient of the estimated return ``eps0 @ (I - P)^-1 r``.

    Both the initial-responsibility term and the operator term are included
    unless ``terms`` restricts them (``("eps0",)`` gives the semi-gradient).
    ``cache`` reuses policy-independent state logits across calls.
    """
    config = NopgConfig() if config is None else config
    data = effective_dataset(dataset, config)
    blocks = None
    if solution is None:
        per_row = config.n_phi_mc * (config.n_pi_mc if policy.stochastic else 1)
        if "operator" in terms and per_row * data.n * data.n <= CACHE_ENTRIES:
            blocks = []
        solution = solve_npbe(dataset, kernels, policy, config, mu0, noise, x0_q, x0_mu,
                              cache=cache, keep_blocks=blocks)
    g = _gradient_terms(data, kernels, policy, solution.noise, solution.operator,
                        solution.q, solution.mu, terms, blocks, cache)
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient")
    return GradientVector(g, solution.j_hat, solution)


def surrogate_objective(dataset, kernels, policy, config: NopgConfig | None = None, mu0=None,
                        frozen: NpbeSolution | None = None) -> float:
    """``eps0(theta) @ q + mu @ (P(theta) - P_frozen) @ q`` with ``q, mu`` frozen.

    Without ``frozen`` the solution at ``policy`` is used, so the value equals
    the estimated return; with a solution from a nearby policy its gradient in
    ``theta`` is the full NPBE gradient.
    """
    from .npbe import build_transition_operator

    config = NopgConfig() if config is None else config
    data = effective_dataset(dataset, config)
    if frozen is None:
        return solve_npbe(dataset, kernels, policy, config, mu0).j_hat
    noise = frozen.noise
    Sq, Aq, _ = initial_queries(policy, noise)
    eps0 = responsibility_matrix(data, kernels, Sq, Aq).mean(axis=0)
    op = build_transition_operator(data, kernels, policy, config.k_sparse, noise=noise)
    dP = op.matrix - frozen.operator.matrix
    return float(eps0 @ frozen.q + frozen.mu @ (dP @ frozen.q))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(theta, g, state: AdamState, lr: float = 1e-2, betas=(0.9, 0.999),
              eps: float = 1e-8, maximize: bool = True):
    """One ADAM update; ascends ``g`` when ``maximize`` is true.

    Returns the new parameters and a new state (inputs are not modified).
    """
    b1, b2 = betas
    g = np.asarray(g, dtype=float)
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    step = lr * m_hat / (np.sqrt(v_hat) + eps)
    theta = np.asarray(theta, dtype=float)
    return (theta + step if maximize else theta - step), AdamState(m, v, t)


HISTORY_COLUMNS = ("iter", "j_hat", "grad_norm", "cg_iters_q", "cg_iters_mu", "clipped")


def std_multiplier(config: NopgConfig, it: int) -> float:
    start, end = config.std_schedule
    if config.policy_updates <= 1:
        return start
    return start + (end - start) * it / (config.policy_updates - 1)


def _needs_fresh_noise(policy, mu0, config) -> bool:
    from .npbe import FixedState

    return policy.stochastic or config.n_phi_mc > 1 or not isinstance(mu0, FixedState)


def train(dataset, kernels, policy0, config: NopgConfig, mu0, callbacks=()):
    """Run ``config.policy_updates`` ADAM ascent steps on the NPBE return.

    Returns the final policy and a list of per-iteration history records
    (values recorded at the parameters before each update).
    """
    policy = policy0
    history = []
    state = AdamState.zeros(policy.theta.size)
    data = effective_dataset(dataset, config)
    noise = None
    x0_q = x0_mu = None
    solve_cfg = config.replace(gamma=None)
    cache = StateLogitCache(data, kernels)
    for it in range(config.policy_updates):
        if policy.stochastic:
            policy = policy.with_theta(policy.theta, std_multiplier(config, it))
        if noise is None or _needs_fresh_noise(policy, mu0, config):
            noise = make_noise_block(data, policy, mu0, config.n_pi_mc, config.n_phi_mc,
                                     config.n_mu0_mc, int(stream(config.seed, "noise", it).integers(2**31)))
        gv = nopg_gradient(data, kernels, policy, solve_cfg, mu0, noise,
                           x0_q=x0_q if config.warm_start else None,
                           x0_mu=x0_mu if config.warm_start else None, cache=cache)
        if not np.isfinite(gv.j_hat):
            raise TrainingError(f"non-finite estimated return at iteration {it}")
        g = gv.g
        clipped = False
        if config.grad_clip is not None and gv.norm > config.grad_clip:
            g = g * (config.grad_clip / gv.norm)
            clipped = True
        stats = gv.solution.cg_stats
        record = {"iter": it, "j_hat": gv.j_hat, "grad_norm": gv.norm,
                  "cg_iters_q": stats["q"][0], "cg_iters_mu": stats["mu"][0],
                  "clipped": int(clipped)}
        history.append(record)
        x0_q, x0_mu = gv.solution.q, gv.solution.mu
        theta, state = adam_step(policy.theta, g, state, config.learning_rate,
                                 (config.beta1, config.beta2), config.eps_adam)
        policy = policy.with_theta(theta)
        for cb in callbacks:
            cb(it, policy, record)
    return policy, history


def save_history(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for rec in history:
            fh.write(",".join(repr(rec[c]) if isinstance(rec[c], float) else str(rec[c])
                              for c in HISTORY_COLUMNS) + "\n")
