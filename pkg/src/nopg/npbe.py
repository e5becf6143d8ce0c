"""Nonparametric Bellman equation on a transition dataset.

Given kernels over states, actions and next states, a policy induces

* responsibilities ``eps(s) = softmax_i(log psi_i(s) + log phi_i(pi(s)))``,
* a substochastic operator ``P`` whose row ``i`` is ``gamma_i * eps(s'_i)``,
* value weights ``q = (I - P)^-1 r`` and state weights ``mu = (I - P)^-T eps0``.

The estimated return is ``eps0 @ q`` and the value of a state is ``eps(s) @ q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .kernel import KernelModel, log_kernel_matrix
from .rng import stream

# entries per dense responsibility block (rows x samples x n)
CHUNK_ENTRIES = 1 << 22


class SolverError(RuntimeError):
    """Linear solve produced non-finite values."""


# initial-state distributions

@dataclass(frozen=True, eq=False)
class FixedState:
    """Point-mass initial distribution at ``state``."""

    state: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float).reshape(-1))

    def draw(self, rng, m: int) -> np.ndarray:
        return np.tile(self.state, (m, 1))

    def density(self, s) -> np.ndarray:
        # a point mass has no density part
        s = np.atleast_2d(s)
        return np.zeros(s.shape[0])


@dataclass(frozen=True, eq=False)
class StateSampler:
    """Initial distribution given by a draw function ``draw(rng, m) -> (m, d_s)``.

    ``density`` is optional and only used by :func:`state_distribution_at`.
    """

    sample: Callable
    density_fn: Callable | None = None

    def draw(self, rng, m: int) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.sample(rng, m), dtype=float))

    def density(self, s) -> np.ndarray:
        s = np.atleast_2d(s)
        if self.density_fn is None:
            raise ValueError("this sampler has no density")
        return np.asarray(self.density_fn(s), dtype=float).reshape(s.shape[0])


# frozen Monte-Carlo noise

@dataclass(frozen=True, eq=False)
class NoiseBlock:
    """All random numbers used by one NPBE evaluation.

    Attributes
    ----------
    init_states : ndarray, shape (n_mu0, d_s)
    init_action : ndarray, shape (n_mu0, n_pi, d_a)
    next_state : ndarray or None, shape (n, n_phi, d_s)
        Standard-normal offsets in units of ``h_next``; None means the kernel
        mean ``s'_i`` is used directly.
    next_action : ndarray, shape (n, n_phi, n_pi, d_a)
    """

    init_states: np.ndarray
    init_action: np.ndarray
    next_state: np.ndarray | None
    next_action: np.ndarray


def make_noise_block(dataset, policy, mu0, n_pi_mc: int = 1, n_phi_mc: int = 1,
                     n_mu0_mc: int = 1, seed: int = 0) -> NoiseBlock:
    n_pi = n_pi_mc if policy.stochastic else 1
    if isinstance(mu0, FixedState):
        init_states = mu0.state[None, :]
    else:
        if n_mu0_mc < 1:
            raise ValueError("n_mu0_mc must be >= 1")
        init_states = mu0.draw(stream(seed, "mu0"), n_mu0_mc)
    d_a, n = policy.d_a, dataset.n
    a_rng = stream(seed, "pi")
    init_action = a_rng.standard_normal((init_states.shape[0], n_pi, d_a))
    next_state = None
    if n_phi_mc > 1:
        next_state = stream(seed, "phi").standard_normal((n, n_phi_mc, dataset.d_s))
    next_action = a_rng.standard_normal((n, n_phi_mc, n_pi, d_a))
    if not policy.stochastic:
        init_action = np.zeros_like(init_action)
        next_action = np.zeros_like(next_action)
    return NoiseBlock(init_states, init_action, next_state, next_action)


# responsibilities

def responsibility_matrix(dataset, kernels: KernelModel, states, actions,
                          state_logits=None) -> np.ndarray:
    """Normalized kernel weights ``eps(s_l, a_l)`` for query pairs, shape (m, n).

    ``state_logits`` may supply precomputed ``log psi_j(s_l)`` values.
    """
    if state_logits is None:
        state_logits = log_kernel_matrix(states, dataset.states, kernels.h_state)
    logits = state_logits + log_kernel_matrix(actions, dataset.actions, kernels.h_action)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w


def _policy_actions(policy, states, noise):
    """Actions at ``states`` (m, d_s) with noise (m, d_a)."""
    mean, std = policy.mean_std(states)
    if std is None:
        return mean
    return mean + std * noise


def responsibilities_at(dataset, kernels, policy, s, n_pi_mc: int = 1, noise=None) -> np.ndarray:
    """Policy responsibilities ``eps_pi(s)`` for one state or a batch.

    For stochastic policies the result is the mean over ``n_pi_mc``
    reparameterized draws; ``noise`` has shape (n_pi_mc, d_a) for one state or
    (m, n_pi_mc, d_a) for a batch. Without ``noise`` a fixed stream is used.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    S = np.atleast_2d(s)
    m = S.shape[0]
    if not policy.stochastic:
        out = responsibility_matrix(dataset, kernels, S, policy.mean(S))
        return out[0] if single else out
    if noise is None:
        noise = stream(0, "responsibilities").standard_normal((m, n_pi_mc, policy.d_a))
    noise = np.asarray(noise, dtype=float).reshape(m, -1, policy.d_a)
    L = noise.shape[1]
    Sq = np.repeat(S, L, axis=0)
    Aq = _policy_actions(policy, Sq, noise.reshape(m * L, -1))
    eps = responsibility_matrix(dataset, kernels, Sq, Aq).reshape(m, L, -1).mean(axis=1)
    return eps[0] if single else eps


def initial_queries(policy, noise: NoiseBlock):
    """Query states, actions and std-noise for the initial responsibilities."""
    n0, n_pi, d_a = noise.init_action.shape
    Sq = np.repeat(noise.init_states, n_pi, axis=0)
    Zq = noise.init_action.reshape(n0 * n_pi, d_a)
    return Sq, _policy_actions(policy, Sq, Zq), Zq


def initial_responsibilities(dataset, kernels, policy, mu0, n_mu0_mc: int = 1, seed: int = 0,
                             n_pi_mc: int = 1, noise: NoiseBlock | None = None) -> np.ndarray:
    """``eps0 = E_{s ~ mu0}[eps_pi(s)]`` by Monte Carlo (exact for a fixed state)."""
    if noise is None:
        noise = make_noise_block(dataset, policy, mu0, n_pi_mc, 1, n_mu0_mc, seed)
    Sq, Aq, _ = initial_queries(policy, noise)
    return responsibility_matrix(dataset, kernels, Sq, Aq).mean(axis=0)


# transition operator

def topk_lower_index(u: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest entries per row, ties to lower index.

    Returns an (m, k) integer array with indices ascending within each row.
    """
    m, n = u.shape
    if k >= n:
        return np.tile(np.arange(n), (m, 1))
    kth = -np.partition(-u, k - 1, axis=1)[:, k - 1]
    gt = u > kth[:, None]
    eq = u == kth[:, None]
    need = k - gt.sum(axis=1)
    sel = gt | (eq & (np.cumsum(eq, axis=1) <= need[:, None]))
    return np.nonzero(sel)[1].reshape(m, k)


@dataclass(eq=False)
class TransitionOperator:
    """Sparse substochastic operator with the data needed for its derivative.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix, shape (n, n)
    row_discount : ndarray, shape (n,)
    k : int
        Entries kept per row.
    active : ndarray of int
        Rows with nonzero discount (the only rows with entries).
    support : ndarray, shape (len(active), k)
        Kept column indices of each active row.
    kept_mass : ndarray, shape (len(active),)
        Sum of the untruncated responsibilities over the kept columns.
    kept_u : ndarray, shape (len(active), k)
        Untruncated averaged responsibilities on the kept columns.
    """

    matrix: sp.csr_matrix
    row_discount: np.ndarray
    k: int
    active: np.ndarray
    support: np.ndarray
    kept_mass: np.ndarray
    kept_u: np.ndarray
    _transpose: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def T(self) -> sp.csr_matrix:
        if self._transpose is None:
            self._transpose = self.matrix.T.tocsr()
        return self._transpose

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).reshape(-1)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def next_queries(dataset, kernels, policy, noise: NoiseBlock, rows: np.ndarray):
    """Query states, actions and std-noise for operator rows ``rows``.

    Returns arrays with ``len(rows) * n_phi * n_pi`` rows ordered row-major by
    (row, phi sample, pi sample).
    """
    _, n_phi, n_pi, d_a = noise.next_action.shape
    base = dataset.next_states[rows]
    if noise.next_state is None:
        S = np.repeat(base[:, None, :], n_phi, axis=1)
    else:
        S = base[:, None, :] + noise.next_state[rows] * kernels.h_next
    Sq = np.repeat(S.reshape(-1, dataset.d_s), n_pi, axis=0)
    Zq = noise.next_action[rows].reshape(-1, d_a)
    return Sq, _policy_actions(policy, Sq, Zq), Zq


class StateLogitCache:
    """Memoized state-kernel logits at the next states ``s'_i``.

    These do not depend on the policy, so they can be reused across the
    evaluations of a training run whenever next-state queries sit at the
    kernel means (``n_phi_mc = 1``).
    """

    def __init__(self, dataset, kernels, max_entries: int = 1 << 23):
        self.dataset = dataset
        self.kernels = kernels
        self.enabled = dataset.n * dataset.n <= max_entries
        self._full = None

    def next_rows(self, rows, per_row):
        if not self.enabled:
            return None
        if self._full is None:
            d = self.dataset
            self._full = log_kernel_matrix(d.next_states, d.states, self.kernels.h_state)
        block = self._full[rows]
        return block if per_row == 1 else np.repeat(block, per_row, axis=0)


def operator_blocks(dataset, kernels, policy, noise: NoiseBlock, active, cache=None):
    """Yield ``(rows, S, A, Z, eps)`` responsibility blocks for operator rows."""
    per_row = noise.next_action.shape[1] * noise.next_action.shape[2]
    use_cache = cache is not None and noise.next_state is None
    for rows in row_chunks(active, per_row, dataset.n):
        Sq, Aq, Zq = next_queries(dataset, kernels, policy, noise, rows)
        sl = cache.next_rows(rows, per_row) if use_cache else None
        yield rows, Sq, Aq, Zq, responsibility_matrix(dataset, kernels, Sq, Aq, sl)


def row_chunks(active: np.ndarray, per_row: int, n: int):
    """Split ``active`` rows into blocks of bounded dense size."""
    block = max(1, CHUNK_ENTRIES // max(1, per_row * n))
    for start in range(0, active.size, block):
        yield active[start:start + block]


def build_transition_operator(dataset, kernels, policy, k_sparse: int | None = None,
                              n_phi_mc: int = 1, n_pi_mc: int = 1,
                              noise: NoiseBlock | None = None, mu0=None,
                              seed: int = 0, cache: StateLogitCache | None = None,
                              keep_blocks: list | None = None) -> TransitionOperator:
    """Assemble the truncated operator ``P``.

    Row ``i`` is ``gamma_i`` times the responsibilities at the next state
    (averaged over next-state and action samples), truncated to its ``k``
    largest entries and rescaled to keep the original row sum.

    If ``keep_blocks`` is a list, the dense responsibility blocks are
    appended to it for reuse by the gradient pass.
    """
    n = dataset.n
    k = n if k_sparse is None else int(k_sparse)
    if not 1 <= k <= n:
        raise ValueError(f"k_sparse must lie in [1, {n}], got {k}")
    if noise is None:
        noise = make_noise_block(dataset, policy, mu0 if mu0 is not None else
                                 FixedState(dataset.states[0]), n_pi_mc, n_phi_mc, 1, seed)
    gam = dataset.discounts
    active = np.flatnonzero(gam > 0)
    per_row = noise.next_action.shape[1] * noise.next_action.shape[2]
    support = np.empty((active.size, k), dtype=np.int64)
    kept_u = np.empty((active.size, k))
    pos = 0
    for block in operator_blocks(dataset, kernels, policy, noise, active, cache):
        rows, eps = block[0], block[4]
        if keep_blocks is not None:
            keep_blocks.append(block)
        u = eps.reshape(rows.size, per_row, n).mean(axis=1)
        idx = topk_lower_index(u, k)
        support[pos:pos + rows.size] = idx
        kept_u[pos:pos + rows.size] = np.take_along_axis(u, idx, axis=1)
        pos += rows.size
    kept_mass = kept_u.sum(axis=1)
    values = gam[active, None] * kept_u / kept_mass[:, None]
    counts = np.zeros(n, dtype=np.int64)
    counts[active] = k
    indptr = np.concatenate([[0], np.cumsum(counts)])
    matrix = sp.csr_matrix((values.reshape(-1), support.reshape(-1), indptr), shape=(n, n))
    return TransitionOperator(matrix, np.array(gam), k, active, support, kept_mass, kept_u)


def dump_operator(op: TransitionOperator, path) -> None:
    """Write nonzeros as ``i j value`` lines."""
    coo = op.matrix.tocoo()
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")


# conjugate gradient

@dataclass(frozen=True)
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool

    def __iter__(self):
        # allows ``x, iters, res = cg_solve(...)``
        return iter((self.x, self.iterations, self.residual))


def cg_solve(apply, rhs, tol: float = 1e-10, max_iter: int | None = None,
             apply_transpose=None, x0=None, method: str | None = None) -> CgResult:
    """Krylov solve of ``A x = b`` with a relative residual target.

    ``method`` selects the iteration:

    ``"cg"``
        Plain conjugate gradient; ``A`` must be symmetric positive definite.
    ``"cgls"``
        CG on the normal equations ``A^T A x = A^T b`` (needs
        ``apply_transpose``); works for any nonsingular ``A``.
    ``"bicgstab"``
        Stabilized bi-conjugate gradient for nonsymmetric ``A``.

    By default CGLS is used when ``apply_transpose`` is given and CG
    otherwise. The reported residual is always ``||b - A x|| / ||b||``.
    """
    if method is None:
        method = "cg" if apply_transpose is None else "cgls"
    if method not in ("cg", "cgls", "bicgstab"):
        raise ValueError(f"unknown method {method!r}")
    if method == "cgls" and apply_transpose is None:
        raise ValueError("cgls needs apply_transpose")
    b = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise SolverError("non-finite right-hand side")
    if not tol > 0:
        raise ValueError("tol must be positive")
    n = b.size
    max_iter = 10 * n if max_iter is None else int(max_iter)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return CgResult(np.zeros(n), 0, 0.0, True)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - apply(x) if x0 is not None else b.copy()
    target = tol * bnorm
    it = 0
    if method == "cg":
        p = r.copy()
        rs = r @ r
        while np.sqrt(rs) > target and it < max_iter:
            Ap = apply(p)
            alpha = rs / (p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            rs_new = r @ r
            p = r + (rs_new / rs) * p
            rs = rs_new
            it += 1
            if not np.isfinite(rs):
                raise SolverError("non-finite values during CG")
    elif method == "bicgstab":
        x, it = _bicgstab(apply, x, r, target, max_iter)
        r = b - apply(x)
        if np.linalg.norm(r) > target and apply_transpose is not None and it < max_iter:
            # breakdown or divergence: finish with CGLS from the best iterate
            x, extra = _cgls(apply, apply_transpose, x, r, target, max_iter - it)
            it += extra
    else:
        x, it = _cgls(apply, apply_transpose, x, r, target, max_iter)
    res = np.linalg.norm(b - apply(x)) / bnorm
    if not np.isfinite(res):
        raise SolverError("non-finite residual")
    return CgResult(x, it, float(res), bool(res <= tol))


def _cgls(apply, apply_transpose, x, r, target, max_iter):
    s = apply_transpose(r)
    p = s.copy()
    gamma = s @ s
    it = 0
    while np.linalg.norm(r) > target and it < max_iter and gamma > 0:
        Ap = apply(p)
        alpha = gamma / (Ap @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        s = apply_transpose(r)
        gamma_new = s @ s
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        it += 1
        if not np.isfinite(gamma):
            raise SolverError("non-finite values during CGLS")
    return x, it


def _bicgstab(apply, x, r, target, max_iter, diverge: float = 1e4):
    """BiCGSTAB iterations; returns the iterate with the smallest residual.

    Stops early when the residual grows beyond ``diverge`` times its
    starting norm.
    """
    r_hat = r.copy()
    r0 = np.linalg.norm(r)
    best_x, best_r = x.copy(), r0
    rho = alpha = omega = 1.0
    v = np.zeros_like(r)
    p = np.zeros_like(r)
    it = 0
    while it < max_iter:
        rnorm = np.linalg.norm(r)
        if rnorm < best_r:
            best_x, best_r = x.copy(), rnorm
        if rnorm <= target or rnorm > diverge * r0 or not np.isfinite(rnorm):
            break
        rho_new = r_hat @ r
        if rho_new == 0 or omega == 0:
            # breakdown: restart the shadow residual
            r_hat = r.copy()
            rho_new = r_hat @ r
            p = np.zeros_like(r)
            v = np.zeros_like(r)
            rho = alpha = omega = 1.0
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        v = apply(p)
        denom = r_hat @ v
        if denom == 0:
            break
        alpha = rho_new / denom
        h = x + alpha * p
        s = r - alpha * v
        it += 1
        if np.linalg.norm(s) <= target:
            x, r = h, s
            continue
        t = apply(s)
        tt = t @ t
        omega = (t @ s) / tt if tt > 0 else 0.0
        x = h + omega * s
        r = s - omega * t
        rho = rho_new
    rnorm = np.linalg.norm(r)
    if np.isfinite(rnorm) and rnorm < best_r:
        best_x = x
    return best_x, it


# solution

@dataclass(eq=False)
class NpbeSolution:
    q: np.ndarray
    mu: np.ndarray
    eps0: np.ndarray
    operator: TransitionOperator
    noise: NoiseBlock
    cg_stats: dict

    @property
    def j_hat(self) -> float:
        return float(self.eps0 @ self.q)


def effective_dataset(dataset, config):
    """Apply the optional discount override (terminal rows stay at 0)."""
    if config is None or config.gamma is None:
        return dataset
    disc = np.where(dataset.discounts > 0, config.gamma, 0.0)
    return dataset.with_discounts(disc)


def solve_linear(op: TransitionOperator, r, eps0, config=None, x0_q=None, x0_mu=None):
    """Solve ``(I-P) q = r`` and ``(I-P)^T mu = eps0``."""
    solver = "cg" if config is None else config.solver
    tol = 1e-10 if config is None else config.cg_tol
    max_iter = None if config is None else config.cg_max_iter
    if solver == "dense":
        lam = np.eye(op.n) - op.dense()
        q = np.linalg.solve(lam, r)
        mu = np.linalg.solve(lam.T, eps0)
        stats = {"q": (0, _rel_res(lam, q, r)), "mu": (0, _rel_res(lam.T, mu, eps0))}
        return q, mu, stats
    P, PT = op.matrix, op.T

    def lam(x):
        return x - P @ x

    def lam_t(x):
        return x - PT @ x

    method = "cgls" if solver == "cg" else solver
    rq = cg_solve(lam, r, tol, max_iter, lam_t, x0_q, method)
    rm = cg_solve(lam_t, eps0, tol, max_iter, lam, x0_mu, method)
    return rq.x, rm.x, {"q": (rq.iterations, rq.residual), "mu": (rm.iterations, rm.residual)}


def _rel_res(A, x, b):
    bn = np.linalg.norm(b)
    return 0.0 if bn == 0 else float(np.linalg.norm(b - A @ x) / bn)


def solve_npbe(dataset, kernels, policy, config=None, mu0=None, noise: NoiseBlock | None = None,
               x0_q=None, x0_mu=None, cache: StateLogitCache | None = None,
               keep_blocks: list | None = None) -> NpbeSolution:
    """Build ``P`` and ``eps0`` under frozen noise and solve for ``q`` and ``mu``.

    ``x0_q``/``x0_mu`` warm-start the iterative solves.
    """
    from .config import NopgConfig

    config = NopgConfig() if config is None else config
    if mu0 is None:
        raise ValueError("an initial-state distribution mu0 is required")
    kernels.check(dataset)
    data = effective_dataset(dataset, config)
    if noise is None:
        noise = make_noise_block(data, policy, mu0, config.n_pi_mc, config.n_phi_mc,
                                 config.n_mu0_mc, config.seed)
    op = build_transition_operator(data, kernels, policy, config.k_sparse, noise=noise,
                                   cache=cache, keep_blocks=keep_blocks)
    Sq, Aq, _ = initial_queries(policy, noise)
    eps0 = responsibility_matrix(data, kernels, Sq, Aq).mean(axis=0)
    q, mu, stats = solve_linear(op, data.rewards, eps0, config, x0_q, x0_mu)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(mu))):
        raise SolverError("non-finite NPBE solution")
    return NpbeSolution(q, mu, eps0, op, noise, stats)


# queries on a solution

def value_at(sol: NpbeSolution, dataset, kernels, policy, s, n_pi_mc: int = 1, noise=None):
    """``V(s) = eps_pi(s) @ q`` for one state or a batch."""
    return responsibilities_at(dataset, kernels, policy, s, n_pi_mc, noise) @ sol.q


def q_value_at(sol: NpbeSolution, dataset, kernels, s, a):
    """``Q(s, a) = eps(s, a) @ q`` for one pair or a batch."""
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    eps = responsibility_matrix(dataset, kernels, np.atleast_2d(s), np.atleast_2d(a))
    out = eps @ sol.q
    return float(out[0]) if single else out


def state_distribution_at(sol: NpbeSolution, dataset, kernels, mu0, s):
    """Discounted state density ``mu0(s) + sum_i gamma_i phi_i(s) mu_i``.

    A :class:`FixedState` contributes no density away from its point mass.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    S = np.atleast_2d(s)
    logk = log_kernel_matrix(S, dataset.next_states, kernels.h_next)
    w = dataset.discounts * sol.mu
    # mu >= 0 by its Neumann series; clip round-off
    out = _weighted_exp_sum(logk, np.clip(w, 0, None)) + mu0.density(S)
    return float(out[0]) if single else out


def _weighted_exp_sum(logk, w):
    if not np.any(w > 0):
        return np.zeros(logk.shape[0])
    with np.errstate(divide="ignore"):
        return np.exp(logsumexp(logk + np.log(w), axis=1))
