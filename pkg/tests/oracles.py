"""Independent dense reference computations used as test oracles.

Everything here is written from the model equations with explicit loops and
dense linear algebra, and accepts complex parameters so that complex-step
differentiation gives derivatives at machine precision.
"""

from __future__ import annotations

import numpy as np


def ref_policy(layout, theta, S):
    """Mean and std of the policy at states ``S`` (complex-safe)."""
    S = np.atleast_2d(S)
    theta = np.asarray(theta)
    off = 0

    def take(*shape):
        nonlocal off
        size = int(np.prod(shape))
        out = theta[off:off + size].reshape(shape)
        off += size
        return out

    if layout.arch == "linear_diag":
        th = take(layout.d_s)
        mean = S * th
        std = None if layout.kind == "deterministic" else np.tile(layout.fixed_std, (S.shape[0], 1))
        return mean, std
    if layout.arch == "affine":
        W, b = take(layout.d_a, layout.d_s), take(layout.d_a)
        mean = S @ W.T + b
        std = None if layout.kind == "deterministic" else np.tile(layout.fixed_std, (S.shape[0], 1))
        return mean, std
    H = layout.hidden
    W1, b1 = take(H, layout.d_s), take(H)
    W2, b2 = take(layout.d_a, H), take(layout.d_a)
    z1 = S @ W1.T + b1
    h1 = np.where(z1.real > 0, z1, 0)
    mean = layout.action_scale * np.tanh(h1 @ W2.T + b2)
    std = None
    if layout.kind == "stochastic":
        W2s, b2s = take(layout.d_a, H), take(layout.d_a)
        std = 1.0 / (1.0 + np.exp(-(h1 @ W2s.T + b2s)))
    return mean, std


def ref_eps(S, A, s, a, h_s, h_a):
    """Normalized product-kernel weights of one query (s, a) over data (S, A)."""
    n = S.shape[0]
    logit = np.zeros(n, dtype=np.result_type(s, a, complex))
    for j in range(n):
        logit[j] = (-0.5 * np.sum(((s - S[j]) / h_s) ** 2)
                    - 0.5 * np.sum(((a - A[j]) / h_a) ** 2))
    logit = logit - logit.real.max()
    w = np.exp(logit)
    return w / w.sum()


def ref_select(u, k):
    order = sorted(range(u.size), key=lambda j: (-u[j].real, j))
    return sorted(order[:k])


def ref_operator(data, h_s, h_a, h_n, layout, theta, noise, k):
    n = data.n
    _, n_phi, n_pi, _ = noise.next_action.shape
    P = np.zeros((n, n), dtype=complex)
    for i in range(n):
        if data.discounts[i] == 0:
            continue
        u = np.zeros(n, dtype=P.dtype)
        for l in range(n_phi):
            sq = data.next_states[i].copy()
            if noise.next_state is not None:
                sq = sq + h_n * noise.next_state[i, l]
            mean, std = ref_policy(layout, theta, sq[None, :])
            for m in range(n_pi):
                a = mean[0] if std is None else mean[0] + std[0] * noise.next_action[i, l, m]
                u = u + ref_eps(data.states, data.actions, sq, a, h_s, h_a)
        u = u / (n_phi * n_pi)
        keep = ref_select(u, k)
        mass = u[keep].sum()
        for j in keep:
            P[i, j] = data.discounts[i] * u[j] / mass * u.sum()
    return P


def ref_eps0(data, h_s, h_a, layout, theta, noise):
    n0, n_pi, _ = noise.init_action.shape
    out = 0
    for l in range(n0):
        s = noise.init_states[l]
        mean, std = ref_policy(layout, theta, s[None, :])
        for m in range(n_pi):
            a = mean[0] if std is None else mean[0] + std[0] * noise.init_action[l, m]
            out = out + ref_eps(data.states, data.actions, s, a, h_s, h_a)
    return out / (n0 * n_pi)


def ref_return(data, kernels, layout, theta, noise, k=None):
    """Estimated return eps0^T (I - P)^-1 r by dense solve."""
    k = data.n if k is None else k
    h_s, h_a, h_n = kernels.h_state, kernels.h_action, kernels.h_next
    P = ref_operator(data, h_s, h_a, h_n, layout, theta, noise, k)
    e0 = ref_eps0(data, h_s, h_a, layout, theta, noise)
    q = np.linalg.solve(np.eye(data.n) - P, data.rewards.astype(P.dtype))
    return e0 @ q


def ref_surrogate(data, kernels, layout, theta, noise, q, mu, P_frozen, k=None):
    k = data.n if k is None else k
    h_s, h_a, h_n = kernels.h_state, kernels.h_action, kernels.h_next
    P = ref_operator(data, h_s, h_a, h_n, layout, theta, noise, k)
    e0 = ref_eps0(data, h_s, h_a, layout, theta, noise)
    return e0 @ q + mu @ ((P - P_frozen) @ q)


def complex_step_grad(f, theta, h=1e-30):
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for p in range(theta.size):
        t = theta.astype(complex)
        t[p] += 1j * h
        g[p] = np.imag(f(t)) / h
    return g


def richardson_fd_grad(f, theta, h=1e-4):
    """Central differences at steps h and h/2, combined to cancel the h^2 term."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for p in range(theta.size):
        e = np.zeros_like(theta)
        e[p] = 1.0
        d1 = (f(theta + h * e) - f(theta - h * e)) / (2 * h)
        d2 = (f(theta + h / 2 * e) - f(theta - h / 2 * e)) / h
        g[p] = (4 * d2 - d1) / 3
    return g


def dense_npbe(P, r, eps0):
    lam = np.eye(P.shape[0]) - P
    return np.linalg.solve(lam, r), np.linalg.solve(lam.T, eps0)
