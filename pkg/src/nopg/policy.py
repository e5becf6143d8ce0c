"""Small differentiable policies with hand-written reverse-mode gradients.

Three architectures share one interface:

``mlp``
    One hidden ReLU layer. Mean ``scale * tanh(W2 relu(W1 s + b1) + b2)``;
    the stochastic variant adds a sigmoid std head on the same hidden layer.
``linear_diag``
    ``a = theta * s`` (requires ``d_a == d_s``), optionally with fixed std.
``affine``
    ``a = W s + b``, optionally with fixed std.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .kernel import LOG_SQRT_2PI

KINDS = ("deterministic", "stochastic")
ARCHS = ("mlp", "linear_diag", "affine")


@dataclass(frozen=True)
class PolicyLayout:
    d_s: int
    d_a: int
    hidden: int = 50
    kind: str = "deterministic"
    arch: str = "mlp"
    action_scale: float = 1.0
    fixed_std: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.d_s < 1 or self.d_a < 1 or self.hidden < 1:
            raise ValueError("dimensions must be positive")
        if not self.action_scale > 0:
            raise ValueError("action_scale must be positive")
        if self.arch == "linear_diag" and self.d_a != self.d_s:
            raise ValueError("linear_diag policies need d_a == d_s")
        if self.arch != "mlp" and self.kind == "stochastic":
            if self.fixed_std is None or len(self.fixed_std) != self.d_a:
                raise ValueError("stochastic linear policies need fixed_std of length d_a")
            if any(s <= 0 for s in self.fixed_std):
                raise ValueError("fixed_std must be positive")
            object.__setattr__(self, "fixed_std", tuple(float(s) for s in self.fixed_std))

    @property
    def stochastic(self) -> bool:
        return self.kind == "stochastic"

    @property
    def learned_std(self) -> bool:
        return self.stochastic and self.arch == "mlp"

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.arch == "linear_diag":
            return [("theta", (self.d_s,))]
        if self.arch == "affine":
            return [("W", (self.d_a, self.d_s)), ("b", (self.d_a,))]
        h = self.hidden
        out = [("W1", (h, self.d_s)), ("b1", (h,)),
               ("W2", (self.d_a, h)), ("b2", (self.d_a,))]
        if self.stochastic:
            out += [("W2s", (self.d_a, h)), ("b2s", (self.d_a,))]
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.shapes():
            size = int(np.prod(shape))
            out[name] = slice(start, start + size)
            start += size
        return out


class ActionSample(NamedTuple):
    action: np.ndarray
    noise: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Policy:
    """Parameter vector plus layout; all methods accept one state or a batch.

    Parameters
    ----------
    layout : PolicyLayout
    theta : array_like
        Flat parameter vector of length ``layout.n_params``.
    std_scale : float
        Multiplier applied to the std head (used by variance-decay schedules).
    """

    def __init__(self, layout: PolicyLayout, theta, std_scale: float = 1.0):
        theta = np.array(theta, dtype=float, copy=True).reshape(-1)
        if theta.size != layout.n_params:
            raise ValueError(f"theta has {theta.size} entries, layout needs {layout.n_params}")
        theta.flags.writeable = False
        self.layout = layout
        self.theta = theta
        self.std_scale = float(std_scale)

    def __repr__(self):
        return f"Policy({self.layout}, n_params={self.theta.size})"

    @property
    def stochastic(self) -> bool:
        return self.layout.stochastic

    @property
    def d_a(self) -> int:
        return self.layout.d_a

    def with_theta(self, theta, std_scale: float | None = None) -> "Policy":
        return Policy(self.layout, theta, self.std_scale if std_scale is None else std_scale)

    def params(self) -> dict[str, np.ndarray]:
        lay = self.layout
        return {name: self.theta[sl].reshape(shape)
                for (name, shape), sl in zip(lay.shapes(), lay.slices().values())}

    def _batch(self, s):
        s = np.asarray(s, dtype=float)
        single = s.ndim == 1
        s = np.atleast_2d(s)
        if s.shape[1] != self.layout.d_s:
            raise ValueError(f"state has dimension {s.shape[1]}, policy expects {self.layout.d_s}")
        return s, single

    def _forward(self, s):
        lay, p = self.layout, self.params()
        cache = {"s": s}
        if lay.arch == "linear_diag":
            mean = s * p["theta"]
        elif lay.arch == "affine":
            mean = s @ p["W"].T + p["b"]
        else:
            z1 = s @ p["W1"].T + p["b1"]
            h1 = np.maximum(z1, 0.0)
            t = np.tanh(h1 @ p["W2"].T + p["b2"])
            mean = lay.action_scale * t
            cache.update(z1=z1, h1=h1, t=t)
        if not lay.stochastic:
            std = None
        elif lay.arch == "mlp":
            sig = _sigmoid(cache["h1"] @ p["W2s"].T + p["b2s"])
            std = self.std_scale * sig
            cache["sig"] = sig
        else:
            std = np.broadcast_to(self.std_scale * np.asarray(lay.fixed_std), mean.shape)
        return mean, std, cache

    def mean(self, s) -> np.ndarray:
        s, single = self._batch(s)
        m, _, _ = self._forward(s)
        return m[0] if single else m

    def std(self, s) -> np.ndarray:
        if not self.stochastic:
            raise TypeError("deterministic policy has no std")
        s, single = self._batch(s)
        _, sd, _ = self._forward(s)
        return np.array(sd[0] if single else sd)

    def mean_std(self, s):
        s, single = self._batch(s)
        m, sd, _ = self._forward(s)
        if single:
            return m[0], (None if sd is None else np.array(sd[0]))
        return m, (None if sd is None else np.array(sd))

    def sample(self, s, noise) -> ActionSample:
        """Reparameterized draw ``mean + std * noise``."""
        if not self.stochastic:
            raise TypeError("sample() requires a stochastic policy")
        m, sd = self.mean_std(s)
        noise = np.asarray(noise, dtype=float)
        if noise.shape != m.shape:
            raise ValueError(f"noise shape {noise.shape} does not match action shape {m.shape}")
        return ActionSample(m + sd * noise, noise)

    def act(self, s, rng=None) -> np.ndarray:
        """Mean action for deterministic policies, a random draw otherwise."""
        if not self.stochastic or rng is None:
            return self.mean(s)
        m, sd = self.mean_std(s)
        return m + sd * rng.standard_normal(np.shape(m))

    def log_prob(self, s, a):
        """Diagonal Gaussian log-density of ``a`` (summed over action dims)."""
        if not self.stochastic:
            raise TypeError("log_prob() requires a stochastic policy")
        m, sd = self.mean_std(s)
        a = np.asarray(a, dtype=float)
        z = (a - m) / sd
        return np.sum(-0.5 * z * z - np.log(sd) - LOG_SQRT_2PI, axis=-1)

    def vjp(self, s, cot_mean, cot_std=None, per_sample: bool = False) -> np.ndarray:
        """Reverse-mode product of cotangents with the output Jacobian.

        Parameters
        ----------
        s : array_like, shape (m, d_s) or (d_s,)
        cot_mean : array_like, same leading shape as the actions
        cot_std : array_like, optional
            Cotangent for the std output (stochastic policies only).
        per_sample : bool
            Return one gradient row per state instead of the sum.

        Returns
        -------
        ndarray, shape (n_params,) or (m, n_params)
        """
        s, _ = self._batch(s)
        mean, _, c = self._forward(s)
        gm = np.asarray(cot_mean, dtype=float).reshape(mean.shape)
        gs = None
        if cot_std is not None:
            if not self.stochastic:
                raise ValueError("std cotangent given for a deterministic policy")
            gs = np.asarray(cot_std, dtype=float).reshape(mean.shape)
        lay, p = self.layout, self.params()
        sl = lay.slices()
        m = s.shape[0]
        out = np.zeros((m, lay.n_params)) if per_sample else np.zeros(lay.n_params)

        def put(name, rows):
            # rows has shape (m, *param_shape)
            if per_sample:
                out[:, sl[name]] = rows.reshape(m, -1)
            else:
                out[sl[name]] = rows.sum(axis=0).reshape(-1)

        if lay.arch == "linear_diag":
            put("theta", gm * s)
            return out
        if lay.arch == "affine":
            put("W", gm[:, :, None] * s[:, None, :])
            put("b", gm)
            return out

        dzm = gm * lay.action_scale * (1.0 - c["t"] ** 2)
        dh1 = dzm @ p["W2"]
        h1 = c["h1"]
        if per_sample:
            put("W2", dzm[:, :, None] * h1[:, None, :])
            put("b2", dzm)
        else:
            out[sl["W2"]] = (dzm.T @ h1).reshape(-1)
            out[sl["b2"]] = dzm.sum(axis=0)
        if gs is not None and lay.learned_std:
            sig = c["sig"]
            dzs = gs * self.std_scale * sig * (1.0 - sig)
            dh1 = dh1 + dzs @ p["W2s"]
            if per_sample:
                put("W2s", dzs[:, :, None] * h1[:, None, :])
                put("b2s", dzs)
            else:
                out[sl["W2s"]] = (dzs.T @ h1).reshape(-1)
                out[sl["b2s"]] = dzs.sum(axis=0)
        dz1 = dh1 * (c["z1"] > 0)
        if per_sample:
            put("W1", dz1[:, :, None] * s[:, None, :])
            put("b1", dz1)
        else:
            out[sl["W1"]] = (dz1.T @ s).reshape(-1)
            out[sl["b1"]] = dz1.sum(axis=0)
        return out

    def grad_log_prob(self, s, a) -> np.ndarray:
        """Per-sample score function ``d log pi(a|s) / d theta``, shape (m, n_params)."""
        if not self.stochastic:
            raise TypeError("grad_log_prob() requires a stochastic policy")
        s2, _ = self._batch(s)
        m, sd = self.mean_std(s2)
        a = np.asarray(a, dtype=float).reshape(m.shape)
        z = (a - m) / sd
        cot_std = (z * z - 1.0) / sd if self.layout.learned_std else None
        return self.vjp(s2, z / sd, cot_std, per_sample=True)

    # persistence
    def to_dict(self) -> dict:
        lay = asdict(self.layout)
        if lay["fixed_std"] is not None:
            lay["fixed_std"] = list(lay["fixed_std"])
        return {"layout": lay, "std_scale": self.std_scale, "theta": [float(v) for v in self.theta]}

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        lay = dict(d["layout"])
        if lay.get("fixed_std") is not None:
            lay["fixed_std"] = tuple(lay["fixed_std"])
        return cls(PolicyLayout(**lay), d["theta"], d.get("std_scale", 1.0))


def init_policy(layout: PolicyLayout, rng, std_bias: float = 0.0) -> Policy:
    """Uniform fan-in initialisation for MLPs; zeros for linear architectures."""
    theta = np.zeros(layout.n_params)
    if layout.arch == "mlp":
        sl = layout.slices()
        for name, shape in layout.shapes():
            fan_in = layout.d_s if name in ("W1", "b1") else layout.hidden
            bound = 1.0 / np.sqrt(fan_in)
            theta[sl[name]] = rng.uniform(-bound, bound, size=int(np.prod(shape)))
        if layout.stochastic:
            theta[sl["b2s"]] += std_bias
    return Policy(layout, theta)


def save_policy(policy: Policy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_dict(), fh, indent=1)


def load_policy(path) -> Policy:
    with open(path, "r", encoding="utf-8") as fh:
        return Policy.from_dict(json.load(fh))


# function-style aliases over Policy
def policy_mean(params: Policy, s) -> np.ndarray:
    return params.mean(s)


def policy_sample(params: Policy, s, noise) -> ActionSample:
    return params.sample(s, noise)


def policy_log_prob(params: Policy, s, a):
    return params.log_prob(s, a)


def policy_vjp(params: Policy, s, cotangent) -> np.ndarray:
    """VJP with a concatenated cotangent: mean part, then std part if stochastic."""
    cot = np.asarray(cotangent, dtype=float)
    d_a = params.d_a
    want = 2 * d_a if params.stochastic else d_a
    if cot.shape[-1] != want:
        raise ValueError(f"cotangent needs {want} entries per state, got {cot.shape[-1]}")
    if params.stochastic:
        return params.vjp(s, cot[..., :d_a], cot[..., d_a:])
    return params.vjp(s, cot)
