"""Configuration objects shared by the solver, the optimizer and the CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Schema violation in a configuration mapping."""


@dataclass
class NopgConfig:
    """Settings of the NPBE solve, the gradient and the ADAM loop.

    ``k_sparse=None`` keeps full operator rows. ``gamma`` replaces every
    non-terminal dataset discount when given. ``solver`` is ``"cg"`` (CG on
    the normal equations), ``"bicgstab"`` or ``"dense"`` (direct solve).
    """

    gamma: float | None = None
    k_sparse: int | None = None
    n_pi_mc: int = 1
    n_phi_mc: int = 1
    n_mu0_mc: int = 1
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    policy_updates: int = 1500
    cg_tol: float = 1e-10
    cg_max_iter: int | None = None
    solver: str = "cg"
    warm_start: bool = True
    grad_clip: float | None = None
    std_schedule: tuple = (1.0, 0.1)
    checkpoint_every: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_pi_mc", "n_phi_mc", "n_mu0_mc"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.k_sparse is not None and self.k_sparse < 1:
            raise ConfigError("k_sparse must be >= 1")
        if self.policy_updates < 0:
            raise ConfigError("policy_updates must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not self.eps_adam > 0 or not self.cg_tol > 0:
            raise ConfigError("eps_adam and cg_tol must be positive")
        if self.gamma is not None and not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.solver not in ("cg", "bicgstab", "dense"):
            raise ConfigError("solver must be 'cg', 'bicgstab' or 'dense'")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")
        if len(self.std_schedule) != 2 or min(self.std_schedule) <= 0:
            raise ConfigError("std_schedule must be two positive multipliers")
        self.std_schedule = tuple(float(v) for v in self.std_schedule)

    def replace(self, **changes) -> "NopgConfig":
        return dataclasses.replace(self, **changes)


def from_mapping(cls, data, where: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys.

    Nested dataclass fields are converted recursively; errors name the
    offending dotted path.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key '{_join(where, unknown[0])}'")
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        sub = _nested_type(f)
        if sub is not None and isinstance(value, dict):
            kwargs[key] = from_mapping(sub, value, _join(where, key))
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where + ': ' if where else ''}{exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where + ': ' if where else ''}{exc}") from None


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


_NESTED: dict = {}


def register_nested(name: str, cls) -> None:
    _NESTED[name] = cls


def _nested_type(f):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    return _NESTED.get(t.split("|")[0].strip())


def to_mapping(obj):
    """Plain-dict form of a (possibly nested) config dataclass."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_mapping(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [to_mapping(v) for v in obj]
    if isinstance(obj, list):
        return [to_mapping(v) for v in obj]
    return obj


register_nested("NopgConfig", NopgConfig)
