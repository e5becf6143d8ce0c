"""Declarative experiment configuration and the builders shared by the CLI and tests.

A run config is a nested mapping (YAML on disk)::

    task: pendulum
    seed: 0
    dataset: {generator: pendulum-grid, nw: 15, nwd: 15, nu: 2}
    kernel: {h_state: [0.2, 0.2, 0.6], h_action: [0.03], action_factor: 50}
    policy: {hidden: 50, kind: deterministic}
    nopg: {policy_updates: 1500, learning_rate: 0.01, solver: bicgstab, k_sparse: 20}
    evaluation: {episodes: 1, steps: 500}

Unknown keys are rejected with their dotted path. Every random quantity is
drawn from a named stream of the single ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .config import ConfigError, NopgConfig, from_mapping, register_nested, to_mapping
from .dataset import Dataset, load_dataset
from .envs.base import rollout
from .envs.cartpole import CartpoleEnv
from .envs.generate import GaussianMixturePolicy, UniformPolicy, gen_rollout_dataset, gen_uniform_grid
from .envs.lqg import LqgEnv, mix_behavior_policy, paper_lqg, THETA_BEHAVIOR, THETA_TARGET
from .envs.mountaincar import MountainCarEnv, MountainCarParams
from .envs.pendulum import BOTTOM, TOP, PendulumEnv
from .kernel import KernelModel, apply_h_factor, select_bandwidths_cv
from .policy import PolicyLayout, init_policy
from .rng import stream
from .trajectories import Episode, TrajectoryDataset, load_trajectories
from .training import train

TASKS = ("pendulum", "cartpole", "mountaincar", "lqg")
GENERATORS = ("pendulum-grid", "pendulum-random", "pendulum-gaussian", "cartpole-random",
              "lqg", "mountaincar-demos")
DEMO_FIXTURE = "mountaincar_demos.jsonl"


def make_env(task: str, terminate: bool = False):
    if task == "pendulum":
        return PendulumEnv()
    if task == "cartpole":
        return CartpoleEnv(terminate=terminate)
    if task == "mountaincar":
        return MountainCarEnv()
    if task == "lqg":
        return LqgEnv(paper_lqg())
    raise ConfigError(f"unknown task '{task}' (choose from {', '.join(TASKS)})")


def _seed_for(seed: int, *names) -> int:
    return int(stream(seed, *names).integers(2**31))


# config schema

@dataclass
class DatasetSpec:
    """Where transitions come from: a file, a trajectory file or a generator.

    ``episodes``/``steps`` apply to rollout generators, ``nw``/``nwd``/``nu`` to
    the pendulum grid, ``alpha`` to the LQG mixture behavior, ``demos`` to the
    number of shipped mountain-car demonstrations used.
    """

    generator: str | None = None
    path: str | None = None
    trajectories: str | None = None
    nw: int = 15
    nwd: int = 15
    nu: int = 2
    episodes: int = 10
    steps: int = 500
    alpha: float = 0.0
    demos: int = 2
    action_std: float = 0.2 ** 0.5
    max_transitions: int | None = None

    def __post_init__(self):
        sources = [v for v in (self.generator, self.path, self.trajectories) if v is not None]
        if len(sources) > 1:
            raise ConfigError("give only one of generator, path, trajectories")
        if self.generator is not None and self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator '{self.generator}' (choose from {', '.join(GENERATORS)})")
        if min(self.nw, self.nwd, self.nu, self.episodes, self.steps, self.demos) < 1:
            raise ConfigError("dataset sizes must be positive")


@dataclass
class KernelSpec:
    """Base bandwidths (CV-selected when omitted) and the h_factors applied on top."""

    h_state: list | None = None
    h_action: list | None = None
    h_next: list | None = None
    state_factor: float | list = 1.0
    action_factor: float | list = 1.0
    cv_folds: int = 5
    cv_grid: list | None = None


@dataclass
class PolicySpec:
    hidden: int = 50
    kind: str = "deterministic"
    arch: str = "mlp"
    action_scale: float | None = None
    std_bias: float = 0.0


@dataclass
class EvalSpec:
    """Evaluation rollouts; ``start`` fixes the physical start state."""

    episodes: int = 1
    steps: int = 500
    start: list | None = None


@dataclass
class RunConfig:
    task: str = "pendulum"
    seed: int = 0
    output: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    nopg: NopgConfig = field(default_factory=NopgConfig)
    evaluation: EvalSpec = field(default_factory=EvalSpec)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown task '{self.task}' (choose from {', '.join(TASKS)})")


for _cls in (DatasetSpec, KernelSpec, PolicySpec, EvalSpec, RunConfig):
    register_nested(_cls.__name__, _cls)


def load_run_config(mapping) -> RunConfig:
    return from_mapping(RunConfig, mapping)


def apply_overrides(mapping: dict, items) -> dict:
    """Set dotted ``key=value`` items (values parsed as YAML) in a nested mapping."""
    import yaml

    out = json.loads(json.dumps(mapping))
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}': '{p}' is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolved_mapping(cfg: RunConfig) -> dict:
    return to_mapping(cfg)


# datasets

def load_demonstrations(path=None) -> TrajectoryDataset:
    """Mountain-car demonstrations (the shipped fixture by default)."""
    if path is None:
        with resources.as_file(resources.files("nopg") / "data" / DEMO_FIXTURE) as p:
            return load_trajectories(p)
    return load_trajectories(path)


def scripted_demonstration(start, rng, params: MountainCarParams = MountainCarParams(),
                           max_steps: int = 500, effort=(0.35, 0.8), delay: int = 6,
                           hesitation: float = 0.2) -> Episode:
    """A deliberately weak operator: push along the velocity remembered from ``delay`` steps ago.

    The push strength is redrawn each step from ``effort`` and drops to zero
    with probability ``hesitation``.
    """
    env = MountainCarEnv(params)
    x = np.asarray(start, dtype=float)
    obs, acts, rews, discs, vel = [], [], [], [], [0.0] * delay
    for _ in range(max_steps):
        v = vel[-delay]
        direction = -1.0 if v == 0 else np.sign(v)
        a = 0.0 if rng.random() < hesitation else direction * rng.uniform(*effort)
        obs.append(x)
        acts.append([a])
        x, r, g = env.step(x, [a])
        vel.append(float(x[1]))
        rews.append(r)
        discs.append(g)
        if g == 0:
            break
    return Episode(obs, acts, rews, discs, x)


def make_demonstrations(n: int = 2, seed: int = 0, **kwargs) -> TrajectoryDataset:
    """``n`` scripted demonstrations from starts drawn like the environment's reset."""
    rng = stream(seed, "demos")
    env = MountainCarEnv()
    return TrajectoryDataset([scripted_demonstration(env.reset(rng), rng, **kwargs)
                              for _ in range(n)])


def build_dataset(spec: DatasetSpec, task: str, seed: int):
    """Dataset (and trajectories, when episode structure exists) for a run."""
    trajs = None
    g = spec.generator
    env = make_env(task, terminate=True)
    data_seed = _seed_for(seed, "data")
    if spec.path is not None:
        data = load_dataset(spec.path, env.d_s, env.d_a)
    elif spec.trajectories is not None:
        trajs = load_trajectories(spec.trajectories)
    elif g == "pendulum-grid":
        data = gen_uniform_grid(spec.nw, spec.nwd, spec.nu)
    elif g == "pendulum-random":
        # random agent from the upright position: a two-mode torque mixture
        behavior = GaussianMixturePolicy([[-2.0], [2.0]], [[1.0], [1.0]])
        data, trajs = gen_rollout_dataset(PendulumEnv(start=TOP), behavior, spec.episodes,
                                          spec.steps, data_seed)
    elif g == "pendulum-gaussian":
        # Gaussian actions from uniformly random angle and velocity in [-1, 1]
        env_p = PendulumEnv()
        behavior = GaussianMixturePolicy([[0.0]], [[spec.action_std]])
        rng = stream(seed, "starts")
        eps = []
        for k in range(spec.episodes):
            start = [rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)]
            _, t = gen_rollout_dataset(env_p, behavior, 1, spec.steps, data_seed + k, start=start)
            eps.extend(t.episodes)
        trajs = TrajectoryDataset(eps)
    elif g == "cartpole-random":
        p = CartpoleEnv(terminate=True).params
        behavior = UniformPolicy([-p.max_force], [p.max_force])
        data, trajs = gen_rollout_dataset(CartpoleEnv(terminate=True), behavior, spec.episodes,
                                          spec.steps, data_seed)
    elif g == "lqg":
        lqg = paper_lqg()
        behavior = mix_behavior_policy(THETA_TARGET, THETA_BEHAVIOR, spec.alpha, lqg.noise_std)
        data, trajs = gen_rollout_dataset(LqgEnv(lqg), behavior, spec.episodes, spec.steps, data_seed)
    elif g == "mountaincar-demos":
        demos = load_demonstrations()
        if spec.demos > len(demos):
            raise ConfigError(f"dataset.demos: only {len(demos)} demonstrations are shipped")
        trajs = TrajectoryDataset(demos.episodes[:spec.demos])
    else:
        raise ConfigError("dataset: give a generator, path or trajectories")
    if trajs is not None and (spec.path is None):
        data = trajs.to_dataset()
    if spec.max_transitions is not None:
        data = data.select(np.arange(min(spec.max_transitions, data.n)))
    return data, trajs


def build_kernels(spec: KernelSpec, dataset: Dataset, seed: int = 0) -> KernelModel:
    """Explicit or CV-selected base bandwidths, scaled by the h_factors."""
    cv_seed = _seed_for(seed, "cv")
    grid = None if spec.cv_grid is None else np.asarray(spec.cv_grid, dtype=float)
    h_s = (np.asarray(spec.h_state, dtype=float) if spec.h_state is not None
           else select_bandwidths_cv(dataset.states, spec.cv_folds, grid, cv_seed))
    h_a = (np.asarray(spec.h_action, dtype=float) if spec.h_action is not None
           else select_bandwidths_cv(dataset.actions, spec.cv_folds, grid, cv_seed + 1))
    h_s = apply_h_factor(h_s, spec.state_factor)
    h_a = apply_h_factor(h_a, spec.action_factor)
    h_n = h_s if spec.h_next is None else apply_h_factor(np.asarray(spec.h_next, dtype=float),
                                                         spec.state_factor)
    return KernelModel(h_s, h_a, h_n)


def build_policy(spec: PolicySpec, env, seed: int, fixed_std=None):
    scale = spec.action_scale
    if scale is None:
        scale = float(env.action_high) if np.isfinite(env.action_high) else 1.0
    layout = PolicyLayout(env.d_s, env.d_a, hidden=spec.hidden, kind=spec.kind, arch=spec.arch,
                          action_scale=scale, fixed_std=fixed_std)
    return init_policy(layout, stream(seed, "policy-init"), spec.std_bias)


def initial_distribution(task: str, env):
    return env.initial_distribution()


@dataclass(eq=False)
class RunResult:
    policy: object
    history: list
    dataset: Dataset
    kernels: KernelModel
    trajectories: TrajectoryDataset | None = None


def run_training(cfg: RunConfig, callbacks=()) -> RunResult:
    """Dataset, kernels and policy from ``cfg``, then the NOPG ascent loop."""
    env = make_env(cfg.task)
    data, trajs = build_dataset(cfg.dataset, cfg.task, cfg.seed)
    kernels = build_kernels(cfg.kernel, data, cfg.seed)
    policy0 = build_policy(cfg.policy, env, cfg.seed)
    nopg_cfg = dataclasses.replace(cfg.nopg, seed=_seed_for(cfg.seed, "nopg"))
    policy, history = train(data, kernels, policy0, nopg_cfg, env.initial_distribution(), callbacks)
    return RunResult(policy, history, data, kernels, trajs)


# evaluation

def evaluation_starts(task: str, env, spec: EvalSpec, seed: int):
    if spec.start is not None:
        return [np.asarray(spec.start, dtype=float)] * spec.episodes
    if task == "pendulum":
        return [BOTTOM.copy() for _ in range(spec.episodes)]
    rng = stream(seed, "eval")
    return [env.reset(rng) for _ in range(spec.episodes)]


def evaluate_policy(task: str, policy, spec: EvalSpec, seed: int = 0):
    """Deterministic (mean-action) rollouts; returns a list of per-episode dicts.

    Each dict has ``return`` (undiscounted), ``length`` and ``rollout``.
    Cart-pole is evaluated without the data-collection angle cutoff.
    """
    env = make_env(task, terminate=False)
    out = []
    for x0 in evaluation_starts(task, env, spec, seed):
        tr = rollout(env, lambda o: env.clip_action(policy.mean(o)), x0, spec.steps)
        out.append({"return": float(np.sum(tr["rewards"])), "length": int(tr["rewards"].size),
                    "rollout": tr})
    return out


def swing_up_score(tr, tail: int = 100) -> float:
    """Mean ``cos(angle)`` over the last ``tail`` states of a pendulum rollout."""
    return float(np.mean(np.cos(tr["states"][-tail:, 0])))


def reached_goal(tr) -> bool:
    return bool(tr["discounts"].size and tr["discounts"][-1] == 0)


# trust region

def constant_action_policy(d_s: int, offset: float):
    """Affine policy ``a = 0 * s + offset`` (one action dimension)."""
    layout = PolicyLayout(d_s, 1, arch="affine")
    theta = np.zeros(layout.n_params)
    theta[-1] = offset
    from .policy import Policy
    return Policy(layout, theta)


def dataset_log_likelihood(dataset: Dataset, mean_action, std: float) -> float:
    """Log-likelihood of the dataset actions under ``N(mean_action, std^2)``."""
    z = (dataset.actions - np.asarray(mean_action, dtype=float)) / std
    return float(np.sum(-0.5 * z * z - np.log(std) - 0.5 * np.log(2 * np.pi)))


def trust_region_curve(dataset: Dataset, kernels: KernelModel, offsets, config=None, mu0=None,
                       std: float = 0.2 ** 0.5):
    """Gradient norm and dataset log-likelihood along the constant-action family.

    Returns arrays ``offsets``, ``log_likelihood`` and ``grad_norm`` (the full
    NOPG gradient with respect to all affine parameters).
    """
    from .npbe import FixedState
    from .training import nopg_gradient

    config = NopgConfig(solver="bicgstab") if config is None else config
    mu0 = FixedState(PendulumEnv().observe(BOTTOM)) if mu0 is None else mu0
    offsets = np.asarray(offsets, dtype=float)
    ll = np.empty(offsets.size)
    gn = np.empty(offsets.size)
    for k, b in enumerate(offsets):
        pol = constant_action_policy(dataset.d_s, b)
        ll[k] = dataset_log_likelihood(dataset, b, std)
        gn[k] = nopg_gradient(dataset, kernels, pol, config, mu0).norm
    return {"offsets": offsets, "log_likelihood": ll, "grad_norm": gn}


def pendulum_uniform_starts():
    """Initial distribution of uniformly random angle and velocity in [-1, 1] (observation space)."""
    from .envs.pendulum import pendulum_observe
    from .npbe import StateSampler

    def draw(rng, m):
        return pendulum_observe(np.column_stack([rng.uniform(-np.pi, np.pi, m),
                                                 rng.uniform(-1.0, 1.0, m)]))

    return StateSampler(draw)


@dataclass
class TrustRegionSpec:
    """Protocol of the constant-action trust-region measurement."""

    datasets: int = 5
    episodes: int = 10
    steps: int = 100
    state_factor: float = 10.0
    action_factor: float = 0.25
    n_offsets: int = 41
    n_mu0_mc: int = 200
    seed: int = 0


def trust_region_study(spec: TrustRegionSpec = TrustRegionSpec()):
    """Mean log-likelihood and mean log gradient norm over independent datasets.

    Each dataset is drawn from the Gaussian behavior with its own seed; the
    kernels are CV-selected per dataset and scaled by the spec's factors.
    Returns a dict with the per-dataset curves and their means.
    """
    offsets = np.linspace(-2.0, 2.0, spec.n_offsets)
    mu0 = pendulum_uniform_starts()
    curves = []
    for k in range(spec.datasets):
        sd = _seed_for(spec.seed, "trust-region", k)
        data, _ = build_dataset(DatasetSpec(generator="pendulum-gaussian", episodes=spec.episodes,
                                            steps=spec.steps), "pendulum", sd)
        kernels = build_kernels(KernelSpec(state_factor=spec.state_factor,
                                           action_factor=spec.action_factor), data, sd)
        cfg = NopgConfig(solver="bicgstab", n_mu0_mc=spec.n_mu0_mc, seed=sd)
        curves.append(trust_region_curve(data, kernels, offsets, cfg, mu0))
    ll = np.array([c["log_likelihood"] for c in curves])
    lg = np.log(np.array([c["grad_norm"] for c in curves]))
    return {"offsets": offsets, "log_likelihood": ll.mean(axis=0), "log_grad_norm": lg.mean(axis=0),
            "curves": curves}


def time_iterations(n: int, k_sparse: int | None, iterations: int = 3, seed: int = 0,
                    solver: str = "bicgstab") -> float:
    """Median wall time of one NOPG-D training iteration on ``n`` pendulum rollout transitions.

    The first iteration (which fills the caches) is excluded.
    """
    import time

    spec = DatasetSpec(generator="pendulum-random", episodes=-(-n // 100), steps=100,
                       max_transitions=n)
    data, _ = build_dataset(spec, "pendulum", seed)
    kernels = build_kernels(KernelSpec(h_state=[0.2, 0.2, 0.6], h_action=[1.0]), data)
    policy = build_policy(PolicySpec(), PendulumEnv(), seed)
    cfg = NopgConfig(policy_updates=iterations + 1, k_sparse=k_sparse, solver=solver)
    stamps = []
    train(data, kernels, policy, cfg, PendulumEnv().initial_distribution(),
          [lambda it, p, rec: stamps.append(time.perf_counter())])
    return float(np.median(np.diff(stamps)))
