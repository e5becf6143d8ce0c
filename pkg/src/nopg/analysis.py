"""Gradient bias/variance studies on the LQG, bootstrap intervals and bias bounds.

The study objective is the LQG return with the Gaussian policy noise ``Sigma``
included, so estimators are scored against ``lqg_true_gradient(noise=True)``.
The one exception is ``nopg-d``, which estimates the return of the noiseless
policy and is scored against the ``Sigma = 0`` gradient.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, erfcx

from .baselines import dpg_oracle_q_gradient, gpomdp_bn_gradient, gpomdp_nis_gradient
from .config import ConfigError, NopgConfig
from .envs.generate import gen_rollout_dataset
from .envs.lqg import (THETA_BEHAVIOR, THETA_TARGET, LqgEnv, LqgSpec, linear_policy,
                       lqg_true_gradient, mix_behavior_policy)
from .kernel import KernelModel
from .dataset import Dataset
from .npbe import FixedState, solve_npbe, value_at
from .rng import stream
from .training import nopg_gradient

ESTIMATORS = ("nopg-d", "nopg-s", "pwis", "pwis-bn", "dpg-q")
# estimators scored against the noiseless-policy gradient
NOISELESS_ESTIMATORS = ("nopg-d",)

REPORT_COLUMNS = ("estimator", "n", "alpha", "kappa", "bias_norm", "variance", "mse",
                  "angle_median", "angle_iqr", "ci_lo", "ci_hi")


# bootstrap

def bootstrap_percentile_ci(samples, n_boot: int = 10000, level: float = 0.95, seed: int = 0,
                            statistic=np.mean) -> tuple[float, float]:
    """Percentile bootstrap interval of ``statistic`` over resamples of ``samples``.

    ``statistic`` must accept an ``axis`` keyword (resamples are rows).
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("no samples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = x.size
    stats = np.empty(n_boot)
    chunk = max(1, (1 << 22) // n)
    for lo in range(0, n_boot, chunk):
        hi = min(n_boot, lo + chunk)
        idx = rng.integers(0, n, size=(hi - lo, n))
        stats[lo:hi] = statistic(x[idx], axis=1)
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(stats, [tail, 100 - tail])
    return float(lo), float(hi)


# bias bounds

def _log_chi(x):
    # log(e^{x^2} (1 + erf x)) without overflow
    return x * x + np.log1p(erf(x))


def a_bias_bound(L_f: float, L_beta: float, h) -> float:
    """Asymptotic bias bound of Nadaraya-Watson regression with Gaussian kernels.

    Parameters
    ----------
    L_f : float
        Lipschitz constant of the regression function.
    L_beta : float
        Lipschitz constant of the log sampling density.
    h : array_like
        Per-dimension bandwidths.

    Notes
    -----
    With ``x_i = h_i L_beta / sqrt(2)`` and ``chi_i = e^{x_i^2}(1 + erf x_i)`` the
    bound is::

        L_f sum_k h_k prod_{i!=k} chi_i (1/sqrt(2 pi) + L_beta h_k chi_k / 2)
        -------------------------------------------------------------------
                          prod_i e^{x_i^2} (1 - erf x_i)

    The denominator is ``prod_i erfcx(x_i)``; everything is summed in log
    space; results beyond the float range are returned as ``inf``.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if np.any(h <= 0):
        raise ValueError("bandwidths must be positive")
    if L_f < 0 or L_beta < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    if L_f == 0:
        return 0.0
    x = h * L_beta / math.sqrt(2.0)
    log_chi = _log_chi(x)
    log_den = np.sum(np.log(erfcx(x)))
    total = np.sum(log_chi)
    log_c = -0.5 * math.log(2 * math.pi)
    terms = []
    for k in range(h.size):
        slope = L_beta * h[k] / 2
        inner = log_c if slope == 0 else np.logaddexp(log_c, math.log(slope) + log_chi[k])
        terms.append(math.log(h[k]) + (total - log_chi[k]) + inner)
    log_bound = math.log(L_f) + np.logaddexp.reduce(terms) - log_den
    # beyond float range the bound is vacuous anyway
    return math.inf if log_bound > 709.0 else float(math.exp(log_bound))


def value_bias_bound(L_R: float, L_beta: float, h_psi, h_phi_a, L_V: float, h_phi,
                     gamma_c: float) -> float:
    """Bias bound of the NPBE value: ``(A + gamma_c L_V sum_k h_phi_k / sqrt(2 pi)) / (1 - gamma_c)``.

    ``A`` is :func:`a_bias_bound` over the joint state-action bandwidths.
    """
    if not 0 <= gamma_c < 1:
        raise ValueError("gamma_c must lie in [0, 1)")
    h_sa = np.concatenate([np.atleast_1d(h_psi), np.atleast_1d(h_phi_a)]).astype(float)
    a = a_bias_bound(L_R, L_beta, h_sa)
    b = L_V * np.sum(np.atleast_1d(np.asarray(h_phi, dtype=float))) / math.sqrt(2 * math.pi)
    return float((a + gamma_c * b) / (1 - gamma_c))


@dataclass(eq=False)
class SyntheticBiasResult:
    """Empirical NPBE value bias against its bound on the synthetic 1-D MDP."""

    h: float
    empirical: float
    bound: float
    L_R: float
    L_beta: float
    L_V: float

    @property
    def holds(self) -> bool:
        return self.empirical <= self.bound


def synthetic_value_bias(h: float, n: int = 2000, gamma: float = 0.5, scale: float = 1.0,
                         seeds: int = 5, n_query: int = 201, seed: int = 0) -> SyntheticBiasResult:
    """Empirical NPBE value bias on a 1-D MDP with a known value function.

    States are Laplace(0, ``scale``) samples (log-density Lipschitz constant
    ``1/scale``), the dynamics are the identity, the reward is ``sin(s)`` and
    the single action is 0, so ``V*(s) = sin(s) / (1 - gamma)``. The NPBE
    value, averaged over ``seeds`` datasets, is compared with ``V*`` on a grid
    of ``n_query`` states in ``[-1.5 scale, 1.5 scale]``. Lipschitz constants
    of the reward and of ``V*`` are measured as the largest difference
    quotients on a fine grid. The action kernel plays no role (all actions
    coincide), so the bound is evaluated with state bandwidths only.
    """
    grid = np.linspace(-1.5 * scale, 1.5 * scale, n_query)
    fine = np.linspace(-1.5 * scale, 1.5 * scale, 20001)
    lip = lambda f: float(np.max(np.abs(np.diff(f(fine)) / np.diff(fine))))
    L_R = lip(np.sin)
    L_V = lip(lambda s: np.sin(s) / (1 - gamma))
    L_beta = 1.0 / scale
    policy = linear_policy([0.0])
    kernels = KernelModel([h], [1.0], [h])
    cfg = NopgConfig(solver="dense" if n <= 1500 else "bicgstab")
    values = np.zeros((seeds, n_query))
    for k in range(seeds):
        rng = stream(seed, "synthetic", k)
        s = rng.laplace(0.0, scale, size=(n, 1))
        data = Dataset(s, np.zeros((n, 1)), np.sin(s[:, 0]), s, np.full(n, gamma))
        sol = solve_npbe(data, kernels, policy, cfg, FixedState([0.0]))
        values[k] = value_at(sol, data, kernels, policy, grid[:, None])
    empirical = float(np.max(np.abs(values.mean(axis=0) - np.sin(grid) / (1 - gamma))))
    bound = value_bias_bound(L_R, L_beta, [h], [], L_V, [h], gamma)
    return SyntheticBiasResult(h, empirical, bound, L_R, L_beta, L_V)


# gradient study

@dataclass
class GradientStudyConfig:
    """Cells, repetitions and estimator settings of an LQG gradient study.

    Datasets hold ``ceil(n / episode_steps)`` behavior episodes truncated to
    ``n`` transitions. NOPG uses the fixed bandwidths given here unless a
    ``kappas`` sweep replaces all of them by one value.
    """

    estimators: tuple = ("nopg-s", "pwis", "pwis-bn", "dpg-q")
    sizes: tuple = (100, 500, 1000, 2000)
    alphas: tuple = (0.5,)
    seeds: int = 20
    kappas: tuple | None = None
    episode_steps: int = 50
    h_state: tuple = (0.2, 0.2)
    h_action: tuple = (0.5, 0.5)
    h_next: tuple | None = None
    k_sparse: int | None = None
    n_pi_mc: int = 10
    theta: tuple = tuple(THETA_TARGET)
    theta_prime: tuple = tuple(THETA_BEHAVIOR)
    n_boot: int = 2000
    seed: int = 0

    def __post_init__(self):
        for name in ("estimators", "sizes", "alphas", "theta", "theta_prime", "h_state", "h_action"):
            v = getattr(self, name)
            if v is None or len(v) == 0:
                raise ConfigError(f"{name} must be a non-empty list")
            setattr(self, name, tuple(v))
        if self.kappas is not None:
            if len(self.kappas) == 0 or min(self.kappas) <= 0:
                raise ConfigError("kappas must be a non-empty list of positive values")
            self.kappas = tuple(float(k) for k in self.kappas)
        if self.h_next is not None:
            self.h_next = tuple(self.h_next)
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ConfigError(f"unknown estimator '{unknown[0]}' (choose from {', '.join(ESTIMATORS)})")
        if any(not 0 <= a <= 1 for a in self.alphas):
            raise ConfigError("alphas must lie in [0, 1]")
        if any(int(n) < 1 for n in self.sizes):
            raise ConfigError("sizes must be positive")
        if self.seeds < 2:
            raise ConfigError("seeds must be >= 2 (variance needs two samples)")
        if self.episode_steps < 1:
            raise ConfigError("episode_steps must be >= 1")

    def kernels(self, kappa: float | None = None) -> KernelModel:
        if kappa is not None:
            return KernelModel.uniform(kappa, len(self.theta), len(self.theta))
        h_next = self.h_state if self.h_next is None else self.h_next
        return KernelModel(self.h_state, self.h_action, h_next)


@dataclass(eq=False)
class CellResult:
    """Aggregated estimates for one (estimator, n, alpha, kappa) cell.

    ``variance`` is the trace of the (biased, ``ddof=0``) sample covariance, so
    ``mse == bias_norm**2 + variance`` exactly. Angles are in degrees; the
    interval (``ci``) is a bootstrap percentile interval of the variance.
    """

    estimator: str
    n: int
    alpha: float
    kappa: float | None
    samples: np.ndarray
    truth: np.ndarray
    bias: np.ndarray
    variance: float
    mse: float
    angles: np.ndarray
    ci: tuple
    failures: list = field(default_factory=list)

    @property
    def bias_norm(self) -> float:
        return float(np.linalg.norm(self.bias))

    @property
    def angle_median(self) -> float:
        ok = self.angles[np.isfinite(self.angles)]
        return float(np.median(ok)) if ok.size else float("nan")

    @property
    def angle_iqr(self) -> float:
        ok = self.angles[np.isfinite(self.angles)]
        if not ok.size:
            return float("nan")
        q1, q3 = np.percentile(ok, [25, 75])
        return float(q3 - q1)

    def row(self) -> dict:
        return {"estimator": self.estimator, "n": self.n, "alpha": self.alpha,
                "kappa": "" if self.kappa is None else self.kappa,
                "bias_norm": self.bias_norm, "variance": self.variance, "mse": self.mse,
                "angle_median": self.angle_median, "angle_iqr": self.angle_iqr,
                "ci_lo": self.ci[0], "ci_hi": self.ci[1]}


def angles_to(samples, truth) -> np.ndarray:
    """Angles in degrees between each row of ``samples`` and ``truth``.

    Uses ``2 atan2(|u - v|, |u + v|)`` on the unit vectors, which stays
    accurate near 0 and 180 degrees; zero vectors give ``nan``.
    """
    G = np.atleast_2d(np.asarray(samples, dtype=float))
    t = np.asarray(truth, dtype=float)
    gn = np.linalg.norm(G, axis=1, keepdims=True)
    tn = np.linalg.norm(t)
    with np.errstate(invalid="ignore", divide="ignore"):
        u, v = G / gn, t / tn
    ang = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    ang[(gn[:, 0] == 0) | (tn == 0)] = np.nan
    return np.degrees(ang)


def summarize_cell(estimator, n, alpha, kappa, samples, truth, n_boot=2000, seed=0,
                   failures=()) -> CellResult:
    """Bias, variance, MSE and angle statistics of gradient samples against ``truth``."""
    G = np.asarray(samples, dtype=float).reshape(-1, np.size(truth))
    G = G[np.all(np.isfinite(G), axis=1)]
    truth = np.asarray(truth, dtype=float)
    if G.shape[0] == 0:
        nan = float("nan")
        return CellResult(estimator, n, alpha, kappa, G, truth, np.full(truth.size, nan),
                          nan, nan, np.zeros(0), (nan, nan), list(failures))
    mean = G.mean(axis=0)
    dev2 = np.sum((G - mean) ** 2, axis=1)
    variance = float(dev2.mean())
    mse = float(np.mean(np.sum((G - truth) ** 2, axis=1)))
    ci = bootstrap_percentile_ci(dev2, n_boot, 0.95, seed) if G.shape[0] > 1 else (variance, variance)
    return CellResult(estimator, n, alpha, kappa, G, truth, mean - truth, variance, mse,
                      angles_to(G, truth), ci, list(failures))


@dataclass(eq=False)
class GradientReport:
    cells: list
    config: GradientStudyConfig | None = None

    def cell(self, estimator: str, n: int, alpha: float, kappa: float | None = None) -> CellResult:
        for c in self.cells:
            if c.estimator == estimator and c.n == n and np.isclose(c.alpha, alpha) and (
                    (kappa is None and c.kappa is None)
                    or (kappa is not None and c.kappa is not None and np.isclose(c.kappa, kappa))):
                return c
        raise KeyError((estimator, n, alpha, kappa))

    def rows(self) -> list[dict]:
        return [c.row() for c in self.cells]


def write_report_csv(report: GradientReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in report.rows():
            w.writerow(row)


def study_dataset(lqg: LqgSpec, config: GradientStudyConfig, alpha: float, n: int, rep: int):
    """Behavior-policy dataset and trajectories for one repetition of a cell."""
    behavior = mix_behavior_policy(config.theta, config.theta_prime, alpha, lqg.noise_std)
    episodes = -(-n // config.episode_steps)
    seed = int(stream(config.seed, "data", repr(float(alpha)), n, rep).integers(2**31))
    _, trajs = gen_rollout_dataset(LqgEnv(lqg), behavior, episodes, config.episode_steps, seed)
    trajs = trajs.head(n)
    return trajs.to_dataset(), trajs


def estimate(estimator, lqg, config: GradientStudyConfig, dataset, trajs, kappa=None, seed=0):
    """One gradient sample of ``estimator`` on a study dataset."""
    theta = np.asarray(config.theta, dtype=float)
    if estimator in ("nopg-d", "nopg-s"):
        stochastic = estimator == "nopg-s"
        policy = linear_policy(theta, stochastic, lqg.noise_std)
        cfg = NopgConfig(k_sparse=config.k_sparse, n_pi_mc=config.n_pi_mc, solver="bicgstab",
                         seed=seed)
        return nopg_gradient(dataset, config.kernels(kappa), policy, cfg, FixedState(lqg.s0)).g
    if estimator in ("pwis", "pwis-bn"):
        policy = linear_policy(theta, True, lqg.noise_std)
        fn = gpomdp_nis_gradient if estimator == "pwis" else gpomdp_bn_gradient
        return fn(trajs, policy).g
    if estimator == "dpg-q":
        return dpg_oracle_q_gradient(dataset, lqg, linear_policy(theta)).g
    raise ValueError(f"unknown estimator {estimator!r}")


def _job(args):
    lqg, config, alpha, n, rep, variants = args
    dataset, trajs = study_dataset(lqg, config, alpha, n, rep)
    seed = int(stream(config.seed, "estimator", repr(float(alpha)), n, rep).integers(2**31))
    out = {}
    for est, kappa in variants:
        try:
            out[(est, kappa)] = estimate(est, lqg, config, dataset, trajs, kappa, seed)
        except Exception as exc:  # recorded per cell, not fatal
            out[(est, kappa)] = f"{type(exc).__name__}: {exc}"
    return alpha, n, rep, out


def default_jobs() -> int:
    return os.cpu_count() or 1


def _run(lqg, config: GradientStudyConfig, variants, jobs: int | None) -> GradientReport:
    tasks = [(lqg, config, a, int(n), rep, variants)
             for a in config.alphas for n in config.sizes for rep in range(config.seeds)]
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1:
        results = [_job(t) for t in tasks]
    else:
        with multiprocessing.Pool(jobs) as pool:
            results = pool.map(_job, tasks, chunksize=1)
    truth = {s: lqg_true_gradient(lqg, config.theta, noise=s) for s in (False, True)}
    cells = []
    for est, kappa in variants:
        for a in config.alphas:
            for n in config.sizes:
                samples, failures = [], []
                for a2, n2, rep, out in results:
                    if a2 != a or n2 != int(n):
                        continue
                    v = out[(est, kappa)]
                    if isinstance(v, str):
                        failures.append((rep, v))
                    else:
                        samples.append(v)
                seed = int(stream(config.seed, "bootstrap", est, repr(float(a)), int(n)).integers(2**31))
                cells.append(summarize_cell(est, int(n), float(a), kappa,
                                            np.reshape(samples, (-1, len(config.theta))),
                                            truth[est not in NOISELESS_ESTIMATORS], config.n_boot,
                                            seed, failures))
    return GradientReport(cells, config)


def run_gradient_study(lqg: LqgSpec, config: GradientStudyConfig, jobs: int | None = 1) -> GradientReport:
    """Gradient samples of every estimator on every (size, alpha) cell.

    Each repetition draws one behavior dataset shared by all estimators; the
    result depends only on ``config.seed``, not on ``jobs``.
    """
    kappas = (None,) if config.kappas is None else config.kappas
    variants = [(e, k) for e in config.estimators for k in kappas]
    return _run(lqg, config, variants, jobs)


def bandwidth_sweep(lqg: LqgSpec, kappas, n: int = 1000, alpha: float = 0.5, seeds: int = 20,
                    estimator: str = "nopg-s", config: GradientStudyConfig | None = None,
                    jobs: int | None = 1) -> GradientReport:
    """NOPG bias and variance with all bandwidths set to each ``kappa`` in turn."""
    base = GradientStudyConfig() if config is None else config
    cfg = GradientStudyConfig(**{**base.__dict__, "estimators": (estimator,), "sizes": (int(n),),
                                 "alphas": (float(alpha),), "seeds": int(seeds),
                                 "kappas": tuple(kappas)})
    return run_gradient_study(lqg, cfg, jobs)
