"""Command-line front end: ``nopg {gen-data,train,eval,grad-study,bandwidth,bounds}``.

Exit status is 0 when every requested output was written, 2 on usage or
configuration errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .config import ConfigError, from_mapping
from .dataset import DatasetFormatError, save_dataset
from .envs.lqg import paper_lqg
from .experiments import (GENERATORS, DatasetSpec, EvalSpec, RunConfig, apply_overrides,
                          build_dataset, evaluate_policy, load_run_config, make_demonstrations,
                          resolved_mapping, run_training)
from .policy import load_policy, save_policy
from .training import save_history
from .trajectories import save_trajectories

log = logging.getLogger("nopg")

EVAL_COLUMNS = ("episode", "return", "length", "ci_lo", "ci_hi")


class UsageError(Exception):
    pass


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _strs(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _write_yaml(mapping, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(mapping, fh, sort_keys=False)


def _read_yaml(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return {} if data is None else data


# gen-data

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.generator == "mountaincar-demos":
        trajs = make_demonstrations(args.episodes, args.seed)
        save_trajectories(trajs, out)
        log.info("wrote %d demonstrations to %s", len(trajs), out)
        return 0
    task = {"pendulum-grid": "pendulum", "pendulum-random": "pendulum",
            "pendulum-gaussian": "pendulum", "cartpole-random": "cartpole", "lqg": "lqg"}[args.generator]
    spec = DatasetSpec(generator=args.generator, nw=args.nw, nwd=args.nwd, nu=args.nu,
                       episodes=args.episodes, steps=args.steps, alpha=args.alpha)
    data, trajs = build_dataset(spec, task, args.seed)
    save_dataset(data, out)
    if trajs is not None and args.trajectories:
        save_trajectories(trajs, args.trajectories)
    log.info("wrote %d transitions to %s", data.n, out)
    return 0


# train / eval

def _run_config(args) -> RunConfig:
    mapping = _read_yaml(args.config) if args.config else {}
    mapping = apply_overrides(mapping, args.set or [])
    if args.seed is not None:
        mapping["seed"] = args.seed
    if getattr(args, "out", None):
        mapping["output"] = args.out
    return load_run_config(mapping)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.output or "runs/nopg")
    out.mkdir(parents=True, exist_ok=True)
    _write_yaml(resolved_mapping(cfg), out / "resolved_config.yaml")
    every = cfg.nopg.checkpoint_every
    callbacks = []
    if every:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)

        def checkpoint(it, policy, record):
            if (it + 1) % every == 0:
                save_policy(policy, ck / f"policy_{it + 1:06d}.json")

        callbacks.append(checkpoint)
    if args.verbose:
        callbacks.append(lambda it, p, rec: log.info("iter %d j_hat %.4g |g| %.3g", it,
                                                     rec["j_hat"], rec["grad_norm"]))
    result = run_training(cfg, callbacks)
    save_history(result.history, out / "history.csv")
    save_policy(result.policy, out / "policy.json")
    log.info("wrote %s", out)
    return 0


def write_eval_csv(results, path, seed: int = 0) -> dict:
    """Per-episode rows followed by a ``mean`` row carrying the bootstrap CI."""
    returns = np.array([r["return"] for r in results])
    lo, hi = analysis.bootstrap_percentile_ci(returns, n_boot=10000, seed=seed)
    summary = {"episode": "mean", "return": float(returns.mean()),
               "length": float(np.mean([r["length"] for r in results])), "ci_lo": lo, "ci_hi": hi}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        for k, r in enumerate(results):
            w.writerow({"episode": k, "return": r["return"], "length": r["length"],
                        "ci_lo": "", "ci_hi": ""})
        w.writerow(summary)
    return summary


def cmd_eval(args) -> int:
    if args.config:
        cfg = _run_config(args)
    else:
        cfg = RunConfig(task=args.task or "pendulum", seed=args.seed or 0)
    if args.task:
        cfg.task = args.task
    spec = cfg.evaluation
    spec = EvalSpec(episodes=args.episodes or spec.episodes, steps=args.steps or spec.steps,
                    start=spec.start if args.start is None else _floats(args.start))
    policy = load_policy(args.policy)
    results = evaluate_policy(cfg.task, policy, spec, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = write_eval_csv(results, out, cfg.seed)
    log.info("mean return %.4g [%.4g, %.4g]", summary["return"], summary["ci_lo"], summary["ci_hi"])
    return 0


# studies

def _study_config(args, **fixed) -> analysis.GradientStudyConfig:
    mapping = _read_yaml(args.config) if args.config else {}
    for key, value in fixed.items():
        if value is not None:
            mapping[key] = value
    mapping = apply_overrides(mapping, args.set or [])
    return from_mapping(analysis.GradientStudyConfig, mapping)


def _finish_report(report, args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_report_csv(report, out)
    _write_yaml(resolved_study(report.config), out.with_suffix(".config.yaml"))
    failed = [(c.estimator, c.n, c.alpha, f) for c in report.cells for f in c.failures]
    for item in failed:
        log.warning("estimator failure %s", item)
    return 0


def resolved_study(cfg) -> dict:
    return json.loads(json.dumps(cfg.__dict__, default=list))


def cmd_grad_study(args) -> int:
    cfg = _study_config(args, estimators=args.estimators and _strs(args.estimators),
                        sizes=args.sizes and _ints(args.sizes),
                        alphas=args.alphas and _floats(args.alphas), seeds=args.seeds,
                        seed=args.seed)
    report = analysis.run_gradient_study(paper_lqg(), cfg, jobs=args.jobs)
    return _finish_report(report, args)


def cmd_bandwidth(args) -> int:
    cfg = _study_config(args, seed=args.seed)
    report = analysis.bandwidth_sweep(paper_lqg(), _floats(args.kappas), n=args.n, alpha=args.alpha,
                                      seeds=args.seeds, estimator=args.estimator, config=cfg,
                                      jobs=args.jobs)
    return _finish_report(report, args)


def cmd_bounds(args) -> int:
    h = _floats(args.h)
    a_bias = analysis.a_bias_bound(args.lf, args.lbeta, h)
    row = {"a_bias": a_bias, "value_bias": ""}
    if args.lv is not None:
        h_phi_a = _floats(args.h_phi_a) if args.h_phi_a else h[:0]
        h_phi = _floats(args.h_phi) if args.h_phi else []
        row["value_bias"] = analysis.value_bias_bound(args.lf, args.lbeta, h, h_phi_a, args.lv,
                                                      h_phi, args.gamma_c)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("a_bias", "value_bias"))
        w.writeheader()
        w.writerow(row)
    print(f"a_bias={row['a_bias']!r} value_bias={row['value_bias']!r}")
    return 0


# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nopg", description="Nonparametric off-policy policy gradient experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a transition dataset")
    g.add_argument("generator", choices=GENERATORS)
    g.add_argument("--out", required=True, help="CSV (or JSONL for mountaincar-demos)")
    g.add_argument("--trajectories", help="also write episode JSONL here")
    g.add_argument("--nw", type=int, default=15)
    g.add_argument("--nwd", type=int, default=15)
    g.add_argument("--nu", type=int, default=2)
    g.add_argument("--alpha", type=float, default=0.0)
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--steps", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run NOPG from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides config 'output')")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--config")
    e.add_argument("--task", choices=("pendulum", "cartpole", "mountaincar", "lqg"))
    e.add_argument("--episodes", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--start", help="comma-separated physical start state")
    e.add_argument("--seed", type=int)
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    jobs = dict(type=int, default=os.cpu_count() or 1, help="worker processes (default: cores)")
    s = sub.add_parser("grad-study", help="LQG gradient bias/variance study")
    s.add_argument("--config")
    s.add_argument("--estimators", help=f"comma list from {', '.join(analysis.ESTIMATORS)}")
    s.add_argument("--sizes")
    s.add_argument("--alphas")
    s.add_argument("--seeds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--jobs", **jobs)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grad_study)

    b = sub.add_parser("bandwidth", help="LQG bandwidth sweep")
    b.add_argument("--kappas", required=True)
    b.add_argument("--n", type=int, default=1000)
    b.add_argument("--alpha", type=float, default=0.5)
    b.add_argument("--seeds", type=int, default=20)
    b.add_argument("--estimator", default="nopg-s", choices=analysis.ESTIMATORS)
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--jobs", **jobs)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bandwidth)

    c = sub.add_parser("bounds", help="kernel-regression and value bias bounds")
    c.add_argument("--lf", type=float, required=True, help="Lipschitz constant of the regressed function")
    c.add_argument("--lbeta", type=float, required=True, help="Lipschitz constant of the log-density")
    c.add_argument("--h", required=True, help="comma list of state kernel bandwidths")
    c.add_argument("--h-phi-a", help="action bandwidths (value bound)")
    c.add_argument("--lv", type=float, help="Lipschitz constant of the value; enables the value bound")
    c.add_argument("--h-phi", help="next-state bandwidths (value bound)")
    c.add_argument("--gamma-c", type=float, default=0.0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_bounds)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and signal failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
