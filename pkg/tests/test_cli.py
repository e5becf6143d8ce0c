import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

from nopg.cli import main
from nopg.dataset import load_dataset
from nopg.policy import Policy, PolicyLayout, save_policy
from nopg.trajectories import load_trajectories


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SMOKE = {
    "task": "pendulum",
    "dataset": {"generator": "pendulum-grid", "nw": 10, "nwd": 10, "nu": 2},
    "kernel": {"h_state": [0.3, 0.3, 1.0], "h_action": [1.0]},
    "policy": {"hidden": 8},
    "nopg": {"policy_updates": 5, "k_sparse": 10, "solver": "bicgstab", "checkpoint_every": 2},
    "evaluation": {"episodes": 1, "steps": 50},
}


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(SMOKE))
    return path


class TestGenData:
    def test_pendulum_grid(self, tmp_path):
        out = tmp_path / "grid.csv"
        assert main(["gen-data", "pendulum-grid", "--nw", "15", "--nwd", "15", "--nu", "2", "--out", str(out)]) == 0
        assert load_dataset(out, 3, 1).n == 450

    def test_lqg(self, tmp_path):
        out, tr = tmp_path / "lqg.csv", tmp_path / "lqg.jsonl"
        assert main(["gen-data", "lqg", "--alpha", "0.5", "--episodes", "100", "--steps", "50",
                     "--out", str(out), "--trajectories", str(tr)]) == 0
        assert load_dataset(out, 2, 2).n == 5000
        t = load_trajectories(tr)
        assert len(t) == 100 and t.has_log_probs

    def test_seed_reproducible(self, tmp_path):
        for name in ("a", "b"):
            main(["gen-data", "cartpole-random", "--episodes", "3", "--steps", "40", "--seed", "5",
                  "--out", str(tmp_path / f"{name}.csv")])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_demos(self, tmp_path):
        out = tmp_path / "demos.jsonl"
        assert main(["gen-data", "mountaincar-demos", "--episodes", "2", "--out", str(out)]) == 0
        t = load_trajectories(out)
        assert len(t) == 2 and all(e.discounts[-1] == 0.0 for e in t.episodes)

    def test_missing_generator_is_usage_error(self, capsys):
        assert main(["gen-data", "--out", "x.csv"]) == 2
        assert main(["gen-data", "hopper", "--out", "x.csv"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_no_command(self):
        assert main([]) == 2


class TestTrain:
    def test_outputs_and_determinism(self, tmp_path, smoke_config):
        t0 = time.perf_counter()
        assert main(["train", "--config", str(smoke_config), "--seed", "7", "--out", str(tmp_path / "a")]) == 0
        assert time.perf_counter() - t0 < 10.0
        assert main(["train", "--config", str(smoke_config), "--seed", "7", "--out", str(tmp_path / "b")]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
        assert (a / "policy.json").read_bytes() == (b / "policy.json").read_bytes()
        hist = rows(a / "history.csv")
        assert len(hist) == 5 and list(hist[0]) == ["iter", "j_hat", "grad_norm", "cg_iters_q",
                                                    "cg_iters_mu", "clipped"]
        assert sorted(p.name for p in (a / "checkpoints").iterdir()) == ["policy_000002.json",
                                                                        "policy_000004.json"]
        resolved = yaml.safe_load((a / "resolved_config.yaml").read_text())
        assert resolved["seed"] == 7 and resolved["nopg"]["policy_updates"] == 5

    def test_seed_changes_history(self, tmp_path, smoke_config):
        main(["train", "--config", str(smoke_config), "--seed", "1", "--out", str(tmp_path / "a")])
        main(["train", "--config", str(smoke_config), "--seed", "2", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a/history.csv").read_bytes() != (tmp_path / "b/history.csv").read_bytes()

    def test_override(self, tmp_path, smoke_config):
        assert main(["train", "--config", str(smoke_config), "--set", "nopg.policy_updates=2",
                     "--out", str(tmp_path / "o")]) == 0
        assert len(rows(tmp_path / "o/history.csv")) == 2

    def test_unknown_key_names_field(self, tmp_path, capsys):
        bad = dict(SMOKE, nopg={**SMOKE["nopg"], "learning_rat": 0.1})
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(bad))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "nopg.learning_rat" in capsys.readouterr().err

    def test_invalid_value(self, tmp_path, smoke_config, capsys):
        assert main(["train", "--config", str(smoke_config), "--set", "nopg.learning_rate=-1",
                     "--out", str(tmp_path / "o")]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2


def zero_policy(path):
    lay = PolicyLayout(3, 1, hidden=4)
    save_policy(Policy(lay, np.zeros(lay.n_params)), path)


class TestEval:
    def test_rows_and_summary(self, tmp_path):
        zero_policy(tmp_path / "p.json")
        out = tmp_path / "eval.csv"
        assert main(["eval", "--policy", str(tmp_path / "p.json"), "--task", "pendulum",
                     "--episodes", "10", "--steps", "100", "--out", str(out)]) == 0
        r = rows(out)
        assert len(r) == 11 and r[-1]["episode"] == "mean"
        returns = [float(x["return"]) for x in r[:-1]]
        # deterministic env and policy from the bottom: identical episodes
        assert len(set(returns)) == 1
        assert float(r[-1]["ci_lo"]) == float(r[-1]["ci_hi"])
        assert float(r[-1]["ci_lo"]) == pytest.approx(returns[0], rel=1e-14)

    def test_zero_policy_fails_swing_up(self, tmp_path):
        zero_policy(tmp_path / "p.json")
        out = tmp_path / "eval.csv"
        main(["eval", "--policy", str(tmp_path / "p.json"), "--task", "pendulum", "--episodes", "1",
              "--steps", "500", "--out", str(out)])
        # hanging at the bottom costs pi^2 per step
        assert float(rows(out)[0]["return"]) == pytest.approx(-500 * np.pi**2, rel=1e-9)

    def test_start_flag(self, tmp_path):
        zero_policy(tmp_path / "p.json")
        out = tmp_path / "eval.csv"
        main(["eval", "--policy", str(tmp_path / "p.json"), "--task", "pendulum", "--episodes", "1",
              "--steps", "10", "--start", "0,0", "--out", str(out)])
        assert float(rows(out)[0]["return"]) == pytest.approx(0.0, abs=1e-12)

    def test_missing_policy(self, tmp_path):
        assert main(["eval", "--policy", str(tmp_path / "nope.json"), "--out", str(tmp_path / "e.csv")]) == 2


class TestStudies:
    def test_grad_study(self, tmp_path):
        out = tmp_path / "study.csv"
        assert main(["grad-study", "--estimators", "nopg-d,pwis,dpg-q", "--sizes", "50,100",
                     "--alphas", "0.5", "--seeds", "2", "--set", "n_boot=50", "--jobs", "1",
                     "--out", str(out)]) == 0
        r = rows(out)
        assert len(r) == 2 * 1 * 3
        assert list(r[0]) == ["estimator", "n", "alpha", "kappa", "bias_norm", "variance", "mse",
                              "angle_median", "angle_iqr", "ci_lo", "ci_hi"]
        cfg = yaml.safe_load(out.with_suffix(".config.yaml").read_text())
        assert cfg["sizes"] == [50, 100] and cfg["seeds"] == 2

    def test_grad_study_bad_estimator(self, tmp_path):
        assert main(["grad-study", "--estimators", "sac", "--out", str(tmp_path / "s.csv")]) == 2

    def test_bandwidth(self, tmp_path):
        out = tmp_path / "bw.csv"
        assert main(["bandwidth", "--kappas", "0.1,1,10", "--n", "50", "--seeds", "2",
                     "--set", "n_pi_mc=2", "--set", "n_boot=50", "--jobs", "1", "--out", str(out)]) == 0
        assert [float(x["kappa"]) for x in rows(out)] == [0.1, 1.0, 10.0]

    def test_bounds_zero(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bounds", "--lf", "0", "--lbeta", "1", "--h", "0.1", "--out", str(out)]) == 0
        assert float(rows(out)[0]["a_bias"]) == 0.0

    def test_bounds_value(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bounds", "--lf", "1", "--lbeta", "0", "--h", "0.1", "--lv", "2", "--h-phi", "0.1",
                     "--gamma-c", "0.5", "--out", str(out)]) == 0
        r = rows(out)[0]
        assert float(r["a_bias"]) == pytest.approx(0.1 / np.sqrt(2 * np.pi))
        assert float(r["value_bias"]) == pytest.approx((0.1 + 0.5 * 2 * 0.1) / np.sqrt(2 * np.pi) / 0.5)

    def test_bounds_bad_bandwidth(self, tmp_path):
        assert main(["bounds", "--lf", "1", "--lbeta", "1", "--h", "0", "--out", str(tmp_path / "b.csv")]) == 1


def test_console_script_entry(tmp_path):
    out = tmp_path / "b.csv"
    proc = subprocess.run([sys.executable, "-m", "nopg.cli", "bounds", "--lf", "1", "--lbeta", "0",
                           "--h", "0.1", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0 and "a_bias=" in proc.stdout
