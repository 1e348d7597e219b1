import json
import math

import numpy as np
import pytest
import yaml

from branchtail.cli import load_config, main, ConfigError

from conftest import model_a_spec, model_b_spec, uniform_model_spec


def write_config(tmp_path, spec, name="config.yaml", **top_level):
    payload = {"model": spec, **top_level}
    path = tmp_path / name
    path.write_text(yaml.dump(payload))
    return str(path)


def read_json(path):
    with open(path) as handle:
        return json.load(handle)


def without_timestamp(path):
    with open(path) as handle:
        return "".join(line for line in handle
                       if '"generated_at"' not in line)


# config loading


def test_config_precedence_and_unknown_keys(tmp_path):
    path = write_config(tmp_path, model_b_spec(0.9), seed=5, reps=100)
    config = load_config(path, sets=["tails.bootstrap=17"], seed=9)
    assert config["seed"] == 9           # flag beats file
    assert config["reps"] == 100         # file beats default
    assert config["tails"]["bootstrap"] == 17
    assert config["tails"]["quantile_band"] == [0.99, 0.9995]
    with pytest.raises(ConfigError, match="unknown config key: repz"):
        load_config(write_config(tmp_path, model_b_spec(), "b.yaml", repz=1))
    with pytest.raises(ConfigError, match="tails.bootstrp"):
        load_config(path, sets=["tails.bootstrp=2"])
    with pytest.raises(ConfigError, match="model section"):
        load_config(None)


def test_config_exact_depth_spelling(tmp_path):
    path = write_config(tmp_path, model_b_spec(), depth="exact")
    assert load_config(path)["depth"] is None


# solve-alpha exit codes


def test_solve_alpha_critical_pair_homogeneous(tmp_path):
    path = write_config(tmp_path, model_a_spec(),
                        kind="homogeneous-martingale",
                        output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "solve-alpha"]) == 0
    payload = read_json(tmp_path / "out" / "alpha_solution.json")
    assert payload["alpha"] == pytest.approx(2.0, abs=1e-8)
    assert payload["root_kind"] == "second-root-of-critical-pair"
    assert payload["passed"] is True
    assert payload["schema"] == "branchtail-report-v1"


def test_solve_alpha_condition_failure_exits_two(tmp_path):
    path = write_config(tmp_path, model_a_spec(), kind="linear",
                        output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "solve-alpha"]) == 2
    payload = read_json(tmp_path / "out" / "alpha_solution.json")
    failed = [c["name"] for c in payload["conditions"]
              if c["status"] != "pass"]
    assert "mean-contraction" in failed


def test_solve_alpha_arithmetic_weights_exit_two(tmp_path):
    # deterministic weight 2 with subcritical branching: the moment
    # function rises through 1 at log2(2.5), but the weights live on a
    # lattice, so the nonarithmetic condition must fail
    spec = {
        "n": {"family": "two-point", "values": {0: 0.6, 1: 0.4}},
        "c": {"family": "deterministic", "value": 2.0},
        "q": {"family": "deterministic", "value": 1.0},
    }
    path = write_config(tmp_path, spec, output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "solve-alpha"]) == 2
    payload = read_json(tmp_path / "out" / "alpha_solution.json")
    assert payload["alpha"] == pytest.approx(math.log2(2.5), abs=1e-10)
    statuses = {c["name"]: c["status"] for c in payload["conditions"]}
    assert statuses["nonarithmetic"] == "fail"


def test_solve_alpha_contraction_root_exits_one(tmp_path, capsys):
    spec = {
        "n": {"family": "deterministic", "value": 2},
        "c": {"family": "deterministic", "value": 0.5},
        "q": {"family": "deterministic", "value": 1.0},
    }
    path = write_config(tmp_path, spec, output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "solve-alpha"]) == 1
    assert "contraction root" in capsys.readouterr().err


def test_solve_alpha_no_sign_change_exits_one(tmp_path, capsys):
    spec = {
        "n": {"family": "deterministic", "value": 1},
        "c": {"family": "deterministic", "value": 0.5},
        "q": {"family": "deterministic", "value": 1.0},
    }
    path = write_config(tmp_path, spec,
                        solver={"bracket": [2.0, 5.0]},
                        output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "solve-alpha"]) == 1
    assert "solver failed" in capsys.readouterr().err


# simulate


def test_simulate_deterministic_artifacts(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    path = write_config(tmp_path, model_b_spec(0.9), reps=1000, seed=7)
    for out in (out_a, out_b):
        code = main(["--config", path, "--output-dir", str(out), "simulate"])
        assert code == 0
    assert (out_a / "batch.csv").read_bytes() == (
        out_b / "batch.csv").read_bytes()
    assert without_timestamp(out_a / "summary.json") == without_timestamp(
        out_b / "summary.json")
    summary = read_json(out_a / "summary.json")
    assert summary["truncation_bound"] == pytest.approx(4.0555e-5, rel=1e-3)
    assert summary["replications"] == 1000


def test_simulate_generation_growth_summary(tmp_path):
    # supercritical branching: mean generation size grows like 1.3^n
    path = write_config(tmp_path, model_a_spec(),
                        kind="homogeneous-martingale", depth=12, reps=4000,
                        seed=11, output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "simulate"]) == 0
    summary = read_json(tmp_path / "out" / "summary.json")
    z12 = summary["levels"]["mean"][12]
    # crude betwen-replication spread bound for the 3 sigma window
    assert abs(z12 - 1.3 ** 12) < 3 * 1.3 ** 12 / math.sqrt(100)
    assert summary["truncation_bound"] is None  # martingale kind, no bound


def test_simulate_precheck_and_force(tmp_path, capsys):
    path = write_config(tmp_path, model_a_spec(), kind="linear", depth=8,
                        reps=200, output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "simulate"]) == 2
    assert "mean-contraction" in capsys.readouterr().err
    assert main(["--config", path, "simulate", "--force"]) == 0


def test_simulate_missing_model_exits_one(tmp_path, capsys):
    empty = tmp_path / "empty.yaml"
    empty.write_text("seed: 3\n")
    assert main(["--config", str(empty), "simulate"]) == 1
    assert "model section" in capsys.readouterr().err


def test_output_dir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("BRANCHTAIL_OUTPUT_DIR", str(tmp_path / "env_out"))
    path = write_config(tmp_path, model_b_spec(0.9), reps=200, depth=5)
    assert main(["--config", path, "simulate"]) == 0
    assert (tmp_path / "env_out" / "batch.csv").exists()


# analyze


@pytest.fixture(scope="module")
def analyzed(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("analyze")
    path = write_config(tmp_path, model_b_spec(0.9), depth=25, reps=30_000,
                        seed=13, output_dir=str(tmp_path / "out"))
    assert main(["--config", path, "simulate"]) == 0
    code = main(["--config", path, "analyze", "--batch",
                 str(tmp_path / "out" / "batch.csv")])
    return code, tmp_path / "out"


def test_analyze_writes_reports(analyzed):
    code, out = analyzed
    assert code == 0
    tail = read_json(out / "tail_report.json")
    # contractive variant with root near 1.09
    assert 0.9 < tail["alpha_hat"] < 1.35
    assert not tail["drift_flag"]
    sweep = (out / "hill_sweep.csv").read_text().splitlines()
    assert sweep[0] == "k,alpha_hat,std_error"
    assert len(sweep) > 5
    survival = (out / "survival.csv").read_text().splitlines()
    assert survival[0] == "threshold,survival,std_error"
    constant = read_json(out / "constant_report.json")
    assert constant["available"] is True
    assert constant["lower_bound"] > 0


def test_analyze_rejects_model_mismatch(analyzed, tmp_path, capsys):
    _, out = analyzed
    path = write_config(tmp_path, model_b_spec(0.3),
                        output_dir=str(tmp_path / "o"))
    assert main(["--config", path, "analyze", "--batch",
                 str(out / "batch.csv")]) == 1
    assert "different model" in capsys.readouterr().err


def test_analyze_unreadable_batch_exits_one(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    path = write_config(tmp_path, model_b_spec(0.9),
                        output_dir=str(tmp_path / "o"))
    assert main(["--config", path, "analyze", "--batch", str(empty)]) == 1
    assert main(["--config", path, "analyze", "--batch",
                 str(tmp_path / "missing.csv")]) == 1


# verify


def quick_verify_config(tmp_path, **extra):
    return write_config(
        tmp_path, model_b_spec(0.9),
        verify={"renewal_n": [1, 2], "renewal_reps": 4000,
                "moment_depths": [0, 2], "moment_betas": [0.5, 1.0, 2.0],
                "moment_reps": 4000, "iterate_depth": 10,
                "iterate_reps": 4000},
        output_dir=str(tmp_path / "out"), **extra)


def test_verify_passes_and_reports_skips(tmp_path):
    path = quick_verify_config(tmp_path)
    assert main(["--config", path, "verify"]) == 0
    payload = read_json(tmp_path / "out" / "verification.json")
    assert payload["passed"] is True
    assert payload["skipped"] > 0  # the beta=2 cells have no contraction
    statuses = {(c.get("n"), c.get("beta")): c.get("status")
                for c in payload["checks"]
                if c["check"] == "generation-moment-bound"}
    assert statuses[(2, 2.0)] == "precondition-unmet"


def test_verify_corrupt_hook_exits_three(tmp_path):
    path = quick_verify_config(tmp_path)
    assert main(["--config", path, "verify",
                 "--corrupt-bound-self-test"]) == 3
    payload = read_json(tmp_path / "out" / "verification.json")
    assert payload["passed"] is False
    corrupted = [c for c in payload["checks"]
                 if c.get("status") == "self-test-corrupted"]
    assert corrupted and all(c["holds"] is False for c in corrupted)
