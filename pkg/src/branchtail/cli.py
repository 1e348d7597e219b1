"""Config-driven command line for the whole pipeline.

Four subcommands cover the workflow: ``solve-alpha`` finds the root and
checks the tail-theorem conditions, ``simulate`` writes a batch and its
summary, ``analyze`` runs the tail and constant estimators over a saved
batch, and ``verify`` runs the internal cross-checks (measure
factorization, moment-bound grid, iteration convergence).

Configuration is a YAML file with nested sections; any leaf can be
overridden with ``--set section.key=value`` and a few dedicated flags,
with flag > file > default precedence.  Unknown keys are errors.

Exit codes: 0 success, 1 operational error (bad config, bad file,
solver or engine failure), 2 condition-check failure, 3 verification
failure.  Reports are JSON with a schema version and a timestamp (the
one field excluded from determinism comparisons); plot data is CSV.
"""

import argparse
import copy
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np
import yaml
from scipy import stats as sstats

from .constants import ConstantError, tail_constant_report
from .cramer import SolverError, check_conditions, solve_alpha
from .engine import (
    DEFAULT_BUDGET,
    EngineError,
    iterate_from,
    read_batch_csv,
    run_batch,
    summary,
    truncation_bound,
    write_batch_csv,
)
from .model import ModelError, make_model
from .moments import generation_moment_bound, jackknife_mean_se
from .renewal import TiltError, verify_product_measure
from .tails import TailError, tail_report

SCHEMA = "branchtail-report-v1"
OUTPUT_DIR_ENV = "BRANCHTAIL_OUTPUT_DIR"

DEFAULTS = {
    "model": None,
    "kind": "linear",
    "depth": 20,
    "reps": 10_000,
    "seed": 0,
    "workers": 1,
    "budget": DEFAULT_BUDGET,
    "output_dir": None,
    "truncation_beta": 0.5,
    "solver": {
        "bracket": [0.1, 8.0],
        "tol": 1e-12,
        "epsilon": 0.5,
    },
    "tails": {
        "k": None,
        "alpha": None,
        "quantile_band": [0.99, 0.9995],
        "bootstrap": 200,
        "ks_threshold": 0.02,
    },
    "verify": {
        "renewal_n": [1, 2, 3],
        "renewal_reps": 20_000,
        "indicator_threshold": 0.0,
        "moment_depths": [0, 1, 2, 3, 4, 5],
        "moment_betas": [0.5, 1.0, 1.5, 2.0],
        "moment_reps": 20_000,
        "iterate_depth": 12,
        "iterate_starts": [0.0, 100.0],
        "iterate_reps": 20_000,
        "corrupt_bound_self_test": False,
    },
}


class ConfigError(ValueError):
    """Malformed run configuration."""


def _merge_into(base, incoming, path=""):
    """Recursive dict merge; keys absent from the skeleton are errors."""
    for key, value in incoming.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and key != "model":
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a mapping")
            _merge_into(base[key], value, here + ".")
        else:
            base[key] = value


def _apply_set(config, assignment):
    """One --set override, 'dotted.path=yaml-scalar'."""
    if "=" not in assignment:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    target = config
    for key in keys[:-1]:
        if not isinstance(target.get(key), dict):
            raise ConfigError(f"unknown config key: {dotted}")
        target = target[key]
    leaf = keys[-1]
    if keys[0] != "model" and leaf not in target:
        raise ConfigError(f"unknown config key: {dotted}")
    target[leaf] = yaml.safe_load(raw)


def load_config(path, sets=(), **flag_overrides):
    """Merge defaults <- file <- --set pairs <- dedicated flags."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as handle:
            loaded = yaml.safe_load(handle)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        _merge_into(config, loaded)
    for assignment in sets:
        _apply_set(config, assignment)
    for key, value in flag_overrides.items():
        if value is not None:
            config[key] = value
    if config["model"] is None:
        raise ConfigError("config needs a model section")
    if config["depth"] in ("exact", "none"):
        config["depth"] = None
    return config


def _output_dir(config):
    out = config.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload):
    payload = dict(payload)
    payload["schema"] = SCHEMA
    payload["generated_at"] = datetime.now(timezone.utc).isoformat()
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(path)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x)
                              for x in row))
    with open(path, "w", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")
    print(path)


def _jsonable(value):
    if value is None or isinstance(value, (bool, int, str)):
        return value
    value = float(value)
    if math.isinf(value):
        return "inf"
    return value


# subcommands


def cmd_solve_alpha(config):
    model = make_model(config["model"])
    solver = config["solver"]
    try:
        sol = solve_alpha(model, bracket=tuple(solver["bracket"]),
                          tol=solver["tol"])
    except SolverError as err:
        print(f"solver failed: {err}", file=sys.stderr)
        return 1
    conditions = check_conditions(model, sol, config["kind"],
                                  epsilon=solver["epsilon"])
    out = os.path.join(_output_dir(config), "alpha_solution.json")
    _write_json(out, {
        "alpha": sol.alpha,
        "mu": sol.mu,
        "residual": sol.residual,
        "root_kind": sol.root_kind,
        "bracket": list(sol.bracket),
        "kind": config["kind"],
        "conditions": [{
            "name": e.name,
            "status": e.status,
            "evidence": e.evidence,
            "value": _jsonable(e.value),
            "std_error": e.std_error,
        } for e in conditions.entries],
        "passed": conditions.overall_pass,
    })
    return 0 if conditions.overall_pass else 2


def _precheck(config, model):
    """Solve and check conditions ahead of a simulation."""
    solver = config["solver"]
    try:
        sol = solve_alpha(model, bracket=tuple(solver["bracket"]),
                          tol=solver["tol"])
    except SolverError as err:
        return f"cannot certify the model (solver: {err})"
    conditions = check_conditions(model, sol, config["kind"],
                                  epsilon=solver["epsilon"])
    if not conditions.overall_pass:
        failed = [e.name for e in conditions.entries if e.status != "pass"]
        return "condition check failed: " + ", ".join(sorted(failed))
    return None


def cmd_simulate(config, force=False):
    model = make_model(config["model"])
    if not force:
        problem = _precheck(config, model)
        if problem is not None:
            print(problem + " (use --force to simulate anyway)",
                  file=sys.stderr)
            return 2
    batch = run_batch(model, config["kind"], config["depth"], config["reps"],
                      budget=config["budget"], seed=config["seed"],
                      workers=config["workers"])
    out_dir = _output_dir(config)
    batch_path = os.path.join(out_dir, "batch.csv")
    write_batch_csv(batch, batch_path)
    print(batch_path)
    info = summary(batch)
    bound = None
    if config["depth"] is not None and config["kind"] in ("linear", "max"):
        bound = truncation_bound(
            model, config["truncation_beta"], config["depth"],
            rng=np.random.default_rng(config["seed"]))
    info["truncation_bound"] = _jsonable(bound)
    info["truncation_beta"] = config["truncation_beta"]
    _write_json(os.path.join(out_dir, "summary.json"), info)
    return 0


def cmd_analyze(config, batch_path):
    model = make_model(config["model"])
    try:
        batch = read_batch_csv(batch_path)
    except (OSError, EngineError) as err:
        print(f"cannot read batch: {err}", file=sys.stderr)
        return 1
    if batch.model_fingerprint != model.fingerprint():
        print("batch was sampled from a different model than configured",
              file=sys.stderr)
        return 1
    tails_cfg = config["tails"]
    try:
        report = tail_report(
            batch,
            alpha=tails_cfg["alpha"],
            k=tails_cfg["k"],
            quantile_band=tuple(tails_cfg["quantile_band"]),
            bootstrap=tails_cfg["bootstrap"],
            rng=np.random.default_rng(config["seed"]),
        )
    except TailError as err:
        print(f"tail analysis failed: {err}", file=sys.stderr)
        return 1
    out_dir = _output_dir(config)
    _write_json(os.path.join(out_dir, "tail_report.json"), report.to_dict())
    _write_csv(os.path.join(out_dir, "hill_sweep.csv"),
               ["k", "alpha_hat", "std_error"], report.sweep)
    _write_csv(os.path.join(out_dir, "survival.csv"),
               ["threshold", "survival", "std_error"], report.survival)

    constant_payload = {"available": False, "reason": None}
    solver = config["solver"]
    kind = batch.base_kind or batch.kind
    try:
        sol = solve_alpha(model, bracket=tuple(solver["bracket"]),
                          tol=solver["tol"])
        constant = tail_constant_report(model, sol, kind, r_batch=batch,
                                        rng=np.random.default_rng(
                                            config["seed"]))
        constant_payload = dict(constant.to_dict(), available=True)
    except (SolverError, ConstantError) as err:
        constant_payload["reason"] = str(err)
    _write_json(os.path.join(out_dir, "constant_report.json"),
                constant_payload)
    return 0


def _verify_renewal(config, model, sol, rng):
    checks = []
    for n in config["verify"]["renewal_n"]:
        for g in ("constant-1", "identity-u", "indicator"):
            report = verify_product_measure(
                model, sol.alpha, n, g, config["verify"]["renewal_reps"], rng,
                threshold=config["verify"]["indicator_threshold"],
                budget=config["budget"])
            checks.append(dict(report.to_dict(), check="measure-factorization"))
    return checks


def _verify_moment_grid(config, model, corrupt=False):
    """Generation-moment bound cells with their preconditions."""
    cells = []
    depths = sorted(set(config["verify"]["moment_depths"]))
    betas = config["verify"]["moment_betas"]
    reps = config["verify"]["moment_reps"]
    seed = config["seed"]
    values = {}
    for n in depths:
        batch = run_batch(model, "linear", n, reps, budget=config["budget"],
                          seed=seed)
        prev = values.get(n - 1)
        if n == 0:
            values[0] = (batch.values, batch.values)
        else:
            if prev is None:
                shallower = run_batch(model, "linear", n - 1, reps,
                                      budget=config["budget"], seed=seed)
                prev = (shallower.values, None)
            values[n] = (batch.values, batch.values - prev[0])
    rng = np.random.default_rng(seed)
    for n in depths:
        w_n = values[n][1] if n > 0 else values[0][0]
        for beta in betas:
            cell = {"check": "generation-moment-bound", "n": n, "beta": beta}
            bound = generation_moment_bound(model, beta, n, rng=rng)
            if bound.diverged:
                cell.update(status="precondition-unmet", holds=None)
                cells.append(cell)
                continue
            powered = w_n ** beta
            estimate = float(powered.mean())
            se = jackknife_mean_se(powered)
            bound_value = bound.value
            if corrupt:
                bound_value = estimate / 2.0  # self-test: must now fail
                cell["status"] = "self-test-corrupted"
            else:
                cell["status"] = "checked"
            cell.update(
                estimate=estimate,
                std_error=se,
                bound=bound_value,
                bound_method=bound.method,
                holds=bool(estimate <= bound_value + 3.0 * se),
            )
            cells.append(cell)
    return cells


def _verify_iteration(config, model):
    starts = config["verify"]["iterate_starts"]
    n = config["verify"]["iterate_depth"]
    reps = config["verify"]["iterate_reps"]
    kind = config["kind"] if config["kind"] in ("linear", "max") else "linear"
    batches = [
        iterate_from(model, kind,
                     {"family": "deterministic", "value": float(s)},
                     n, reps, seed=config["seed"], budget=config["budget"])
        for s in starts
    ]
    ks = float(sstats.ks_2samp(batches[0].values, batches[1].values,
                               method="asymp").statistic)
    threshold = config["tails"]["ks_threshold"]
    return [{
        "check": "iteration-convergence",
        "n": n,
        "starts": [float(s) for s in starts],
        "ks_distance": ks,
        "threshold": threshold,
        "holds": bool(ks <= threshold),
    }]


def cmd_verify(config, corrupt_bound_self_test=False):
    model = make_model(config["model"])
    solver = config["solver"]
    corrupt = corrupt_bound_self_test or (
        config["verify"]["corrupt_bound_self_test"])
    checks = []
    try:
        sol = solve_alpha(model, bracket=tuple(solver["bracket"]),
                          tol=solver["tol"])
        rng = np.random.default_rng(config["seed"])
        checks.extend(_verify_renewal(config, model, sol, rng))
    except (SolverError, TiltError) as err:
        checks.append({"check": "measure-factorization",
                       "status": "precondition-unmet", "reason": str(err),
                       "holds": None})
    checks.extend(_verify_moment_grid(config, model, corrupt=corrupt))
    checks.extend(_verify_iteration(config, model))
    flags = [c.get("holds", c.get("agree")) for c in checks]
    verdicts = [f for f in flags if f is not None]
    all_ok = all(verdicts) if verdicts else False
    _write_json(os.path.join(_output_dir(config), "verification.json"), {
        "checks": checks,
        "checked": len(verdicts),
        "skipped": len(flags) - len(verdicts),
        "passed": all_ok,
    })
    return 0 if all_ok else 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="branchtail",
        description="simulation and tail analysis for branching fixed points")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", default=[], dest="sets",
                        metavar="KEY=VALUE", help="override one config leaf")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--reps", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--kind", default=None)
    parser.add_argument("--depth", default=None,
                        help="integer depth, or 'exact'")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve-alpha")
    simulate = sub.add_parser("simulate")
    simulate.add_argument("--force", action="store_true",
                          help="skip the condition precheck")
    analyze = sub.add_parser("analyze")
    analyze.add_argument("--batch", required=True, help="batch CSV path")
    verify = sub.add_parser("verify")
    verify.add_argument("--corrupt-bound-self-test", action="store_true",
                        help="corrupt one bound to prove failures surface")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    depth = args.depth
    if depth is not None and depth not in ("exact", "none"):
        depth = int(depth)
    try:
        config = load_config(
            args.config, sets=args.sets, output_dir=args.output_dir,
            seed=args.seed, reps=args.reps, workers=args.workers,
            kind=args.kind, depth=depth)
    except (ConfigError, ModelError, OSError, yaml.YAMLError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    try:
        if args.command == "solve-alpha":
            return cmd_solve_alpha(config)
        if args.command == "simulate":
            return cmd_simulate(config, force=args.force)
        if args.command == "analyze":
            return cmd_analyze(config, args.batch)
        return cmd_verify(
            config, corrupt_bound_self_test=args.corrupt_bound_self_test)
    except (ModelError, EngineError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main_entry():
    sys.exit(main())
