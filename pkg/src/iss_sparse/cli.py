"""Command line interface: data generation, path solving, diagnostics,
Monte Carlo studies and rule-based early stopping.

Every command writes ``manifest.json`` next to its outputs; ``replay`` reruns
a manifest and reproduces the outputs byte for byte.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 stopping rule never fired.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import re
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    gradient_stop_rule,
    gradient_threshold,
    residual_stop_rule,
    residual_threshold,
    strong_signal_check,
    strong_signal_threshold,
)
from .experiments import ExperimentConfig, generate_instance, rep_rng, run_auc_study
from .iss import iss_path
from .lasso import ConvergenceError, LassoPath, lasso_path, lasso_kkt_residual, lasso_solve
from .lb import DivergenceError, lb_run, lbiss_integrate
from .model import (
    AssumptionError,
    GroundTruth,
    Problem,
    SingularDesignError,
    check_conditions,
    coherence,
    coherence_bounds,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NO_STOP = 0, 2, 3, 4

_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)} | {"schema_version", "sigmas", "rep"}


class ConfigError(ValueError):
    """Bad configuration file or input data."""


class NoStop(RuntimeError):
    pass


# ---------------------------------------------------------------- file formats

def fmt(x) -> str:
    """17 significant digits: round-trips every double exactly."""
    return format(float(x), ".17g")


def write_matrix_csv(path, A, header):
    A = np.atleast_2d(A)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {header}\n")
        for row in A:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: file not found")
    try:
        A = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    with open(path) as fh:
        first = fh.readline()
    m = re.match(r"#\s*n=(\d+)(?:\s+p=(\d+))?", first)
    if m:
        n = int(m.group(1))
        if A.shape[0] != n:
            raise ConfigError(f"{path}: header says n={n} but found {A.shape[0]} rows")
        if m.group(2) is not None and A.shape[1] != int(m.group(2)):
            raise ConfigError(f"{path}: header says p={m.group(2)} but found {A.shape[1]} columns")
    return A


def load_problem(data_dir) -> Problem:
    data_dir = Path(data_dir)
    X = read_matrix_csv(data_dir / "X.csv")
    y = read_matrix_csv(data_dir / "y.csv")
    if y.shape[1] != 1:
        raise ConfigError(f"{data_dir / 'y.csv'}: expected a single column, found {y.shape[1]}")
    if y.shape[0] != X.shape[0]:
        raise ConfigError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    try:
        return Problem(X, y[:, 0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_truth(path) -> GroundTruth:
    try:
        d = json.loads(Path(path).read_text())
        return GroundTruth(np.array(d["beta_star"], dtype=float), float(d.get("sigma", 0.0)))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: cannot read truth ({exc})") from None


def _key_line(text, key):
    for i, line in enumerate(text.splitlines(), 1):
        if re.search(r'"%s"\s*:' % re.escape(key), line):
            return i
    return None


def parse_config(text, source="<config>") -> dict:
    """Parse and validate a JSON configuration; errors name the offending line."""
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{source}:1: top level must be an object")
    for key in cfg:
        if key not in _CONFIG_KEYS:
            line = _key_line(text, key)
            raise ConfigError(f"{source}:{line}: unknown key {key!r} "
                              f"(allowed: {', '.join(sorted(_CONFIG_KEYS))})")
    if "schema_version" not in cfg:
        raise ConfigError(f"{source}:1: missing required key 'schema_version'")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"{source}:{_key_line(text, 'schema_version')}: unsupported "
                          f"schema_version {cfg['schema_version']!r} (expected {SCHEMA_VERSION})")
    kinds = {"n": int, "p": int, "s": int, "reps": int, "seed": int, "rep": int, "lasso_grid": int,
             "lb_max_iters": int, "sigma": float, "offdiag": float, "kappa_alpha": float,
             "lb_horizon_factor": float, "covariance": str, "signal_law": str}
    for key, kind in kinds.items():
        if key not in cfg or (key == "offdiag" and cfg[key] is None):
            continue
        v = cfg[key]
        ok = (isinstance(v, int) and not isinstance(v, bool)) if kind is int else (
            isinstance(v, (int, float)) and not isinstance(v, bool) if kind is float else isinstance(v, str))
        if not ok:
            raise ConfigError(f"{source}:{_key_line(text, key)}: {key!r} must be {kind.__name__}, got {v!r}")
    for key in ("sigmas", "kappa_list"):
        if key in cfg:
            v = cfg[key]
            if not (isinstance(v, list) and v and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                     for x in v)):
                raise ConfigError(f"{source}:{_key_line(text, key)}: {key!r} must be a nonempty list of numbers")
    try:
        experiment_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def experiment_config(cfg, sigma=None, seed=None) -> ExperimentConfig:
    kw = {k: v for k, v in cfg.items() if k not in ("schema_version", "sigmas", "rep")}
    if sigma is not None:
        kw["sigma"] = sigma
    if seed is not None:
        kw["seed"] = seed
    return ExperimentConfig(**kw)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command, args, config, outputs, inputs, started):
    manifest = {
        "command": command,
        "args": args,
        "config": config,
        "seed": args.get("seed") if args.get("seed") is not None else (config or {}).get("seed"),
        "tool_version": __version__,
        "wall_time_s": time.time() - started,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {name: _sha256(Path(out_dir) / name) for name in outputs},
    }
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _json_dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, config):
    cfg = experiment_config(config, seed=args["seed"])
    rep = int(config.get("rep", 0))
    problem, truth = generate_instance(cfg, rep_rng(cfg.seed, rep))
    out = Path(args["out_dir"])
    write_matrix_csv(out / "X.csv", problem.X, f"n={problem.n} p={problem.p}")
    write_matrix_csv(out / "y.csv", problem.y[:, None], f"n={problem.n}")
    _json_dump(out / "truth.json", {
        "beta_star": [float(v) for v in truth.beta_star],
        "support": [int(i) for i in truth.support],
        "sigma": truth.sigma,
        "seed": cfg.seed,
        "rep": rep,
    })
    return ["X.csv", "y.csv", "truth.json"], []


def _path_rows(args, problem):
    """Long-format rows ``(t_or_lambda, coordinate, value, piece, rho)``."""
    method = args["method"]
    rows = []

    def emit(key, piece, beta, rho):
        for j in range(problem.p):
            rows.append((fmt(key), j, fmt(beta[j]), piece, fmt(rho[j])))

    meta = {"method": method}
    if method == "iss":
        path = iss_path(problem, t_max=args["t_max"])
        for k in range(path.n_pieces):
            emit(path.breakpoints[k], k, path.beta_on_piece[k], path.rho_at[k])
        meta.update(terminated=path.terminated, truncated=path.truncated, pieces=path.n_pieces)
    elif method == "lb":
        kappa = args["kappa"]
        alpha = args["alpha"] if args["alpha"] is not None else 0.1 / kappa
        tr = lb_run(problem, kappa, alpha, max_iters=args["max_iters"], t_max=args["t_max"],
                    record_stride=args["record_stride"])
        for k in range(tr.iters.size):
            emit(tr.times[k], int(tr.iters[k]), tr.beta[k], tr.rho[k])
        meta.update(kappa=kappa, alpha=alpha, iterations=tr.n_iters, stopping_reason=tr.stopping_reason)
    elif method == "lbiss":
        if not math.isfinite(args["t_max"]):
            raise ConfigError("lbiss needs a finite --t-max")
        times = np.linspace(0.0, args["t_max"], args["samples"])
        smp = lbiss_integrate(problem, args["kappa"], t_max=args["t_max"], sample_times=times)
        for k in range(smp.times.size):
            emit(smp.times[k], k, smp.beta[k], smp.rho[k])
        meta.update(kappa=args["kappa"], events=int(smp.event_times.size), truncated=smp.truncated)
    elif method == "lasso":
        if args["lambdas"]:
            grid = sorted((float(v) for v in args["lambdas"].split(",")), reverse=True)
            sols, beta = [], np.zeros(problem.p)
            for lam in grid:
                beta = lasso_solve(problem, lam, warm_start=beta)
                sols.append(beta)
            lp = LassoPath(np.array(grid), np.array(sols),
                           np.array([lasso_kkt_residual(problem, b, lam) for b, lam in zip(sols, grid)]))
        else:
            lp = lasso_path(problem, count=args["count"])
        for k, lam in enumerate(lp.lambda_grid):
            emit(lam, k, lp.solutions[k], problem.gradient(lp.solutions[k]) / lam)
        meta.update(grid_points=int(lp.lambda_grid.size))
    return rows, meta


def cmd_solve(args, config):
    problem = load_problem(args["data_dir"])
    rows, meta = _path_rows(args, problem)
    out = Path(args["out_dir"])
    with open(out / "path.csv", "w", newline="") as fh:
        fh.write(f"# n={problem.n} p={problem.p} " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_or_lambda", "coordinate", "value", "piece", "rho"])
        w.writerows(rows)
    d = Path(args["data_dir"])
    return ["path.csv"], [d / "X.csv", d / "y.csv"]


def _parse_support(text, p):
    try:
        idx = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise ConfigError(f"--support must be comma-separated integers, got {text!r}") from None
    if idx and (idx[0] < 0 or idx[-1] >= p):
        raise ConfigError(f"--support has indices outside [0, {p})")
    return idx


def cmd_diagnose(args, config):
    problem = load_problem(args["data_dir"])
    inputs = [Path(args["data_dir"]) / "X.csv", Path(args["data_dir"]) / "y.csv"]
    truth = None
    if args["truth"]:
        truth = load_truth(args["truth"])
        inputs.append(Path(args["truth"]))
        if truth.p != problem.p:
            raise ConfigError(f"truth has p={truth.p} but the data has p={problem.p}")
    report = {"n": problem.n, "p": problem.p}
    try:
        report["mu"] = coherence(problem.X)
    except ValueError as exc:
        report["mu"] = f"unavailable: {exc}"
    support = None
    if args["support"] is not None:
        support = _parse_support(args["support"], problem.p)
    elif truth is not None:
        support = [int(i) for i in truth.support]
    sigma = args["sigma"] if args["sigma"] is not None else (truth.sigma if truth is not None else None)
    s_fields = ("gamma", "gamma_max", "eta", "cond_number", "max_colnorm_T", "tau_bar",
                "a3_holds", "strong_signal", "strong_signal_threshold")
    if not support:
        for k in s_fields:
            report[k] = "unavailable: no support given"
    else:
        report["s"] = len(support)
        try:
            rep = check_conditions(problem, support, sigma=sigma if sigma else None)
            for k in ("gamma", "gamma_max", "eta", "cond_number", "max_colnorm_T"):
                report[k] = getattr(rep, k)
            report["tau_bar"] = rep.tau_bar if rep.tau_bar is not None else "unavailable: sigma unknown"
            report["a3_holds"] = rep.a3_holds
            if rep.a3_holds:
                g, e = coherence_bounds(rep.mu, rep.s)
                report["a3_gamma_bound"], report["a3_eta_bound"] = g, e
            if truth is not None and sigma is not None:
                t2 = GroundTruth(truth.beta_star, sigma)
                report["strong_signal_threshold"] = strong_signal_threshold(rep, sigma, problem.n, problem.p)
                report["strong_signal"] = strong_signal_check(rep, t2, problem.n, problem.p)
            else:
                report["strong_signal"] = "unavailable: needs truth and sigma"
                report["strong_signal_threshold"] = "unavailable: needs truth and sigma"
        except (SingularDesignError, np.linalg.LinAlgError, ValueError) as exc:
            for k in s_fields:
                report.setdefault(k, f"unavailable: {exc}")
    _json_dump(Path(args["out_dir"]) / "report.json", report)
    return ["report.json"], inputs


def cmd_experiment(args, config):
    sigmas = config.get("sigmas", [config.get("sigma", 1.0)])
    out = Path(args["out_dir"])
    table, reps_rows, summaries = [], [], []
    for sigma in sigmas:
        cfg = experiment_config(config, sigma=float(sigma), seed=args["seed"])
        study = run_auc_study(cfg)
        for (method, kappa), (mean, std, count) in study.summary.items():
            table.append((fmt(sigma), method, "" if kappa is None else fmt(kappa), fmt(mean), fmt(std), count))
        reps_rows.extend((m, "" if k is None else fmt(k), fmt(s), r, fmt(a)) for m, k, s, r, a in study.rows)
        summaries.append(study.summary_json())
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "method", "kappa", "mean_auc", "std_auc", "reps"])
        w.writerows(table)
    with open(out / "reps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "kappa", "sigma", "rep", "auc"])
        w.writerows(reps_rows)
    summary = {"studies": summaries}
    if any(s["config"]["reps"] == 1 for s in summaries):
        summary["footnote"] = "reps = 1: the standard deviation is undefined and reported as 0"
    _json_dump(out / "summary.json", summary)
    return ["table.csv", "reps.csv", "summary.json"], []


def cmd_stop_run(args, config):
    problem = load_problem(args["data_dir"])
    sigma = args["sigma"]
    if sigma is None or not sigma > 0:
        raise ConfigError("stop-run needs --sigma > 0")
    rule_name = args["rule"]
    if rule_name == "residual":
        rule, thr = residual_stop_rule(sigma), residual_threshold(sigma, problem.n)
    else:
        factor = args["gradient_factor"]
        rule, thr = gradient_stop_rule(sigma, factor), gradient_threshold(problem, sigma, factor)

    def statistic(beta):
        r = problem.residual(beta)
        return float(np.linalg.norm(r)) if rule_name == "residual" else float(np.max(np.abs(problem.X.T @ r)))

    result = {"method": args["method"], "rule": rule_name, "sigma": sigma, "threshold": thr}
    stopped, beta, t_stop = False, None, None
    if args["method"] == "iss":
        path = iss_path(problem, t_max=args["t_max"])
        for k in range(path.n_pieces):
            b = path.beta_on_piece[k]
            if rule(problem, b, problem.residual(b)):
                stopped, beta, t_stop = True, b, float(path.breakpoints[k])
                break
        last = path.beta_on_piece[-1]
    elif args["method"] == "lb":
        kappa = args["kappa"]
        alpha = args["alpha"] if args["alpha"] is not None else 0.1 / kappa
        if rule(problem, np.zeros(problem.p), problem.y):
            stopped, beta, t_stop = True, np.zeros(problem.p), 0.0
            last = beta
        else:
            tr = lb_run(problem, kappa, alpha, max_iters=args["max_iters"], t_max=args["t_max"],
                        record_stride=max(1, args["max_iters"]), stop_rule=rule,
                        stop_reason=f"rule_{rule_name}")
            last = tr.beta[-1]
            if tr.stopping_reason.startswith("rule"):
                stopped, beta, t_stop = True, last, tr.n_iters * alpha
    else:
        raise ConfigError("stop-run supports --method iss or lb")
    result["stopped"] = stopped
    if stopped:
        result.update(
            stopping_time=t_stop,
            support=[int(i) for i in np.flatnonzero(beta)],
            beta=[float(v) for v in beta],
            statistic=statistic(beta),
            empty_support=not np.any(beta),
            stopped_at_start=t_stop == 0.0,
        )
    else:
        result.update(statistic_at_horizon=statistic(last), message="rule never fired before the horizon")
    _json_dump(Path(args["out_dir"]) / "selected_model.json", result)
    d = Path(args["data_dir"])
    outputs, inputs = ["selected_model.json"], [d / "X.csv", d / "y.csv"]
    if not stopped:
        raise NoStop((outputs, inputs))
    return outputs, inputs


COMMANDS = {
    "gen-data": cmd_gen_data,
    "solve": cmd_solve,
    "diagnose": cmd_diagnose,
    "experiment": cmd_experiment,
    "stop-run": cmd_stop_run,
}
NEEDS_CONFIG = {"gen-data", "experiment"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iss-sparse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, data=False):
        p.add_argument("--out-dir", required=True)
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", required=True)
        if data:
            p.add_argument("--data-dir", required=True)

    common(sub.add_parser("gen-data", help="draw a synthetic instance"), config=True)
    p = sub.add_parser("solve", help="compute a regularization path")
    common(p, data=True)
    p.add_argument("--method", required=True, choices=["iss", "lb", "lbiss", "lasso"])
    p.add_argument("--kappa", type=float, default=64.0)
    p.add_argument("--alpha", type=float, default=None, help="LB step (default 0.1 / kappa)")
    p.add_argument("--t-max", type=float, default=math.inf)
    p.add_argument("--max-iters", type=int, default=100_000)
    p.add_argument("--record-stride", type=int, default=1)
    p.add_argument("--samples", type=int, default=201, help="LBISS sample count")
    p.add_argument("--count", type=int, default=100, help="LASSO grid size")
    p.add_argument("--lambdas", default=None, help="explicit comma-separated LASSO grid")
    p = sub.add_parser("diagnose", help="design conditions and stopping time")
    common(p, data=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--support", default=None, help="comma-separated support guess")
    p.add_argument("--sigma", type=float, default=None)
    common(sub.add_parser("experiment", help="Monte Carlo AUC study"), config=True)
    p = sub.add_parser("stop-run", help="path with a data-dependent stopping rule")
    common(p, data=True)
    p.add_argument("--method", default="iss", choices=["iss", "lb"])
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--rule", default="residual", choices=["residual", "gradient"])
    p.add_argument("--gradient-factor", type=float, default=1.0)
    p.add_argument("--kappa", type=float, default=64.0)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--t-max", type=float, default=math.inf)
    p.add_argument("--max-iters", type=int, default=100_000)
    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=None, help="write here instead of the recorded directory")
    return parser


def run_command(command, args, config):
    """Execute ``command`` with argument dict ``args``; returns the exit code."""
    started = time.time()
    out = Path(args["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        outputs, inputs = COMMANDS[command](args, config)
        code = EXIT_OK
    except NoStop as exc:
        outputs, inputs = exc.args[0]
        code = EXIT_NO_STOP
    write_manifest(out, command, args, config, outputs, inputs, started)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    try:
        if ns.command == "replay":
            manifest = json.loads(Path(ns.manifest).read_text())
            command, args, config = manifest["command"], dict(manifest["args"]), manifest["config"]
            if ns.out_dir is not None:
                args["out_dir"] = ns.out_dir
            return run_command(command, args, config)
        config = None
        if ns.command in NEEDS_CONFIG:
            path = Path(args.pop("config"))
            if not path.exists():
                raise ConfigError(f"{path}: file not found")
            config = parse_config(path.read_text(), str(path))
        return run_command(ns.command, args, config)
    except (ConfigError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, SingularDesignError, ConvergenceError, AssumptionError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
