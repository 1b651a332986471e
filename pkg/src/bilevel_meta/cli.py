"""Command-line front end.

Three subcommands, each taking a TOML config path and an output directory:

    run        execute one optimization run; write run.jsonl (one JSON record
               per outer iteration plus a final summary record)
    gradcheck  finite-difference-check every oracle of the configured family
               at seeded probe points; write gradcheck.json
    sweep      run every cell of the Cartesian sweep over K / N / batch_size /
               estimator with derived sub-seeds; write sweep.csv

Unknown config keys are rejected. The environment variable
BILEVEL_BENCH_SEED overrides the optimizer seed. Exit codes: 0 ok,
2 config error, 3 numerical error or failed check.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from dataclasses import dataclass, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from .core import TAG_PROBE, TAG_SWEEP, ConfigError, NumericalError, rng_from
from .optimizer import ESTIMATORS, OuterConfig, RunRecord, run_loop
from .tasks import BiasedGradOracle, TaskFamily, build_family, gradcheck

SCHEMA_VERSION = 1

SEED_ENV_VAR = "BILEVEL_BENCH_SEED"

_FAMILY_DEFAULTS = {
    "quadratic": dict(seed=1, p=3, q=8, n_tasks=8, mu=1.0, l_g=2.0,
                      spread=1.0, weight=1.0, cos_weight=0.0),
    "sinusoid": dict(seed=1, q=8, n_tasks=8, m=10, ridge=1.0,
                     amplitude_range=[0.1, 5.0],
                     phase_range=[0.0, math.pi],
                     x_range=[-5.0, 5.0]),
}

_GRADCHECK_THRESHOLDS = {"quadratic": 1e-7, "sinusoid": 1e-4}


def _as_int(v, key):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key} must be an integer, got {v!r}")
    return v


def _as_float(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number, got {v!r}")
    return float(v)


def _as_bool(v, key):
    if not isinstance(v, bool):
        raise ConfigError(f"{key} must be a boolean, got {v!r}")
    return v


def _as_str(v, key):
    if not isinstance(v, str):
        raise ConfigError(f"{key} must be a string, got {v!r}")
    return v


def _as_float_list(v, key):
    if not isinstance(v, list):
        raise ConfigError(f"{key} must be an array of numbers, got {v!r}")
    return [_as_float(x, key) for x in v]


def _as_int_list(v, key):
    if not isinstance(v, list):
        raise ConfigError(f"{key} must be an array of integers, got {v!r}")
    return [_as_int(x, key) for x in v]


def _as_str_list(v, key):
    if not isinstance(v, list):
        raise ConfigError(f"{key} must be an array of strings, got {v!r}")
    return [_as_str(x, key) for x in v]


_OPTIMIZER_CASTERS = {
    "T": _as_int,
    "K": _as_int,
    "N": _as_int,
    "lambda_theta": _as_float,
    "lambda_phi": _as_float,
    "batch_size": _as_int,
    "mode": _as_str,
    "warm_start": _as_str,
    "tol_cg": _as_float,
    "seed": _as_int,
    "estimator": _as_str,
    "workers": _as_int,
    "sigma_f1": _as_float,
    "sigma_g1": _as_float,
    "sigma_g2": _as_float,
    "exact_every": _as_int,
    "theta0": _as_float_list,
    "theta0_scale": _as_float,
    "phi0": _as_str,
    "phi0_scale": _as_float,
}

_FAMILY_CASTERS = {
    "kind": _as_str,
    "seed": _as_int,
    "p": _as_int,
    "q": _as_int,
    "n_tasks": _as_int,
    "mu": _as_float,
    "l_g": _as_float,
    "spread": _as_float,
    "weight": _as_float,
    "cos_weight": _as_float,
    "m": _as_int,
    "ridge": _as_float,
    "amplitude_range": _as_float_list,
    "phase_range": _as_float_list,
    "x_range": _as_float_list,
    "fault_bias_grad_g_phi": _as_float,
}

_OUTPUT_CASTERS = {"log_every": _as_int, "timing": _as_bool}

_GRADCHECK_CASTERS = {"eps": _as_float, "threshold": _as_float, "probes": _as_int}

_SWEEP_CASTERS = {
    "K": _as_int_list,
    "N": _as_int_list,
    "batch_size": _as_int_list,
    "estimator": _as_str_list,
    "repeats": _as_int,
    "tail_fraction": _as_float,
}

_SECTIONS = {
    "family": _FAMILY_CASTERS,
    "optimizer": _OPTIMIZER_CASTERS,
    "output": _OUTPUT_CASTERS,
    "gradcheck": _GRADCHECK_CASTERS,
    "sweep": _SWEEP_CASTERS,
}


@dataclass
class ExperimentConfig:
    family: dict
    optimizer: OuterConfig
    output: dict
    gradcheck: dict
    sweep: dict | None
    fault_bias_grad_g_phi: float = 0.0


def _key_line(text: str, key: str) -> int | None:
    bare = key.rsplit(".", 1)[-1]
    pattern = re.compile(r"^\s*\"?" + re.escape(bare) + r"\"?\s*=")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return lineno
    return None


def _check_keys(doc: dict, text: str) -> None:
    for section, content in doc.items():
        if section not in _SECTIONS:
            line = _key_line(text, section)
            where = f" (line {line})" if line else ""
            raise ConfigError(f"unknown config section '{section}'{where}")
        if not isinstance(content, dict):
            raise ConfigError(f"config section '{section}' must be a table")
        for key in content:
            if key not in _SECTIONS[section]:
                qualified = f"{section}.{key}"
                line = _key_line(text, key)
                where = f" (line {line})" if line else ""
                raise ConfigError(f"unknown config key '{qualified}'{where}")


def _cast_section(doc: dict, section: str) -> dict:
    out = {}
    for key, value in doc.get(section, {}).items():
        out[key] = _SECTIONS[section][key](value, f"{section}.{key}")
    return out


def parse_config(path) -> ExperimentConfig:
    """Load and strictly validate an experiment config document."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    text = raw.decode("utf-8", errors="replace")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    _check_keys(doc, text)

    fam = _cast_section(doc, "family")
    kind = fam.pop("kind", "quadratic")
    if kind not in _FAMILY_DEFAULTS:
        raise ConfigError(f"family.kind must be one of "
                          f"{sorted(_FAMILY_DEFAULTS)}, got {kind!r}")
    fault = fam.pop("fault_bias_grad_g_phi", 0.0)
    family_params = dict(_FAMILY_DEFAULTS[kind])
    for key, value in fam.items():
        if key not in family_params:
            raise ConfigError(f"config key 'family.{key}' does not apply to "
                              f"family kind {kind!r}")
        family_params[key] = value
    family_params["kind"] = kind

    optimizer = OuterConfig(**_cast_section(doc, "optimizer"))
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            optimizer.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, "
                              f"got {env_seed!r}") from exc

    output = {"log_every": 1, "timing": False}
    output.update(_cast_section(doc, "output"))
    if output["log_every"] < 1:
        raise ConfigError("output.log_every must be >= 1")

    gc = {"eps": 1e-5, "threshold": None, "probes": 5}
    gc.update(_cast_section(doc, "gradcheck"))
    if gc["threshold"] is None:
        gc["threshold"] = _GRADCHECK_THRESHOLDS[kind]
    if gc["probes"] < 1:
        raise ConfigError("gradcheck.probes must be >= 1")

    sweep = _cast_section(doc, "sweep") if "sweep" in doc else None

    return ExperimentConfig(family=family_params, optimizer=optimizer,
                            output=output, gradcheck=gc, sweep=sweep,
                            fault_bias_grad_g_phi=fault)


def _build_family(cfg: ExperimentConfig) -> TaskFamily:
    params = dict(cfg.family)
    kind = params.pop("kind")
    return build_family(kind, params)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _record_to_dict(rec: RunRecord, timing: bool) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "record": "iter",
        "t": rec.t,
        "grad_est_norm": rec.grad_est_norm,
        "grad_exact_norm": rec.grad_exact_norm,
        "estimator_error": rec.estimator_error,
        "phi_gap": rec.phi_gap,
        "counters": rec.counters.as_dict(),
        "workspace_floats": rec.memory.workspace_floats,
        "trajectory_floats": rec.memory.trajectory_floats,
        "wall_ns": rec.wall_ns if timing else 0,
    }


def _summary_dict(records, family, theta) -> dict:
    last = records[-1]
    final_exact = None
    if family.kind == "quadratic":
        final_exact = float(np.linalg.norm(family.exact_hypergradient(theta)))
    running_mean = None
    if all(r.grad_exact_norm is not None for r in records):
        running_mean = float(np.mean([r.grad_exact_norm ** 2 for r in records]))
    return {
        "schema": SCHEMA_VERSION,
        "record": "summary",
        "T": len(records),
        "grad_est_norm": last.grad_est_norm,
        "grad_exact_norm": final_exact,
        "running_mean_sq_grad_exact": running_mean,
        "counters": last.counters.as_dict(),
        "workspace_floats": last.memory.workspace_floats,
        "trajectory_floats": last.memory.trajectory_floats,
        "total_floats": last.memory.total_floats,
    }


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_run(cfg: ExperimentConfig, out_dir: str) -> int:
    family = _build_family(cfg)
    records, theta = run_loop(family, cfg.optimizer)
    os.makedirs(out_dir, exist_ok=True)
    log_every = cfg.output["log_every"]
    timing = cfg.output["timing"]
    path = os.path.join(out_dir, "run.jsonl")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            if rec.t % log_every == 0 or rec.t == len(records) - 1:
                fh.write(_dump_line(_record_to_dict(rec, timing)) + "\n")
        fh.write(_dump_line(_summary_dict(records, family, theta)) + "\n")
    print(f"wrote {path} ({len(records)} iterations)")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, out_dir: str) -> int:
    family = _build_family(cfg)
    tasks = family.tasks
    if cfg.fault_bias_grad_g_phi != 0.0:
        tasks = [BiasedGradOracle(t, cfg.fault_bias_grad_g_phi) for t in tasks]
    eps = cfg.gradcheck["eps"]
    threshold = cfg.gradcheck["threshold"]
    probes = cfg.gradcheck["probes"]
    seed = cfg.optimizer.seed

    worst: dict[str, float] = {}
    for k in range(probes):
        theta = rng_from(seed, TAG_PROBE, k, 0).standard_normal(family.p)
        phi = rng_from(seed, TAG_PROBE, k, 1).standard_normal(family.q)
        for task in tasks:
            report = gradcheck(task, theta, phi, eps=eps, seed=seed)
            for method, err in report.items():
                worst[method] = max(worst.get(method, 0.0), err)

    failing = sorted(m for m, e in worst.items() if e > threshold)
    passed = not failing
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "gradcheck.json")
    doc = {
        "schema": SCHEMA_VERSION,
        "kind": family.kind,
        "eps": eps,
        "threshold": threshold,
        "probes": probes,
        "worst": {k: worst[k] for k in sorted(worst)},
        "pass": passed,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for method in sorted(worst):
        status = "ok" if worst[method] <= threshold else "FAIL"
        print(f"{method}: worst relative error {worst[method]:.3e} "
              f"(threshold {threshold:.0e}) {status}")
    if not passed:
        print(f"gradcheck FAILED for: {', '.join(failing)}", file=sys.stderr)
        return 3
    print("gradcheck passed")
    return 0


_SWEEP_COLUMNS = [
    "K", "N", "batch_size", "estimator", "repeats",
    "running_mean_sq_grad", "tail_mean_sq_grad", "final_estimator_error",
    "workspace_floats", "trajectory_floats", "total_floats",
    "n_grad_f_theta", "n_grad_f_phi", "n_grad_g_phi", "n_hvp", "n_jvp",
]


def _cell_metrics(records, tail_fraction: float) -> dict:
    norms = [r.grad_exact_norm if r.grad_exact_norm is not None
             else r.grad_est_norm for r in records]
    sq = [x * x for x in norms]
    tail_n = max(1, int(round(tail_fraction * len(records))))
    return {
        "running_mean_sq_grad": float(np.mean(sq)),
        "tail_mean_sq_grad": float(np.mean(sq[-tail_n:])),
        "final_estimator_error": records[-1].estimator_error,
    }


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_sweep(cfg: ExperimentConfig, out_dir: str) -> int:
    if cfg.sweep is None:
        raise ConfigError("sweep command requires a [sweep] section")
    sweep = dict(cfg.sweep)
    repeats = sweep.pop("repeats", 1)
    tail_fraction = sweep.pop("tail_fraction", 0.25)
    if repeats < 1:
        raise ConfigError("sweep.repeats must be >= 1")
    if not 0.0 < tail_fraction <= 1.0:
        raise ConfigError("sweep.tail_fraction must lie in (0, 1]")
    axes_present = [k for k in ("K", "N", "batch_size", "estimator") if k in sweep]
    if not axes_present:
        raise ConfigError("sweep section defines no axes")
    for key in axes_present:
        if len(sweep[key]) == 0:
            raise ConfigError(f"sweep axis '{key}' is empty")

    family = _build_family(cfg)
    base = cfg.optimizer
    k_axis = sweep.get("K", [base.K])
    n_axis = sweep.get("N", [base.N])
    b_axis = sweep.get("batch_size",
                       [base.batch_size if base.batch_size is not None
                        else len(family.tasks)])
    e_axis = sweep.get("estimator", [base.estimator])

    rows = []
    for k_val in k_axis:
        for n_val in n_axis:
            for b_val in b_axis:
                for est in e_axis:
                    if est not in ESTIMATORS:
                        raise ConfigError(f"sweep estimator {est!r} must be "
                                          f"one of {ESTIMATORS}")
                    cell_runs = []
                    for rep in range(repeats):
                        sub_seed = int(rng_from(
                            base.seed, TAG_SWEEP, k_val, n_val, b_val,
                            ESTIMATORS.index(est), rep).integers(2 ** 63))
                        cell_cfg = replace(base, K=k_val, N=n_val,
                                           batch_size=b_val, estimator=est,
                                           seed=sub_seed)
                        records, _ = run_loop(family, cell_cfg)
                        cell_runs.append(records)
                    metrics = [_cell_metrics(r, tail_fraction) for r in cell_runs]
                    first = cell_runs[0]
                    totals = first[-1].counters
                    mem = first[-1].memory
                    err_vals = [m["final_estimator_error"] for m in metrics]
                    row = {
                        "K": k_val,
                        "N": n_val,
                        "batch_size": b_val,
                        "estimator": est,
                        "repeats": repeats,
                        "running_mean_sq_grad": float(np.mean(
                            [m["running_mean_sq_grad"] for m in metrics])),
                        "tail_mean_sq_grad": float(np.mean(
                            [m["tail_mean_sq_grad"] for m in metrics])),
                        "final_estimator_error": (
                            float(np.mean(err_vals))
                            if all(e is not None for e in err_vals) else None),
                        "workspace_floats": mem.workspace_floats,
                        "trajectory_floats": mem.trajectory_floats,
                        "total_floats": mem.total_floats,
                        **totals.as_dict(),
                    }
                    rows.append(row)

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row[c]) for c in _SWEEP_COLUMNS) + "\n")
    print(f"wrote {path} ({len(rows)} cells)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bilevel-bench",
        description="Benchmark harness for the memory-reduced bilevel "
                    "meta-learning optimizer")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("run", "execute one optimization run"),
                      ("gradcheck", "finite-difference-check the oracles"),
                      ("sweep", "run a parameter sweep")):
        sp = sub.add_parser(name, help=doc)
        sp.add_argument("config", help="path to the TOML experiment config")
        sp.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config)
        if args.command == "run":
            return cmd_run(cfg, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.out)
        return cmd_sweep(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
