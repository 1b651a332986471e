"""Outer loop: K-step lower-level gradient descent with warm starts, the full
meta-optimization loop over task batches, a structural memory model, and the
running-mean stopping diagnostic.

Per-task lower solves and per-task hypergradient contributions may execute on
parallel worker threads; reductions always happen in ascending task-slot
order and per-slot noise streams are keyed independently, so the records a
run produces are bit-identical for any worker count.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    TAG_NOISE,
    TAG_PHI0,
    TAG_SAMPLE,
    TAG_THETA0,
    ConfigError,
    EvalCounters,
    NumericalError,
    as_vector,
    compute_smoothness_constant,
    rng_from,
)
from .hypergrad import (
    LowerTrajectory,
    exact_estimate,
    first_order_estimate,
    implicit_estimate,
    itd_estimate,
)
from .tasks import NoisyOracle, TaskFamily

ESTIMATORS = ("implicit_cg", "itd", "first_order", "exact")
MODES = ("deterministic", "stochastic")
WARM_STARTS = ("none", "slot", "task_id")

DIVERGENCE_LIMIT = 1e12


@dataclass
class OuterConfig:
    """Settings for one outer-loop run.

    lambda_theta defaults to 1/(2 L) with L the computed upper-level
    smoothness constant, and lambda_phi to 1/l_g; both can be overridden.
    batch_size defaults to the family size. tol_cg = 0 reproduces the
    fixed-iteration solver exactly.
    """

    T: int = 100
    K: int = 10
    N: int = 10
    lambda_theta: float | None = None
    lambda_phi: float | None = None
    batch_size: int | None = None
    mode: str = "deterministic"
    warm_start: str = "slot"
    tol_cg: float = 1e-10
    seed: int = 0
    estimator: str = "implicit_cg"
    workers: int = 1
    sigma_f1: float = 0.0
    sigma_g1: float = 0.0
    sigma_g2: float = 0.0
    exact_every: int | None = None
    theta0: list | None = None
    theta0_scale: float = 1.0
    phi0: str = "zeros"
    phi0_scale: float = 1.0

    def validate(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, "
                              f"got {self.estimator!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.warm_start not in WARM_STARTS:
            raise ConfigError(f"warm_start must be one of {WARM_STARTS}, "
                              f"got {self.warm_start!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        min_k = 0 if self.estimator == "first_order" else 1
        if self.K < min_k:
            raise ConfigError(f"K must be >= {min_k} for estimator "
                              f"{self.estimator!r}, got {self.K}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lambda_theta", "lambda_phi"):
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val > 0.0):
                raise ConfigError(f"{name} must be positive, got {val}")
        if self.tol_cg < 0.0:
            raise ConfigError(f"tol_cg must be >= 0, got {self.tol_cg}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        for name in ("sigma_f1", "sigma_g1", "sigma_g2"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be non-negative")
        if self.exact_every is not None and self.exact_every < 0:
            raise ConfigError(f"exact_every must be >= 0, got {self.exact_every}")
        if self.phi0 not in ("zeros", "gaussian"):
            raise ConfigError(f"phi0 must be 'zeros' or 'gaussian', got {self.phi0!r}")


@dataclass
class MemoryReport:
    """Structural accounting of resident float64 scalars.

    workspace_floats counts parameter-sized state the algorithm must keep
    live across phases of an outer iteration; trajectory_floats counts
    scalars retained solely because history is needed for differentiation.
    Per-call scratch bounded by a constant number of vectors is excluded on
    both sides. The inventory (B = batch size):

        implicit_cg : theta (p) + gradient buffer (p) + accumulator (p)
                      + per-task final iterate (q B) + warm-start solve (q B)
        itd         : theta + gradient buffer + accumulator + per-task final
                      iterate (q B); trajectory adds (K+1) q B
        first_order : theta + gradient buffer + per-task final iterate (q B)
        exact       : theta + gradient buffer

    Counted resident scalars, not allocator telemetry: the claim under test
    is what must be retained, which this model captures exactly.
    """

    workspace_floats: int
    trajectory_floats: int

    @property
    def total_floats(self) -> int:
        return self.workspace_floats + self.trajectory_floats


def memory_report(config: OuterConfig, p: int, q: int) -> MemoryReport:
    """Memory model for a run with the given dimensions (see MemoryReport)."""
    if config.batch_size is None:
        raise ConfigError("batch_size must be set to build a memory report")
    b = config.batch_size
    if config.estimator == "implicit_cg":
        return MemoryReport(3 * p + 2 * q * b, 0)
    if config.estimator == "itd":
        return MemoryReport(3 * p + q * b, (config.K + 1) * q * b)
    if config.estimator == "first_order":
        return MemoryReport(2 * p + q * b, 0)
    if config.estimator == "exact":
        return MemoryReport(2 * p, 0)
    raise ConfigError(f"unknown estimator {config.estimator!r}")


@dataclass
class RunRecord:
    """One row per outer iteration, measured at theta_t before the update."""

    t: int
    grad_est_norm: float
    grad_exact_norm: float | None
    estimator_error: float | None
    phi_gap: float | None
    counters: EvalCounters
    memory: MemoryReport
    wall_ns: int = 0


def lower_solve(oracle, theta, phi0, n_steps: int, step_size: float,
                keep_trajectory: bool = False, l_g: float | None = None):
    """n_steps of gradient descent on the task objective at fixed theta.

    Returns the final iterate and, when requested, the full trajectory of
    n_steps + 1 iterates. Exactly n_steps lower-gradient evaluations.
    """
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    if step_size <= 0.0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    if l_g is not None and step_size * l_g > 1.0 + 1e-12:
        warnings.warn(f"step_size {step_size} exceeds 1/l_g = {1.0 / l_g:.3g}; "
                      "the per-step contraction guarantee no longer holds",
                      stacklevel=2)
    phi = np.array(phi0, dtype=np.float64)
    snapshots = [phi.copy()] if keep_trajectory else None
    for _ in range(n_steps):
        phi = phi - step_size * oracle.grad_g_phi(theta, phi)
        if keep_trajectory:
            snapshots.append(phi)
    # non-finite values are sticky under the update, so one check suffices;
    # replay on the (cold) error path to name the offending step
    if n_steps > 0 and not math.isfinite(float(np.sum(phi))):
        probe = np.array(phi0, dtype=np.float64)
        for k in range(n_steps):
            probe = probe - step_size * oracle.grad_g_phi(theta, probe)
            if not np.all(np.isfinite(probe)):
                raise NumericalError(f"non-finite task parameters at inner step {k}")
        raise NumericalError(f"non-finite task parameters at inner step {n_steps - 1}")
    traj = LowerTrajectory(snapshots, theta) if keep_trajectory else None
    return phi, traj


def _resolve(family: TaskFamily, config: OuterConfig) -> OuterConfig:
    config.validate()
    resolved = replace(config)
    if resolved.batch_size is None:
        resolved.batch_size = len(family.tasks)
    if resolved.mode == "deterministic" and resolved.batch_size > len(family.tasks):
        raise ConfigError(
            f"deterministic mode needs batch_size <= n_tasks "
            f"({resolved.batch_size} > {len(family.tasks)})")
    if resolved.lambda_phi is None:
        resolved.lambda_phi = 1.0 / family.constants.l_g
    if resolved.lambda_theta is None:
        resolved.lambda_theta = 0.5 / compute_smoothness_constant(family.constants)
    if resolved.exact_every is None:
        resolved.exact_every = 1 if family.q <= 64 else 10
    return resolved


def run_algorithm1(family: TaskFamily, config: OuterConfig) -> list[RunRecord]:
    """Run the memory-reduced outer loop and return one record per iteration.

    Each iteration: sample (or fix) a task batch, warm-start and run the
    K-step lower solves, estimate the hypergradient per the configured
    estimator, take the outer gradient step, and log norms, exact-gradient
    diagnostics where the family has closed forms, counters, and the memory
    model. Raises on non-finite iterates or once ||theta|| exceeds 1e12.
    """
    records, _ = run_loop(family, config)
    return records


def run_loop(family: TaskFamily, config: OuterConfig):
    """Same as run_algorithm1 but also returns the final meta parameters."""
    cfg = _resolve(family, config)
    tasks = family.tasks
    n_tasks = len(tasks)
    batch = cfg.batch_size
    p, q = family.p, family.q
    mem = memory_report(cfg, p, q)

    if cfg.theta0 is not None:
        theta = as_vector(cfg.theta0, "theta0", length=p)
    else:
        theta = rng_from(cfg.seed, TAG_THETA0).standard_normal(p) * cfg.theta0_scale

    def initial_phi(key: int) -> np.ndarray:
        if cfg.phi0 == "gaussian":
            return rng_from(cfg.seed, TAG_PHI0, key).standard_normal(q) * cfg.phi0_scale
        return np.zeros(q)

    noisy = cfg.sigma_f1 > 0.0 or cfg.sigma_g1 > 0.0 or cfg.sigma_g2 > 0.0
    wrap_slots = noisy or cfg.mode == "stochastic"
    if wrap_slots:
        slot_oracles = [
            NoisyOracle(tasks[0], sigma_f1=cfg.sigma_f1, sigma_g1=cfg.sigma_g1,
                        sigma_g2=cfg.sigma_g2, seed=cfg.seed,
                        stream_key=(TAG_NOISE, i))
            for i in range(batch)
        ]
    else:
        slot_oracles = list(tasks[:batch])

    phi_slot = [initial_phi(i) for i in range(batch)]
    v_slot = [np.zeros(q) for _ in range(batch)]
    phi_by_task: dict[int, np.ndarray] = {}
    v_by_task: dict[int, np.ndarray] = {}

    needs_lower = cfg.estimator != "exact"
    keep_traj = cfg.estimator == "itd"
    exact_metrics = family.kind == "quadratic" and cfg.exact_every > 0

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    records: list[RunRecord] = []
    totals = EvalCounters()
    try:
        for t in range(cfg.T):
            tic = time.perf_counter_ns()
            if not math.isfinite(float(np.sum(theta))) or \
                    float(np.linalg.norm(theta)) > DIVERGENCE_LIMIT:
                raise NumericalError(f"outer divergence at iteration {t}")

            if cfg.mode == "stochastic":
                idx = rng_from(cfg.seed, TAG_SAMPLE, t).integers(0, n_tasks, batch)
            else:
                idx = np.arange(batch)
            if wrap_slots:
                for i in range(batch):
                    slot_oracles[i].inner = tasks[idx[i]]

            before = [o.counters.copy() for o in slot_oracles]

            if needs_lower:
                if cfg.warm_start == "slot":
                    phi0s = phi_slot
                elif cfg.warm_start == "task_id":
                    phi0s = [phi_by_task.get(int(j)) for j in idx]
                    phi0s = [p0 if p0 is not None else initial_phi(int(j))
                             for p0, j in zip(phi0s, idx)]
                else:
                    phi0s = [initial_phi(i) for i in range(batch)]

                def solve(i):
                    return lower_solve(slot_oracles[i], theta, phi0s[i], cfg.K,
                                       cfg.lambda_phi, keep_trajectory=keep_traj,
                                       l_g=family.constants.l_g)

                if pool is None:
                    solved = [solve(i) for i in range(batch)]
                else:
                    solved = list(pool.map(solve, range(batch)))
                phi_finals = [s[0] for s in solved]
                trajectories = [s[1] for s in solved]
            else:
                phi_finals = None
                trajectories = None

            v_outs = None
            try:
                if cfg.estimator == "implicit_cg":
                    if cfg.warm_start == "slot":
                        v_warms = v_slot
                    elif cfg.warm_start == "task_id":
                        v_warms = [v_by_task.get(int(j), np.zeros(q)) for j in idx]
                    else:
                        v_warms = [np.zeros(q) for _ in range(batch)]
                    est, v_outs = implicit_estimate(
                        slot_oracles, theta, phi_finals, v_warms,
                        cfg.N, cfg.tol_cg, pool=pool)
                    est.k_used = cfg.K
                elif cfg.estimator == "itd":
                    est = itd_estimate(slot_oracles, theta, trajectories,
                                       cfg.lambda_phi, pool=pool)
                elif cfg.estimator == "first_order":
                    est = first_order_estimate(slot_oracles, theta, phi_finals)
                    est.k_used = cfg.K
                else:
                    est = exact_estimate([tasks[int(j)] for j in idx], theta)
            except NumericalError as exc:
                raise NumericalError(f"iteration {t}: {exc}") from exc

            if needs_lower:
                if cfg.warm_start == "slot":
                    for i in range(batch):
                        phi_slot[i] = phi_finals[i]
                        if v_outs is not None:
                            v_slot[i] = v_outs[i]
                elif cfg.warm_start == "task_id":
                    for i in range(batch):
                        phi_by_task[int(idx[i])] = phi_finals[i]
                        if v_outs is not None:
                            v_by_task[int(idx[i])] = v_outs[i]

            for i in range(batch):
                totals.add(slot_oracles[i].counters.delta_since(before[i]))

            grad_exact_norm = None
            est_err = None
            phi_gap = None
            if exact_metrics and (t % cfg.exact_every == 0 or t == cfg.T - 1):
                grad_exact_norm = float(np.linalg.norm(
                    family.exact_hypergradient(theta)))
                est_err = float(np.linalg.norm(
                    est.grad - family.exact_hypergradient(theta, idx)))
                if phi_finals is not None:
                    stars = family.phi_star(theta, idx)
                    gaps = np.linalg.norm(np.stack(phi_finals) - stars, axis=1)
                    phi_gap = float(gaps.mean())

            records.append(RunRecord(
                t=t,
                grad_est_norm=float(np.linalg.norm(est.grad)),
                grad_exact_norm=grad_exact_norm,
                estimator_error=est_err,
                phi_gap=phi_gap,
                counters=totals.copy(),
                memory=mem,
                wall_ns=time.perf_counter_ns() - tic,
            ))
            theta = theta - cfg.lambda_theta * est.grad
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return records, theta


def epsilon_solution_check(records: list[RunRecord], epsilon: float):
    """Smallest T whose running mean of squared exact gradient norms is at
    most epsilon; (False, -1) when never reached."""
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    total = 0.0
    for count, rec in enumerate(records, start=1):
        if rec.grad_exact_norm is None:
            raise ConfigError(f"record t={rec.t} is missing grad_exact_norm; "
                              "run with exact metrics every iteration")
        total += rec.grad_exact_norm ** 2
        if total / count <= epsilon:
            return True, count
    return False, -1
