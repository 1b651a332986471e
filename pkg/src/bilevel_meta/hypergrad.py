"""Hypergradient estimators.

Three estimators of the total upper-level gradient are provided, plus an
exact evaluator for families with closed forms:

* implicit_estimate: solves H v = grad_f_phi per task by warm-started
  conjugate gradient on the matrix-free phi-Hessian and assembles
  mean(grad_f_theta) - mean(jvp(v)); memory footprint is independent of the
  inner-step count.
* itd_estimate: differentiates through the recorded inner gradient-descent
  trajectory by reverse accumulation, so every step stays a matrix-vector
  application but the whole trajectory must be retained.
* first_order_estimate: drops the second term entirely (the cheap, biased
  baseline).

Per-task work is independent; results are reduced in ascending task order so
runs are bit-reproducible under any worker scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cg import cg_solve
from .core import EvalCounters, NumericalError
from .tasks import quadratic_exact_hypergradient


@dataclass
class HypergradientEstimate:
    grad: np.ndarray
    estimator: str
    k_used: int | None = None
    n_used: int | None = None
    per_task_residuals: list = field(default_factory=list)
    counters_delta: EvalCounters = field(default_factory=EvalCounters)


@dataclass
class LowerTrajectory:
    """Inner iterates phi^0 .. phi^K recorded at a fixed theta; consumed only
    by the iterative-differentiation estimator."""
    snapshots: list
    theta: np.ndarray

    def __len__(self):
        return len(self.snapshots)


def _map_ordered(pool, fn, n):
    if pool is None:
        return [fn(i) for i in range(n)]
    return list(pool.map(fn, range(n)))


def _reduce(tasks, results):
    """Ascending-order accumulation of (grad_f_theta_i, correction_i, delta_i)."""
    grad = np.zeros_like(results[0][0])
    corr = np.zeros_like(results[0][0])
    delta = EvalCounters()
    for gt, u_i, d in results:
        grad += gt
        if u_i is not None:
            corr += u_i
        delta.add(d)
    n = len(tasks)
    return (grad - corr) / n, delta


def implicit_estimate(tasks, theta, phi_finals, v_warms, n_cg: int,
                      tol: float = 0.0, pool=None):
    """Implicit hypergradient with warm-started CG solves.

    For each task, v solves hvp_g(theta, phi_final, .) v = grad_f_phi at the
    final inner iterate, started from that task's previous solution. Returns
    the estimate together with the per-task v vectors for warm-starting the
    next outer iteration.
    """
    n = len(tasks)
    if not (len(phi_finals) == len(v_warms) == n):
        raise ValueError("need one phi_final and one v_warm per task")
    v_outs: list = [None] * n

    def one(i):
        oracle = tasks[i]
        before = oracle.counters.copy()
        phi = phi_finals[i]
        b = oracle.grad_f_phi(theta, phi)
        try:
            res = cg_solve(lambda vec: oracle.hvp_g(theta, phi, vec),
                           b, v_warms[i], n_cg, tol)
        except NumericalError as exc:
            raise NumericalError(f"task {i}: {exc}") from exc
        v_outs[i] = res.v
        u_i = oracle.jvp_g(theta, phi, res.v)
        gt = oracle.grad_f_theta(theta, phi)
        return gt, u_i, oracle.counters.delta_since(before), res.final_residual

    results = _map_ordered(pool, one, n)
    grad, delta = _reduce(tasks, [r[:3] for r in results])
    est = HypergradientEstimate(
        grad=grad, estimator="implicit_cg", n_used=n_cg,
        per_task_residuals=[r[3] for r in results], counters_delta=delta)
    return est, v_outs


def itd_estimate(tasks, theta, trajectories, lambda_phi: float, pool=None):
    """Backpropagation through the recorded inner trajectory.

    Reverse accumulation keeps a single carried q-vector: starting from
    grad_f_phi at the last iterate, each step k = K-1 .. 0 contributes
    -lambda_phi * jvp at the historical phi^k and then applies
    (I - lambda_phi * hvp at phi^k) to the carried vector. Second derivatives
    are evaluated at the historical phi^k but the current theta.
    """
    n = len(tasks)
    if len(trajectories) != n:
        raise ValueError("need one trajectory per task")
    k_steps = len(trajectories[0]) - 1
    if any(len(traj) - 1 != k_steps for traj in trajectories):
        raise ValueError("all trajectories must have the same number of steps")
    if lambda_phi <= 0.0:
        raise ValueError("lambda_phi must be positive")

    def one(i):
        oracle = tasks[i]
        before = oracle.counters.copy()
        snaps = trajectories[i].snapshots
        alpha = oracle.grad_f_phi(theta, snaps[-1])
        acc = np.zeros(oracle.p)
        for k in range(k_steps - 1, -1, -1):
            acc -= lambda_phi * oracle.jvp_g(theta, snaps[k], alpha)
            alpha = alpha - lambda_phi * oracle.hvp_g(theta, snaps[k], alpha)
        gt = oracle.grad_f_theta(theta, snaps[-1])
        # acc already carries its sign; hand it over as the subtracted term
        return gt, -acc, oracle.counters.delta_since(before)

    results = _map_ordered(pool, one, n)
    grad, delta = _reduce(tasks, results)
    return HypergradientEstimate(grad=grad, estimator="itd", k_used=k_steps,
                                 counters_delta=delta)


def first_order_estimate(tasks, theta, phi_finals):
    """Mean of grad_f_theta at the final inner iterates; ignores the
    dependence of the inner minimizers on theta."""
    if len(phi_finals) != len(tasks):
        raise ValueError("need one phi_final per task")

    def one(i):
        oracle = tasks[i]
        before = oracle.counters.copy()
        gt = oracle.grad_f_theta(theta, phi_finals[i])
        return gt, None, oracle.counters.delta_since(before)

    results = [one(i) for i in range(len(tasks))]
    grad, delta = _reduce(tasks, results)
    return HypergradientEstimate(grad=grad, estimator="first_order",
                                 counters_delta=delta)


def exact_estimate(tasks, theta):
    """Closed-form hypergradient for families that expose one."""
    grad = quadratic_exact_hypergradient(tasks, theta)
    return HypergradientEstimate(grad=grad, estimator="exact")


def estimator_error(estimate: HypergradientEstimate, tasks, theta) -> float:
    """Distance of an estimate from the closed-form batch hypergradient."""
    exact = quadratic_exact_hypergradient(tasks, theta)
    return float(np.linalg.norm(estimate.grad - exact))
