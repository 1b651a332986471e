"""Warm-started conjugate gradient on a matrix-free SPD operator.

Solves H v = b given only v -> H v, which is how the Hessian-inverse-vector
product behind the implicit hypergradient is approximated. The recurrences
are the plain CG ones:

    r0 = p0 = b - H v0
    eta  = (r.r) / (p.Hp)
    v   <- v + eta p
    r   <- r - eta Hp
    zeta = (r+.r+) / (r.r)
    p   <- r+ + zeta p

with exactly one operator application per iteration plus one for r0. A
stopping tolerance is added on top of the fixed iteration budget purely as a
guard for warm starts that land on the solution; tol=0 keeps the fixed-N
behavior (the loop then only stops early on an exactly zero residual, where
the recurrences would otherwise divide by zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import NumericalError

_TINY = 1e-300


@dataclass
class CgState:
    """Solver state at an iteration boundary; r stays within recurrence
    drift (<= 1e-8 ||b||) of the directly recomputed b - H v."""
    v: np.ndarray
    r: np.ndarray
    p: np.ndarray
    iter: int
    residual_norm: float


@dataclass
class CgResult:
    v: np.ndarray
    iters_used: int
    final_residual: float
    early_exit: bool


def cg_solve(apply_h: Callable[[np.ndarray], np.ndarray],
             b: np.ndarray,
             v0: np.ndarray | None = None,
             n_iters: int = 0,
             tol: float = 1e-10,
             eps_floor: float = 1e-30,
             on_step: Callable[[CgState], None] | None = None) -> CgResult:
    """Run up to n_iters CG iterations from v0, stopping once
    ||r|| <= tol * max(||b||, eps_floor).

    apply_h must be symmetric positive definite; a non-positive curvature
    p.Hp along a search direction with the residual still above tolerance is
    reported as an error rather than patched over, since for SPD input it can
    only mean the operator is broken.
    """
    b = np.asarray(b, dtype=np.float64)
    if n_iters < 0:
        raise ValueError(f"n_iters must be >= 0, got {n_iters}")
    if tol < 0.0:
        raise ValueError(f"tol must be >= 0, got {tol}")
    v = np.zeros_like(b) if v0 is None else np.array(v0, dtype=np.float64)
    threshold_sq = (tol * max(float(np.linalg.norm(b)), eps_floor)) ** 2

    r = b - apply_h(v)
    rr = float(r @ r)
    if not math.isfinite(rr):
        raise NumericalError("non-finite residual at initialization")
    p = r.copy()
    iters = 0
    early = False
    if on_step is not None:
        on_step(CgState(v.copy(), r.copy(), p.copy(), 0, math.sqrt(rr)))

    for _ in range(n_iters):
        if rr <= threshold_sq:
            early = True
            break
        h = apply_h(p)
        ph = float(p @ h)
        if not math.isfinite(ph):
            raise NumericalError(f"non-finite curvature p.Hp at iteration {iters}")
        if ph <= _TINY:
            # the loop-top test already returned converged residuals
            raise NumericalError(
                f"operator not positive definite along search direction "
                f"(p.Hp={ph:.3e} at iteration {iters})")
        eta = rr / ph
        v += eta * p
        r -= eta * h
        rr_next = float(r @ r)
        if not math.isfinite(rr_next):
            raise NumericalError(f"non-finite residual update at iteration {iters}")
        if rr <= _TINY:
            raise NumericalError(f"residual norm underflow at iteration {iters}")
        zeta = rr_next / rr
        p = r + zeta * p
        rr = rr_next
        iters += 1
        if on_step is not None:
            on_step(CgState(v.copy(), r.copy(), p.copy(), iters, math.sqrt(rr)))

    return CgResult(v, iters, math.sqrt(rr), early)
