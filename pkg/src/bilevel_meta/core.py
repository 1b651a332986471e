"""Shared primitives: seeded randomness, the task-oracle interface, evaluation
counters, problem constants, and the dense SPD solve used as a test oracle.

Everything runs in float64. The dense solver exists only so that iterative
paths can be checked against an independent direct factorization; the
algorithm itself never materializes a Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import scipy.linalg


class ConfigError(ValueError):
    """Invalid configuration or malformed input document."""


class NumericalError(ArithmeticError):
    """Numerical failure at run time (breakdown, divergence, non-finite data)."""


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

# Stream tags keep derived seeds from colliding across unrelated purposes.
TAG_FAMILY = 1
TAG_THETA0 = 2
TAG_PHI0 = 3
TAG_SAMPLE = 4
TAG_NOISE = 5
TAG_PROBE = 6
TAG_SWEEP = 7


def rng_from(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *key).

    All randomness in a run flows through streams derived this way, so a run
    is bit-reproducible given (seed, config) no matter how work is scheduled.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def as_vector(x, name: str = "x", length: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ConfigError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ConfigError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name: str = "x", shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise ConfigError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ConfigError(f"{name} must be a positive finite number, got {value}")
    return value


# ---------------------------------------------------------------------------
# evaluation counters
# ---------------------------------------------------------------------------

@dataclass
class EvalCounters:
    """Cumulative oracle-call counts.

    One hvp call counts as one gradient evaluation on the task parameters and
    one jvp call as one gradient evaluation on the meta parameters; the
    phi_side/theta_side properties encode that accounting.
    """

    n_grad_f_theta: int = 0
    n_grad_f_phi: int = 0
    n_grad_g_phi: int = 0
    n_hvp: int = 0
    n_jvp: int = 0

    def copy(self) -> "EvalCounters":
        return EvalCounters(self.n_grad_f_theta, self.n_grad_f_phi,
                            self.n_grad_g_phi, self.n_hvp, self.n_jvp)

    def delta_since(self, earlier: "EvalCounters") -> "EvalCounters":
        return EvalCounters(
            self.n_grad_f_theta - earlier.n_grad_f_theta,
            self.n_grad_f_phi - earlier.n_grad_f_phi,
            self.n_grad_g_phi - earlier.n_grad_g_phi,
            self.n_hvp - earlier.n_hvp,
            self.n_jvp - earlier.n_jvp,
        )

    def add(self, other: "EvalCounters") -> None:
        self.n_grad_f_theta += other.n_grad_f_theta
        self.n_grad_f_phi += other.n_grad_f_phi
        self.n_grad_g_phi += other.n_grad_g_phi
        self.n_hvp += other.n_hvp
        self.n_jvp += other.n_jvp

    @property
    def phi_side(self) -> int:
        """Gradient evaluations on the task parameters."""
        return self.n_grad_f_phi + self.n_grad_g_phi + self.n_hvp

    @property
    def theta_side(self) -> int:
        """Gradient evaluations on the meta parameters."""
        return self.n_grad_f_theta + self.n_jvp

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def merge_counters(a: EvalCounters, b: EvalCounters) -> EvalCounters:
    """Componentwise sum; commutative and associative."""
    out = a.copy()
    out.add(b)
    return out


# ---------------------------------------------------------------------------
# problem constants
# ---------------------------------------------------------------------------

@dataclass
class ProblemConstants:
    """Declared smoothness/strong-convexity/variance constants of a task family.

    mu        strong convexity of the lower-level objective in phi
    l_f0      Lipschitz constant of the upper-level objective value
    l_f       Lipschitz constant of its gradient
    l_g       Lipschitz constant of the lower-level gradient (spectral upper
              bound of the phi-Hessian; kappa = l_g / mu)
    l_g1      Lipschitz constant of the cross second derivative
    l_g2      Lipschitz constant of the phi-Hessian
    sigma_*   per-channel gradient-noise variances (zero when deterministic)
    """

    mu: float
    l_f0: float
    l_f: float
    l_g: float
    l_g1: float = 0.0
    l_g2: float = 0.0
    sigma_f1_sq: float = 0.0
    sigma_g1_sq: float = 0.0
    sigma_g2_sq: float = 0.0

    def __post_init__(self):
        for name in ("mu", "l_f0", "l_f", "l_g"):
            check_positive(getattr(self, name), name)
        for name in ("l_g1", "l_g2", "sigma_f1_sq", "sigma_g1_sq", "sigma_g2_sq"):
            if float(getattr(self, name)) < 0.0:
                raise ConfigError(f"{name} must be non-negative")
        if self.mu > self.l_g:
            raise ConfigError(f"mu={self.mu} must not exceed l_g={self.l_g}")

    @property
    def kappa(self) -> float:
        return self.l_g / self.mu


def smoothness_constant(mu: float, l_f0: float, l_f: float, l_g: float,
                        l_g1: float, l_g2: float) -> float:
    """Lipschitz constant of the total upper-level gradient.

    L = L_max + (2 L_max^2 + l_g1 l_f0^2)/mu
          + (L_max^3 + l_f0 L_max (l_g1 + l_g2))/mu^2
          + (l_g2 L_max^2 l_f0)/mu^3,        L_max = max(l_f, l_g).
    """
    l_max = max(l_f, l_g)
    return (
        l_max
        + (2.0 * l_max**2 + l_g1 * l_f0**2) / mu
        + (l_max**3 + l_f0 * l_max * (l_g1 + l_g2)) / mu**2
        + (l_g2 * l_max**2 * l_f0) / mu**3
    )


def compute_smoothness_constant(c: ProblemConstants) -> float:
    """smoothness_constant evaluated at a family's declared constants."""
    return smoothness_constant(c.mu, c.l_f0, c.l_f, c.l_g, c.l_g1, c.l_g2)


def compute_inner_iteration_floor(c: ProblemConstants, lambda_phi: float,
                                  cap: int = 10**6) -> int:
    """Smallest inner-step count that contracts the warm-start error below 1/6.

    Returns ceil(log 6 / -log(1 - mu*lambda_phi)). The contraction factor
    mu*lambda_phi must lie in (0, 1); results above `cap` raise instead of
    silently overflowing.
    """
    check_positive(lambda_phi, "lambda_phi")
    x = c.mu * lambda_phi
    if not 0.0 < x < 1.0:
        raise NumericalError(f"contraction factor out of range: mu*lambda_phi={x}")
    k = math.ceil(math.log(6.0) / -math.log1p(-x))
    if k > cap:
        raise NumericalError(
            f"inner iteration floor {k} exceeds cap {cap}; "
            f"mu*lambda_phi={x} is too close to zero")
    return k


def compute_cg_iteration_floor(c: ProblemConstants, gamma: float) -> float:
    """Solver-iteration floor for the stochastic convergence guarantee.

    The bound's decay base gamma in (0, 1) is not pinned down by the theory
    (it depends on an unspecified constant), so it must be supplied. Terms
    whose log argument would be zero or below one are clamped at zero.
    """
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    noise_arg = (2.0 * c.sigma_f1_sq * c.l_g**2 / c.mu**2
                 + 2.0 * c.sigma_g1_sq * c.l_g**2 * c.l_f0**2 / c.mu**4)
    psi = (
        max(2.0 * math.log(c.l_f0), 0.0)
        + 3.0 * math.log(2.0)
        + (max(math.log(noise_arg), 0.0) if noise_arg > 0.0 else 0.0)
        + max(math.log(36.0 * c.l_f**2), 0.0)
    )
    return (2.0 * math.log(c.kappa) + psi) / math.log(1.0 / gamma)


# ---------------------------------------------------------------------------
# dense SPD solve (test oracle)
# ---------------------------------------------------------------------------

def spd_solve_oracle(h: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve H x = b for symmetric positive-definite H by dense Cholesky.

    Independent reference for the matrix-free solver; never used on the
    algorithm's hot path. One step of iterative refinement keeps the
    residual at or below 1e-10 * ||b|| for reasonably conditioned systems.
    """
    h = as_matrix(h, "H")
    n = h.shape[0]
    if h.shape[1] != n:
        raise ConfigError(f"H must be square, got shape {h.shape}")
    b = as_vector(b, "b", length=n)
    scale = max(1.0, float(np.max(np.abs(h))))
    asym = float(np.max(np.abs(h - h.T)))
    if asym > 1e-12 * scale:
        raise NumericalError(f"H is not symmetric: max |H - H^T| = {asym:.3e}")
    try:
        factor = scipy.linalg.cho_factor(h, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"H is not positive definite: {exc}") from exc
    x = scipy.linalg.cho_solve(factor, b, check_finite=False)
    x += scipy.linalg.cho_solve(factor, b - h @ x, check_finite=False)
    return x


# ---------------------------------------------------------------------------
# oracle interface
# ---------------------------------------------------------------------------

class TaskOracle:
    """Per-task evaluation interface used by all estimators.

    Concrete tasks implement the underscored methods; the public methods add
    counter bookkeeping and are the only entry points the optimizer uses.
    The phi-Hessian operator applied by hvp_g must be symmetric positive
    definite with spectrum inside [mu, l_g]. Calls allocate fresh outputs, so
    distinct tasks are safe to evaluate concurrently; a single oracle's calls
    are made by one worker at a time.

    Tasks also expose the scalar objectives f and g so that every derivative
    can be checked against finite differences.
    """

    p: int
    q: int
    has_closed_form = False

    def __init__(self, counters: EvalCounters | None = None):
        self.counters = counters if counters is not None else EvalCounters()

    # counted entry points ---------------------------------------------------

    def grad_f_theta(self, theta, phi) -> np.ndarray:
        self.counters.n_grad_f_theta += 1
        return self._grad_f_theta(theta, phi)

    def grad_f_phi(self, theta, phi) -> np.ndarray:
        self.counters.n_grad_f_phi += 1
        return self._grad_f_phi(theta, phi)

    def grad_g_phi(self, theta, phi) -> np.ndarray:
        self.counters.n_grad_g_phi += 1
        return self._grad_g_phi(theta, phi)

    def hvp_g(self, theta, phi, v) -> np.ndarray:
        self.counters.n_hvp += 1
        return self._hvp_g(theta, phi, v)

    def jvp_g(self, theta, phi, v) -> np.ndarray:
        self.counters.n_jvp += 1
        return self._jvp_g(theta, phi, v)

    # uncounted scalar objectives (finite-difference checks only) ------------

    def f(self, theta, phi) -> float:
        raise NotImplementedError

    def g(self, theta, phi) -> float:
        raise NotImplementedError

    # implementations ---------------------------------------------------------

    def _grad_f_theta(self, theta, phi) -> np.ndarray:
        raise NotImplementedError

    def _grad_f_phi(self, theta, phi) -> np.ndarray:
        raise NotImplementedError

    def _grad_g_phi(self, theta, phi) -> np.ndarray:
        raise NotImplementedError

    def _hvp_g(self, theta, phi, v) -> np.ndarray:
        raise NotImplementedError

    def _jvp_g(self, theta, phi, v) -> np.ndarray:
        raise NotImplementedError
