"""Synthetic task families with known ground truth.

Two families ship:

* quadratic tasks, whose lower level is a strongly convex quadratic and whose
  upper level is a shifted square loss, so the task-optimal parameters and
  the full hypergradient have closed forms to compare estimators against;
* sinusoid regression tasks, a few-shot regression stand-in where a linear
  head on a one-hidden-layer tanh feature map is fit per task with a ridge
  penalty, exercising the oracle interface with a genuinely nonlinear
  meta-parameter dependence.

A noise wrapper adds zero-mean Gaussian perturbations to oracle outputs to
model stochastic gradients, and a finite-difference gradcheck validates every
derivative an oracle reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    TAG_FAMILY,
    ConfigError,
    NumericalError,
    ProblemConstants,
    TaskOracle,
    as_vector,
    rng_from,
    spd_solve_oracle,
)


# ---------------------------------------------------------------------------
# quadratic family
# ---------------------------------------------------------------------------

class QuadraticTask(TaskOracle):
    """Lower level g = 1/2 phi.A phi + phi.(C theta + c), upper level
    f = 1/2 ||phi - d||^2 + w/2 ||theta - s||^2 + cos_weight * sum cos(theta).

    A is SPD with spectrum in [mu, l_g], so the task-optimal parameters are
    phi*(theta) = -A^{-1}(C theta + c) and the per-task hypergradient term is

        w (theta - s) - cos_weight * sin(theta) - C^T A^{-1} (phi*(theta) - d).

    The cosine term (off by default) makes the upper-level objective
    nonconvex while keeping the closed form intact.
    """

    has_closed_form = True
    has_phi_star = True

    def __init__(self, a_mat, c_mat, c_vec, d_vec, s_vec, weight=1.0,
                 cos_weight=0.0, counters=None):
        super().__init__(counters)
        self.A = np.asarray(a_mat, dtype=np.float64)
        self.C = np.asarray(c_mat, dtype=np.float64)
        self.c = np.asarray(c_vec, dtype=np.float64)
        self.d = np.asarray(d_vec, dtype=np.float64)
        self.s = np.asarray(s_vec, dtype=np.float64)
        self.w = float(weight)
        if self.w < 0.0:
            raise ConfigError(f"weight must be non-negative, got {weight}")
        self.cos_weight = float(cos_weight)
        self.q, self.p = self.C.shape
        # one-slot memo of C theta + c; holding the key array keeps the
        # identity test sound (callers never mutate theta in place)
        self._theta_key = None
        self._theta_term = None

    def f(self, theta, phi):
        val = 0.5 * float(np.sum((phi - self.d) ** 2)) \
            + 0.5 * self.w * float(np.sum((theta - self.s) ** 2))
        if self.cos_weight != 0.0:
            val += self.cos_weight * float(np.sum(np.cos(theta)))
        return val

    def g(self, theta, phi):
        return 0.5 * float(phi @ (self.A @ phi)) + float(phi @ (self.C @ theta + self.c))

    def _grad_f_theta(self, theta, phi):
        out = self.w * (theta - self.s)
        if self.cos_weight != 0.0:
            out = out - self.cos_weight * np.sin(theta)
        return out

    def _grad_f_phi(self, theta, phi):
        return phi - self.d

    def _grad_g_phi(self, theta, phi):
        if theta is not self._theta_key:
            # term before key: a concurrent reader that sees the key hit is
            # then guaranteed to read the matching term
            self._theta_term = self.C @ theta + self.c
            self._theta_key = theta
        return self.A @ phi + self._theta_term

    def _hvp_g(self, theta, phi, v):
        return self.A @ v

    def _jvp_g(self, theta, phi, v):
        return self.C.T @ v

    def exact_phi_star(self, theta):
        return -spd_solve_oracle(self.A, self.C @ theta + self.c)

    def exact_hypergrad_term(self, theta):
        resid = self.exact_phi_star(theta) - self.d
        out = self.w * (theta - self.s) - self.C.T @ spd_solve_oracle(self.A, resid)
        if self.cos_weight != 0.0:
            out = out - self.cos_weight * np.sin(theta)
        return out


def _haar_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    m = rng.standard_normal((n, n))
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def make_quadratic_family(seed: int, p: int, q: int, n_tasks: int,
                          mu: float, l_g: float, spread: float = 1.0,
                          weight: float = 1.0, cos_weight: float = 0.0) -> "TaskFamily":
    """Seeded batch of quadratic tasks.

    Each A is Q diag(lam) Q^T with Q Haar-orthogonal and lam uniform in
    [mu, l_g]; for q >= 2 one eigenvalue is pinned to each endpoint so the
    declared spectrum bounds are attained. C, c, d, s have Gaussian entries
    scaled by `spread`.
    """
    if p < 1 or q < 1 or n_tasks < 1:
        raise ConfigError("p, q and n_tasks must all be >= 1")
    if mu > l_g:
        raise ConfigError(f"mu={mu} must not exceed l_g={l_g}")
    rng = rng_from(seed, TAG_FAMILY)
    tasks = []
    for _ in range(n_tasks):
        lam = rng.uniform(mu, l_g, size=q)
        if q >= 2:
            lam[0] = mu
            lam[1] = l_g
        else:
            lam[0] = mu
        basis = _haar_orthogonal(rng, q)
        a_mat = (basis * lam) @ basis.T
        a_mat = 0.5 * (a_mat + a_mat.T)
        tasks.append(QuadraticTask(
            a_mat=a_mat,
            c_mat=rng.standard_normal((q, p)) * spread,
            c_vec=rng.standard_normal(q) * spread,
            d_vec=rng.standard_normal(q) * spread,
            s_vec=rng.standard_normal(p) * spread,
            weight=weight,
            cos_weight=cos_weight,
        ))
    constants = ProblemConstants(
        mu=mu,
        l_f0=1.0,  # nominal; only multiplies the l_g1/l_g2 terms, zero here
        l_f=max(1.0, weight + abs(cos_weight)),
        l_g=l_g,
        l_g1=0.0,
        l_g2=0.0,
    )
    params = dict(seed=seed, p=p, q=q, n_tasks=n_tasks, mu=mu, l_g=l_g,
                  spread=spread, weight=weight, cos_weight=cos_weight)
    return TaskFamily(kind="quadratic", tasks=tasks, constants=constants,
                      p=p, q=q, seed=seed, params=params)


def quadratic_exact_hypergradient(tasks, theta) -> np.ndarray:
    """Batch-mean closed-form hypergradient, dense-solve path.

    Accumulates per-task terms in ascending task order using the direct
    dense factorization, independent of the iterative estimators it checks.
    """
    if len(tasks) == 0:
        raise ConfigError("tasks must be non-empty")
    theta = np.asarray(theta, dtype=np.float64)
    total = np.zeros_like(theta)
    for i, task in enumerate(tasks):
        if not getattr(task, "has_closed_form", False):
            raise NumericalError(f"exact hypergradient unavailable for task {i}")
        total += task.exact_hypergrad_term(theta)
    return total / len(tasks)


# ---------------------------------------------------------------------------
# sinusoid family
# ---------------------------------------------------------------------------

class SinusoidTask(TaskOracle):
    """Per-task ridge regression of y = amplitude * sin(x + phase) on tanh
    features.

    theta packs the feature-map weights [w, b] (p = 2q); the feature of a
    scalar input x is tanh(w * x + b) in R^q and the prediction is linear in
    the head phi. The lower level uses the training split plus a ridge
    penalty, which keeps it ridge-strongly convex in phi; the upper level is
    the unpenalized loss on the validation split. The phi-Hessian is applied
    as (1/m) Z^T (Z v) + ridge * v without forming Z^T Z.
    """

    has_closed_form = False
    has_phi_star = True

    def __init__(self, q, amplitude, phase, x_train, y_train, x_val, y_val,
                 ridge, counters=None):
        super().__init__(counters)
        self.q = int(q)
        self.p = 2 * self.q
        self.amplitude = float(amplitude)
        self.phase = float(phase)
        self.x_train = np.asarray(x_train, dtype=np.float64)
        self.y_train = np.asarray(y_train, dtype=np.float64)
        self.x_val = np.asarray(x_val, dtype=np.float64)
        self.y_val = np.asarray(y_val, dtype=np.float64)
        self.ridge = float(ridge)
        self.m = self.x_train.shape[0]

    def _split(self, theta):
        q = self.q
        return theta[:q], theta[q:]

    def _features(self, x, theta):
        w, b = self._split(theta)
        return np.tanh(np.outer(x, w) + b)

    def f(self, theta, phi):
        z = self._features(self.x_val, theta)
        r = z @ phi - self.y_val
        return 0.5 * float(r @ r) / self.m

    def g(self, theta, phi):
        z = self._features(self.x_train, theta)
        r = z @ phi - self.y_train
        return 0.5 * float(r @ r) / self.m + 0.5 * self.ridge * float(phi @ phi)

    def _grad_f_phi(self, theta, phi):
        z = self._features(self.x_val, theta)
        return z.T @ (z @ phi - self.y_val) / self.m

    def _grad_g_phi(self, theta, phi):
        z = self._features(self.x_train, theta)
        return z.T @ (z @ phi - self.y_train) / self.m + self.ridge * phi

    def _hvp_g(self, theta, phi, v):
        z = self._features(self.x_train, theta)
        return z.T @ (z @ v) / self.m + self.ridge * v

    def _grad_f_theta(self, theta, phi):
        z = self._features(self.x_val, theta)
        r = z @ phi - self.y_val
        gate = (r[:, None] * (1.0 - z * z)) / self.m  # (m, q)
        grad_w = phi * (gate * self.x_val[:, None]).sum(axis=0)
        grad_b = phi * gate.sum(axis=0)
        return np.concatenate([grad_w, grad_b])

    def _jvp_g(self, theta, phi, v):
        # d/dtheta of v . grad_g_phi(theta, phi); the ridge term drops out
        z = self._features(self.x_train, theta)
        d = 1.0 - z * z
        r = z @ phi - self.y_train
        zv = z @ v
        phi_gate = (zv[:, None] * d) / self.m
        v_gate = (r[:, None] * d) / self.m
        jvp_w = phi * (phi_gate * self.x_train[:, None]).sum(axis=0) \
            + v * (v_gate * self.x_train[:, None]).sum(axis=0)
        jvp_b = phi * phi_gate.sum(axis=0) + v * v_gate.sum(axis=0)
        return np.concatenate([jvp_w, jvp_b])

    def exact_phi_star(self, theta):
        z = self._features(self.x_train, theta)
        h = z.T @ z / self.m + self.ridge * np.eye(self.q)
        return spd_solve_oracle(h, z.T @ self.y_train / self.m)


def make_sinusoid_family(seed: int, q: int, n_tasks: int, m: int = 10,
                         ridge: float = 1.0,
                         amplitude_range: tuple = (0.1, 5.0),
                         phase_range: tuple = (0.0, math.pi),
                         x_range: tuple = (-5.0, 5.0)) -> "TaskFamily":
    """Seeded few-shot sinusoid regression tasks (p = 2q)."""
    if q < 1 or n_tasks < 1 or m < 1:
        raise ConfigError("q, n_tasks and m must all be >= 1")
    if ridge <= 0.0:
        raise ConfigError("ridge must be positive")
    rng = rng_from(seed, TAG_FAMILY)
    tasks = []
    for _ in range(n_tasks):
        amplitude = rng.uniform(*amplitude_range)
        phase = rng.uniform(*phase_range)
        x_train = rng.uniform(*x_range, size=m)
        x_val = rng.uniform(*x_range, size=m)
        tasks.append(SinusoidTask(
            q=q, amplitude=amplitude, phase=phase,
            x_train=x_train, y_train=amplitude * np.sin(x_train + phase),
            x_val=x_val, y_val=amplitude * np.sin(x_val + phase),
            ridge=ridge,
        ))
    # tanh features have per-sample norm^2 <= q, so the phi-Hessian spectrum
    # sits inside [ridge, ridge + q]; the remaining constants are nominal
    # documentation values for stepsize defaults.
    constants = ProblemConstants(
        mu=ridge,
        l_f0=1.0,
        l_f=float(q + amplitude_range[1]),
        l_g=ridge + q,
        l_g1=1.0,
        l_g2=1.0,
    )
    params = dict(seed=seed, q=q, n_tasks=n_tasks, m=m, ridge=ridge,
                  amplitude_range=list(amplitude_range),
                  phase_range=list(phase_range), x_range=list(x_range))
    return TaskFamily(kind="sinusoid", tasks=tasks, constants=constants,
                      p=2 * q, q=q, seed=seed, params=params)


# ---------------------------------------------------------------------------
# noise wrapper
# ---------------------------------------------------------------------------

class NoisyOracle(TaskOracle):
    """Adds i.i.d. zero-mean Gaussian noise to oracle outputs.

    Channel mapping: sigma_f1 perturbs both upper-level gradients, sigma_g1
    perturbs the lower-level gradient, and sigma_g2 perturbs the two
    second-order products (Hessian- and Jacobian-vector). Zero variances are
    exact passthrough, bitwise. Draws come from one per-instance stream in
    call order, so results are reproducible whenever the call order is
    (the optimizer guarantees a deterministic per-slot call order).

    Scalar objectives and closed-form helpers forward to the wrapped oracle
    unperturbed.
    """

    def __init__(self, inner: TaskOracle, sigma_f1: float = 0.0,
                 sigma_g1: float = 0.0, sigma_g2: float = 0.0,
                 seed: int = 0, stream_key: tuple = (), counters=None):
        super().__init__(counters)
        for name, val in (("sigma_f1", sigma_f1), ("sigma_g1", sigma_g1),
                          ("sigma_g2", sigma_g2)):
            if val < 0.0:
                raise ConfigError(f"{name} must be non-negative")
        self.inner = inner
        self.sigma_f1 = float(sigma_f1)
        self.sigma_g1 = float(sigma_g1)
        self.sigma_g2 = float(sigma_g2)
        self.rng = rng_from(seed, *stream_key)
        self._buffers: dict = {}

    def _draw(self, n: int) -> np.ndarray:
        # standard normals fetched from a block buffer per size; the stream
        # is consumed in deterministic chunk order given the call order
        buf = self._buffers.get(n)
        if buf is None or buf[1] >= buf[0].shape[0]:
            buf = [self.rng.standard_normal((64, n)), 0]
            self._buffers[n] = buf
        row = buf[0][buf[1]]
        buf[1] += 1
        return row

    @property
    def p(self):
        return self.inner.p

    @property
    def q(self):
        return self.inner.q

    @property
    def has_closed_form(self):
        return self.inner.has_closed_form

    @property
    def has_phi_star(self):
        return getattr(self.inner, "has_phi_star", False)

    def exact_phi_star(self, theta):
        return self.inner.exact_phi_star(theta)

    def exact_hypergrad_term(self, theta):
        return self.inner.exact_hypergrad_term(theta)

    def f(self, theta, phi):
        return self.inner.f(theta, phi)

    def g(self, theta, phi):
        return self.inner.g(theta, phi)

    def _perturb(self, out, sigma):
        if sigma == 0.0:
            return out
        return out + sigma * self._draw(out.shape[0])

    def _grad_f_theta(self, theta, phi):
        return self._perturb(self.inner._grad_f_theta(theta, phi), self.sigma_f1)

    def _grad_f_phi(self, theta, phi):
        return self._perturb(self.inner._grad_f_phi(theta, phi), self.sigma_f1)

    def _grad_g_phi(self, theta, phi):
        return self._perturb(self.inner._grad_g_phi(theta, phi), self.sigma_g1)

    def _hvp_g(self, theta, phi, v):
        return self._perturb(self.inner._hvp_g(theta, phi, v), self.sigma_g2)

    def _jvp_g(self, theta, phi, v):
        return self._perturb(self.inner._jvp_g(theta, phi, v), self.sigma_g2)


def noisy_wrap(oracle: TaskOracle, sigma_f1: float = 0.0, sigma_g1: float = 0.0,
               sigma_g2: float = 0.0, seed: int = 0) -> NoisyOracle:
    """Wrap an oracle with Gaussian output noise (zero sigmas pass through)."""
    return NoisyOracle(oracle, sigma_f1=sigma_f1, sigma_g1=sigma_g1,
                       sigma_g2=sigma_g2, seed=seed)


class BiasedGradOracle(TaskOracle):
    """Fault-injection wrapper: adds a constant bias to grad_g_phi.

    Exists so the gradcheck machinery can be shown to catch a corrupted
    oracle; never used on any optimization path.
    """

    def __init__(self, inner: TaskOracle, bias: float, counters=None):
        super().__init__(counters)
        self.inner = inner
        self.bias = float(bias)
        self.p = inner.p
        self.q = inner.q

    def f(self, theta, phi):
        return self.inner.f(theta, phi)

    def g(self, theta, phi):
        return self.inner.g(theta, phi)

    def _grad_f_theta(self, theta, phi):
        return self.inner._grad_f_theta(theta, phi)

    def _grad_f_phi(self, theta, phi):
        return self.inner._grad_f_phi(theta, phi)

    def _grad_g_phi(self, theta, phi):
        return self.inner._grad_g_phi(theta, phi) + self.bias

    def _hvp_g(self, theta, phi, v):
        return self.inner._hvp_g(theta, phi, v)

    def _jvp_g(self, theta, phi, v):
        return self.inner._jvp_g(theta, phi, v)


# ---------------------------------------------------------------------------
# finite-difference gradcheck
# ---------------------------------------------------------------------------

def _rel_err(approx, ref):
    denom = max(float(np.linalg.norm(ref)), 1e-12)
    return float(np.linalg.norm(approx - ref)) / denom


def gradcheck(oracle: TaskOracle, theta, phi, eps: float = 1e-5,
              seed: int = 0) -> dict:
    """Compare every oracle derivative against central differences.

    First-order gradients are checked coordinate-wise against the scalar f
    and g; hvp_g against a difference of grad_g_phi along a seeded direction;
    jvp_g against differences of v . grad_g_phi over the meta parameters.
    Returns the relative error per method (norm ratio).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    theta = as_vector(theta, "theta", getattr(oracle, "p", None))
    phi = as_vector(phi, "phi", getattr(oracle, "q", None))
    p, q = theta.shape[0], phi.shape[0]

    analytic = {
        "grad_f_theta": oracle.grad_f_theta(theta, phi),
        "grad_f_phi": oracle.grad_f_phi(theta, phi),
        "grad_g_phi": oracle.grad_g_phi(theta, phi),
    }
    for name, val in analytic.items():
        if not np.all(np.isfinite(val)):
            raise NumericalError(f"oracle method {name} returned non-finite output")

    def fd_grad(fun, x, other_first):
        out = np.empty_like(x)
        for j in range(x.shape[0]):
            step = np.zeros_like(x)
            step[j] = eps
            if other_first:
                hi, lo = fun(theta, x + step), fun(theta, x - step)
            else:
                hi, lo = fun(x + step, phi), fun(x - step, phi)
            out[j] = (hi - lo) / (2.0 * eps)
        return out

    report = {
        "grad_f_theta": _rel_err(analytic["grad_f_theta"],
                                 fd_grad(oracle.f, theta, other_first=False)),
        "grad_f_phi": _rel_err(analytic["grad_f_phi"],
                               fd_grad(oracle.f, phi, other_first=True)),
        "grad_g_phi": _rel_err(analytic["grad_g_phi"],
                               fd_grad(oracle.g, phi, other_first=True)),
    }

    rng = rng_from(seed, 11)
    v = rng.standard_normal(q)
    v /= np.linalg.norm(v)

    hvp = oracle.hvp_g(theta, phi, v)
    if not np.all(np.isfinite(hvp)):
        raise NumericalError("oracle method hvp_g returned non-finite output")
    hvp_fd = (oracle.grad_g_phi(theta, phi + eps * v)
              - oracle.grad_g_phi(theta, phi - eps * v)) / (2.0 * eps)
    report["hvp_g"] = _rel_err(hvp, hvp_fd)

    jvp = oracle.jvp_g(theta, phi, v)
    if not np.all(np.isfinite(jvp)):
        raise NumericalError("oracle method jvp_g returned non-finite output")
    jvp_fd = np.empty(p)
    for j in range(p):
        step = np.zeros(p)
        step[j] = eps
        jvp_fd[j] = (v @ oracle.grad_g_phi(theta + step, phi)
                     - v @ oracle.grad_g_phi(theta - step, phi)) / (2.0 * eps)
    report["jvp_g"] = _rel_err(jvp, jvp_fd)
    return report


# ---------------------------------------------------------------------------
# family container and persistence
# ---------------------------------------------------------------------------

@dataclass
class TaskFamily:
    """A seeded, immutable batch of tasks plus its declared constants.

    For quadratic families, vectorized closed-form evaluations over any
    subset of tasks are cached here; they agree with the dense-oracle path
    to floating-point accuracy and exist so per-iteration exact metrics stay
    cheap.
    """

    kind: str
    tasks: list
    constants: ProblemConstants
    p: int
    q: int
    seed: int
    params: dict
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.tasks)

    @property
    def has_closed_form(self) -> bool:
        return all(getattr(t, "has_closed_form", False) for t in self.tasks)

    def _stacks(self):
        if "a_inv" not in self._cache:
            if self.kind != "quadratic":
                raise NumericalError("exact hypergradient unavailable for "
                                     f"family kind {self.kind!r}")
            self._cache["a_inv"] = np.stack([np.linalg.inv(t.A) for t in self.tasks])
            self._cache["c_mat"] = np.stack([t.C for t in self.tasks])
            self._cache["c_vec"] = np.stack([t.c for t in self.tasks])
            self._cache["d_vec"] = np.stack([t.d for t in self.tasks])
            self._cache["s_vec"] = np.stack([t.s for t in self.tasks])
        return self._cache

    def phi_star(self, theta, indices=None) -> np.ndarray:
        """Stacked minimizers of the lower level at theta (quadratic only)."""
        cache = self._stacks()
        idx = slice(None) if indices is None else np.asarray(indices)
        rhs = cache["c_mat"][idx] @ theta + cache["c_vec"][idx]
        return -np.einsum("nij,nj->ni", cache["a_inv"][idx], rhs)

    def exact_hypergradient(self, theta, indices=None) -> np.ndarray:
        """Mean closed-form hypergradient over the given tasks (default all)."""
        cache = self._stacks()
        idx = slice(None) if indices is None else np.asarray(indices)
        task0 = self.tasks[0]
        resid = self.phi_star(theta, indices) - cache["d_vec"][idx]
        solved = np.einsum("nij,nj->ni", cache["a_inv"][idx], resid)
        cross = np.einsum("nqp,nq->np", cache["c_mat"][idx], solved)
        direct = task0.w * (theta - cache["s_vec"][idx])
        if task0.cos_weight != 0.0:
            direct = direct - task0.cos_weight * np.sin(theta)
        return (direct - cross).mean(axis=0)


def save_family(family: TaskFamily, path) -> None:
    """Persist the generating parameters; tasks are rebuilt on load."""
    doc = {"schema": 1, "kind": family.kind, "params": family.params}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_family(path) -> TaskFamily:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != 1:
        raise ConfigError(f"unsupported family schema: {doc.get('schema')!r}")
    return build_family(doc.get("kind"), doc.get("params", {}))


def build_family(kind: str, params: dict) -> TaskFamily:
    params = dict(params)
    for key in ("amplitude_range", "phase_range", "x_range"):
        if key in params:
            params[key] = tuple(params[key])
    if kind == "quadratic":
        return make_quadratic_family(**params)
    if kind == "sinusoid":
        return make_sinusoid_family(**params)
    raise ConfigError(f"unknown family kind: {kind!r}")
