"""Estimator-style front end so the optimizer composes with pipeline tooling.

MetaLearner follows the scikit-learn parameter protocol (constructor only
stores, get_params/set_params round-trip) without depending on
scikit-learn. fit(family) runs the outer loop; adapt(task) then fits task
parameters for a (possibly new) task at the learned meta parameters, which
is the meta-learning analogue of predict.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .core import compute_smoothness_constant
from .optimizer import OuterConfig, lower_solve, run_loop

_PARAM_NAMES = tuple(f.name for f in fields(OuterConfig))


class MetaLearner:
    """Meta-learns shared parameters over a task family.

    Parameters mirror OuterConfig (T, K, N, stepsizes, estimator, ...).
    After fit: theta_ (learned meta parameters), records_ (one per outer
    iteration), counters_ (total oracle evaluations), n_iter_.
    """

    def __init__(self, estimator="implicit_cg", T=100, K=10, N=10,
                 lambda_theta=None, lambda_phi=None, batch_size=None,
                 mode="deterministic", warm_start="slot", tol_cg=1e-10,
                 seed=0, workers=1, sigma_f1=0.0, sigma_g1=0.0, sigma_g2=0.0,
                 exact_every=None, theta0=None, theta0_scale=1.0,
                 phi0="zeros", phi0_scale=1.0):
        self.estimator = estimator
        self.T = T
        self.K = K
        self.N = N
        self.lambda_theta = lambda_theta
        self.lambda_phi = lambda_phi
        self.batch_size = batch_size
        self.mode = mode
        self.warm_start = warm_start
        self.tol_cg = tol_cg
        self.seed = seed
        self.workers = workers
        self.sigma_f1 = sigma_f1
        self.sigma_g1 = sigma_g1
        self.sigma_g2 = sigma_g2
        self.exact_every = exact_every
        self.theta0 = theta0
        self.theta0_scale = theta0_scale
        self.phi0 = phi0
        self.phi0_scale = phi0_scale

    def get_params(self, deep=True) -> dict:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def set_params(self, **params) -> "MetaLearner":
        for name, value in params.items():
            if name not in _PARAM_NAMES:
                raise ValueError(f"invalid parameter {name!r} for MetaLearner; "
                                 f"valid parameters are {sorted(_PARAM_NAMES)}")
            setattr(self, name, value)
        return self

    def _config(self) -> OuterConfig:
        return OuterConfig(**self.get_params())

    def fit(self, family) -> "MetaLearner":
        config = self._config()
        config.validate()
        records, theta = run_loop(family, config)
        self.theta_ = theta
        self.records_ = records
        self.counters_ = records[-1].counters
        self.n_iter_ = len(records)
        self.lambda_phi_ = (self.lambda_phi if self.lambda_phi is not None
                            else 1.0 / family.constants.l_g)
        self.lambda_theta_ = (
            self.lambda_theta if self.lambda_theta is not None
            else 0.5 / compute_smoothness_constant(family.constants))
        return self

    def adapt(self, task, n_steps=None, step_size=None, phi0=None) -> np.ndarray:
        """Fit task parameters for one task at the learned meta parameters."""
        if not hasattr(self, "theta_"):
            raise RuntimeError("MetaLearner must be fitted before adapt()")
        n_steps = self.K if n_steps is None else n_steps
        step_size = self.lambda_phi_ if step_size is None else step_size
        phi0 = np.zeros(task.q) if phi0 is None else phi0
        phi, _ = lower_solve(task, self.theta_, phi0, n_steps, step_size)
        return phi

    def task_loss(self, task, phi=None) -> float:
        """Upper-level loss of a task at the learned meta parameters."""
        if not hasattr(self, "theta_"):
            raise RuntimeError("MetaLearner must be fitted before task_loss()")
        if phi is None:
            phi = self.adapt(task)
        return task.f(self.theta_, phi)
