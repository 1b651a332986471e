import numpy as np
import pytest

from bilevel_meta import QuadraticTask, make_quadratic_family


def haar_orthogonal(rng, n):
    m = rng.standard_normal((n, n))
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def spd_from_eigs(rng, eig):
    eig = np.asarray(eig, dtype=float)
    q = haar_orthogonal(rng, eig.shape[0])
    h = (q * eig) @ q.T
    return 0.5 * (h + h.T)


def random_spd(rng, n, lo=1.0, hi=10.0):
    """SPD matrix with eigenvalues drawn in [lo, hi], endpoints pinned."""
    eig = rng.uniform(lo, hi, n)
    if n >= 2:
        eig[0], eig[1] = lo, hi
    else:
        eig[0] = lo
    return spd_from_eigs(rng, eig)


def clustered_spd(rng, n, kappa):
    """SPD matrix with at most ceil(n/2) distinct eigenvalues in [1, kappa].

    Repeated eigenvalues keep the Krylov degree well below n, so the exact
    n-step termination property of conjugate gradient holds with wide
    floating-point margin even at kappa near 1e3.
    """
    n_distinct = max(2, (n + 1) // 2) if n >= 2 else 1
    vals = 10.0 ** rng.uniform(0.0, np.log10(kappa), n_distinct)
    vals[0] = 1.0
    if n_distinct >= 2:
        vals[1] = kappa
    eig = vals[rng.integers(0, n_distinct, n)]
    eig[:n_distinct] = vals
    return spd_from_eigs(rng, eig)


def scalar_task(weight=0.0):
    """1-D task with a known closed form: phi*(theta) = -theta/2 and
    hypergradient 1.5 at theta = 4 (weight 0)."""
    return QuadraticTask(a_mat=[[2.0]], c_mat=[[1.0]], c_vec=[0.0],
                         d_vec=[1.0], s_vec=[0.0], weight=weight)


@pytest.fixture
def quad_batch():
    """Seeded batch used across estimator tests: p=3, q=8, 8 tasks."""
    return make_quadratic_family(seed=21, p=3, q=8, n_tasks=8,
                                 mu=1.0, l_g=2.0, spread=1.0, weight=1.0)
