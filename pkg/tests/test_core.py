import math

import numpy as np
import pytest

from bilevel_meta import (
    ConfigError,
    EvalCounters,
    NumericalError,
    ProblemConstants,
    compute_cg_iteration_floor,
    compute_inner_iteration_floor,
    compute_smoothness_constant,
    smoothness_constant,
    merge_counters,
    spd_solve_oracle,
)

from conftest import random_spd


def constants(**overrides):
    base = dict(mu=1.0, l_f0=1.0, l_f=1.0, l_g=1.0, l_g1=1.0, l_g2=1.0)
    base.update(overrides)
    return ProblemConstants(**base)


# --- dense SPD solve oracle ---------------------------------------------

def test_spd_solve_identity():
    x = spd_solve_oracle(np.eye(2), np.array([3.0, -1.0]))
    assert np.array_equal(x, np.array([3.0, -1.0]))


def test_spd_solve_diagonal():
    x = spd_solve_oracle(np.diag([2.0, 1.0]), np.array([2.0, 1.0]))
    assert np.allclose(x, [1.0, 1.0], rtol=0, atol=1e-14)


def test_spd_solve_seeded_residual():
    rng = np.random.default_rng(8)
    h = random_spd(rng, 8, 1.0, 10.0)
    b = rng.standard_normal(8)
    x = spd_solve_oracle(h, b)
    assert np.linalg.norm(h @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_spd_solve_rejects_asymmetric():
    h = np.eye(3)
    h[0, 1] = 1e-6
    with pytest.raises(NumericalError, match="not symmetric"):
        spd_solve_oracle(h, np.ones(3))


def test_spd_solve_rejects_indefinite():
    h = np.diag([1.0, -2.0, 3.0])
    with pytest.raises(NumericalError, match="positive definite"):
        spd_solve_oracle(h, np.ones(3))


# --- smoothness constant --------------------------------------------------

def test_smoothness_all_ones():
    assert compute_smoothness_constant(constants()) == pytest.approx(8.0, abs=0)


def test_smoothness_mu_scaled():
    # doubling mu with the rest at one shrinks the fractions termwise;
    # exercised on the bare formula since the constants container enforces
    # mu <= l_g
    assert smoothness_constant(2.0, 1.0, 1.0, 1.0, 1.0, 1.0) == \
        pytest.approx(3.375, abs=0)
    c = constants(mu=2.0, l_g=2.0)
    expected = 2.0 + (2 * 4 + 1) / 2 + (8 + 2 * 2) / 4 + 4 / 8
    assert compute_smoothness_constant(c) == pytest.approx(expected, abs=0)


def test_smoothness_term_dropout():
    # with l_g1 = l_g2 = 0 only the max(l_f, l_g) terms survive, whatever l_f0
    for big, mu in ((3.0, 2.0), (5.0, 1.5)):
        c = ProblemConstants(mu=mu, l_f0=7.0, l_f=big, l_g=big,
                             l_g1=0.0, l_g2=0.0)
        expected = big + 2 * big**2 / mu + big**3 / mu**2
        assert compute_smoothness_constant(c) == pytest.approx(expected, rel=1e-15)


# --- inner iteration floor ------------------------------------------------

def test_inner_floor_half():
    assert compute_inner_iteration_floor(constants(), 0.5) == 3


def test_inner_floor_five_sixths():
    assert compute_inner_iteration_floor(constants(), 5.0 / 6.0) == 1


def test_inner_floor_matches_formula():
    for lam in (0.01, 0.2, 0.9):
        expected = math.ceil(math.log(6) / -math.log(1 - lam))
        assert compute_inner_iteration_floor(constants(), lam) == expected


def test_inner_floor_cap():
    with pytest.raises(NumericalError, match="cap"):
        compute_inner_iteration_floor(constants(), 1e-9)
    # a raised cap admits the same value
    assert compute_inner_iteration_floor(constants(), 1e-3, cap=10**9) == \
        math.ceil(math.log(6) / -math.log(1 - 1e-3))


def test_inner_floor_out_of_range():
    with pytest.raises(NumericalError, match="contraction factor out of range"):
        compute_inner_iteration_floor(constants(), 1.0)
    with pytest.raises(NumericalError, match="contraction factor out of range"):
        compute_inner_iteration_floor(constants(mu=2.0, l_g=2.0), 0.6)


# --- solver iteration floor -----------------------------------------------

def test_cg_floor_formula():
    c = ProblemConstants(mu=1.0, l_f0=2.0, l_f=3.0, l_g=4.0,
                         sigma_f1_sq=0.25, sigma_g1_sq=0.5)
    gamma = 0.5
    noise = 2 * 0.25 * 16 / 1.0 + 2 * 0.5 * 16 * 4.0 / 1.0
    psi = (max(2 * math.log(2.0), 0.0) + 3 * math.log(2.0)
           + max(math.log(noise), 0.0) + max(math.log(36 * 9.0), 0.0))
    expected = (2 * math.log(4.0) + psi) / math.log(1 / gamma)
    assert compute_cg_iteration_floor(c, gamma) == pytest.approx(expected, rel=1e-14)


def test_cg_floor_zero_noise_terms_clamp():
    c = ProblemConstants(mu=1.0, l_f0=1.0, l_f=1.0, l_g=2.0)
    psi = 3 * math.log(2.0) + math.log(36.0)
    expected = (2 * math.log(2.0) + psi) / math.log(1 / 0.25)
    assert compute_cg_iteration_floor(c, 0.25) == pytest.approx(expected, rel=1e-14)


def test_cg_floor_gamma_validation():
    c = constants()
    for gamma in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ConfigError):
            compute_cg_iteration_floor(c, gamma)


# --- counters ---------------------------------------------------------------

def test_merge_identity():
    x = EvalCounters(1, 2, 3, 4, 5)
    assert merge_counters(EvalCounters(), x) == x


def test_merge_componentwise():
    a = EvalCounters(1, 2, 3, 4, 5)
    b = EvalCounters(5, 4, 3, 2, 1)
    assert merge_counters(a, b) == EvalCounters(6, 6, 6, 6, 6)


def test_merge_associative_commutative():
    rng = np.random.default_rng(99)
    for _ in range(50):
        a, b, c = (EvalCounters(*rng.integers(0, 1000, 5).tolist())
                   for _ in range(3))
        assert merge_counters(a, merge_counters(b, c)) == \
            merge_counters(merge_counters(a, b), c)
        assert merge_counters(a, b) == merge_counters(b, a)


def test_counter_sides():
    c = EvalCounters(n_grad_f_theta=2, n_grad_f_phi=3, n_grad_g_phi=5,
                     n_hvp=7, n_jvp=11)
    assert c.phi_side == 3 + 5 + 7
    assert c.theta_side == 2 + 11
    assert c.delta_since(EvalCounters(1, 1, 1, 1, 1)) == EvalCounters(1, 2, 4, 6, 10)


# --- problem constants -------------------------------------------------------

def test_constants_validation():
    with pytest.raises(ConfigError):
        ProblemConstants(mu=2.0, l_f0=1.0, l_f=1.0, l_g=1.0)
    with pytest.raises(ConfigError):
        ProblemConstants(mu=-1.0, l_f0=1.0, l_f=1.0, l_g=1.0)
    with pytest.raises(ConfigError):
        ProblemConstants(mu=1.0, l_f0=1.0, l_f=1.0, l_g=2.0, sigma_f1_sq=-0.1)
    assert ProblemConstants(mu=1.0, l_f0=1.0, l_f=1.0, l_g=2.0).kappa == 2.0
