import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimotwin import det_equiv as de
from mimotwin.channel import SystemConfig, correlation_matrix
from mimotwin.errors import InvalidArgument, NumericalFailure
from mimotwin.link_sim import LinkModel, frame_moments, rzf_precoder


def _eye_stack(M, K):
    return np.stack([np.eye(M)] * K)


def _random_theta(rng, M, K):
    return np.stack([correlation_matrix(M, rng.uniform() * np.exp(2j * np.pi * rng.uniform()))
                     for _ in range(K)])


# --- fixed points --------------------------------------------------------------

def test_fixed_point_examples():
    e, _ = de.solve_e_fixed_point(_eye_stack(4, 4), 1.0)
    np.testing.assert_allclose(e, (-1 + np.sqrt(5)) / 2, rtol=1e-10)
    e, _ = de.solve_e_fixed_point(_eye_stack(4, 2), 1.0)
    np.testing.assert_allclose(e, (-1 + np.sqrt(17)) / 4, rtol=1e-10)
    e, _ = de.solve_e_fixed_point(_eye_stack(4, 2), 1e6)
    assert np.all(e < 2e-6)


@settings(max_examples=40, deadline=None)
@given(beta=st.sampled_from([1.0, 2.0, 4.0, 8.0]), alpha=st.floats(1e-3, 10))
def test_closed_form_e_matches_solver(beta, alpha):
    K = 2
    M = int(beta * K)
    e, _ = de.solve_e_fixed_point(_eye_stack(M, K), alpha)
    np.testing.assert_allclose(e, de.e_closed_form(beta, alpha), rtol=1e-10)


def test_fixed_point_residual_and_initialization():
    rng = np.random.default_rng(0)
    theta = _random_theta(rng, 8, 3)
    sols = []
    for e0 in (0.1, 1.0, 10.0):
        hist = []
        e, T = de.solve_e_fixed_point(theta, 0.1, e0, history=hist)
        res = np.max(np.abs(e - np.real(np.einsum("kij,ji->k", theta, T)) / 8))
        assert res < 1e-12 and np.all(e > 0)
        assert np.all(np.diff(hist) <= 1e-15)
        sols.append(e)
    np.testing.assert_allclose(sols[0], sols[1], rtol=1e-10)
    np.testing.assert_allclose(sols[2], sols[1], rtol=1e-10)


def test_fixed_point_nonconvergence_raises():
    with pytest.raises(NumericalFailure):
        de.solve_e_fixed_point(_random_theta(np.random.default_rng(0), 6, 2), 0.1, max_iter=2)


def test_fixed_point_rejects_bad_alpha():
    with pytest.raises(InvalidArgument):
        de.solve_e_fixed_point(_eye_stack(2, 2), 0.0)


def test_e_primes_identity_symmetry_and_spectral_radius():
    M, K = 8, 4
    e, T = de.solve_e_fixed_point(_eye_stack(M, K), 0.1)
    _, _, psi0, ups = de.solve_e_primes(_eye_stack(M, K), 0.1, e, T, np.full(K, 2.5))
    np.testing.assert_allclose(ups, ups[0], rtol=1e-12)
    rng = np.random.default_rng(1)
    for _ in range(5):
        theta = _random_theta(rng, 8, 3)
        e, T = de.solve_e_fixed_point(theta, 0.1)
        TT = np.einsum("kij,jl->kil", theta, T)
        J = np.real(np.einsum("iab,kba->ik", TT, TT)) / (64 * (1 + e)[None, :] ** 2)
        assert np.max(np.abs(np.linalg.eigvals(J))) < 1


def test_psi0_matches_monte_carlo():
    M, K, alpha = 64, 16, 0.1
    rng = np.random.default_rng(2)
    theta = np.stack([correlation_matrix(M, 0.5)] * K)
    p = np.full(K, 10.0 / K)
    psi0 = de.psi0_of(theta, alpha, p)
    link = LinkModel(SystemConfig(M=M, K=K, P=10.0), theta, 0.0)
    H, H_hat, _, _ = link.draw(300, rng)
    psi = np.mean([rzf_precoder(h, alpha, p, 10.0).Psi for h in H_hat])
    assert abs(psi - psi0) / psi0 < 0.05


# --- per-case formulas ----------------------------------------------------------

def _case1_profile(seed=0, M=8, K=3, alpha=0.1):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(K)) * 10.0
    return de.build_profile(1, _random_theta(rng, M, K), alpha, p)


def test_case1_boundary_values():
    prof = _case1_profile()
    g, m = de.gamma_mse_case1(prof, 0, 1.0, 1.0, 10.0)
    assert g == 0.0
    g, m = de.gamma_mse_case1(prof, 1, 0.3, 0.0, 10.0)
    assert m == pytest.approx(1.0)
    vals = [de.gamma_mse_case1(prof, 2, 0.3, v, 10.0)[1] for v in (0.5, 1.0, 1.5)]
    second = [de.gamma_mse_case1(prof, 2, 0.3, v, 10.0)[1] for v in (1.0, 1.5, 2.0)]
    assert abs((vals[2] - 2 * vals[1] + vals[0]) - (second[2] - 2 * second[1] + second[0])) < 1e-9


def _case_inputs(case_id, rng):
    """Random row of predictor inputs for a case."""
    M, K = [(8, 2), (8, 4), (4, 2)][rng.integers(3)]
    P = 10 ** rng.uniform(0.6, 2.0)
    alpha, tau, v = rng.uniform(0.01, 2), rng.uniform(0.1, 0.4), rng.uniform(0.1, 3)
    p = rng.dirichlet(np.ones(K)) * P if case_id != 4 else np.full(K, P / K)
    theta = {1: lambda: _random_theta(rng, M, K),
             2: lambda: np.stack([correlation_matrix(M, 0.5 * np.exp(1j))] * K)}.get(
        case_id, lambda: _eye_stack(M, K))()
    prof = de.build_profile(case_id, theta, alpha, p)
    return de.assemble_input(case_id, M, K, P, 1.0, prof, 0, p[0], alpha, tau, v).as_array()


@pytest.mark.parametrize("case_id", [1, 2, 3, 4])
def test_v_star_is_grid_minimum(case_id):
    rng = np.random.default_rng(case_id)
    for _ in range(20):
        x = _case_inputs(case_id, rng)
        sa, C, _ = de.coefficients_from_inputs(case_id, x)
        vs = de.v_star(sa, C)[0]
        grid = np.linspace(0, 5, 10_000)
        X = np.repeat(x[None], len(grid), 0)
        X[:, -1] = grid
        mse = de.model_indicators(case_id, X)[1]
        assert abs(grid[np.argmin(mse)] - vs) <= grid[1] - grid[0] or vs > 5
        Xs = x[None].copy()
        Xs[0, -1] = vs
        assert abs(de.model_mse_grad_v(case_id, Xs)[0][0]) < 1e-9
        h = 1e-5
        lo, hi = Xs.copy(), Xs.copy()
        lo[0, -1] -= h
        hi[0, -1] += h
        fd = (de.model_indicators(case_id, hi)[1] - de.model_indicators(case_id, lo)[1]) / (2 * h)
        assert abs(fd[0]) < 1e-7


def test_v_star_useless_csi():
    sa, C = de.case4_coefficients(8, 2, 1.0, 0.1, 10.0)
    assert de.v_star(sa, C) == 0.0


def test_case_containment_chain():
    rng = np.random.default_rng(5)
    for _ in range(100):
        M, K = [(8, 2), (16, 4), (8, 8)][rng.integers(3)]
        P, alpha, tau, v = 10 ** rng.uniform(0.6, 2), rng.uniform(0.01, 2), rng.uniform(0, 0.9), rng.uniform(0.1, 3)
        p = rng.dirichlet(np.ones(K)) * P
        prof2 = de.build_profile(2, _eye_stack(M, K), alpha, p)
        g2, m2 = de.gamma_mse_case2(prof2.e[0], prof2.e12, prof2.e22, M, K, P, p[0], tau, v, P, 1.0, alpha)
        g3, m3 = de.gamma_mse_case3(M, K, P, p[0], tau, v, alpha, P, 1.0)
        np.testing.assert_allclose([g2, m2], [g3, m3], rtol=1e-9)
        g3e, m3e = de.gamma_mse_case3(M, K, P, P / K, tau, v, alpha, P, 1.0)
        g4, m4 = de.gamma_mse_case4(M, K, P, tau, v, alpha, P)
        np.testing.assert_allclose([g3e, m3e], [g4, m4], rtol=1e-9)


def test_case3_examples():
    e = de.e_closed_form(1.0, 1.0)
    assert e == pytest.approx(0.618034, abs=1e-6)
    g41 = de.case3_gamma(8, 4, 10.0, 2.5, 0.0, 0.1, 10.0)
    np.testing.assert_allclose(g41, de.case4_gamma(8, 4, 0.0, 0.1, 10.0), rtol=1e-12)
    sa, C = de.case3_coefficients(8, 4, 10.0, 2.5, 0.2, 0.1, 1.0)
    vs = de.v_star(sa, C)
    grid = np.linspace(0, 5, 1000)
    assert np.all(de.gamma_mse_case3(8, 4, 10.0, 2.5, 0.2, vs, 0.1, 10.0, 1.0)[1]
                  <= de.gamma_mse_case3(8, 4, 10.0, 2.5, 0.2, grid, 0.1, 10.0, 1.0)[1] + 1e-15)


def test_case3_guard_raises():
    with pytest.raises(NumericalFailure):
        de.case3_coefficients(4, 1, 1.0, 1.0, 0.1, alpha=1e-9, sigma2=1.0, e=0.0)


def test_case2_single_user_interference_vanishes():
    M, K, P = 4, 1, 10.0
    prof = de.build_profile(2, np.stack([correlation_matrix(M, 0.4)]), 0.1, [P])
    sa, C = de.case2_coefficients(prof.e[0], prof.e12, prof.e22, M, K, P, P, 0.3, 1.0)
    denom = P * K * (M / K - prof.e22)
    np.testing.assert_allclose(C, prof.e12 / denom, rtol=1e-12)
    assert de.case2_gamma(prof.e[0], prof.e12, prof.e22, M, K, P, P, 1.0, 0.1, P) == 0.0


def test_case4_single_user_interference_vanishes():
    sa, C = de.case4_coefficients(4, 1, 0.3, 0.1, 10.0)
    e = de.e_closed_form(4.0, 0.1)
    np.testing.assert_allclose(C, 0.1 * 4 / ((0.1 * 4 * (1 + e) + 1) ** 2 - 4), rtol=1e-12)


@pytest.mark.parametrize("case_id", [1, 2, 3, 4])
def test_gamma_decreasing_in_tau(case_id):
    rng = np.random.default_rng(10 + case_id)
    x = _case_inputs(case_id, rng)
    X = np.repeat(x[None], 50, 0)
    X[:, de.feature_index(case_id, "tau")] = np.linspace(0.01, 0.99, 50)
    g = de.model_indicators(case_id, X)[0]
    assert np.all(np.diff(g) < 0)


def test_de_sinr_matches_monte_carlo_and_improves_with_M():
    tau, alpha, P = 0.2, 0.1, 10.0
    errs = []
    for M in (16, 64):
        K = M // 4
        g0 = de.case4_gamma(M, K, tau, alpha, P)
        link = LinkModel(SystemConfig(M=M, K=K, P=P), _eye_stack(M, K), tau)
        fm = frame_moments(link, alpha, np.random.default_rng(M), 2000, impaired=False)
        errs.append(abs(fm.gamma.mean() - g0) / g0)
    assert errs[1] < 0.05
    assert errs[1] < errs[0]


# --- input vectors ----------------------------------------------------------------

def test_input_layouts():
    x4 = de.assemble_input(4, 8, 2, 10.0, 1.0, None, 0, 5.0, 0.1, 0.2, 1.0)
    assert x4.numerical.size == 0
    np.testing.assert_array_equal(x4.prior, [8, 2, 10.0, 1.0])
    prof = de.build_profile(3, _eye_stack(8, 2), 0.1, [5.0, 5.0])
    x3 = de.assemble_input(3, 8, 2, 10.0, 1.0, prof, 0, 5.0, 0.1, 0.2, 1.0)
    np.testing.assert_array_equal(x3.numerical, prof.e[:1])
    x3b = de.assemble_input(3, 8, 2, 10.0, 1.0, prof, 0, 5.0, 0.1, 0.35, 1.0)
    np.testing.assert_array_equal(x3.numerical, x3b.numerical)
    for c in (1, 2, 3, 4):
        assert len(de.FEATURES[c]) == de.N_PRIOR[c] + de.N_NUMERICAL[c] + 3


def test_input_mismatch_raises():
    prof = de.build_profile(3, _eye_stack(8, 2), 0.1, [5.0, 5.0])
    with pytest.raises(InvalidArgument):
        de.assemble_input(2, 8, 2, 10.0, 1.0, prof, 0, 5.0, 0.1, 0.2, 1.0)
    with pytest.raises(InvalidArgument):
        de.assemble_input(3, 8, 2, 10.0, 1.0, prof, 0, 5.0, 0.2, 0.2, 1.0)
    with pytest.raises(InvalidArgument):
        de.InputVector.from_array(4, np.zeros(5))


def test_input_vector_round_trip():
    x = np.arange(11, dtype=float)
    iv = de.InputVector.from_array(1, x)
    np.testing.assert_array_equal(iv.as_array(), x)
    assert (iv.alpha, iv.tau, iv.v) == (8.0, 9.0, 10.0)
    assert iv.with_optimization(v=0.5).v == 0.5
