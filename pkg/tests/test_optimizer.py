import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimotwin import det_equiv as de
from mimotwin.channel import SystemConfig
from mimotwin.errors import InvalidArgument, NumericalFailure
from mimotwin.link_sim import frame_moments, sense_indicators
from mimotwin.nn import eta_net
from mimotwin.optimizer import (GridSearchConfig, TAU_GRID, estimate_tau, grid_search, j_gamma_slope,
                                j_mse_slope, objective_J, optimize_alpha, predicted_sum_rate,
                                run_pipeline, stationary_points, sum_rate_scorer, train_eta_net,
                                unfolded_pgd, unrolled_loss_and_grads, vanilla_pgd)
from mimotwin.predictor import Scenario, ScenarioRanges, build_inputs, draw_scenario, make_predictor

MODEL3 = make_predictor("model_driven", 3)
MODEL4 = make_predictor("model_driven", 4)


def _points(case_id, n, seed):
    rng = np.random.default_rng(seed)
    rows = []
    while sum(len(r) for r in rows) < n:
        scn = draw_scenario(case_id, rng)
        rows.append(build_inputs(scn, rng.uniform(0.01, 1), scn.tau, rng.uniform(0.1, 3, scn.cfg.K)))
    return np.concatenate(rows)[:n]


# --- grid search -----------------------------------------------------------------

def test_grid_config_validation():
    with pytest.raises(InvalidArgument):
        GridSearchConfig(1.0, 1.0)
    with pytest.raises(InvalidArgument):
        GridSearchConfig(0.0, 1.0, n_div=1)
    with pytest.raises(InvalidArgument):
        GridSearchConfig(0.0, 1.0, n_iter=0)


@settings(max_examples=60, deadline=None)
@given(target=st.floats(-0.5, 1.5), n_div=st.integers(2, 12), n_iter=st.integers(1, 4))
def test_grid_refinement_invariants(target, n_div, n_iter):
    cfg = GridSearchConfig(0.0, 1.0, n_div, n_iter)
    res = grid_search(lambda x: (x - target) ** 2, cfg)
    assert res.n_evaluations == n_iter * (n_div + 1)
    for l in range(1, n_iter):
        (plo, phi), (lo, hi) = res.intervals[l - 1], res.intervals[l]
        assert plo <= lo < hi <= phi
        n = int(np.argmin(res.scores[l - 1]))
        assert lo <= res.points[l - 1][n] <= hi
        interior = 0 < n < n_div
        ratio = (hi - lo) / (phi - plo)
        assert ratio == pytest.approx((2 if interior else 1) / n_div, rel=1e-9)
    # the final grid spacing bounds the error for a unimodal score
    step = (res.intervals[-1][1] - res.intervals[-1][0]) / n_div
    assert abs(res.best - np.clip(target, 0, 1)) <= step + 1e-12


def test_grid_ties_and_nonfinite():
    res = grid_search(lambda x: np.zeros_like(x), GridSearchConfig(0, 1, 4, 1))
    assert res.best == 0.0
    res = grid_search(lambda x: np.where(x < 0.5, np.nan, x), GridSearchConfig(0, 1, 4, 1))
    assert res.best == 0.5
    res = grid_search(lambda x: np.where(x > 0.5, np.inf, -x), GridSearchConfig(0, 1, 4, 1), maximize=True)
    assert res.best == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
def test_argmax_invariant_to_positive_scaling(seed, c):
    vals = np.random.default_rng(seed).normal(size=11)
    base = lambda x: vals[np.round(x * 10).astype(int)]
    cfg = GridSearchConfig(0, 1, 10, 1)
    assert grid_search(base, cfg, maximize=True).best == grid_search(lambda x: c * base(x), cfg, maximize=True).best


# --- tau estimation ---------------------------------------------------------------

def _exact_labels(model, x, tau):
    xt = x.copy()
    xt[-2] = tau
    g, m = de.model_indicators(model.case_id, xt)
    return np.array([g[0], m[0]])


def test_objective_basic_properties():
    X = _points(4, 20, 0)
    g, m = de.model_indicators(4, X)
    np.testing.assert_array_equal(objective_J(MODEL4, X, (g, m)), 0.0)
    assert np.all(objective_J(MODEL4, X, (g + 1, m - 2)) >= 0)


@pytest.mark.parametrize("tau_true", [0.15, 0.25, 0.35])
def test_tau_self_consistency(tau_true):
    X = _points(3, 100, 1)
    grid = np.linspace(0.1, 0.4, 31)
    for x in X:
        y = _exact_labels(MODEL3, x, tau_true)
        tau_hat = estimate_tau(MODEL3, x, y, TAU_GRID)
        assert abs(tau_hat - tau_true) <= 0.012
        rows = np.repeat(x[None], len(grid), 0)
        rows[:, -2] = grid
        J = objective_J(MODEL3, rows, y)
        J0 = objective_J(MODEL3, _with_tau(x, tau_true), y)[0]
        far = np.abs(grid - tau_true) >= 0.05
        assert np.all(J0 < J[far])


def _with_tau(x, tau):
    xt = x[None].copy()
    xt[0, -2] = tau
    return xt


def test_tau_on_grid_point_is_exact():
    x = _points(4, 1, 2)[0]
    assert estimate_tau(MODEL4, x, _exact_labels(MODEL4, x, 0.25)) == pytest.approx(0.25, abs=1e-12)


def test_tau_bounds_checked():
    with pytest.raises(InvalidArgument):
        estimate_tau(MODEL4, _points(4, 1, 0)[0], (1.0, 1.0), GridSearchConfig(-0.1, 0.5))


# --- alpha search ------------------------------------------------------------------

def _case4_scenario(M=8, K=2, P=10.0, tau=0.2):
    cfg = SystemConfig(M=M, K=K, P=P)
    return Scenario(4, cfg, np.stack([np.eye(M)] * K), np.full(K, tau))


def test_alpha_search_beats_fixed_values():
    scn = _case4_scenario()
    res = optimize_alpha(MODEL4, scn, scn.tau, 1.0)
    best = predicted_sum_rate(MODEL4, build_inputs(scn, res.best, scn.tau, 1.0))
    for a in (0.01, 0.1, 1.0):
        assert best >= predicted_sum_rate(MODEL4, build_inputs(scn, a, scn.tau, 1.0))


def test_single_user_perfect_csi_rate_is_alpha_invariant():
    """With one user and perfect CSI every RZF precoder is a scaled matched filter."""
    scn = _case4_scenario(M=4, K=1, tau=0.0)
    rates = [frame_moments(scn.link(), a, np.random.default_rng(0), 200, impaired=False).sum_rate
             for a in (1e-3, 0.1, 2.0)]
    np.testing.assert_allclose(rates, rates[0], rtol=1e-10)
    res = optimize_alpha(MODEL4, scn, scn.tau, 1.0)
    sweep = sum_rate_scorer(MODEL4, scn, scn.tau, 1.0)(np.linspace(1e-3, 2, 50))
    assert res.score >= sweep.max()


def test_alpha_search_skips_failing_points(monkeypatch):
    scn = _case4_scenario()
    real = de.build_profile

    def flaky(case_id, theta, alpha, p):
        if alpha < 0.5:
            raise NumericalFailure("forced")
        return real(case_id, theta, alpha, p)

    monkeypatch.setattr(de, "build_profile", flaky)
    res = optimize_alpha(MODEL4, scn, scn.tau, 1.0)
    assert res.best >= 0.5
    assert np.all(np.isneginf(res.scores[0][res.points[0] < 0.5]))


def test_alpha_bounds_checked():
    scn = _case4_scenario()
    with pytest.raises(InvalidArgument):
        optimize_alpha(MODEL4, scn, scn.tau, 1.0, GridSearchConfig(0.0, 1.0))


# --- power scaling ----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), eta=st.floats(0, 2))
def test_pgd_iterates_are_feasible(seed, eta):
    X = _points(3, 8, seed)
    assert np.all(vanilla_pgd(MODEL3, X, eta).v >= 0)
    net = eta_net(np.random.default_rng(seed))
    res = unfolded_pgd(MODEL3, X, net)
    assert np.all(res.v >= 0)
    assert np.all((res.eta >= 1e-3) & (res.eta <= 1e-1))
    assert res.v.shape == (6, 8)


def test_pgd_fixed_point_and_zero_step():
    X = _points(3, 10, 3)
    sa, C, _ = de.coefficients_from_inputs(3, X)
    Xs = X.copy()
    Xs[:, -1] = de.v_star(sa, C)
    res = unfolded_pgd(MODEL3, Xs, eta_net(np.random.default_rng(0)))
    np.testing.assert_allclose(res.v, np.repeat(Xs[None, :, -1], 6, 0), atol=1e-12)
    res = vanilla_pgd(MODEL3, X, 0.0)
    np.testing.assert_array_equal(res.v, np.repeat(X[None, :, -1], 6, 0))


def test_large_step_oscillates():
    res = vanilla_pgd(MODEL3, _points(3, 100, 4), 0.3)
    assert np.any(np.diff(res.mse, axis=0) > 1e-12)


def test_unrolled_gradients_match_finite_differences():
    X = _points(3, 12, 5)
    v0 = np.random.default_rng(0).uniform(0.1, 3, 12)
    net = eta_net(np.random.default_rng(1), init_rate=0.03)
    net.params["b1"] = np.random.default_rng(2).normal(0, 0.5, 8)
    _, grads = unrolled_loss_and_grads(MODEL3, X, v0, net, 5)
    flat, g = net.get_flat(), net.flatten_grads(grads)
    h = 1e-6
    for i in range(flat.size):
        p = flat.copy()
        p[i] += h
        net.set_flat(p)
        fp = unrolled_loss_and_grads(MODEL3, X, v0, net, 5)[0]
        p[i] -= 2 * h
        net.set_flat(p)
        fm = unrolled_loss_and_grads(MODEL3, X, v0, net, 5)[0]
        assert abs((fp - fm) / (2 * h) - g[i]) <= 1e-5 * max(1.0, abs(g[i]))
    net.set_flat(flat)


@pytest.fixture(scope="module")
def trained_eta():
    pool = _points(3, 400, 6)
    net, trace = train_eta_net(MODEL3, pool, np.random.default_rng(0), epochs=40)
    return net, trace


def test_eta_training_improves_unrolled_objective(trained_eta):
    net, trace = trained_eta
    assert trace.losses[-1] < trace.losses[0]
    held = _points(3, 100, 7)
    v0 = np.random.default_rng(1).uniform(0.1, 3, 100)
    untrained = eta_net(np.random.default_rng(9))
    assert (unrolled_loss_and_grads(MODEL3, held, v0, net, 5)[0]
            < unrolled_loss_and_grads(MODEL3, held, v0, untrained, 5)[0])
    out = net.forward(np.random.default_rng(2).normal(0, 50, (500, 2)))
    assert np.all((out >= 1e-3) & (out <= 1e-1))


def test_trained_unfolding_beats_small_fixed_step(trained_eta):
    net, _ = trained_eta
    X = _points(3, 100, 8)
    X[:, -1] = 1.0
    assert unfolded_pgd(MODEL3, X, net).mse[-1].mean() < vanilla_pgd(MODEL3, X, 0.01).mse[-1].mean()


@pytest.mark.xfail(strict=True, reason="step sizes capped at 0.1 cannot cover the v* range in 5 steps")
def test_trained_unfolding_reaches_closed_form(trained_eta):
    net, _ = trained_eta
    X = _points(3, 100, 8)
    X[:, -1] = 1.0
    sa, C, _ = de.coefficients_from_inputs(3, X)
    np.testing.assert_allclose(unfolded_pgd(MODEL3, X, net).v_star, de.v_star(sa, C), atol=1e-3)


# --- pipeline -------------------------------------------------------------------------

def test_pipeline_state_and_overrides():
    rng = np.random.default_rng(0)
    scn = draw_scenario(1, rng)
    ind = sense_indicators(scn.link(), 0.1, 1.0, scn.profile(0.1).psi0, rng, 200)
    y = np.column_stack([ind.gamma, ind.mse_meas])
    model = make_predictor("model_driven", 1)
    st = run_pipeline(model, scn, y)
    K = scn.cfg.K
    assert st.tau_hat.shape == (K,) and np.all((st.tau_hat >= 0.1) & (st.tau_hat <= 0.4))
    assert 1e-3 <= st.alpha_star <= 2
    np.testing.assert_array_equal(st.X[:, -2], st.tau_hat)
    np.testing.assert_array_equal(st.X[:, -1], st.v_star)
    assert st.X[0, -3] == st.alpha_star
    st2 = run_pipeline(model, scn, y, fixed_tau=0.25, fixed_alpha=0.3)
    assert np.all(st2.tau_hat == 0.25) and st2.alpha_star == 0.3


def _sensing_vs_fixed(ranges, seed, n_draws, n_frames=300):
    """Mean simulated (sum rate, MSE) with estimated and with fixed 0.25 uncertainty."""
    rng = np.random.default_rng(seed)
    acc = np.zeros((2, 2))
    for _ in range(n_draws):
        scn = draw_scenario(4, rng, ranges, rho_ratio=1.0)
        scn.tau[:] = rng.choice([0.1, 0.4])
        ind = sense_indicators(scn.link(), 0.1, 1.0, scn.profile(0.1).psi0, rng, n_frames, impaired=False)
        y = np.column_stack([ind.gamma, ind.mse_true])
        seed = int(rng.integers(2**31))
        for i, fixed in enumerate((None, 0.25)):
            st = run_pipeline(MODEL4, scn, y, fixed_tau=fixed, eta=0.1)
            fm = frame_moments(scn.link(), st.alpha_star, np.random.default_rng(seed), n_frames, impaired=False)
            acc[i] += [fm.sum_rate, fm.mse(st.u_star).mean()]
    return acc / n_draws


def test_sensing_beats_fixed_tau_on_model_driven():
    (sr_est, _), (sr_fix, _) = _sensing_vs_fixed(None, 1, 40)
    assert sr_est > sr_fix
    # the detection MSE gain needs arrays large enough for the equivalents to be accurate
    (sr_est, mse_est), (sr_fix, mse_fix) = _sensing_vs_fixed(ScenarioRanges(mk_pairs=((32, 8),)), 1, 20, 200)
    assert sr_est > sr_fix and mse_est < mse_fix


# --- closed-form stationary points ----------------------------------------------------

def _case1_point(rng):
    scn = draw_scenario(1, rng)
    prof = scn.profile(rng.uniform(0.01, 1))
    k = int(rng.integers(scn.cfg.K))
    return prof.e[k], prof.upsilon0[k], prof.psi0, prof.p[k], scn.cfg.P


def test_stationary_points_are_stationary():
    rng = np.random.default_rng(0)
    for _ in range(50):
        e, ups, psi0, p, rho = _case1_point(rng)
        tau_true, v = rng.uniform(0.1, 0.9), rng.uniform(0.1, 3)
        gm = de.case1_gamma(e, ups, psi0, p, tau_true, rho) * rng.uniform(0.8, 1.1)
        sa, C = de.case1_coefficients(e, ups, psi0, p, tau_true, rho)
        mm = ((v * sa - 1) ** 2 + v**2 * C) * rng.uniform(0.8, 1.1)
        sp = stationary_points(e, ups, psi0, p, rho, v, gm, mm)
        h = 1e-6
        for name in ("tau1_gamma", "tau2_gamma"):
            t = getattr(sp, name)
            if t is not None:
                J = lambda s: (de.case1_gamma(e, ups, psi0, p, s, rho) - gm) ** 2
                assert abs((J(t + h) - J(t - h)) / (2 * h)) < 1e-4
        for name in ("tau1_mse", "tau2_mse"):
            t = getattr(sp, name)
            if t is not None:
                def J(s):
                    a, c = de.case1_coefficients(e, ups, psi0, p, s, rho)
                    return ((v * a - 1) ** 2 + v**2 * c - mm) ** 2
                assert abs((J(t + h) - J(t - h)) / (2 * h)) < 1e-4


def test_first_root_recovers_true_tau():
    rng = np.random.default_rng(1)
    for _ in range(20):
        e, ups, psi0, p, rho = _case1_point(rng)
        tau = rng.uniform(0.05, 0.95)
        gm = de.case1_gamma(e, ups, psi0, p, tau, rho)
        sp = stationary_points(e, ups, psi0, p, rho, 1.0, gm, 0.5)
        assert sp.tau1_gamma == pytest.approx(tau, abs=1e-8)


def test_sinr_component_has_single_stationary_point():
    rng = np.random.default_rng(2)
    grid = np.linspace(1e-4, 1 - 1e-4, 10_000)
    for _ in range(20):
        e, ups, psi0, p, rho = _case1_point(rng)
        gm = de.case1_gamma(e, ups, psi0, p, rng.uniform(0.1, 0.9), rho)
        sp = stationary_points(e, ups, psi0, p, rho, 1.0, gm, 0.5)
        assert sp.tau2_gamma is None
        s = j_gamma_slope(e, ups, psi0, p, rho, gm, grid)
        assert np.count_nonzero(np.diff(np.sign(s)) != 0) == 1


def test_analytic_slopes_match_finite_differences():
    rng = np.random.default_rng(3)
    e, ups, psi0, p, rho = _case1_point(rng)
    h = 1e-6
    for t in (0.2, 0.5, 0.8):
        Jg = lambda s: (de.case1_gamma(e, ups, psi0, p, s, rho) - 1.0) ** 2
        assert j_gamma_slope(e, ups, psi0, p, rho, 1.0, t) == pytest.approx((Jg(t + h) - Jg(t - h)) / (2 * h), rel=1e-6)

        def Jm(s):
            a, c = de.case1_coefficients(e, ups, psi0, p, s, rho)
            return ((1.3 * a - 1) ** 2 + 1.69 * c - 0.4) ** 2
        assert j_mse_slope(e, ups, psi0, p, rho, 1.3, 0.4, t) == pytest.approx((Jm(t + h) - Jm(t - h)) / (2 * h), rel=1e-6)
