"""Estimation and optimization on top of a performance predictor.

* :func:`estimate_tau` searches the CSI uncertainty that best explains the
  measured indicators (nested grid refinement).
* :func:`optimize_alpha` searches the RZF regularization maximizing the
  predicted sum rate.
* :func:`unfolded_pgd` minimizes the predicted MSE over the receive scaling
  with a learned step size; :func:`train_eta_net` fits the step-size
  network through the unrolled iterations.
* :func:`stationary_points` gives the closed-form stationary points of the
  estimation objective for the general (per-user correlation) case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import det_equiv as de
from .errors import InvalidArgument, NumericalFailure
from .link_sim import scaling_from_v
from .nn import DenseNet, eta_net as make_eta_net
from .predictor import PredictorModel, Scenario, build_inputs, predict, predict_gradient_v


# ---------------------------------------------------------------------------
# nested grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSearchConfig:
    lo: float
    hi: float
    n_div: int = 10
    n_iter: int = 2

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidArgument("grid bounds need lo < hi")
        if self.n_div < 2 or self.n_iter < 1:
            raise InvalidArgument("need n_div >= 2 and n_iter >= 1")


@dataclass
class GridResult:
    best: float
    score: float
    intervals: list = field(default_factory=list)  # (lo, hi) per level
    points: list = field(default_factory=list)  # evaluated grids per level
    scores: list = field(default_factory=list)

    @property
    def n_evaluations(self) -> int:
        return sum(len(p) for p in self.points)


def grid_search(score: Callable[[np.ndarray], np.ndarray], cfg: GridSearchConfig, *,
                maximize: bool = False) -> GridResult:
    """Successive grid refinement.

    Each level evaluates ``n_div + 1`` equispaced points, picks the best
    (lowest index on ties), and continues on the span between its grid
    neighbours, clamped at the ends of the current grid.  ``score`` receives
    the whole grid and returns one value per point; non-finite values never
    win.
    """
    lo, hi = cfg.lo, cfg.hi
    res = GridResult(best=np.nan, score=np.nan)
    for _ in range(cfg.n_iter):
        pts = lo + np.arange(cfg.n_div + 1) / cfg.n_div * (hi - lo)
        s = np.asarray(score(pts), dtype=float)
        key = np.where(np.isfinite(s), -s if maximize else s, np.inf)
        n = int(np.argmin(key))  # first occurrence wins ties
        res.intervals.append((lo, hi))
        res.points.append(pts)
        res.scores.append(s)
        res.best, res.score = float(pts[n]), float(s[n])
        lo, hi = pts[max(0, n - 1)], pts[min(cfg.n_div, n + 1)]
    return res


# ---------------------------------------------------------------------------
# CSI uncertainty estimation
# ---------------------------------------------------------------------------

TAU_GRID = GridSearchConfig(0.1, 0.4, 10, 2)
TAU_GRID_WIDE = GridSearchConfig(0.0, 1.0, 10, 2)
ALPHA_GRID = GridSearchConfig(1e-3, 2.0, 10, 2)


def objective_J(model: PredictorModel, x, y_meas, weights=(1.0, 1.0)):
    """Weighted squared mismatch between predicted and measured indicators.

    ``x`` may be a stack of rows sharing one measurement.
    """
    g, m = predict(model, x)
    return weights[0] * (g - y_meas[0]) ** 2 + weights[1] * (m - y_meas[1]) ** 2


def _with_slot(x, slot: int, values):
    x = np.asarray(x.as_array() if isinstance(x, de.InputVector) else x, dtype=float)
    rows = np.repeat(x[None, :], len(values), axis=0)
    rows[:, slot] = values
    return rows


TAU_SLOT, ALPHA_SLOT, V_SLOT = -2, -3, -1


def estimate_tau(model: PredictorModel, x, y_meas, grid: GridSearchConfig = TAU_GRID,
                 weights=(1.0, 1.0)) -> float:
    """CSI uncertainty estimate for one user from its measured ``(gamma, mse)``."""
    if grid.lo < 0 or grid.hi > 1:
        raise InvalidArgument("tau bounds must lie in [0, 1]")
    res = grid_search(lambda t: objective_J(model, _with_slot(x, TAU_SLOT, t), y_meas, weights), grid)
    return res.best


# ---------------------------------------------------------------------------
# regularization search
# ---------------------------------------------------------------------------

def predicted_sum_rate(model: PredictorModel, X) -> float:
    """``sum_k log2(1 + gamma_p,k)`` with negative predictions floored at 0."""
    g, _ = predict(model, X)
    return float(np.sum(np.log2(1 + np.maximum(g, 0.0))))


def sum_rate_scorer(model: PredictorModel, scn: Scenario, tau, v):
    """Score function for :func:`grid_search` over ``alpha``; the numerical
    sub-vectors are recomputed for every candidate."""

    def score(alphas):
        out = np.empty(len(alphas))
        for i, a in enumerate(alphas):
            try:
                out[i] = predicted_sum_rate(model, build_inputs(scn, float(a), tau, v))
            except NumericalFailure:
                out[i] = -np.inf
        return out

    return score


def optimize_alpha(model: PredictorModel, scn: Scenario, tau, v,
                   grid: GridSearchConfig = ALPHA_GRID) -> GridResult:
    """Regularization maximizing the predicted sum rate; ``v`` is held fixed."""
    if grid.lo <= 0:
        raise InvalidArgument("alpha bounds must be positive")
    return grid_search(sum_rate_scorer(model, scn, tau, v), grid, maximize=True)


# ---------------------------------------------------------------------------
# receive power scaling
# ---------------------------------------------------------------------------

@dataclass
class PGDResult:
    v: np.ndarray  # (L + 1, n) iterates, row 0 is the start
    mse: np.ndarray  # (L + 1, n) predicted MSE at each iterate
    eta: np.ndarray  # (L, n) step sizes used

    @property
    def v_star(self) -> np.ndarray:
        return self.v[-1]


def _run_pgd(model, X, step, L):
    X = np.atleast_2d(np.asarray(X, dtype=float)).copy()
    n = X.shape[0]
    vs, ms, etas = [X[:, V_SLOT].copy()], [predict(model, X)[1]], []
    for _ in range(L):
        g = predict_gradient_v(model, X)
        eta = step(X[:, V_SLOT], g)
        X[:, V_SLOT] = np.maximum(X[:, V_SLOT] - eta * g, 0.0)
        vs.append(X[:, V_SLOT].copy())
        ms.append(predict(model, X)[1])
        etas.append(np.broadcast_to(eta, (n,)).copy())
    return PGDResult(np.array(vs), np.array(ms), np.array(etas).reshape(L, n))


def unfolded_pgd(model: PredictorModel, X, net: DenseNet, L: int = 5) -> PGDResult:
    """Projected gradient descent on ``v`` with step sizes from the eta network."""
    if L < 1:
        raise InvalidArgument("L must be >= 1")
    return _run_pgd(model, X, lambda v, g: net.forward(np.column_stack([v, g]), "infer")[:, 0], L)


def vanilla_pgd(model: PredictorModel, X, eta: float, L: int = 5) -> PGDResult:
    if L < 1:
        raise InvalidArgument("L must be >= 1")
    if eta < 0:
        raise InvalidArgument("eta must be nonnegative")
    return _run_pgd(model, X, lambda v, g: eta, L)


@dataclass
class EtaTrainingTrace:
    losses: list = field(default_factory=list)  # mean summed MSE over the pool, index 0 = untrained
    epochs: int = 0


def unrolled_loss_and_grads(model: PredictorModel, X, v0, net: DenseNet, L: int):
    """Mean over rows of ``sum_{l=1..L} MSE_p(v_l)`` and its parameter gradient.

    Backpropagates through every step of the update
    ``v_l = max(v_{l-1} - eta(v_{l-1}, g_{l-1}) g_{l-1}, 0)``, including the
    dependence of the gradient ``g`` on ``v``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float)).copy()
    n = X.shape[0]
    X[:, V_SLOT] = v0
    v = [X[:, V_SLOT].copy()]
    g, g2, eta, active = [], [], [], []
    for _ in range(L):
        gl, hl = predict_gradient_v(model, X, second=True)
        el = net.forward(np.column_stack([v[-1], gl]), "infer")[:, 0]
        pre = v[-1] - el * gl
        g.append(gl), g2.append(hl), eta.append(el), active.append(pre > 0)
        X[:, V_SLOT] = np.maximum(pre, 0.0)
        v.append(X[:, V_SLOT].copy())
    # MSE_p(v_l) and its slope, l = 1..L
    mse, slope = [], []
    for l in range(1, L + 1):
        X[:, V_SLOT] = v[l]
        mse.append(predict(model, X)[1])
        slope.append(predict_gradient_v(model, X) if l == L else g[l])
    loss = float(np.mean(np.sum(mse, axis=0)))
    if not np.isfinite(loss):
        raise NumericalFailure("unrolled loss is not finite")
    grads = {k: np.zeros_like(p) for k, p in net.params.items()}
    lam = slope[L - 1] / n  # d loss / d v_L
    for l in range(L, 0, -1):
        i = l - 1  # step producing v_l from v_{l-1}
        lam = np.where(active[i], lam, 0.0)
        net.forward(np.column_stack([v[i], g[i]]), "infer")
        pg, dx = net.backward((-lam * g[i])[:, None])
        for k in grads:
            grads[k] += pg[k]
        lam_prev = lam * (1 - eta[i] * g2[i]) + dx[:, 0] + dx[:, 1] * g2[i]
        if l > 1:
            lam_prev = lam_prev + slope[i - 1] / n
        if not np.all(np.isfinite(lam_prev)):
            raise NumericalFailure(f"unrolled gradient is not finite at iteration {l}")
        lam = lam_prev
    return loss, grads


def train_eta_net(model: PredictorModel, X_pool, rng: np.random.Generator, *, L: int = 5,
                  v_range=(0.1, 3.0), net: DenseNet | None = None, epochs: int = 200,
                  lr: float = 1e-2, batch_size: int = 64, init_rate: float = 0.03):
    """Fit the step-size network by mini-batch gradient descent on the
    unrolled objective.  Training rows are operating points from
    ``X_pool`` paired with fresh initial ``v`` each epoch."""
    X_pool = np.atleast_2d(np.asarray(X_pool, dtype=float))
    if net is None:
        net = make_eta_net(rng, init_rate=init_rate)
        net.params["W2"] *= 0.1
    n = X_pool.shape[0]
    v_eval = rng.uniform(*v_range, size=n)
    trace = EtaTrainingTrace(losses=[unrolled_loss_and_grads(model, X_pool, v_eval, net, L)[0]])
    for _ in range(epochs):
        order = rng.permutation(n)
        v0 = rng.uniform(*v_range, size=n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            _, grads = unrolled_loss_and_grads(model, X_pool[idx], v0[idx], net, L)
            for k, gk in grads.items():
                net.params[k] -= lr * gk
        trace.losses.append(unrolled_loss_and_grads(model, X_pool, v_eval, net, L)[0])
        trace.epochs += 1
    return net, trace


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineState:
    X: np.ndarray  # (K, d) current input rows
    tau_hat: np.ndarray
    alpha_star: float
    v_star: np.ndarray
    u_star: np.ndarray
    psi0: float


def run_pipeline(model: PredictorModel, scn: Scenario, y_meas, *, net: DenseNet | None = None,
                 alpha0: float = 0.1, v0: float = 1.0, L: int = 5,
                 tau_grid: GridSearchConfig = TAU_GRID, alpha_grid: GridSearchConfig = ALPHA_GRID,
                 fixed_tau: float | None = None, fixed_alpha: float | None = None,
                 eta: float = 0.1) -> PipelineState:
    """Sense, estimate, optimize ``alpha``, then scale: one interval.

    ``y_meas`` is the ``(K, 2)`` measured ``(gamma, mse)`` sensed with
    ``alpha0`` and ``v0``.  Without ``net`` the scaling uses vanilla PGD
    with step ``eta``.
    """
    K = scn.cfg.K
    y_meas = np.asarray(y_meas, dtype=float)
    X = build_inputs(scn, alpha0, np.full(K, 0.25), np.full(K, v0))
    if fixed_tau is None:
        tau_hat = np.array([estimate_tau(model, X[k], y_meas[k], tau_grid) for k in range(K)])
    else:
        tau_hat = np.full(K, float(fixed_tau))
    v_start = np.full(K, v0)
    if fixed_alpha is None:
        alpha = optimize_alpha(model, scn, tau_hat, v_start, alpha_grid).best
    else:
        alpha = float(fixed_alpha)
    prof = scn.profile(alpha)
    X = build_inputs(scn, alpha, tau_hat, v_start, prof)
    res = unfolded_pgd(model, X, net, L) if net is not None else vanilla_pgd(model, X, eta, L)
    v_star = res.v_star
    X[:, V_SLOT] = v_star
    u = scaling_from_v(v_star, prof.psi0, scn.cfg.P, scn.cfg.power_alloc)
    return PipelineState(X=X, tau_hat=tau_hat, alpha_star=alpha, v_star=v_star, u_star=u, psi0=prof.psi0)


# ---------------------------------------------------------------------------
# closed-form stationary points of the estimation objective (general case)
# ---------------------------------------------------------------------------

@dataclass
class StationaryPoints:
    tau1_gamma: float | None
    tau2_gamma: float | None
    tau1_mse: float | None
    tau2_mse: float | None
    rejected: dict = field(default_factory=dict)  # candidates failing the derivative check


def _gamma_tau(e, ups, psi0, p, rho, tau):
    return de.case1_gamma(e, ups, psi0, p, tau, rho)


def _mse_tau(e, ups, psi0, p, rho, v, tau):
    sa, C = de.case1_coefficients(e, ups, psi0, p, tau, rho)
    return (v * sa - 1) ** 2 + v**2 * C


def j_gamma_slope(e, ups, psi0, p, rho, gamma_m, tau):
    """Analytic ``d (gamma - gamma_m)^2 / d tau``."""
    c = (1 + e) ** 2 - 1
    D = ups * (1 + tau**2 * c) + psi0 * (1 + e) ** 2 / rho
    gam = p * (1 - tau**2) * e**2 / D
    dgam = -2 * tau * p * e**2 * (ups * (1 + c) + psi0 * (1 + e) ** 2 / rho) / D**2
    return 2 * (gam - gamma_m) * dgam


def j_mse_slope(e, ups, psi0, p, rho, v, mse_m, tau):
    """Analytic ``d (MSE - MSE_m)^2 / d tau``."""
    c = (1 + e) ** 2 - 1
    s = np.sqrt(1 - tau**2)
    B = e**2 - ups * c / p
    dm = 2 * tau * v / (1 + e) ** 2 * (e * (1 + e) / s - v * B)
    return 2 * (_mse_tau(e, ups, psi0, p, rho, v, tau) - mse_m) * dm


def _valid_tau(t):
    return t is not None and np.isfinite(t) and 0.0 < t < 1.0


def stationary_points(e, ups, psi0, p, rho, v, gamma_m, mse_m, *, check_tol: float = 1e-8) -> StationaryPoints:
    """Closed-form stationary points in ``tau`` of the two objective components.

    ``tau1_*`` solve ``gamma = gamma_m`` and ``MSE = MSE_m`` respectively.
    ``tau2_mse`` is the interior stationary point of the MSE itself, present
    only when ``e (1 + e) / (v B)`` lies in ``[0, 1]`` with
    ``B = e^2 - Upsilon c / p`` and ``c = (1 + e)^2 - 1``.  The SINR is
    strictly decreasing in ``tau`` on ``(0, 1)``, so the SINR component has
    no second interior stationary point; the classical candidate
    ``sqrt((Upsilon + Psi (1 + e)^2 / rho) / (Upsilon c))`` is evaluated,
    checked against the analytic slope and reported under ``rejected`` when
    it is not a stationary point.  Every returned root satisfies
    ``|slope| <= check_tol`` relative to the slope scale.
    """
    c = (1 + e) ** 2 - 1
    base = ups + psi0 * (1 + e) ** 2 / rho
    rejected = {}

    def accept(name, t, slope_fn):
        if not _valid_tau(t):
            if t is not None:
                rejected[name] = t
            return None
        scale = max(abs(slope_fn(min(t + 1e-3, 1 - 1e-9))), abs(slope_fn(max(t - 1e-3, 1e-9))), 1e-300)
        if abs(slope_fn(t)) > check_tol * max(scale, 1.0):
            rejected[name] = t
            return None
        return float(t)

    sg = lambda t: j_gamma_slope(e, ups, psi0, p, rho, gamma_m, t)
    sm = lambda t: j_mse_slope(e, ups, psi0, p, rho, v, mse_m, t)

    num = p * e**2 - gamma_m * base
    den = p * e**2 + gamma_m * ups * c
    t1g = np.sqrt(num / den) if num >= 0 and den > 0 else None
    r2 = base / (ups * c) if ups * c > 0 else np.inf
    t2g = np.sqrt(r2) if r2 <= 1 else None

    B = e**2 - ups * c / p
    t1m = None
    disc = e**2 / v**2 - B * ((ups + psi0 / rho) / p + (1 - mse_m) / v**2)
    if disc >= 0 and B != 0:
        for sign in (1.0, -1.0):
            s = (1 + e) * (e / v + sign * np.sqrt(disc)) / B
            if 0.0 < s < 1.0:
                t1m = np.sqrt(1 - s**2)
                break
    t2m = None
    if B > 0:
        ratio = e * (1 + e) / (v * B)
        if 0.0 <= ratio <= 1.0:
            t2m = np.sqrt(1 - ratio**2)

    return StationaryPoints(accept("tau1_gamma", t1g, sg), accept("tau2_gamma", t2g, sg),
                            accept("tau1_mse", t1m, sm), accept("tau2_mse", t2m, sm), rejected)
