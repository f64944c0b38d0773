"""Large-system (deterministic-equivalent) SINR and MSE of RZF precoding.

Four nested scenarios are supported:

====  ===============================  ===========================
case  channel statistics               numerical parameters
====  ===============================  ===========================
1     distinct ``Theta_k``, ``tau_k``  ``e_k``, ``Upsilon_k``, ``Psi``
2     shared ``Theta``, ``tau_k``      ``e``, ``e12``, ``e22``
3     ``Theta = I``, ``tau_k``         ``e``
4     ``Theta = I``, common ``tau``    none (closed form)
====  ===============================  ===========================

Every case reduces the MSE to a quadratic in the normalized receive scaling
``v``::

    MSE(v) = (v * s * a - 1)**2 + v**2 * C,   s = sqrt(1 - tau**2),
                                              a = e / (1 + e)

so the optimal scaling is ``v* = s a / ((s a)**2 + C)`` and the SINR equals
``(s a)**2 / C``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalFailure

FIXED_POINT_TOL = 1e-12
FIXED_POINT_DAMPING = 0.5
FIXED_POINT_MAX_ITER = 10_000
COND_LIMIT = 1e10

FEATURES = {
    1: ("M", "K", "P", "p_k", "sigma2", "e_k", "upsilon_k", "psi0", "alpha", "tau", "v"),
    2: ("M", "K", "P", "p_k", "sigma2", "e", "e12", "e22", "alpha", "tau", "v"),
    3: ("M", "K", "P", "p_k", "sigma2", "e", "alpha", "tau", "v"),
    4: ("M", "K", "P", "sigma2", "alpha", "tau", "v"),
}
N_PRIOR = {1: 5, 2: 5, 3: 5, 4: 4}
N_NUMERICAL = {1: 3, 2: 3, 3: 1, 4: 0}


def feature_index(case_id: int, name: str) -> int:
    return FEATURES[case_id].index(name)


# ---------------------------------------------------------------------------
# fixed points
# ---------------------------------------------------------------------------

def e_closed_form(beta, alpha):
    """Closed-form ``e`` for uncorrelated channels (``Theta = I``)."""
    beta = np.asarray(beta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    disc = (beta - 1) ** 2 + 2 * (1 + beta) * alpha * beta + (alpha * beta) ** 2
    return (beta - 1 - beta * alpha + np.sqrt(disc)) / (2 * alpha * beta)


def _shared(theta: np.ndarray) -> bool:
    return all(np.array_equal(theta[0], t) for t in theta[1:])


def solve_e_fixed_point(theta, alpha: float, e0=None, *, damping: float = FIXED_POINT_DAMPING,
                        max_iter: int = FIXED_POINT_MAX_ITER, tol: float = FIXED_POINT_TOL,
                        history: list | None = None):
    """Solve ``e_i = tr(Theta_i T) / M`` with
    ``T = (sum_j Theta_j / (M (1 + e_j)) + alpha I)^-1`` by damped Picard
    iteration.

    Parameters
    ----------
    theta : array_like, shape (K, M, M)
        Correlation matrices.  When all ``K`` are identical the iteration
        runs on a scalar ``e`` using the eigenvalues of the shared matrix.
    alpha : float
        Regularization term, must be positive.
    e0 : float or array_like, optional
        Starting point (default 1).
    history : list, optional
        If given, the residual after each iteration is appended to it.

    Returns
    -------
    e : ndarray, shape (K,)
    T : ndarray, shape (M, M)
    """
    theta = np.asarray(theta)
    if theta.ndim != 3 or theta.shape[1] != theta.shape[2]:
        raise InvalidArgument("theta must have shape (K, M, M)")
    if not alpha > 0:
        raise InvalidArgument(f"alpha must be positive, got {alpha}")
    K, M, _ = theta.shape
    eye = np.eye(M)

    if _shared(theta):
        lam, V = np.linalg.eigh(theta[0])
        lam = np.clip(lam, 0.0, None)
        beta = M / K

        def f(e):
            return np.sum(lam / (lam / (beta * (1 + e)) + alpha)) / M

        e = 1.0 if e0 is None else float(np.mean(e0))
        res = abs(e - f(e))
        for _ in range(max_iter):
            if res < tol:
                break
            e = (1 - damping) * e + damping * f(e)
            res = abs(e - f(e))
            if history is not None:
                history.append(res)
        else:
            raise NumericalFailure(f"fixed point did not converge (residual {res:.3e})")
        T = (V / (lam / (beta * (1 + e)) + alpha)) @ V.conj().T
        return np.full(K, e), T

    def T_of(e):
        return np.linalg.inv(np.einsum("k,kij->ij", 1.0 / (1 + e), theta) / M + alpha * eye)

    def f(T):
        return np.real(np.einsum("kij,ji->k", theta, T)) / M

    e = np.ones(K) if e0 is None else np.broadcast_to(np.asarray(e0, float), (K,)).copy()
    T = T_of(e)
    fe = f(T)
    res = np.max(np.abs(e - fe))
    for _ in range(max_iter):
        if res < tol:
            break
        e = (1 - damping) * e + damping * fe
        T = T_of(e)
        fe = f(T)
        res = np.max(np.abs(e - fe))
        if history is not None:
            history.append(res)
    else:
        raise NumericalFailure(f"fixed point did not converge (residual {res:.3e})")
    return e, T


def solve_e_primes(theta, alpha: float, e, T, p):
    """Derivative-type fixed points and the power/interference equivalents.

    Returns ``(e_prime, e_prime_k, psi0, upsilon0)`` where column ``k`` of
    ``e_prime_k`` holds the vector ``e'_k``.
    """
    theta = np.asarray(theta)
    K, M, _ = theta.shape
    e = np.asarray(e, dtype=float)
    p = np.asarray(p, dtype=float)
    TT = np.einsum("kij,jl->kil", theta, T)  # Theta_k T
    # tr(Theta_i T Theta_k T)
    cross = np.real(np.einsum("iab,kba->ik", TT, TT))
    J = cross / (M**2 * (1 + e)[None, :] ** 2)
    m = np.real(np.einsum("kab,ba->k", TT, T)) / M
    mk = cross / M
    A = np.eye(K) - J
    if np.linalg.cond(A) > COND_LIMIT:
        raise NumericalFailure("I - J is numerically singular")
    e_prime = np.linalg.solve(A, m)
    e_prime_k = np.linalg.solve(A, mk)
    w = p / (M * (1 + e) ** 2)
    psi0 = float(np.sum(w * e_prime))
    contrib = w[:, None] * e_prime_k  # (j, k)
    upsilon0 = contrib.sum(axis=0) - np.diag(contrib)
    if np.any(e_prime <= 0) or psi0 <= 0 or np.any(upsilon0 < 0):
        raise NumericalFailure("non-positive derivative fixed point")
    return e_prime, e_prime_k, psi0, upsilon0


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

@dataclass
class DetEquivProfile:
    case_id: int
    M: int
    K: int
    alpha: float
    p: np.ndarray
    e: np.ndarray
    psi0: float
    e_prime: np.ndarray | None = None
    e_prime_k: np.ndarray | None = field(default=None, repr=False)
    upsilon0: np.ndarray | None = None
    e12: float | None = None
    e22: float | None = None

    @property
    def beta(self) -> float:
        return self.M / self.K

    def numerical(self, k: int) -> np.ndarray:
        """Case-specific numerical sub-vector for user ``k``."""
        if self.case_id == 1:
            return np.array([self.e[k], self.upsilon0[k], self.psi0])
        if self.case_id == 2:
            return np.array([self.e[0], self.e12, self.e22])
        if self.case_id == 3:
            return np.array([self.e[0]])
        return np.empty(0)


def build_profile(case_id: int, theta, alpha: float, p) -> DetEquivProfile:
    """Compute the numerical parameter set for a correlation stack, ``alpha``
    and a power allocation."""
    theta = np.asarray(theta)
    K, M, _ = theta.shape
    p = np.asarray(p, dtype=float)
    if case_id not in FEATURES:
        raise InvalidArgument(f"unknown case {case_id}")
    if case_id in (2, 3, 4) and not _shared(theta):
        raise InvalidArgument(f"case {case_id} needs a shared correlation matrix")
    if case_id in (3, 4) and not np.allclose(theta[0], np.eye(M)):
        raise InvalidArgument(f"case {case_id} needs identity correlation")
    e, T = solve_e_fixed_point(theta, alpha)
    prof = DetEquivProfile(case_id=case_id, M=M, K=K, alpha=float(alpha), p=p, e=e, psi0=np.nan)
    if case_id == 1:
        prof.e_prime, prof.e_prime_k, prof.psi0, prof.upsilon0 = solve_e_primes(theta, alpha, e, T, p)
        return prof
    th = theta[0]
    scale = M * (1 + e[0]) ** 2
    prof.e12 = float(np.real(np.trace(th @ T @ T))) / scale
    prof.e22 = float(np.real(np.trace(th @ T @ th @ T))) / scale
    if prof.e22 >= prof.beta:
        raise NumericalFailure(f"e22={prof.e22:.4g} is not below beta={prof.beta:.4g}")
    prof.psi0 = float(p.sum() * prof.e12 / (K * (prof.beta - prof.e22)))
    return prof


def psi0_of(theta, alpha: float, p) -> float:
    """Deterministic equivalent of the precoder power normalization ``Psi``."""
    theta = np.asarray(theta)
    e, T = solve_e_fixed_point(theta, alpha)
    return solve_e_primes(theta, alpha, e, T, p)[2]


# ---------------------------------------------------------------------------
# per-case formulas
# ---------------------------------------------------------------------------

def _quadratic(sa, C, v):
    return (v * sa - 1.0) ** 2 + v**2 * C


def _growth(tau, e):
    # 1 - tau^2 [1 - (1 + e)^2]
    return 1.0 - tau**2 * (1.0 - (1.0 + e) ** 2)


def case1_coefficients(e_k, upsilon_k, psi0, p_k, tau, rho):
    """``(s a, C)`` such that ``MSE = (v s a - 1)^2 + v^2 C`` for the general case."""
    e_k, tau = np.asarray(e_k, float), np.asarray(tau, float)
    sa = np.sqrt(1 - tau**2) * e_k / (1 + e_k)
    C = upsilon_k * _growth(tau, e_k) / (p_k * (1 + e_k) ** 2) + psi0 / (p_k * rho)
    return sa, C


def case1_gamma(e_k, upsilon_k, psi0, p_k, tau, rho):
    e_k, tau = np.asarray(e_k, float), np.asarray(tau, float)
    num = p_k * (1 - tau**2) * e_k**2
    den = upsilon_k * _growth(tau, e_k) + psi0 / rho * (1 + e_k) ** 2
    return num / den


def gamma_mse_case1(profile: DetEquivProfile, k: int, tau_k, v_k, rho):
    """SINR and MSE equivalents of user ``k`` in the general case."""
    args = (profile.e[k], profile.upsilon0[k], profile.psi0, profile.p[k], tau_k, rho)
    sa, C = case1_coefficients(*args)
    return case1_gamma(*args), _quadratic(sa, C, v_k)


def _check_case2(e22, beta):
    if np.any(np.asarray(e22) >= beta):
        raise NumericalFailure("e22 must be below beta")


def case2_coefficients(e, e12, e22, M, K, P, p_k, tau, sigma2):
    beta = M / K
    _check_case2(e22, beta)
    tau = np.asarray(tau, float)
    sa = np.sqrt(1 - tau**2) * e / (1 + e)
    denom = p_k * K * (beta - e22)
    C = (P - p_k) * _growth(tau, e) * e22 / ((1 + e) ** 2 * denom) + sigma2 * e12 / denom
    return sa, C


def case2_gamma(e, e12, e22, M, K, P, p_k, tau, alpha, rho):
    beta = M / K
    _check_case2(e22, beta)
    tau = np.asarray(tau, float)
    num = p_k / (P / K) * (1 - tau**2) * e * (e22 + alpha * beta * (1 + e) ** 2 * e12)
    den = (1 - p_k / P) * _growth(tau, e) * e22 + (1 + e) ** 2 * e12 / rho
    return num / den


def gamma_mse_case2(e, e12, e22, M, K, P, p_k, tau_k, v_k, rho, sigma2, alpha):
    """Shared-correlation equivalents."""
    sa, C = case2_coefficients(e, e12, e22, M, K, P, p_k, tau_k, sigma2)
    gamma = case2_gamma(e, e12, e22, M, K, P, p_k, tau_k, alpha, rho)
    return gamma, _quadratic(sa, C, v_k)


def _case3_denominator(alpha, beta, e):
    d = (alpha * beta * (1 + e) + 1) ** 2 - beta
    if np.any(d <= 0):
        raise NumericalFailure("[alpha beta (1 + e) + 1]^2 must exceed beta")
    return d


def case3_coefficients(M, K, P, p_k, tau, alpha, sigma2, e=None):
    beta = M / K
    e = e_closed_form(beta, alpha) if e is None else e
    tau = np.asarray(tau, float)
    sa = np.sqrt(1 - tau**2) * e / (1 + e)
    d = _case3_denominator(alpha, beta, e)
    C = ((P - p_k) * _growth(tau, e) / (1 + e) ** 2 + sigma2) * beta / (p_k * K * d)
    return sa, C


def case3_gamma(M, K, P, p_k, tau, alpha, rho, e=None):
    beta = M / K
    e = e_closed_form(beta, alpha) if e is None else e
    tau = np.asarray(tau, float)
    num = p_k / (P / K) * (1 - tau**2) * e * (1 + alpha * beta * (1 + e) ** 2)
    den = (1 - p_k / P) * _growth(tau, e) + (1 + e) ** 2 / rho
    return num / den


def gamma_mse_case3(M, K, P, p_k, tau_k, v_k, alpha, rho, sigma2, e=None):
    """Uncorrelated-channel equivalents with per-user uncertainty."""
    sa, C = case3_coefficients(M, K, P, p_k, tau_k, alpha, sigma2, e)
    return case3_gamma(M, K, P, p_k, tau_k, alpha, rho, e), _quadratic(sa, C, v_k)


def case4_coefficients(M, K, tau, alpha, rho, e=None):
    beta = M / K
    e = e_closed_form(beta, alpha) if e is None else e
    tau = np.asarray(tau, float)
    sa = np.sqrt(1 - tau**2) * e / (1 + e)
    d = _case3_denominator(alpha, beta, e)
    C = ((1 - 1 / K) * _growth(tau, e) / (1 + e) ** 2 + 1 / rho) * beta / d
    return sa, C


def case4_gamma(M, K, tau, alpha, rho, e=None):
    beta = M / K
    e = e_closed_form(beta, alpha) if e is None else e
    tau = np.asarray(tau, float)
    num = (1 - tau**2) * e * (1 + alpha * beta * (1 + e) ** 2)
    den = (1 - 1 / K) * _growth(tau, e) + (1 + e) ** 2 / rho
    return num / den


def gamma_mse_case4(M, K, P, tau, v, alpha, rho):
    """Equal-power, equal-uncertainty equivalents (identical for all users)."""
    sa, C = case4_coefficients(M, K, tau, alpha, rho)
    return case4_gamma(M, K, tau, alpha, rho), _quadratic(sa, C, v)


def v_star(sa, C):
    """Minimizer of ``(v sa - 1)^2 + v^2 C`` over ``v >= 0``."""
    return sa / (sa**2 + C)


# ---------------------------------------------------------------------------
# input vectors
# ---------------------------------------------------------------------------

@dataclass
class InputVector:
    case_id: int
    prior: np.ndarray
    numerical: np.ndarray
    optimization: np.ndarray  # [alpha, tau, v]

    def __post_init__(self):
        c = self.case_id
        if c not in FEATURES:
            raise InvalidArgument(f"unknown case {c}")
        if (len(self.prior), len(self.numerical), len(self.optimization)) != (N_PRIOR[c], N_NUMERICAL[c], 3):
            raise InvalidArgument(f"input layout does not match case {c}")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.prior, self.numerical, self.optimization]).astype(float)

    @classmethod
    def from_array(cls, case_id: int, x) -> "InputVector":
        x = np.asarray(x, dtype=float)
        if x.shape != (len(FEATURES[case_id]),):
            raise InvalidArgument(f"case {case_id} expects {len(FEATURES[case_id])} entries")
        a, b = N_PRIOR[case_id], N_PRIOR[case_id] + N_NUMERICAL[case_id]
        return cls(case_id, x[:a].copy(), x[a:b].copy(), x[b:].copy())

    @property
    def alpha(self) -> float:
        return float(self.optimization[0])

    @property
    def tau(self) -> float:
        return float(self.optimization[1])

    @property
    def v(self) -> float:
        return float(self.optimization[2])

    def with_optimization(self, alpha=None, tau=None, v=None) -> "InputVector":
        o = self.optimization.copy()
        for i, val in enumerate((alpha, tau, v)):
            if val is not None:
                o[i] = val
        return InputVector(self.case_id, self.prior.copy(), self.numerical.copy(), o)


def assemble_input(case_id: int, M: int, K: int, P: float, sigma2: float,
                   profile: DetEquivProfile | None, k: int, p_k: float,
                   alpha: float, tau_k: float, v_k: float) -> InputVector:
    """Lay out the predictor input for user ``k``.

    ``profile`` must have been built for the same case and ``alpha`` (it may
    be ``None`` for case 4, whose numerical sub-vector is empty).
    """
    if case_id != 4:
        if profile is None or profile.case_id != case_id:
            raise InvalidArgument("profile does not match the requested case")
        if not np.isclose(profile.alpha, alpha, rtol=1e-12, atol=0):
            raise InvalidArgument("profile was built for a different alpha")
        numerical = profile.numerical(k)
    else:
        numerical = np.empty(0)
    if case_id == 4:
        prior = np.array([M, K, P, sigma2], dtype=float)
    else:
        prior = np.array([M, K, P, p_k, sigma2], dtype=float)
    return InputVector(case_id, prior, numerical, np.array([alpha, tau_k, v_k], dtype=float))


def coefficients_from_inputs(case_id: int, X):
    """Vectorized ``(s a, C, gamma)`` for rows of a stacked input matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    col = {n: X[:, i] for i, n in enumerate(FEATURES[case_id])}
    M, K, P, s2 = col["M"], col["K"], col["P"], col["sigma2"]
    alpha, tau = col["alpha"], col["tau"]
    rho = P / s2
    if case_id == 1:
        args = (col["e_k"], col["upsilon_k"], col["psi0"], col["p_k"], tau, rho)
        sa, C = case1_coefficients(*args)
        gamma = case1_gamma(*args)
    elif case_id == 2:
        sa, C = case2_coefficients(col["e"], col["e12"], col["e22"], M, K, P, col["p_k"], tau, s2)
        gamma = case2_gamma(col["e"], col["e12"], col["e22"], M, K, P, col["p_k"], tau, alpha, rho)
    elif case_id == 3:
        sa, C = case3_coefficients(M, K, P, col["p_k"], tau, alpha, s2, col["e"])
        gamma = case3_gamma(M, K, P, col["p_k"], tau, alpha, rho, col["e"])
    elif case_id == 4:
        sa, C = case4_coefficients(M, K, tau, alpha, rho)
        gamma = case4_gamma(M, K, tau, alpha, rho)
    else:
        raise InvalidArgument(f"unknown case {case_id}")
    return sa, C, gamma


def model_indicators(case_id: int, X):
    """Deterministic-equivalent ``(gamma, mse)`` for each input row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sa, C, gamma = coefficients_from_inputs(case_id, X)
    v = X[:, -1]
    return gamma, _quadratic(sa, C, v)


def model_mse_grad_v(case_id: int, X):
    """``d MSE / d v`` and ``d^2 MSE / d v^2`` of the model part."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sa, C, _ = coefficients_from_inputs(case_id, X)
    v = X[:, -1]
    return 2 * (sa**2 + C) * v - 2 * sa, 2 * (sa**2 + C)
