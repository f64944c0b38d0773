"""Frame-level link simulation of the RZF-precoded downlink.

The per-frame quantities are computed through the push-through form of the
precoder, ``(H_hat^H H_hat + M a I)^-1 H_hat^H = H_hat^H (H_hat H_hat^H + M a I)^-1``,
which needs only ``K x K`` inverses and remains defined for ``a = 0`` (zero
forcing) whenever ``H_hat`` has full row rank.

Two symbol models are available for the detection statistics:

``"symbols"``
    QPSK symbols and AWGN are drawn explicitly, ``frame_size`` per frame.
``"expected"``
    The per-frame expectation over symbols and noise is evaluated exactly:
    interferer constellation points are enumerated and the Gaussian noise
    is integrated in closed form.  Same mean as ``"symbols"``, no symbol-level
    sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.special import erf

from .channel import (ChannelRealization, CorrelationModel, SystemConfig, complex_normal,
                      correlation_stack, draw_channels, sqrt_stack)
from .errors import InvalidArgument

QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2)
_S0 = QPSK[0]


@dataclass
class PrecoderState:
    alpha: float
    G: np.ndarray  # (M, K)
    xi2: float
    Psi: float
    W: np.ndarray | None = None  # (M, M) regularized inverse


@dataclass
class IndicatorSet:
    gamma: np.ndarray
    mse_true: np.ndarray
    mse_meas: np.ndarray
    ser: np.ndarray
    sum_rate: float = np.nan
    n_frames: int = 1

    @property
    def mse(self) -> float:
        """Aggregate MSE: mean of the per-user true MSEs."""
        return float(np.mean(self.mse_true))


def rzf_precoder(h_hat, alpha: float, p, P: float, *, allow_zf: bool = False) -> PrecoderState:
    """Normalized RZF precoder ``G = xi W H_hat^H`` meeting ``tr(G diag(p) G^H) = P``."""
    h_hat = np.asarray(h_hat)
    if not (alpha > 0 or (allow_zf and alpha == 0)):
        raise InvalidArgument(f"alpha must be positive, got {alpha}")
    K, M = h_hat.shape
    p = np.asarray(p, dtype=float)
    if alpha > 0:
        W = np.linalg.inv(h_hat.conj().T @ h_hat + M * alpha * np.eye(M))
        F = W @ h_hat.conj().T
    else:
        W = None
        F = h_hat.conj().T @ np.linalg.inv(h_hat @ h_hat.conj().T)
    Psi = float(np.real(np.sum(p * np.sum(np.abs(F) ** 2, axis=0))))
    xi2 = P / Psi
    return PrecoderState(alpha=alpha, G=np.sqrt(xi2) * F, xi2=xi2, Psi=Psi, W=W)


def instantaneous_sinr(state: PrecoderState, chan: ChannelRealization, cfg: SystemConfig,
                       impaired: bool = True) -> np.ndarray:
    """Per-user SINR of one realization using the quadratic-form expression.

    With ``impaired`` the realized SNR ``rho * rho_ratio`` replaces ``rho``.
    """
    p = cfg.power_alloc
    rho = cfg.rho_m if impaired else cfg.rho
    F = state.G / np.sqrt(state.xi2)  # W H_hat^H
    H = chan.h
    gamma = np.empty(cfg.K)
    for k in range(cfg.K):
        others = np.delete(np.arange(cfg.K), k)
        Fo = F[:, others]
        # h^H W H_[k]^H P_[k] H_[k] W h
        q = np.real(H[k] @ Fo @ np.diag(p[others]) @ Fo.conj().T @ H[k].conj())
        gamma[k] = p[k] * abs(H[k] @ F[:, k]) ** 2 / (q + state.Psi / rho)
    return gamma


def sinr_from_sums(state: PrecoderState, chan: ChannelRealization, cfg: SystemConfig,
                   impaired: bool = True) -> np.ndarray:
    """Per-user SINR from explicit per-interferer sums (independent coding)."""
    p = cfg.power_alloc
    rho = cfg.rho_m if impaired else cfg.rho
    E = chan.h @ state.G / np.sqrt(state.xi2)
    gains = p[None, :] * np.abs(E) ** 2
    sig = np.diag(gains).copy()
    return sig / (gains.sum(axis=1) - sig + state.Psi / rho)


# ---------------------------------------------------------------------------
# batched frame engine
# ---------------------------------------------------------------------------

@dataclass
class FrameBatch:
    """Per-frame effective channels ``E[n, k, j] = h_k^H W h_hat_j`` and
    power normalizations ``Psi[n]``."""

    E: np.ndarray
    Psi: np.ndarray


def effective_channels(H, H_hat, alpha: float) -> FrameBatch:
    n, K, M = H.shape
    Hh_H = np.conj(np.swapaxes(H_hat, 1, 2))  # (n, M, K)
    R = H_hat @ Hh_H + M * alpha * np.eye(K)
    Rinv = np.linalg.inv(R)
    F = Hh_H @ Rinv  # W H_hat^H, (n, M, K)
    E = H @ F
    return FrameBatch(E=E, Psi=np.sum(np.abs(F) ** 2, axis=1))  # Psi per (n, j) before p


def frame_stats(batch: FrameBatch, p, P: float, noise_var: float):
    """Per-frame SINR plus the coefficients of the true MSE quadratic in ``u``.

    Returns ``gamma (n, K)``, ``c (n, K, K)`` with ``c[n, k, j] = xi sqrt(p_j) E[n, k, j]``
    and ``Psi (n,)``.
    """
    p = np.asarray(p, dtype=float)
    Psi = batch.Psi @ p
    xi = np.sqrt(P / Psi)
    c = xi[:, None, None] * np.sqrt(p)[None, None, :] * batch.E
    g = np.abs(c) ** 2
    sig = np.einsum("nkk->nk", g)
    gamma = sig / (g.sum(axis=2) - sig + noise_var)
    return gamma, c, Psi


def true_mse(c, u, noise_var: float):
    """Exact ``E|u y_k - s_k|^2`` per frame and user."""
    own = np.einsum("nkk->nk", c)
    tot = np.sum(np.abs(c) ** 2, axis=2)
    return (np.abs(u * own - 1) ** 2 + u**2 * (tot - np.abs(own) ** 2) + u**2 * noise_var)


def _gaussian_terms(mu, s):
    """``E|x|`` and ``P(x > 0)`` for ``x ~ N(mu, s^2)`` sharing one erf call."""
    if s > 0:
        r = mu / (s * np.sqrt(2))
        er = erf(r)
        return s * np.sqrt(2 / np.pi) * np.exp(-(r**2)) + mu * er, 0.5 * (1 + er)
    return np.abs(mu), (mu > 0).astype(float)


def expected_detection(c, u, noise_var: float):
    """Exact per-frame expectation of measured MSE and SER for QPSK.

    Uses rotational symmetry of QPSK to fix the desired symbol and
    enumerates the ``4^(K-1)`` interferer symbol combinations.
    """
    n, K, _ = c.shape
    u = np.broadcast_to(np.asarray(u, dtype=float), (K,))
    s = u * np.sqrt(noise_var / 2)  # per real dimension
    mse_m = np.zeros((n, K))
    ser = np.zeros((n, K))
    combos = np.array(list(product(QPSK, repeat=K - 1))) if K > 1 else np.zeros((1, 0))
    w = 1.0 / len(combos)
    for k in range(K):
        others = [j for j in range(K) if j != k]
        ck = u[k] * c[:, k, :]
        base = ck[:, k] * _S0
        mu = base[:, None] + (ck[:, others] @ combos.T if others else 0.0)  # (n, n_combo)
        mr, mi = mu.real, mu.imag
        sk = s[k]
        ar, pr = _gaussian_terms(mr, sk)
        ai, pi = _gaussian_terms(mi, sk)
        val = mr**2 + mi**2 + 2 * sk**2 - np.sqrt(2) * (ar + ai) + 1.0
        mse_m[:, k] = val.sum(axis=1) * w
        ok = pr * pi
        ser[:, k] = 1.0 - ok.sum(axis=1) * w
    return mse_m, ser


def qpsk_demod(r):
    """Nearest QPSK constellation point."""
    return (np.where(r.real >= 0, 1.0, -1.0) + 1j * np.where(r.imag >= 0, 1.0, -1.0)) / np.sqrt(2)


def sampled_detection(c, u, noise_var: float, frame_size: int, rng: np.random.Generator):
    """Monte-Carlo per-frame MSE (true and measured) and SER from drawn symbols."""
    n, K, _ = c.shape
    u = np.broadcast_to(np.asarray(u, dtype=float), (K,))
    sym = QPSK[rng.integers(0, 4, size=(n, K, frame_size))]
    noise = np.sqrt(noise_var) * complex_normal(rng, (n, K, frame_size))
    y = c @ sym + noise
    r = u[None, :, None] * y
    s_hat = qpsk_demod(r)
    mse_t = np.mean(np.abs(r - sym) ** 2, axis=2)
    mse_m = np.mean(np.abs(r - s_hat) ** 2, axis=2)
    ser = np.mean(s_hat != sym, axis=2)
    return mse_t, mse_m, ser


@dataclass
class LinkModel:
    """Fixed statistics of one sensing interval: correlation square roots and uncertainties."""

    cfg: SystemConfig
    theta: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.tau = np.broadcast_to(np.asarray(self.tau, dtype=float), (self.cfg.K,)).copy()
        if np.any(self.tau < 0) or np.any(self.tau > 1):
            raise InvalidArgument("tau entries must lie in [0, 1]")
        self.sqrt_theta = sqrt_stack(self.theta)

    @classmethod
    def from_models(cls, cfg: SystemConfig, corr, tau) -> "LinkModel":
        return cls(cfg, correlation_stack(corr, cfg.M, cfg.K), tau)

    def draw(self, n: int, rng: np.random.Generator):
        return draw_channels(self.sqrt_theta, self.tau, n, rng)


def simulate_frames(link: LinkModel, alpha: float, u, rng: np.random.Generator, n_frames: int,
                    *, symbol_model: str = "expected", impaired: bool = True,
                    chunk: int = 1000) -> IndicatorSet:
    """Time-averaged indicators over ``n_frames`` independent fast-fading frames."""
    cfg = link.cfg
    u = np.broadcast_to(np.asarray(u, dtype=float), (cfg.K,))
    if np.any(u < 0):
        raise InvalidArgument("scaling factors must be nonnegative")
    if symbol_model not in ("expected", "symbols"):
        raise InvalidArgument(f"unknown symbol model {symbol_model!r}")
    noise_var = cfg.noise_var_eff if impaired else cfg.sigma2
    acc = np.zeros((4, cfg.K))
    sr = 0.0
    done = 0
    while done < n_frames:
        n = min(chunk, n_frames - done)
        H, H_hat, _, _ = link.draw(n, rng)
        gamma, c, _ = frame_stats(effective_channels(H, H_hat, alpha), cfg.power_alloc,
                                  cfg.P, noise_var)
        if symbol_model == "expected":
            mse_t = true_mse(c, u, noise_var)
            mse_m, ser = expected_detection(c, u, noise_var)
        else:
            mse_t, mse_m, ser = sampled_detection(c, u, noise_var, cfg.frame_size, rng)
        acc += np.stack([gamma.sum(0), mse_t.sum(0), mse_m.sum(0), ser.sum(0)])
        sr += np.sum(np.log2(1 + gamma))
        done += n
    acc /= n_frames
    return IndicatorSet(gamma=acc[0], mse_true=acc[1], mse_meas=acc[2], ser=acc[3],
                        sum_rate=sr / n_frames, n_frames=n_frames)


def transmit_frames(state: PrecoderState, chan: ChannelRealization, cfg: SystemConfig, u,
                    rng: np.random.Generator, *, symbol_model: str = "symbols",
                    impaired: bool = True) -> IndicatorSet:
    """Transmit one frame of QPSK symbols over a fixed channel realization.

    ``u`` are the receiver scalings applied before the symbol decision.
    """
    u = np.broadcast_to(np.asarray(u, dtype=float), (cfg.K,))
    if np.any(u < 0):
        raise InvalidArgument("scaling factors must be nonnegative")
    noise_var = cfg.noise_var_eff if impaired else cfg.sigma2
    E = (chan.h @ (state.G / np.sqrt(state.xi2)))[None]
    batch = FrameBatch(E=E, Psi=np.sum(np.abs(state.G / np.sqrt(state.xi2)) ** 2, axis=0)[None])
    gamma, c, _ = frame_stats(batch, cfg.power_alloc, cfg.P, noise_var)
    if symbol_model == "symbols":
        mse_t, mse_m, ser = sampled_detection(c, u, noise_var, cfg.frame_size, rng)
    else:
        mse_t = true_mse(c, u, noise_var)
        mse_m, ser = expected_detection(c, u, noise_var)
    return IndicatorSet(gamma=gamma[0], mse_true=mse_t[0], mse_meas=mse_m[0], ser=ser[0],
                        sum_rate=float(np.sum(np.log2(1 + gamma[0]))))


def scaling_from_v(v, psi0: float, P: float, p):
    """Receiver scaling ``u_k = v_k sqrt(Psi / P) / sqrt(p_k)``."""
    return np.asarray(v, dtype=float) * np.sqrt(psi0 / P) / np.sqrt(np.asarray(p, dtype=float))


def v_from_scaling(u, psi0: float, P: float, p):
    return np.asarray(u, dtype=float) * np.sqrt(P / psi0) * np.sqrt(np.asarray(p, dtype=float))


def sense_indicators(link: LinkModel, alpha: float, v, psi0: float, rng: np.random.Generator,
                     n_frames: int | None = None, *, symbol_model: str = "expected",
                     impaired: bool = True) -> IndicatorSet:
    """Time-averaged SINR and demodulation-based MSE fed back by the users.

    ``v`` is the normalized scaling in effect during the interval; it is
    mapped to receiver scalings through the deterministic-equivalent power
    normalization ``psi0``.
    """
    cfg = link.cfg
    n = cfg.n_frames if n_frames is None else n_frames
    u = scaling_from_v(np.broadcast_to(v, (cfg.K,)), psi0, cfg.P, cfg.power_alloc)
    return simulate_frames(link, alpha, u, rng, n, symbol_model=symbol_model, impaired=impaired)


@dataclass
class FrameMoments:
    """Per-user frame averages that make the true MSE analytic in ``u``.

    ``E|u y_k - s_k|^2 = A_k u^2 - 2 B_k u + 1`` with
    ``A_k = E[sum_j |c_kj|^2] + noise`` and ``B_k = E[Re c_kk]``.
    """

    gamma: np.ndarray
    sum_rate: float
    A: np.ndarray
    B: np.ndarray
    n_frames: int

    def mse(self, u):
        u = np.asarray(u, dtype=float)
        return self.A * u**2 - 2 * self.B * u + 1.0

    @property
    def u_opt(self) -> np.ndarray:
        return self.B / self.A

    @property
    def mse_opt(self) -> np.ndarray:
        return 1.0 - self.B**2 / self.A


def moments_on_channels(cfg: SystemConfig, H, H_hat, alpha: float, *, impaired: bool = True,
                        chunk: int = 1000) -> FrameMoments:
    """:class:`FrameMoments` on a fixed set of drawn frames ``(n, K, M)``."""
    if alpha < 0:
        raise InvalidArgument("alpha must be nonnegative")
    noise_var = cfg.noise_var_eff if impaired else cfg.sigma2
    n_frames = H.shape[0]
    acc = np.zeros((3, cfg.K))
    sr = 0.0
    for s in range(0, n_frames, chunk):
        gamma, c, _ = frame_stats(effective_channels(H[s:s + chunk], H_hat[s:s + chunk], alpha),
                                  cfg.power_alloc, cfg.P, noise_var)
        own = np.einsum("nkk->nk", c)
        tot = np.sum(np.abs(c) ** 2, axis=2)
        acc += np.stack([gamma.sum(0), (tot + noise_var).sum(0), own.real.sum(0)])
        sr += np.sum(np.log2(1 + gamma))
    acc /= n_frames
    return FrameMoments(gamma=acc[0], sum_rate=sr / n_frames, A=acc[1], B=acc[2], n_frames=n_frames)


def frame_moments(link: LinkModel, alpha: float, rng: np.random.Generator, n_frames: int, *,
                  impaired: bool = True) -> FrameMoments:
    """SINR, sum rate and MSE moments over ``n_frames`` freshly drawn frames.

    A generator seeded identically for several ``alpha`` values evaluates
    them on common channel draws.
    """
    H, H_hat, _, _ = link.draw(n_frames, rng)
    return moments_on_channels(link.cfg, H, H_hat, alpha, impaired=impaired)
