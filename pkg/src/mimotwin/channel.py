"""Correlated Rayleigh channels and their imperfect base-station estimates.

Conventions
-----------
Channel matrices are stored row-wise as in the downlink model: row ``k`` of
``H`` is ``h_k^H``, so ``y = H x + n``.  The per-user channel column vector
is ``h_k = Theta_k^{1/2} z_k`` and the estimate is

    h_hat_k = Theta_k^{1/2} (sqrt(1 - tau_k^2) z_k + tau_k q_k)

with ``z_k``, ``q_k`` i.i.d. CN(0, I).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument

HERMITIAN_ATOL = 1e-8
EIG_FLOOR = -1e-10


@dataclass
class SystemConfig:
    """Static scenario parameters.

    ``P`` and ``sigma2`` are linear.  ``rho_ratio`` is the fraction of the
    nominal SNR ``P / sigma2`` that is actually realized because of unknown
    interference (1 means no impairment).
    """

    M: int
    K: int
    P: float
    sigma2: float = 1.0
    rho_ratio: float = 1.0
    frame_size: int = 256
    n_frames: int = 5000
    power_alloc: np.ndarray | None = None

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise InvalidArgument("M and K must be positive")
        if self.K > self.M:
            raise InvalidArgument(f"K={self.K} exceeds M={self.M}")
        if not self.P > 0 or not self.sigma2 > 0:
            raise InvalidArgument("P and sigma2 must be positive")
        if not 0 < self.rho_ratio <= 1:
            raise InvalidArgument("rho_ratio must lie in (0, 1]")
        if self.power_alloc is None:
            self.power_alloc = np.full(self.K, self.P / self.K)
        p = np.asarray(self.power_alloc, dtype=float)
        if p.shape != (self.K,) or np.any(p < 0):
            raise InvalidArgument("power_alloc must be K nonnegative entries")
        if p.sum() > self.P * (1 + 1e-12):
            raise InvalidArgument("power allocation exceeds the budget P")
        self.power_alloc = p

    @property
    def rho(self) -> float:
        """Nominal SNR ``P / sigma2`` (what the base station believes)."""
        return self.P / self.sigma2

    @property
    def rho_m(self) -> float:
        """SNR actually realized at the receivers."""
        return self.rho * self.rho_ratio

    @property
    def noise_var_eff(self) -> float:
        # interference folded into the noise floor
        return self.sigma2 / self.rho_ratio

    @property
    def beta(self) -> float:
        return self.M / self.K


@dataclass(frozen=True)
class CorrelationModel:
    """Exponential correlation ``Theta_ij = r^(j-i)`` for ``i <= j``."""

    r: complex = 0.0

    def __post_init__(self):
        if abs(self.r) >= 1:
            raise InvalidArgument(f"|r| must be < 1, got {abs(self.r)}")

    def matrix(self, M: int) -> np.ndarray:
        return correlation_matrix(M, self.r)


@dataclass
class ChannelRealization:
    theta: np.ndarray  # (K, M, M)
    h: np.ndarray  # (K, M), rows h_k^H
    h_hat: np.ndarray  # (K, M), rows h_hat_k^H
    tau: np.ndarray
    z: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)


def correlation_matrix(M: int, r: complex) -> np.ndarray:
    """Hermitian ``M x M`` matrix with ``Theta[i, j] = r**(j - i)`` above the
    diagonal and the conjugate below it."""
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    r = complex(r)
    if abs(r) >= 1:
        raise InvalidArgument(f"|r| must be < 1, got {abs(r)}")
    idx = np.arange(M)
    lag = idx[None, :] - idx[:, None]
    theta = np.power(r, np.abs(lag).astype(float))
    theta = np.where(lag >= 0, theta, np.conj(theta))
    np.fill_diagonal(theta, 1.0)
    return theta


def matrix_sqrt_psd(theta: np.ndarray) -> np.ndarray:
    """Hermitian PSD square root via eigendecomposition.

    Eigenvalues in ``[-1e-10, 0)`` are treated as round-off and clamped.
    """
    theta = np.asarray(theta)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise InvalidArgument("expected a square matrix")
    if np.max(np.abs(theta - theta.conj().T), initial=0.0) > HERMITIAN_ATOL:
        raise InvalidArgument("matrix is not Hermitian")
    w, V = np.linalg.eigh(theta)
    if w.min() < EIG_FLOOR:
        raise InvalidArgument(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    S = (V * np.sqrt(w)) @ V.conj().T
    return 0.5 * (S + S.conj().T)


def sample_correlation(rng: np.random.Generator) -> CorrelationModel:
    """Draw ``r = u exp(i phi)`` with ``u ~ U[0, 1)``, ``phi ~ U[0, 2 pi)``."""
    u = rng.uniform(0.0, 1.0)
    phi = rng.uniform(0.0, 2 * np.pi)
    return CorrelationModel(u * np.exp(1j * phi))


def case_correlations(case_id: int, K: int, rng: np.random.Generator) -> list[CorrelationModel]:
    """Correlation models per case: distinct per user (1), shared (2), identity (3, 4)."""
    if case_id == 1:
        return [sample_correlation(rng) for _ in range(K)]
    if case_id == 2:
        return [sample_correlation(rng)] * K
    if case_id in (3, 4):
        return [CorrelationModel(0.0)] * K
    raise InvalidArgument(f"unknown case {case_id}")


def correlation_stack(corr: Sequence[CorrelationModel], M: int, K: int) -> np.ndarray:
    """Stack of ``K`` correlation matrices; a single model is shared by all users."""
    if len(corr) == 1:
        corr = list(corr) * K
    if len(corr) != K:
        raise InvalidArgument(f"need 1 or {K} correlation models, got {len(corr)}")
    return np.stack([c.matrix(M) for c in corr])


def sqrt_stack(theta: np.ndarray) -> np.ndarray:
    """Square roots of a ``(K, M, M)`` stack, skipping identities."""
    eye = np.eye(theta.shape[-1])
    return np.stack([eye if np.array_equal(t, eye) else matrix_sqrt_psd(t) for t in theta])


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. CN(0, 1) entries: real and imaginary parts each N(0, 1/2)."""
    g = rng.standard_normal((2, *shape))
    return (g[0] + 1j * g[1]) * np.sqrt(0.5)


def draw_channels(sqrt_theta: np.ndarray, tau: np.ndarray, n: int,
                  rng: np.random.Generator):
    """Vectorized draw of ``n`` channel/estimate pairs.

    Returns ``(H, H_hat, z, q)`` with shapes ``(n, K, M)``; rows of ``H`` and
    ``H_hat`` are conjugated channel vectors.
    """
    K, M, _ = sqrt_theta.shape
    tau = np.asarray(tau, dtype=float)
    z = complex_normal(rng, (n, K, M))
    q = complex_normal(rng, (n, K, M))
    mix = np.sqrt(1.0 - tau**2)[None, :, None] * z + tau[None, :, None] * q
    h = np.einsum("kij,nkj->nki", sqrt_theta, z)
    h_hat = np.einsum("kij,nkj->nki", sqrt_theta, mix)
    return h.conj(), h_hat.conj(), z, q


def sample_channel(cfg: SystemConfig, corr: Sequence[CorrelationModel], tau,
                   rng: np.random.Generator) -> ChannelRealization:
    """One realization of true channels and their corrupted estimates."""
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (cfg.K,)).copy()
    if np.any(tau < 0) or np.any(tau > 1):
        raise InvalidArgument("tau entries must lie in [0, 1]")
    theta = correlation_stack(corr, cfg.M, cfg.K)
    H, H_hat, z, q = draw_channels(sqrt_stack(theta), tau, 1, rng)
    return ChannelRealization(theta=theta, h=H[0], h_hat=H_hat[0], tau=tau, z=z[0], q=q[0])
