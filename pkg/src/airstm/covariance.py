"""Correlation functions, their matrix builders, and implied covariances.

Distances are in km and temporal lags in days. Dense space-time matrices use
the site-fastest-within-day ordering ``index = t * d + i``, so the separable
correlation is ``C_time ⊗ C_space``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, ResourceError
from .gaussmath import KroneckerPair

DEFAULT_MAX_DENSE_DIM = 4000


@dataclass(frozen=True)
class ExpSpatialParams:
    theta: float
    sigma2_omega: float = 1.0

    def __post_init__(self):
        _positive(theta=self.theta, sigma2_omega=self.sigma2_omega)


@dataclass(frozen=True)
class SeparableParams:
    theta1: float
    theta2: float
    sigma2_omega: float = 1.0

    def __post_init__(self):
        _positive(theta1=self.theta1, theta2=self.theta2, sigma2_omega=self.sigma2_omega)


@dataclass(frozen=True)
class GneitingParams:
    """Parameters of the two nonseparable families.

    ``variant`` is ``"A3_1"`` (uses ``b``) or ``"A3_2"`` (uses ``nu`` and
    ``tau``); the unused fields must be ``None``.
    """

    variant: str
    a: float
    c: float
    alpha: float
    gamma: float
    b: Optional[float] = None
    nu: Optional[float] = None
    tau: Optional[float] = None
    sigma2_omega: float = 1.0

    def __post_init__(self):
        _positive(a=self.a, c=self.c, sigma2_omega=self.sigma2_omega)
        _in_unit(alpha=self.alpha, gamma=self.gamma)
        if self.variant == "A3_1":
            if self.b is None or self.nu is not None or self.tau is not None:
                raise DomainError("A3_1 takes b and no nu/tau")
            _in_unit(b=self.b)
        elif self.variant == "A3_2":
            if self.nu is None or self.tau is None or self.b is not None:
                raise DomainError("A3_2 takes nu and tau and no b")
            _positive(nu=self.nu)
            if not 0.0 <= self.tau <= 1.0:
                raise DomainError(f"tau must lie in [0, 1], got {self.tau}")
        else:
            raise DomainError(f"unknown Gneiting variant {self.variant!r}")


@dataclass(frozen=True)
class DynamicsParams:
    rho: float
    sigma2_eta: Optional[float] = None

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise DomainError(f"|rho| must be < 1, got {self.rho}")
        if self.sigma2_eta is not None and not self.sigma2_eta >= 0.0:
            raise DomainError(f"sigma2_eta must be >= 0, got {self.sigma2_eta}")


def _positive(**values):
    for name, v in values.items():
        if not (v > 0 and math.isfinite(v)):
            raise DomainError(f"{name} must be positive and finite, got {v}")


def _in_unit(**values):
    for name, v in values.items():
        if not 0.0 < v <= 1.0:
            raise DomainError(f"{name} must lie in (0, 1], got {v}")


def _nonneg_lag(lag, what="lag"):
    lag = np.asarray(lag, dtype=float)
    if np.any(lag < 0) or np.any(np.isnan(lag)):
        raise DomainError(f"{what} must be >= 0")
    return lag


def exp_corr(theta, lag):
    """``exp(-theta * lag)``; scalar in, scalar out."""
    _positive(theta=theta)
    lag = _nonneg_lag(lag)
    out = np.exp(-theta * lag)
    return float(out) if out.ndim == 0 else out


def gneiting_psi(p: GneitingParams, x):
    ax = p.a * np.power(x, p.alpha)
    if p.variant == "A3_1":
        return (ax + p.b) / (p.b * (ax + 1.0))
    return np.power(ax + 1.0, p.tau)


def gneiting_phi(p: GneitingParams, x):
    cx = p.c * np.power(x, p.gamma)
    if p.variant == "A3_1":
        return np.exp(-cx)
    return np.power(1.0 + cx, -p.nu)


def gneiting_corr(p: GneitingParams, h, l):
    """Nonseparable correlation ``phi(h^2 / psi(l^2)) / psi(l^2)``."""
    h = _nonneg_lag(h, "spatial distance")
    l = _nonneg_lag(l, "temporal lag")
    psi = gneiting_psi(p, l * l)
    out = gneiting_phi(p, h * h / psi) / psi
    return float(out) if out.ndim == 0 else out


def temporal_lags(T: int) -> np.ndarray:
    t = np.arange(T, dtype=float)
    return np.abs(t[:, None] - t[None, :])


def spatial_corr_matrix(theta, H) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    C = exp_corr(theta, H)
    C = np.atleast_2d(C)
    np.fill_diagonal(C, 1.0)
    return C


def temporal_corr_matrix(theta1, T: int) -> np.ndarray:
    return np.atleast_2d(exp_corr(theta1, temporal_lags(T)))


def separable_corr_matrix(p: SeparableParams, H, T: int) -> KroneckerPair:
    """``(C_time, C_space)``; the dense product is never formed here."""
    return KroneckerPair(temporal_corr_matrix(p.theta1, T), spatial_corr_matrix(p.theta2, H))


def check_dense_budget(n: int, max_dim=DEFAULT_MAX_DENSE_DIM) -> None:
    if n > max_dim:
        raise ResourceError(f"dense matrix of size {n} exceeds the budget of {max_dim}")


def nonseparable_corr_matrix(p: GneitingParams, H, T: int, max_dim=DEFAULT_MAX_DENSE_DIM) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    d = H.shape[0]
    check_dense_budget(d * T, max_dim)
    Hbig = np.tile(H, (T, T))
    Lbig = np.kron(temporal_lags(T), np.ones((d, d)))
    C = gneiting_corr(p, Hbig, Lbig)
    C = np.atleast_2d(C)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def implied_cov_model_b(e: ExpSpatialParams, dyn: DynamicsParams, h, l) -> float:
    """Additive covariance of the Model B state: AR(1) in time plus spatial."""
    if dyn.sigma2_eta is None:
        raise DomainError("Model B dynamics need sigma2_eta")
    temporal = dyn.rho ** l * dyn.sigma2_eta / (1.0 - dyn.rho**2)
    return float(temporal + e.sigma2_omega * exp_corr(e.theta, h))


def implied_cov_model_c(e: ExpSpatialParams, dyn: DynamicsParams, h, l) -> float:
    """Multiplicative covariance of the Model C state."""
    return float(dyn.rho ** l / (1.0 - dyn.rho**2) * e.sigma2_omega * exp_corr(e.theta, h))
