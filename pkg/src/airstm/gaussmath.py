"""Gaussian linear-algebra kernel.

PSD-safe Cholesky with a deterministic jitter ladder, Kronecker-structured
log-determinants and solves, multivariate-normal densities, sampling and
conditioning. Random draws always come from an explicit
``numpy.random.Generator``; use :func:`rng_stream` and :func:`split_stream`
to derive independent, reproducible streams.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, NotPSDError, NumericalError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_MAX_JITTER = 1e-6
VARIANCE_CLAMP_TOL = 1e-10


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """PCG64 stream for ``seed``; extra integers select a named sub-stream."""
    entropy = int(seed) if not key else [int(seed), *map(int, key)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def split_stream(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """``n`` independent child streams; the parent advances deterministically."""
    return rng.spawn(n)


def jitter_ladder(max_jitter):
    """0, 1e-10, 1e-8, ... capped at ``max_jitter``."""
    yield 0.0
    j = 1e-10
    while j <= max_jitter * (1 + 1e-12):
        yield j
        j *= 100.0


@dataclass
class CholeskyFactor:
    """Lower-triangular ``L`` with ``L @ L.T == A + jitter_applied * I``."""

    L: np.ndarray
    jitter_applied: float = 0.0

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self.L)).sum())

    def solve(self, b):
        return sla.cho_solve((self.L, True), b, check_finite=False)

    def whiten(self, b):
        """``L^{-1} b``."""
        return sla.solve_triangular(self.L, b, lower=True, check_finite=False)

    def matrix(self) -> np.ndarray:
        return self.L @ self.L.T

    @classmethod
    def of_diagonal(cls, diag) -> "CholeskyFactor":
        return cls(np.diag(np.sqrt(np.asarray(diag, dtype=float))))


def chol_psd(A, max_jitter=DEFAULT_MAX_JITTER) -> CholeskyFactor:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {A.shape}")
    if A.size and np.max(np.abs(A - A.T)) > 1e-10 * max(1.0, float(np.max(np.abs(A)))):
        raise DomainError("matrix is not symmetric")
    if not np.all(np.isfinite(A)):
        raise NotPSDError("matrix has non-finite entries")
    n = A.shape[0]
    for j in jitter_ladder(max_jitter):
        try:
            M = A if j == 0.0 else A + j * np.eye(n)
            L = sla.cholesky(M, lower=True, check_finite=False)
        except sla.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return CholeskyFactor(L, j)
    raise NotPSDError(f"matrix of size {n} not positive definite with jitter up to {max_jitter:g}")


@dataclass
class KroneckerPair:
    """``A ⊗ B`` kept as its two square factors.

    With ``A`` (n x n) the temporal factor and ``B`` (m x m) the spatial one,
    an ``n*m`` vector is indexed ``t * m + i``.
    """

    A: np.ndarray
    B: np.ndarray
    max_jitter: float = field(default=DEFAULT_MAX_JITTER, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        for M in (self.A, self.B):
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise DomainError("Kronecker factors must be square")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @cached_property
    def chol_A(self) -> CholeskyFactor:
        return chol_psd(self.A, self.max_jitter)

    @cached_property
    def chol_B(self) -> CholeskyFactor:
        return chol_psd(self.B, self.max_jitter)

    @cached_property
    def eig(self):
        """Eigen-decompositions ``(wA, VA, wB, VB)`` of both factors."""
        wA, VA = np.linalg.eigh(self.A)
        wB, VB = np.linalg.eigh(self.B)
        if wA.min() <= 0 or wB.min() <= 0:
            raise NotPSDError("Kronecker factor is not positive definite")
        return wA, VA, wB, VB

    def materialize(self) -> np.ndarray:
        return np.kron(self.A, self.B)

    def _as_grid(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n * self.m:
            raise DomainError(f"vector length {v.shape[0]} != {self.n}*{self.m}")
        return v.reshape((self.n, self.m) + v.shape[1:])

    def matvec(self, v):
        V = self._as_grid(v)
        out = np.einsum("ts,sj...->tj...", self.A, V)
        out = np.einsum("ij,tj...->ti...", self.B, out)
        return out.reshape(np.shape(v))

    def apply_factors(self, FA, FB, v):
        """``(FA ⊗ FB) v`` for arbitrary conformable factors."""
        V = self._as_grid(v)
        out = np.einsum("ts,sj...->tj...", FA, V)
        out = np.einsum("ij,tj...->ti...", FB, out)
        return out.reshape((FA.shape[0] * FB.shape[0],) + np.shape(v)[1:])


def kron_logdet(p: KroneckerPair) -> float:
    return p.m * p.chol_A.logdet() + p.n * p.chol_B.logdet()


def kron_solve(p: KroneckerPair, v):
    """``(A ⊗ B)^{-1} v``; ``v`` may carry trailing columns."""
    V = p._as_grid(v)
    tail = V.shape[2:]
    X = p.chol_A.solve(V.reshape(p.n, -1)).reshape(V.shape)
    X = np.moveaxis(X, 1, 0).reshape(p.m, -1)
    X = p.chol_B.solve(X).reshape((p.m, p.n) + tail)
    return np.moveaxis(X, 0, 1).reshape(np.shape(v))


def mvn_logpdf(x, mean, cov: CholeskyFactor) -> float:
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != mean.shape or x.shape[0] != cov.n:
        raise DomainError(f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.n}")
    r = cov.whiten(x - mean)
    return -0.5 * (cov.n * LOG_2PI + cov.logdet() + float(r @ r))


def mvn_condition(mu1, mu2, S11: CholeskyFactor, S12, S22, obs):
    """Mean and variance of a scalar given a jointly Gaussian vector.

    Returns ``mu2 + S12' S11^{-1} (obs - mu1)`` and
    ``S22 - S12' S11^{-1} S12``.
    """
    mu1 = np.asarray(mu1, dtype=float)
    S12 = np.asarray(S12, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if not (mu1.shape == S12.shape == obs.shape) or mu1.shape[0] != S11.n:
        raise DomainError("dimension mismatch in mvn_condition")
    if not S22 > 0:
        raise DomainError(f"S22 must be positive, got {S22}")
    if S11.n == 0:
        return float(mu2), float(S22)
    w = S11.whiten(S12)
    r = S11.whiten(obs - mu1)
    mean = float(mu2) + float(w @ r)
    var = float(S22) - float(w @ w)
    if var < 0:
        if var < -VARIANCE_CLAMP_TOL * max(1.0, float(S22)):
            raise NumericalError(f"conditional variance {var:g} is negative")
        log.warning("clamping conditional variance %g to 0", var)
        var = 0.0
    return mean, var


def sample_mvn(mean, cov: CholeskyFactor, rng: np.random.Generator, size=None):
    """``mean + L xi``; with ``size`` the draws are stacked along axis 0."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape[0] != cov.n:
        raise DomainError("dimension mismatch in sample_mvn")
    if size is None:
        return mean + cov.L @ rng.standard_normal(cov.n)
    xi = rng.standard_normal((size, cov.n))
    return mean + xi @ cov.L.T
