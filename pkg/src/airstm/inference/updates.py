"""Single-block updates of the Metropolis-within-Gibbs sweep.

Every conjugate update is split into a deterministic ``*_conditional``
function returning the full-conditional parameters and a sampling wrapper,
so the moments can be checked against dense brute-force computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ..covariance import separable_corr_matrix, spatial_corr_matrix
from ..errors import ContractError, NotPSDError
from ..gaussmath import chol_psd, kron_solve
from ..models import (
    GIBBS_PARAMS,
    ModelKind,
    ParamState,
    PriorSpec,
    nonseparable_cov,
    prepare,
    sigma_omega_eps,
    trend,
)

# ---------------------------------------------------------------------------
# beta


def _beta_moments(XtSX, XtSr, prior: PriorSpec):
    k = XtSX.shape[0]
    P = XtSX + np.eye(k) / prior.beta_var
    try:
        LP = chol_psd(0.5 * (P + P.T))
    except NotPSDError as exc:
        raise NotPSDError(f"beta conditional precision: {exc}") from None
    mean = LP.solve(XtSr)
    return mean, LP


def _blocked_gls_terms(S, R, data):
    """``sum_t X_t' S^{-1} X_t`` and ``sum_t X_t' S^{-1} r_t`` over observed sites."""
    k = data.k
    XtSX = np.zeros((k, k))
    XtSr = np.zeros(k)
    for mask, days in data.groups:
        L = chol_psd(S[np.ix_(mask, mask)])
        Xg = data.X[np.ix_(mask, days)]  # (m, D, k)
        m, D = Xg.shape[:2]
        WX = L.whiten(Xg.reshape(m, D * k)).reshape(m, D, k)
        Wr = L.whiten(R[np.ix_(mask, days)])
        XtSX += np.einsum("mdk,mdl->kl", WX, WX)
        XtSr += np.einsum("mdk,md->k", WX, Wr)
    return XtSX, XtSr


def beta_precision_terms(kind, psi: ParamState, data):
    """``(X' Σ^{-1} X, X' Σ^{-1} r)`` for the model's data-level covariance."""
    kind = ModelKind.parse(kind)
    data = prepare(data)
    if kind is ModelKind.A1:
        return _blocked_gls_terms(sigma_omega_eps(psi, data), data.z, data)
    if kind is ModelKind.B:
        R = data.z - psi.latent[None, 1:]
        return _blocked_gls_terms(sigma_omega_eps(psi, data), R, data)
    if kind is ModelKind.C:
        obs = data.observed
        Xo = data.X[obs]
        r = (data.z - psi.latent[:, 1:])[obs]
        s2e = psi["sigma2_eps"]
        return Xo.T @ Xo / s2e, Xo.T @ r / s2e
    if kind is ModelKind.A2:
        pair = separable_corr_matrix(psi.separable_params(), data.H, data.T)
        SX = kron_solve(pair, data.Xvec) / psi["sigma2_omega"]
        u = psi.latent.T.ravel()
        return data.Xvec.T @ SX, SX.T @ u
    S = nonseparable_cov(psi, data)
    obs = data.obs_vec
    L = chol_psd(S[np.ix_(obs, obs)])
    WX = L.whiten(data.Xvec[obs])
    Wr = L.whiten(data.zvec[obs])
    return WX.T @ WX, WX.T @ Wr


def beta_conditional(kind, psi: ParamState, data, prior: PriorSpec):
    """Mean vector and covariance matrix of the Gaussian full conditional of beta."""
    XtSX, XtSr = beta_precision_terms(kind, psi, data)
    mean, LP = _beta_moments(XtSX, XtSr, prior)
    return mean, LP.solve(np.eye(len(mean)))


def beta_update(kind, psi: ParamState, data, prior: PriorSpec, rng) -> np.ndarray:
    XtSX, XtSr = beta_precision_terms(kind, psi, data)
    mean, LP = _beta_moments(XtSX, XtSr, prior)
    # precision factor: x = mean + L^{-T} xi has covariance P^{-1}
    xi = rng.standard_normal(len(mean))
    return mean + solve_triangular(LP.L.T, xi, lower=False, check_finite=False)


# ---------------------------------------------------------------------------
# conjugate variances


def variance_conditional(kind, which, psi: ParamState, data, prior: PriorSpec):
    """Inverse-gamma ``(shape, scale)`` of a conjugate variance full conditional."""
    kind = ModelKind.parse(kind)
    data = prepare(data)
    if which not in GIBBS_PARAMS[kind]:
        raise ContractError(f"{which} has no conjugate update in {kind.label}; use mh_update")
    a, b = prior.ig_shape, prior.ig_scale
    if kind is ModelKind.A2:
        if which == "sigma2_omega":
            pair = separable_corr_matrix(psi.separable_params(), data.H, data.T)
            r = (psi.latent - trend(psi, data)).T.ravel()
            return a + r.size / 2.0, b + 0.5 * float(r @ kron_solve(pair, r))
        r = (data.z - psi.latent)[data.observed]
        return a + r.size / 2.0, b + 0.5 * float(r @ r)
    if kind is ModelKind.B:
        Y = psi.latent
        e = Y[1:] - psi["rho"] * Y[:-1]
        return a + e.size / 2.0, b + 0.5 * float(e @ e)
    # Model C
    Y = psi.latent
    if which == "sigma2_omega":
        E = Y[:, 1:] - psi["rho"] * Y[:, :-1]
        L = chol_psd(spatial_corr_matrix(psi["theta"], data.H))
        W = L.whiten(E)
        return a + E.size / 2.0, b + 0.5 * float(np.sum(W * W))
    r = (data.z - trend(psi, data) - Y[:, 1:])[data.observed]
    return a + r.size / 2.0, b + 0.5 * float(r @ r)


def sample_inverse_gamma(shape, scale, rng, size=None):
    return scale / rng.gamma(shape, 1.0, size=size)


def variance_gibbs_update(kind, which, psi, data, prior, rng) -> float:
    shape, scale = variance_conditional(kind, which, psi, data, prior)
    return float(sample_inverse_gamma(shape, scale, rng))


# ---------------------------------------------------------------------------
# random-walk Metropolis on an unconstrained scale


class Transform:
    """Bijection between a parameter's support and the real line.

    ``(lo, hi)`` supports use a scaled logit, ``(0, inf)`` a log.
    """

    def __init__(self, support):
        self.support = support

    def to_free(self, x):
        if self.support is None:
            return math.log(x)
        lo, hi = self.support
        p = (x - lo) / (hi - lo)
        return math.log(p) - math.log1p(-p)

    def from_free(self, y):
        if self.support is None:
            return math.exp(y)
        lo, hi = self.support
        if y >= 0:
            p = 1.0 / (1.0 + math.exp(-y))
        else:
            e = math.exp(y)
            p = e / (1.0 + e)
        x = lo + (hi - lo) * p
        # keep strictly inside the open support under round-off
        if not lo < x < hi:
            x = math.nextafter(lo, hi) if x <= lo else math.nextafter(hi, lo)
        return x

    def log_jacobian(self, y):
        """``log |dx/dy|`` at free value ``y``."""
        if self.support is None:
            return y
        lo, hi = self.support
        return math.log(hi - lo) - float(np.logaddexp(0.0, -y)) - float(np.logaddexp(0.0, y))


@dataclass
class AdaptState:
    """Robbins-Monro tuned proposal scale for one parameter."""

    log_step: float = math.log(0.5)
    target: float = 0.44
    n_updates: int = 0
    n_accepted: int = 0
    adapting: bool = True

    @property
    def step(self) -> float:
        return math.exp(self.log_step)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_updates if self.n_updates else 0.0

    def adapt(self, accept_prob: float) -> None:
        if self.adapting:
            gain = (self.n_updates + 1) ** -0.6
            self.log_step += gain * (accept_prob - self.target)
            self.log_step = min(max(self.log_step, -12.0), 4.0)


def mh_update(value, log_target, transform: Transform, rng, adapt_state: AdaptState, current_log_target=None):
    """One random-walk step on the free scale.

    ``log_target(x)`` evaluates the unnormalized log density at a candidate
    value. Returns ``(new_value, accepted, new_log_target)``.
    """
    y = transform.to_free(value)
    if current_log_target is None:
        current_log_target = log_target(value)
    y_new = y + adapt_state.step * rng.standard_normal()
    u = rng.random()
    x_new = transform.from_free(y_new)
    lt_new = log_target(x_new)
    log_ratio = (lt_new + transform.log_jacobian(y_new)) - (current_log_target + transform.log_jacobian(y))
    if math.isnan(log_ratio):
        log_ratio = -math.inf
    accept_prob = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
    accepted = math.log(u) < log_ratio if u > 0 else True
    adapt_state.adapt(accept_prob)
    adapt_state.n_updates += 1
    if accepted:
        adapt_state.n_accepted += 1
        return x_new, True, lt_new
    return value, False, current_log_target


# ---------------------------------------------------------------------------
# en-bloc draw of U for Model A2


def enbloc_conditional_parts(psi: ParamState, data, zfull):
    """Eigen-space description of the Gaussian full conditional of ``U``.

    With ``C_time ⊗ C_space = V diag(lam) V'`` the precision is
    ``V diag(1/s2e + 1/(s2w lam)) V'``. Returns ``(pair, V-factors, mean, sd)``
    where ``sd`` holds the conditional standard deviations in the eigenbasis.
    """
    data = prepare(data)
    pair = separable_corr_matrix(psi.separable_params(), data.H, data.T)
    wA, VA, wB, VB = pair.eig
    lam = np.outer(wA, wB).ravel()
    s2e, s2w = psi["sigma2_eps"], psi["sigma2_omega"]
    prec = 1.0 / s2e + 1.0 / (s2w * lam)
    mu = trend(psi, data).T.ravel()
    rhs = zfull / s2e
    # C^{-1} mu / s2w in the eigenbasis is (V' mu) / (s2w lam)
    b = pair.apply_factors(VA.T, VB.T, rhs) + pair.apply_factors(VA.T, VB.T, mu) / (s2w * lam)
    mean_eig = b / prec
    mean = pair.apply_factors(VA, VB, mean_eig)
    return pair, (VA, VB), mean, 1.0 / np.sqrt(prec)


def enbloc_update_u(psi: ParamState, data, rng, size=None) -> np.ndarray:
    """Joint draw of the A2 latent field, returned as a ``(d, T)`` grid.

    Missing observations are first imputed from ``N(U, s2e)`` at the
    current ``U``; the subsequent draw of ``U`` given the completed data
    leaves the conditional of ``U`` given the observed data invariant.
    """
    data = prepare(data)
    d, T = data.d, data.T
    zfull = data.zvec.copy()
    miss = ~data.obs_vec
    if miss.any():
        current = psi.latent.T.ravel()
        zfull[miss] = current[miss] + math.sqrt(psi["sigma2_eps"]) * rng.standard_normal(int(miss.sum()))
    pair, (VA, VB), mean, sd = enbloc_conditional_parts(psi, data, zfull)
    if size is None:
        xi = rng.standard_normal(d * T) * sd
        u = mean + pair.apply_factors(VA, VB, xi)
        return u.reshape(T, d).T
    xi = rng.standard_normal((size, d * T)) * sd
    u = mean[:, None] + pair.apply_factors(VA, VB, xi.T)
    return u.T.reshape(size, T, d).transpose(0, 2, 1)
