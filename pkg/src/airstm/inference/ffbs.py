"""Forward-filtering backward-sampling for the dynamic latent states.

Model B carries a scalar AR(1) state shared by all sites, observed through
``d`` correlated sites; Model C carries a ``d``-dimensional AR(1) field with
transition ``rho * I`` observed with white noise. Both samplers draw their
standard normals in one block of shape ``(n, T + 1, dim)`` so that a
one-site Model C and the equivalent Model B consume the stream identically.
"""

from __future__ import annotations

import numpy as np

from ..covariance import spatial_corr_matrix
from ..errors import NumericalError
from ..gaussmath import chol_psd
from ..models import ParamState, PriorSpec, prepare, sigma_omega_eps, trend


def _b_information(psi: ParamState, data):
    """Per-day ``1' S^{-1} 1`` and ``1' S^{-1} r_t`` over observed sites."""
    S = sigma_omega_eps(psi, data)
    R = data.z - trend(psi, data)
    info = np.zeros(data.T)
    score = np.zeros(data.T)
    for mask, days in data.groups:
        L = chol_psd(S[np.ix_(mask, mask)])
        w1 = L.whiten(np.ones(int(mask.sum())))
        W = L.whiten(R[np.ix_(mask, days)])
        info[days] = w1 @ w1
        score[days] = w1 @ W
    return info, score


def filter_model_b(psi: ParamState, data, prior: PriorSpec):
    """Filtered means and variances of ``Y_0 .. Y_T``."""
    data = prepare(data)
    info, score = _b_information(psi, data)
    rho, s2eta = psi["rho"], psi["sigma2_eta"]
    T = data.T
    m = np.zeros(T + 1)
    P = np.zeros(T + 1)
    P[0] = prior.sigma2_B
    for t in range(1, T + 1):
        mp = rho * m[t - 1]
        Pp = rho * rho * P[t - 1] + s2eta
        if not Pp > 0:
            raise NumericalError(f"predicted state variance {Pp:g} at day {t}")
        P[t] = 1.0 / (1.0 / Pp + info[t - 1])
        m[t] = P[t] * (mp / Pp + score[t - 1])
    return m, P


def ffbs_model_b(psi: ParamState, data, prior: PriorSpec = None, rng=None, size=None) -> np.ndarray:
    """Joint draw of ``(Y_0, ..., Y_T)`` given the data and parameters."""
    prior = prior or PriorSpec()
    data = prepare(data)
    m, P = filter_model_b(psi, data, prior)
    rho, s2eta = psi["rho"], psi["sigma2_eta"]
    T = data.T
    n = 1 if size is None else size
    xi = rng.standard_normal((n, T + 1, 1))[:, :, 0]
    Y = np.empty((n, T + 1))
    Y[:, T] = m[T] + np.sqrt(P[T]) * xi[:, T]
    for t in range(T - 1, -1, -1):
        var = 1.0 / (1.0 / P[t] + rho * rho / s2eta)
        mean = var * (m[t] / P[t] + rho * Y[:, t + 1] / s2eta)
        Y[:, t] = mean + np.sqrt(var) * xi[:, t]
    return Y[0] if size is None else Y


def filter_model_c(psi: ParamState, data, prior: PriorSpec):
    """Filtered means/covariances and one-step predictions of the Model C field."""
    data = prepare(data)
    d, T = data.d, data.T
    rho, s2e = psi["rho"], psi["sigma2_eps"]
    Q = psi["sigma2_omega"] * spatial_corr_matrix(psi["theta"], data.H)
    R = data.z - trend(psi, data)
    m = np.zeros((T + 1, d))
    P = np.zeros((T + 1, d, d))
    mp = np.zeros((T + 1, d))
    Pp = np.zeros((T + 1, d, d))
    P[0] = prior.sigma2_C * np.eye(d)
    for t in range(1, T + 1):
        mp[t] = rho * m[t - 1]
        Pp[t] = rho * rho * P[t - 1] + Q
        o = data.observed[:, t - 1]
        if not o.any():
            m[t], P[t] = mp[t], Pp[t]
            continue
        S = Pp[t][np.ix_(o, o)] + s2e * np.eye(int(o.sum()))
        LS = chol_psd(0.5 * (S + S.T))
        G = LS.solve(Pp[t][o, :]).T  # Kalman gain, d x n_obs
        m[t] = mp[t] + G @ (R[o, t - 1] - mp[t][o])
        Pt = Pp[t] - G @ Pp[t][o, :]
        P[t] = 0.5 * (Pt + Pt.T)
    return m, P, mp, Pp


def ffbs_model_c(psi: ParamState, data, prior: PriorSpec = None, rng=None, size=None) -> np.ndarray:
    """Joint draw of the ``(d, T + 1)`` state path given data and parameters."""
    prior = prior or PriorSpec()
    data = prepare(data)
    d, T = data.d, data.T
    m, P, mp, Pp = filter_model_c(psi, data, prior)
    rho = psi["rho"]
    n = 1 if size is None else size
    xi = rng.standard_normal((n, T + 1, d))
    Y = np.empty((n, T + 1, d))
    Y[:, T] = m[T] + xi[:, T] @ _chol(P[T], T).L.T
    for t in range(T - 1, -1, -1):
        LPp = _chol(Pp[t + 1], t + 1)
        # J = rho P_t Pp_{t+1}^{-1}
        J = rho * LPp.solve(P[t]).T
        mean = m[t] + (Y[:, t + 1] - mp[t + 1]) @ J.T
        cov = P[t] - J @ Pp[t + 1] @ J.T
        Y[:, t] = mean + xi[:, t] @ _chol(0.5 * (cov + cov.T), t).L.T
    out = Y.transpose(0, 2, 1)
    return out[0] if size is None else out


def _chol(A, t):
    try:
        return chol_psd(A)
    except NumericalError as exc:
        raise NumericalError(f"FFBS covariance at step {t}: {exc}") from None
