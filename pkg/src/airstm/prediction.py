"""Posterior predictive sampling at unmonitored sites by composition.

For every retained draw of the chain the predictive conditional of
``z(s0, t0)`` is evaluated and one value is sampled from it. The
per-draw conditional moments are exposed separately
(:func:`conditional_moments`) so they can be checked against dense joint
Gaussian conditioning.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import exp_corr, gneiting_corr, separable_corr_matrix, spatial_corr_matrix
from .dataset import Dataset, Site, distances_to
from .errors import ConfigError, DomainError, NumericalError
from .gaussmath import chol_psd, kron_solve, mvn_condition
from .models import (
    ModelKind,
    ParamState,
    PriorSpec,
    nonseparable_cov,
    prepare,
    sigma_omega_eps,
    trend,
)

MIN_SUMMARY_DRAWS = 100


@dataclass(frozen=True)
class PredictionTarget:
    site: Site
    day: int
    covariates: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float))
        if self.day < 1:
            raise DomainError(f"target day must be >= 1, got {self.day}")


def targets_from_dataset(ds: Dataset, observed_only=False) -> list:
    """One target per (site, day) of ``ds``, in site-major order."""
    out = []
    obs = ds.observed
    for i, site in enumerate(ds.sites):
        for t in range(ds.n_days):
            if observed_only and not obs[i, t]:
                continue
            out.append(PredictionTarget(site, t + 1, ds.X[i, t]))
    return out


def _check_targets(targets, data):
    for tg in targets:
        if not 1 <= tg.day <= data.T:
            raise DomainError(f"target day {tg.day} outside the training window 1..{data.T}")
        if tg.covariates.shape != (data.k,):
            raise DomainError(f"target covariates must have length {data.k}")


def _site_groups(targets):
    """Unique target sites and, per target, the index of its site."""
    index, sites, which = {}, [], []
    for tg in targets:
        key = (tg.site.x_km, tg.site.y_km)
        if key not in index:
            index[key] = len(sites)
            sites.append(tg.site)
        which.append(index[key])
    return sites, np.array(which, dtype=int)


def _target_distances(sites, data):
    """``(n_sites, d)`` distances from each target site to the monitored sites."""
    return np.array([distances_to(data.ds.sites, s.x_km, s.y_km) for s in sites]).reshape(len(sites), data.d)


# ---------------------------------------------------------------------------
# per-draw conditional moments of z(s0, t0)


def _day_block_moments(psi, data, targets, shift=None):
    """A1/B: condition on the day-``t0`` block only.

    ``shift`` is the common latent level ``y(t)`` added to both means (Model B).
    """
    S = sigma_omega_eps(psi, data)
    s2w, s2e, theta = psi["sigma2_omega"], psi["sigma2_eps"], psi["theta"]
    sites, which = _site_groups(targets)
    K = s2w * exp_corr(theta, _target_distances(sites, data))
    mu = trend(psi, data)
    means = np.empty(len(targets))
    vars_ = np.empty(len(targets))
    factors = {}
    for n, tg in enumerate(targets):
        t = tg.day - 1
        obs = data.observed[:, t]
        key = obs.tobytes()
        if key not in factors:
            factors[key] = chol_psd(S[np.ix_(obs, obs)])
        level = 0.0 if shift is None else float(shift[t + 1])
        means[n], vars_[n] = mvn_condition(
            mu[obs, t] + level,
            float(tg.covariates @ psi.beta) + level,
            factors[key],
            K[which[n], obs],
            s2w + s2e,
            data.z[obs, t],
        )
    return means, vars_


def _a2_moments(psi, data, targets):
    """Two-stage A2 predictor: ``u(s0, t0) | U`` then add measurement noise."""
    pair = separable_corr_matrix(psi.separable_params(), data.H, data.T)
    s2w, s2e = psi["sigma2_omega"], psi["sigma2_eps"]
    sites, which = _site_groups(targets)
    Ks = exp_corr(psi["theta2"], _target_distances(sites, data))
    Ct = pair.A
    resid = (psi.latent - trend(psi, data)).T.ravel()
    w = kron_solve(pair, resid)
    means = np.empty(len(targets))
    vars_ = np.empty(len(targets))
    for n, tg in enumerate(targets):
        # Sigma12 / s2w = C_time(|t - t0|) ⊗ C_space(h0)
        c12 = np.kron(Ct[:, tg.day - 1], Ks[which[n]])
        means[n] = float(tg.covariates @ psi.beta) + float(c12 @ w)
        v = s2w * (1.0 - float(c12 @ kron_solve(pair, c12)))
        if v < 0:
            if v < -1e-10 * s2w:
                raise NumericalError(f"negative A2 predictive variance {v:g}")
            v = 0.0
        vars_[n] = v + s2e
    return means, vars_


def _a3_moments(psi, data, targets):
    S = nonseparable_cov(psi, data)
    obs = data.obs_vec
    L = chol_psd(S[np.ix_(obs, obs)])
    s2w, s2e = psi["sigma2_omega"], psi["sigma2_eps"]
    gp = psi.gneiting_params()
    sites, which = _site_groups(targets)
    D = _target_distances(sites, data)
    mu1 = data.Xvec[obs] @ psi.beta
    zo = data.zvec[obs]
    days = np.repeat(np.arange(1, data.T + 1), data.d)
    means = np.empty(len(targets))
    vars_ = np.empty(len(targets))
    for n, tg in enumerate(targets):
        h = np.tile(D[which[n]], data.T)
        lag = np.abs(days - tg.day).astype(float)
        S12 = s2w * np.atleast_1d(gneiting_corr(gp, h, lag))[obs]
        means[n], vars_[n] = mvn_condition(mu1, float(tg.covariates @ psi.beta), L, S12, s2w + s2e, zo)
    return means, vars_


def _c_innovation_terms(psi, data, sites):
    """One-step conditional of ``omega(s0, t)`` given the innovation field.

    Returns the ``(n_sites, d)`` weights ``Sigma12' Sigma_omega^{-1}`` and the
    ``(n_sites,)`` conditional variances.
    """
    s2w = psi["sigma2_omega"]
    L = chol_psd(s2w * spatial_corr_matrix(psi["theta"], data.H))
    K = s2w * exp_corr(psi["theta"], _target_distances(sites, data))
    Wt = L.whiten(K.T)  # (d, n_sites)
    weights = L.solve(K.T).T
    v = s2w - np.sum(Wt * Wt, axis=0)
    if np.any(v < -1e-10 * s2w):
        raise NumericalError("negative Model C innovation variance")
    return weights, np.maximum(v, 0.0)


def _c_moments(psi, data, targets, prior: PriorSpec):
    """Closed-form mean and variance of the Model C forward recursion."""
    rho, s2e = psi["rho"], psi["sigma2_eps"]
    sites, which = _site_groups(targets)
    weights, v = _c_innovation_terms(psi, data, sites)
    Y = psi.latent
    E = Y[:, 1:] - rho * Y[:, :-1]  # (d, T) innovations
    M = weights @ E  # (n_sites, T) conditional innovation means
    means = np.empty(len(targets))
    vars_ = np.empty(len(targets))
    for n, tg in enumerate(targets):
        t0 = tg.day
        powers = rho ** np.arange(t0 - 1, -1, -1)  # rho^(t0 - t), t = 1..t0
        m = float(powers @ M[which[n], :t0])
        var_y = rho ** (2 * t0) * prior.sigma2_C + v[which[n]] * float(powers @ powers)
        means[n] = float(tg.covariates @ psi.beta) + m
        vars_[n] = var_y + s2e
    return means, vars_


def conditional_moments(psi: ParamState, data, targets, prior: PriorSpec = None):
    """Predictive mean and variance of ``z(s0, t0)`` given one parameter draw.

    For Model C the moments are those of the full forward recursion from
    ``y(s0, 0) ~ N(0, sigma2_C)`` (the recursion is linear and Gaussian).
    """
    prior = prior or PriorSpec()
    data = prepare(data)
    _check_targets(targets, data)
    kind = psi.kind
    if kind is ModelKind.A1:
        return _day_block_moments(psi, data, targets)
    if kind is ModelKind.B:
        return _day_block_moments(psi, data, targets, shift=psi.latent)
    if kind is ModelKind.A2:
        return _a2_moments(psi, data, targets)
    if kind is ModelKind.C:
        return _c_moments(psi, data, targets, prior)
    return _a3_moments(psi, data, targets)


def c_one_step(psi: ParamState, data, site: Site, t: int, y_prev: float):
    """Mean and variance of ``y(s0, t) | Y, y(s0, t - 1)`` for Model C."""
    data = prepare(data)
    weights, v = _c_innovation_terms(psi, data, [site])
    Y = psi.latent
    e = Y[:, t] - psi["rho"] * Y[:, t - 1]
    return psi["rho"] * y_prev + float(weights[0] @ e), float(v[0])


# ---------------------------------------------------------------------------
# composition sampling


@dataclass
class PredictiveDraws:
    """Log-scale predictive draws, one row per target and one column per chain draw."""

    targets: list
    draws: np.ndarray
    seconds: float = 0.0

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def seconds_per_draw(self) -> float:
        return self.seconds / self.n_draws if self.n_draws else float("nan")


def _sample_c(psi, data, targets, prior, rng):
    """Forward recursion of ``y(s0, .)`` per target site, then measurement noise."""
    rho = psi["rho"]
    sites, which = _site_groups(targets)
    weights, v = _c_innovation_terms(psi, data, sites)
    Y = psi.latent
    E = Y[:, 1:] - rho * Y[:, :-1]
    M = weights @ E
    T = max(tg.day for tg in targets)
    y = np.empty((len(sites), T + 1))
    y[:, 0] = math.sqrt(prior.sigma2_C) * rng.standard_normal(len(sites))
    xi = rng.standard_normal((len(sites), T))
    sd = np.sqrt(v)
    for t in range(1, T + 1):
        y[:, t] = rho * y[:, t - 1] + M[:, t - 1] + sd * xi[:, t - 1]
    level = np.array([float(tg.covariates @ psi.beta) + y[which[n], tg.day] for n, tg in enumerate(targets)])
    return level + math.sqrt(psi["sigma2_eps"]) * rng.standard_normal(len(targets))


def predict(chain, ds, targets, rng, prior: PriorSpec = None) -> PredictiveDraws:
    """One predictive draw per retained chain draw and target."""
    prior = prior or PriorSpec()
    data = prepare(ds)
    _check_targets(targets, data)
    if not targets:
        raise ConfigError("no prediction targets")
    out = np.empty((len(targets), len(chain.draws)))
    t0 = time.perf_counter()
    for j, psi in enumerate(chain.draws):
        if psi.kind is ModelKind.C:
            out[:, j] = _sample_c(psi, data, targets, prior, rng)
            continue
        mean, var = conditional_moments(psi, data, targets, prior)
        out[:, j] = mean + np.sqrt(var) * rng.standard_normal(len(targets))
    return PredictiveDraws(list(targets), out, time.perf_counter() - t0)


def _predict_kind(expected):
    def run(chain, ds, targets, rng, prior=None):
        kinds = expected if isinstance(expected, tuple) else (expected,)
        if chain.kind not in kinds:
            raise ConfigError(f"chain is {chain.kind.label}; this predictor needs {'/'.join(k.label for k in kinds)}")
        return predict(chain, ds, targets, rng, prior)

    return run


predict_a1 = _predict_kind(ModelKind.A1)
predict_a2 = _predict_kind(ModelKind.A2)
predict_a3 = _predict_kind((ModelKind.A3_1, ModelKind.A3_2))
predict_b = _predict_kind(ModelKind.B)
predict_c = _predict_kind(ModelKind.C)


# ---------------------------------------------------------------------------
# summaries


@dataclass
class PredictionSummary:
    targets: list
    level: float
    mean_log: np.ndarray
    median_log: np.ndarray
    lo_log: np.ndarray
    hi_log: np.ndarray
    mean_conc: np.ndarray
    median_conc: np.ndarray
    lo_conc: np.ndarray
    hi_conc: np.ndarray

    def point(self, scale="concentration") -> np.ndarray:
        return self.mean_conc if scale == "concentration" else self.mean_log

    def interval(self, scale="concentration"):
        if scale == "concentration":
            return self.lo_conc, self.hi_conc
        return self.lo_log, self.hi_log


def _summ(x, level):
    q = (1.0 - level) / 2.0
    lo, med, hi = np.quantile(x, [q, 0.5, 1.0 - q], axis=1)
    return x.mean(axis=1), med, lo, hi


def summarize_predictions(pd: PredictiveDraws, level=0.95) -> PredictionSummary:
    """Mean, median and equal-tailed interval on the log and concentration scales."""
    if pd.n_draws < MIN_SUMMARY_DRAWS:
        raise ConfigError(f"need at least {MIN_SUMMARY_DRAWS} predictive draws, got {pd.n_draws}")
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    log_stats = _summ(pd.draws, level)
    conc_stats = _summ(np.exp(pd.draws), level)
    return PredictionSummary(pd.targets, level, *log_stats, *conc_stats)


def write_predictions_csv(summary: PredictionSummary, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "day", "draw_mean", "draw_median", "lo", "hi", "scale"])
        for scale, arrays in (
            ("log", (summary.mean_log, summary.median_log, summary.lo_log, summary.hi_log)),
            ("concentration", (summary.mean_conc, summary.median_conc, summary.lo_conc, summary.hi_conc)),
        ):
            for n, tg in enumerate(summary.targets):
                w.writerow([tg.site.id, tg.day] + [repr(float(a[n])) for a in arrays] + [scale])
    return path
