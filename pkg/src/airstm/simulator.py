"""Forward simulation from the six generative models and recovery runs.

Simulated observations are on the log scale (the scale the models are
written on). ``to_natural`` exponentiates them when concentration files are
wanted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .covariance import (
    DEFAULT_MAX_DENSE_DIM,
    nonseparable_corr_matrix,
    spatial_corr_matrix,
    temporal_corr_matrix,
)
from .dataset import INTERCEPT, Dataset, Site, spatial_distance_matrix, split_validation
from .errors import ConfigError, DomainError
from .gaussmath import chol_psd, split_stream
from .models import ModelKind, ParamState, PriorSpec, SCALAR_PARAMS

B_OMEGA_MODES = ("static", "daily")


@dataclass
class SimLayout:
    """Sites, days, covariates and the true parameters of one simulation.

    ``b_omega`` selects how Model B's spatial term evolves: ``"static"``
    draws one field shared by all days, ``"daily"`` draws a fresh field
    each day.
    """

    sites: list
    n_days: int
    X: np.ndarray
    covariate_names: list
    truth: ParamState
    missing_rate: float = 0.0
    b_omega: str = "static"
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        d = len(self.sites)
        if self.X.shape != (d, self.n_days, len(self.covariate_names)):
            raise ConfigError(f"covariate array shape {self.X.shape} does not match the layout")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if self.b_omega not in B_OMEGA_MODES:
            raise ConfigError(f"b_omega must be one of {B_OMEGA_MODES}")
        self.truth.validate(k=len(self.covariate_names), require_latent=False)

    @property
    def d(self) -> int:
        return len(self.sites)


def random_layout(truth: ParamState, d=10, T=50, rng=None, extent_km=(200.0, 200.0),
                  missing_rate=0.0, b_omega="static", prior=None) -> SimLayout:
    """Sites uniform on a rectangle; intercept plus standard-normal covariates."""
    k = truth.beta.size
    xy = rng.uniform(0.0, 1.0, size=(d, 2)) * np.asarray(extent_km)
    altitude = rng.uniform(0.0, 1000.0, size=d)
    sites = [Site(f"S{i + 1:03d}", float(x), float(y), float(a)) for i, ((x, y), a) in enumerate(zip(xy, altitude))]
    X = np.ones((d, T, k))
    X[:, :, 1:] = rng.standard_normal((d, T, k - 1))
    names = [INTERCEPT] + [f"x{j}" for j in range(1, k)]
    return SimLayout(sites, T, X, names, truth, missing_rate, b_omega, prior or PriorSpec())


def _spatial_chol(psi, H, theta_name="theta"):
    return chol_psd(spatial_corr_matrix(psi[theta_name], H)).L


def residual_process(kind, layout: SimLayout, rng, size=None, max_dense_dim=DEFAULT_MAX_DENSE_DIM):
    """Draw the latent departure ``u - X beta`` (and the dynamic state).

    Returns ``(W, state)`` with ``W`` of shape ``(size, d, T)`` (or
    ``(d, T)`` when ``size`` is None) and ``state`` the Model B/C latent
    path in the layout used by :class:`ParamState` (``None`` otherwise).
    """
    kind = ModelKind.parse(kind)
    psi = layout.truth
    n = 1 if size is None else size
    d, T = layout.d, layout.n_days
    H = spatial_distance_matrix(layout.sites)
    s2w = psi["sigma2_omega"]
    state = None
    if kind is ModelKind.A1:
        Ls = _spatial_chol(psi, H)
        W = math.sqrt(s2w) * np.einsum("ij,njt->nit", Ls, rng.standard_normal((n, d, T)))
    elif kind is ModelKind.A2:
        Ls = _spatial_chol(psi, H, "theta2")
        Lt = chol_psd(temporal_corr_matrix(psi["theta1"], T)).L
        xi = rng.standard_normal((n, d, T))
        # vec(Ls xi Lt') has covariance C_time ⊗ C_space in time-major order
        W = math.sqrt(s2w) * np.einsum("ij,njs,ts->nit", Ls, xi, Lt)
    elif kind in (ModelKind.A3_1, ModelKind.A3_2):
        C = nonseparable_corr_matrix(psi.gneiting_params(), H, T, max_dense_dim)
        L = chol_psd(C).L
        v = math.sqrt(s2w) * rng.standard_normal((n, d * T)) @ L.T
        W = v.reshape(n, T, d).transpose(0, 2, 1)
    elif kind is ModelKind.B:
        rho, s2eta = psi["rho"], psi["sigma2_eta"]
        Y = np.empty((n, T + 1))
        Y[:, 0] = math.sqrt(layout.prior.sigma2_B) * rng.standard_normal(n)
        eta = math.sqrt(s2eta) * rng.standard_normal((n, T))
        for t in range(1, T + 1):
            Y[:, t] = rho * Y[:, t - 1] + eta[:, t - 1]
        Ls = _spatial_chol(psi, H)
        if layout.b_omega == "static":
            omega = math.sqrt(s2w) * rng.standard_normal((n, d)) @ Ls.T
            W = Y[:, None, 1:] + omega[:, :, None]
        else:
            omega = math.sqrt(s2w) * np.einsum("ij,njt->nit", Ls, rng.standard_normal((n, d, T)))
            W = Y[:, None, 1:] + omega
        state = Y
    else:
        rho = psi["rho"]
        Ls = _spatial_chol(psi, H)
        Y = np.empty((n, d, T + 1))
        Y[:, :, 0] = math.sqrt(layout.prior.sigma2_C) * rng.standard_normal((n, d))
        innov = math.sqrt(s2w) * np.einsum("ij,njt->nit", Ls, rng.standard_normal((n, d, T)))
        for t in range(1, T + 1):
            Y[:, :, t] = rho * Y[:, :, t - 1] + innov[:, :, t - 1]
        W = Y[:, :, 1:]
        state = Y
    if size is None:
        return W[0], None if state is None else state[0]
    return W, state


def simulate(kind, layout: SimLayout, rng, return_latent=False, max_dense_dim=DEFAULT_MAX_DENSE_DIM):
    """Simulate a log-scale :class:`Dataset` from model ``kind``.

    With ``return_latent`` the latent state (``U`` grid for A2, ``Y`` for
    B and C, ``None`` otherwise) is returned alongside.
    """
    kind = ModelKind.parse(kind)
    if layout.truth.kind is not kind:
        raise DomainError(f"layout truth is a {layout.truth.kind.label} state, not {kind.label}")
    psi = layout.truth
    mean = layout.X @ psi.beta
    W, state = residual_process(kind, layout, rng, max_dense_dim=max_dense_dim)
    u = mean + W
    z = u + math.sqrt(psi["sigma2_eps"]) * rng.standard_normal(u.shape)
    if layout.missing_rate > 0:
        z[rng.random(z.shape) < layout.missing_rate] = np.nan
    ds = Dataset(list(layout.sites), list(layout.covariate_names), layout.X.copy(), z, scale="log")
    if not return_latent:
        return ds
    latent = u if kind is ModelKind.A2 else state
    return ds, latent


def to_natural(ds: Dataset) -> Dataset:
    if ds.scale != "log":
        raise DomainError("dataset is not on the log scale")
    return replace(ds, z=np.exp(ds.z), scale="natural")


def default_truth(kind, k=3) -> ParamState:
    """Representative parameter values inside every prior support."""
    kind = ModelKind.parse(kind)
    values = {
        "sigma2_eps": 0.05,
        "sigma2_omega": 0.2,
        "sigma2_eta": 0.1,
        "theta": 0.01,
        "theta1": 0.5,
        "theta2": 0.01,
        "a": 0.5,
        "alpha": 0.7,
        "b": 0.5,
        "c": 0.02,
        "gamma": 0.5,
        "nu": 1.0,
        "tau": 0.5,
        "rho": 0.8,
    }
    beta = np.array([3.9, 0.2, -0.1, 0.05, 0.1][:k] + [0.0] * max(0, k - 5))
    return ParamState(kind, beta, {n: values[n] for n in SCALAR_PARAMS[kind]})


# ---------------------------------------------------------------------------
# recovery


@dataclass
class RecoveryRow:
    parameter: str
    truth: float
    mean: float
    lo: float
    hi: float

    @property
    def covered(self) -> bool:
        return self.lo <= self.truth <= self.hi


@dataclass
class RecoveryReport:
    kind: ModelKind
    rows: list
    predictive_hits: int = 0
    predictive_total: int = 0

    @property
    def coverage(self) -> float:
        return sum(r.covered for r in self.rows) / len(self.rows)

    @property
    def predictive_coverage(self) -> float:
        return self.predictive_hits / self.predictive_total if self.predictive_total else float("nan")


def recovery_experiment(kind, layout: SimLayout, cfg, rng, prior=None, holdout: int = 0, level=0.95,
                        init_at_truth=False) -> RecoveryReport:
    """Simulate from ``kind``, fit the same model, compare with the truth.

    The last ``holdout`` sites of the layout are withheld from fitting and
    used to measure the coverage of level-``level`` predictive intervals.
    """
    from .inference import run_mcmc
    from .prediction import predict, summarize_predictions, targets_from_dataset

    kind = ModelKind.parse(kind)
    prior = prior or layout.prior
    sim_rng, mcmc_rng, pred_rng = split_stream(rng, 3)
    ds = simulate(kind, layout, sim_rng)
    held_ids = ds.site_ids[layout.d - holdout:] if holdout else []
    train, test = split_validation(ds, held_ids)
    init = None
    if init_at_truth:
        init = {"beta": layout.truth.beta, **layout.truth.scalars}
    chain = run_mcmc(kind, train, prior, cfg, mcmc_rng, init=init)
    alpha = (1.0 - level) / 2.0
    rows = []
    for name in chain.parameter_names():
        trace = chain.scalar_trace(name)
        if name.startswith("beta_"):
            true = float(layout.truth.beta[chain.covariate_names.index(name[5:])])
        else:
            true = float(layout.truth[name])
        lo, hi = np.quantile(trace, [alpha, 1.0 - alpha])
        rows.append(RecoveryRow(name, true, float(trace.mean()), float(lo), float(hi)))
    report = RecoveryReport(kind, rows)
    if holdout:
        targets = targets_from_dataset(test, observed_only=True)
        pd = predict(chain, train, targets, pred_rng, prior)
        summary = summarize_predictions(pd, level)
        obs = np.array([test.z[test.site_ids.index(t.site.id), t.day - 1] for t in targets])
        report.predictive_hits = int(np.sum((summary.lo_log <= obs) & (obs <= summary.hi_log)))
        report.predictive_total = len(targets)
    return report
