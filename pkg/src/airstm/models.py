"""The six model definitions.

Each model is identified by a :class:`ModelKind`; its scalar parameters,
which of them are sampled by Metropolis-Hastings, priors, structural
metadata and log-likelihood kernels are defined here. Latent states are
stored as arrays:

* A2: ``U`` as a ``(d, T)`` grid (flatten with ``U.T.ravel()``),
* B: ``Y`` as a length ``T + 1`` vector ``(Y_0, ..., Y_T)``,
* C: ``Y`` as a ``(d, T + 1)`` array with column 0 the initial state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .covariance import (
    DEFAULT_MAX_DENSE_DIM,
    DynamicsParams,
    ExpSpatialParams,
    GneitingParams,
    SeparableParams,
    check_dense_budget,
    gneiting_corr,
    separable_corr_matrix,
    spatial_corr_matrix,
    temporal_lags,
)
from .dataset import Dataset, spatial_distance_matrix
from .errors import ContractError, DomainError
from .gaussmath import LOG_2PI, chol_psd, kron_logdet, kron_solve


class ModelKind(str, Enum):
    A1 = "A1"
    A2 = "A2"
    A3_1 = "A3_1"
    A3_2 = "A3_2"
    B = "B"
    C = "C"

    @classmethod
    def parse(cls, name) -> "ModelKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ContractError(f"unknown model {name!r}; expected one of A1, A2, A3-1, A3-2, B, C") from None

    @property
    def label(self) -> str:
        return self.value.replace("_", "-")


ALL_MODELS = tuple(ModelKind)

SCALAR_PARAMS = {
    ModelKind.A1: ("sigma2_eps", "sigma2_omega", "theta"),
    ModelKind.A2: ("sigma2_eps", "sigma2_omega", "theta1", "theta2"),
    ModelKind.A3_1: ("sigma2_eps", "sigma2_omega", "a", "alpha", "b", "c", "gamma"),
    ModelKind.A3_2: ("sigma2_eps", "sigma2_omega", "a", "alpha", "c", "gamma", "nu", "tau"),
    ModelKind.B: ("sigma2_eps", "sigma2_omega", "sigma2_eta", "theta", "rho"),
    ModelKind.C: ("sigma2_eps", "sigma2_omega", "theta", "rho"),
}

GIBBS_PARAMS = {
    ModelKind.A1: (),
    ModelKind.A2: ("sigma2_omega", "sigma2_eps"),
    ModelKind.A3_1: (),
    ModelKind.A3_2: (),
    ModelKind.B: ("sigma2_eta",),
    ModelKind.C: ("sigma2_omega", "sigma2_eps"),
}

MH_PARAMS = {
    kind: tuple(p for p in SCALAR_PARAMS[kind] if p not in GIBBS_PARAMS[kind]) for kind in ModelKind
}

VARIANCES = ("sigma2_eps", "sigma2_omega", "sigma2_eta")


@dataclass(frozen=True)
class ModelMeta:
    n_params_excl_beta: int
    n_mh_params: int
    biggest_matrix: str
    needs_ffbs: bool
    needs_enbloc: bool


_BIGGEST = {
    ModelKind.A1: "d x d",
    ModelKind.A2: "T x T",
    ModelKind.A3_1: "dT x dT",
    ModelKind.A3_2: "dT x dT",
    ModelKind.B: "d x d",
    ModelKind.C: "d x d",
}


def model_meta(kind) -> ModelMeta:
    kind = ModelKind.parse(kind)
    return ModelMeta(
        n_params_excl_beta=len(SCALAR_PARAMS[kind]),
        n_mh_params=len(MH_PARAMS[kind]),
        biggest_matrix=_BIGGEST[kind],
        needs_ffbs=kind in (ModelKind.B, ModelKind.C),
        needs_enbloc=kind is ModelKind.A2,
    )


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorSpec:
    beta_var: float = 100.0
    ig_shape: float = 2.0
    ig_scale: float = 1.0
    theta_range: tuple = (0.0, 1.0)
    theta1_range: tuple = (0.3, 3.0)
    theta2_range: tuple = (0.0, 1.0)
    gneiting_unit_range: tuple = (0.0, 1.0)
    gneiting_scale_range: tuple = (0.0, 10.0)
    rho_range: tuple = (-1.0, 1.0)
    sigma2_B: float = 1.0
    sigma2_C: float = 1.0

    def __post_init__(self):
        for name in ("beta_var", "ig_shape", "ig_scale", "sigma2_B", "sigma2_C"):
            if not getattr(self, name) > 0:
                raise DomainError(f"prior {name} must be positive")
        for name in ("theta_range", "theta1_range", "theta2_range", "gneiting_unit_range",
                     "gneiting_scale_range", "rho_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise DomainError(f"prior {name} must have lo < hi")

    def support(self, name) -> Optional[tuple]:
        """Uniform support of a scalar parameter, or ``None`` for variances."""
        if name in VARIANCES:
            return None
        if name == "theta":
            return tuple(self.theta_range)
        if name == "theta1":
            return tuple(self.theta1_range)
        if name == "theta2":
            return tuple(self.theta2_range)
        if name in ("alpha", "b", "gamma", "tau"):
            return tuple(self.gneiting_unit_range)
        if name in ("a", "c", "nu"):
            return tuple(self.gneiting_scale_range)
        if name == "rho":
            return tuple(self.rho_range)
        raise ContractError(f"no prior for parameter {name!r}")

    def log_density(self, name, value) -> float:
        support = self.support(name)
        if support is None:
            if not value > 0:
                return -math.inf
            a, b = self.ig_shape, self.ig_scale
            return a * math.log(b) - gammaln(a) - (a + 1.0) * math.log(value) - b / value
        lo, hi = support
        if lo < value < hi:
            return -math.log(hi - lo)
        return -math.inf

    def log_beta(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        return float(-0.5 * (beta.size * (LOG_2PI + math.log(self.beta_var)) + beta @ beta / self.beta_var))


# ---------------------------------------------------------------------------
# parameter state


@dataclass
class ParamState:
    """One full parameter assignment for a model.

    ``scalars`` maps each name in ``SCALAR_PARAMS[kind]`` to its value.
    """

    kind: ModelKind
    beta: np.ndarray
    scalars: dict
    latent: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind)
        self.beta = np.asarray(self.beta, dtype=float)

    def __getitem__(self, name) -> float:
        return self.scalars[name]

    def with_scalar(self, name, value) -> "ParamState":
        return replace(self, scalars={**self.scalars, name: float(value)})

    def copy(self) -> "ParamState":
        return ParamState(
            self.kind,
            self.beta.copy(),
            dict(self.scalars),
            None if self.latent is None else self.latent.copy(),
        )

    def exp_params(self) -> ExpSpatialParams:
        return ExpSpatialParams(self["theta"], self["sigma2_omega"])

    def separable_params(self) -> SeparableParams:
        return SeparableParams(self["theta1"], self["theta2"], self["sigma2_omega"])

    def gneiting_params(self) -> GneitingParams:
        s = self.scalars
        if self.kind is ModelKind.A3_1:
            return GneitingParams("A3_1", s["a"], s["c"], s["alpha"], s["gamma"], b=s["b"],
                                  sigma2_omega=s["sigma2_omega"])
        return GneitingParams("A3_2", s["a"], s["c"], s["alpha"], s["gamma"], nu=s["nu"],
                              tau=s["tau"], sigma2_omega=s["sigma2_omega"])

    def dynamics(self) -> DynamicsParams:
        return DynamicsParams(self["rho"], self.scalars.get("sigma2_eta"))

    def validate(self, d=None, T=None, k=None, require_latent=True) -> None:
        names = SCALAR_PARAMS[self.kind]
        if set(self.scalars) != set(names):
            raise DomainError(f"{self.kind.label} needs parameters {names}, got {tuple(self.scalars)}")
        for v in VARIANCES:
            if v in self.scalars and not self.scalars[v] > 0:
                raise DomainError(f"{v} must be positive")
        if self.kind in (ModelKind.A1, ModelKind.B, ModelKind.C):
            self.exp_params()
        elif self.kind is ModelKind.A2:
            self.separable_params()
        else:
            self.gneiting_params()
        if self.kind in (ModelKind.B, ModelKind.C):
            self.dynamics()
        if k is not None and self.beta.shape != (k,):
            raise DomainError(f"beta must have length {k}")
        shape = latent_shape(self.kind, d, T) if d is not None and T is not None else None
        if latent_shape(self.kind, 1, 1) is None:
            if self.latent is not None:
                raise DomainError(f"{self.kind.label} carries no latent state")
        elif self.latent is None:
            if not require_latent:
                return
            raise DomainError(f"{self.kind.label} needs a latent state")
        elif shape is not None and self.latent.shape != shape:
            raise DomainError(f"latent shape {self.latent.shape} != {shape}")


def latent_shape(kind, d, T):
    kind = ModelKind.parse(kind)
    if kind is ModelKind.A2:
        return (d, T)
    if kind is ModelKind.B:
        return (T + 1,)
    if kind is ModelKind.C:
        return (d, T + 1)
    return None


# ---------------------------------------------------------------------------
# prepared data


class PreparedData:
    """Dataset plus the derived arrays every kernel reuses.

    Observed cells are grouped by their per-day missingness pattern so that
    day-blocked likelihoods factorize one sub-covariance per pattern.
    """

    def __init__(self, ds: Dataset, max_dense_dim=DEFAULT_MAX_DENSE_DIM):
        self.ds = ds
        self.d, self.T, self.k = ds.d, ds.n_days, ds.k
        self.H = spatial_distance_matrix(ds.sites)
        self.X = ds.X
        self.z = ds.z
        self.observed = ds.observed
        self.n_obs = int(self.observed.sum())
        self.max_dense_dim = max_dense_dim
        self.zfill = np.where(self.observed, self.z, 0.0)
        patterns = {}
        for t in range(self.T):
            key = self.observed[:, t].tobytes()
            patterns.setdefault(key, []).append(t)
        self.groups = []
        for days in patterns.values():
            mask = self.observed[:, days[0]]
            if mask.any():
                self.groups.append((mask, np.array(days)))
        # stacked (time-major, site-fastest) views
        self.zvec = self.z.T.ravel()
        self.obs_vec = self.observed.T.ravel()
        self.Xvec = self.X.transpose(1, 0, 2).reshape(self.T * self.d, self.k)

    @cached_property
    def dense_lags(self):
        check_dense_budget(self.d * self.T, self.max_dense_dim)
        Hbig = np.tile(self.H, (self.T, self.T))
        Lbig = np.kron(temporal_lags(self.T), np.ones((self.d, self.d)))
        return Hbig, Lbig


def prepare(data, max_dense_dim=DEFAULT_MAX_DENSE_DIM) -> PreparedData:
    if isinstance(data, PreparedData):
        return data
    return PreparedData(data, max_dense_dim)


def trend(psi: ParamState, data: PreparedData) -> np.ndarray:
    """``X beta`` as a ``(d, T)`` grid."""
    return data.X @ psi.beta


def sigma_omega_eps(psi: ParamState, data: PreparedData) -> np.ndarray:
    """``sigma2_omega * C_theta(h) + sigma2_eps * I_d``."""
    C = spatial_corr_matrix(psi["theta"], data.H)
    return psi["sigma2_omega"] * C + psi["sigma2_eps"] * np.eye(data.d)


def nonseparable_cov(psi: ParamState, data: PreparedData) -> np.ndarray:
    """Dense ``sigma2_omega * C(h, l) + sigma2_eps * I_dT`` over all cells."""
    Hbig, Lbig = data.dense_lags
    C = gneiting_corr(psi.gneiting_params(), Hbig, Lbig)
    C = np.atleast_2d(C)
    S = psi["sigma2_omega"] * C
    S[np.diag_indices_from(S)] = psi["sigma2_omega"] + psi["sigma2_eps"]
    return 0.5 * (S + S.T)


def blocked_gaussian_loglik(S: np.ndarray, R: np.ndarray, data: PreparedData) -> float:
    """Sum over days of ``log N(R_t; 0, S)`` restricted to observed sites.

    ``R`` is a ``(d, T)`` residual grid; missing entries are ignored.
    """
    total = 0.0
    for mask, days in data.groups:
        L = chol_psd(S[np.ix_(mask, mask)])
        W = L.whiten(R[np.ix_(mask, days)])
        n = int(mask.sum())
        total -= 0.5 * (len(days) * (n * LOG_2PI + L.logdet()) + float(np.sum(W * W)))
    return total


def iid_gaussian_loglik(var: float, R: np.ndarray, data: PreparedData) -> float:
    r = R[data.observed]
    return float(-0.5 * (r.size * (LOG_2PI + math.log(var)) + r @ r / var))


def _ar1_terms(Y, rho, var0, cov_innov=None, var_innov=None):
    """``log N(Y_0; 0, var0 I) + sum_t log N(Y_t; rho Y_{t-1}, innov)``.

    ``Y`` has time on the last axis; a 1-D ``Y`` is a scalar path.
    """
    Y = np.atleast_2d(Y)
    dim = Y.shape[0]
    Y0 = Y[:, 0]
    out = -0.5 * (dim * (LOG_2PI + math.log(var0)) + float(Y0 @ Y0) / var0)
    E = Y[:, 1:] - rho * Y[:, :-1]
    T = E.shape[1]
    if cov_innov is None:
        out -= 0.5 * (dim * T * (LOG_2PI + math.log(var_innov)) + float(np.sum(E * E)) / var_innov)
    else:
        L = chol_psd(cov_innov)
        W = L.whiten(E)
        out -= 0.5 * (T * (dim * LOG_2PI + L.logdet()) + float(np.sum(W * W)))
    return out


# ---------------------------------------------------------------------------
# likelihood kernels


def marginal_loglik(kind, psi: ParamState, data) -> float:
    """Gaussian log-likelihood with the residual process integrated out (A1, A3)."""
    kind = ModelKind.parse(kind)
    data = prepare(data)
    R = data.z - trend(psi, data)
    if kind is ModelKind.A1:
        return blocked_gaussian_loglik(sigma_omega_eps(psi, data), R, data)
    if kind in (ModelKind.A3_1, ModelKind.A3_2):
        S = nonseparable_cov(psi, data)
        obs = data.obs_vec
        L = chol_psd(S[np.ix_(obs, obs)])
        r = R.T.ravel()[obs]
        w = L.whiten(r)
        return -0.5 * (r.size * LOG_2PI + L.logdet() + float(w @ w))
    raise ContractError(f"marginal likelihood is not defined for {kind.label}")


def a2_obs_term(psi, data) -> float:
    return iid_gaussian_loglik(psi["sigma2_eps"], data.z - psi.latent, data)


def a2_latent_term(psi, data, pair=None) -> float:
    """``log N(U; X beta, sigma2_omega * C_time ⊗ C_space)``."""
    if pair is None:
        pair = separable_corr_matrix(psi.separable_params(), data.H, data.T)
    r = (psi.latent - trend(psi, data)).T.ravel()
    n = r.size
    s2w = psi["sigma2_omega"]
    quad = float(r @ kron_solve(pair, r))
    return -0.5 * (n * (LOG_2PI + math.log(s2w)) + kron_logdet(pair) + quad / s2w)


def b_obs_term(psi, data) -> float:
    Y = psi.latent
    R = data.z - trend(psi, data) - Y[None, 1:]
    return blocked_gaussian_loglik(sigma_omega_eps(psi, data), R, data)


def b_latent_term(psi, data, prior: PriorSpec) -> float:
    return _ar1_terms(psi.latent, psi["rho"], prior.sigma2_B, var_innov=psi["sigma2_eta"])


def c_obs_term(psi, data) -> float:
    R = data.z - trend(psi, data) - psi.latent[:, 1:]
    return iid_gaussian_loglik(psi["sigma2_eps"], R, data)


def c_latent_term(psi, data, prior: PriorSpec) -> float:
    Q = psi["sigma2_omega"] * spatial_corr_matrix(psi["theta"], data.H)
    return _ar1_terms(psi.latent, psi["rho"], prior.sigma2_C, cov_innov=Q)


def conditional_loglik(kind, psi: ParamState, data, prior: PriorSpec = None) -> float:
    """Joint log-density of the data and the latent state given parameters (A2, B, C)."""
    kind = ModelKind.parse(kind)
    data = prepare(data)
    prior = prior or PriorSpec()
    shape = latent_shape(kind, data.d, data.T)
    if shape is None:
        raise ContractError(f"conditional likelihood is not defined for {kind.label}")
    if psi.latent is None or psi.latent.shape != shape:
        raise DomainError(f"{kind.label} latent must have shape {shape}")
    if kind is ModelKind.A2:
        return a2_obs_term(psi, data) + a2_latent_term(psi, data)
    if kind is ModelKind.B:
        return b_obs_term(psi, data) + b_latent_term(psi, data, prior)
    return c_obs_term(psi, data) + c_latent_term(psi, data, prior)


def log_prior(kind, prior: PriorSpec, psi: ParamState) -> float:
    kind = ModelKind.parse(kind)
    total = prior.log_beta(psi.beta)
    for name in SCALAR_PARAMS[kind]:
        total += prior.log_density(name, psi[name])
        if total == -math.inf:
            return total
    return total


def log_posterior(kind, prior: PriorSpec, psi: ParamState, data) -> float:
    """Unnormalized log posterior (marginal for A1/A3, joint with latent otherwise)."""
    kind = ModelKind.parse(kind)
    lp = log_prior(kind, prior, psi)
    if lp == -math.inf:
        return lp
    if latent_shape(kind, 1, 1) is None:
        return lp + marginal_loglik(kind, psi, data)
    return lp + conditional_loglik(kind, psi, data, prior)
