"""Metropolis-within-Gibbs driver, chain container and chain CSV files."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import AirstmError, ConfigError
from ..gaussmath import rng_stream, split_stream
from ..models import (
    GIBBS_PARAMS,
    MH_PARAMS,
    SCALAR_PARAMS,
    ModelKind,
    ParamState,
    PriorSpec,
    a2_latent_term,
    b_latent_term,
    b_obs_term,
    c_latent_term,
    latent_shape,
    log_prior,
    marginal_loglik,
    prepare,
)
from .ffbs import ffbs_model_b, ffbs_model_c
from .updates import (
    AdaptState,
    Transform,
    beta_update,
    enbloc_update_u,
    mh_update,
    variance_gibbs_update,
)

log = logging.getLogger(__name__)


@dataclass
class McmcConfig:
    n_iter: int = 2000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    n_chains: int = 1
    mh_target_accept: float = 0.44
    adapt_until: Optional[int] = None
    save_latent: bool = True

    def __post_init__(self):
        if self.n_iter < 1:
            raise ConfigError("n_iter must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise ConfigError(f"burn_in ({self.burn_in}) must be in [0, n_iter={self.n_iter})")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        if not 0 < self.mh_target_accept < 1:
            raise ConfigError("mh_target_accept must lie in (0, 1)")
        if self.adapt_until is not None and self.adapt_until > self.burn_in:
            # adapting after burn-in would break the invariant distribution
            raise ConfigError("adapt_until must not exceed burn_in")

    @property
    def adapt_bound(self) -> int:
        return self.burn_in if self.adapt_until is None else self.adapt_until

    @property
    def n_retained(self) -> int:
        return -(-(self.n_iter - self.burn_in) // self.thin)


@dataclass
class Chain:
    kind: ModelKind
    draws: list
    acceptance: dict = field(default_factory=dict)
    update_seconds: dict = field(default_factory=dict)
    sweep_seconds: float = 0.0
    n_iter: int = 0
    burn_in: int = 0
    covariate_names: tuple = ()

    @property
    def seconds_per_iter(self) -> float:
        """Mean wall-clock seconds per post-burn-in sweep."""
        n = self.n_iter - self.burn_in
        return self.sweep_seconds / n if n else float("nan")

    def __len__(self):
        return len(self.draws)

    def scalar_trace(self, name) -> np.ndarray:
        if name.startswith("beta_"):
            j = self.covariate_names.index(name[5:])
            return np.array([p.beta[j] for p in self.draws])
        return np.array([p[name] for p in self.draws])

    def parameter_names(self) -> list[str]:
        return [f"beta_{c}" for c in self.covariate_names] + list(SCALAR_PARAMS[self.kind])


# ---------------------------------------------------------------------------
# initial state


def initial_state(kind, data, prior: PriorSpec, init: Optional[dict] = None) -> ParamState:
    """Deterministic starting point from a pooled least-squares fit.

    ``init`` may override scalars, ``beta`` and ``latent``.
    """
    kind = ModelKind.parse(kind)
    data = prepare(data)
    init = dict(init or {})
    obs = data.observed
    Xo, zo = data.X[obs], data.z[obs]
    beta = np.linalg.lstsq(Xo, zo, rcond=None)[0]
    resid = data.z - data.X @ beta
    v = float(np.nanvar(resid)) if data.n_obs > 1 else 1.0
    v = max(v, 1e-6)
    offdiag = data.H[np.triu_indices(data.d, 1)]
    med = float(np.median(offdiag)) if offdiag.size else 1.0
    med = med if med > 0 else 1.0

    def inside(name, value):
        support = prior.support(name)
        if support is None:
            return value
        lo, hi = support
        return min(max(value, lo + 0.01 * (hi - lo)), hi - 0.01 * (hi - lo))

    guess = {
        "sigma2_eps": v / 3.0,
        "sigma2_omega": 2.0 * v / 3.0,
        "sigma2_eta": v / 3.0,
        "theta": math.log(2.0) / med,
        "theta1": 1.0,
        "theta2": math.log(2.0) / med,
        "a": 1.0,
        "c": 1.0 / med,
        "alpha": 0.5,
        "gamma": 0.5,
        "b": 0.5,
        "nu": 1.0,
        "tau": 0.5,
        "rho": 0.5,
    }
    if kind is ModelKind.B:
        guess["sigma2_omega"] = v / 3.0
    scalars = {n: inside(n, float(init.get(n, guess[n]))) for n in SCALAR_PARAMS[kind]}
    beta = np.asarray(init.get("beta", beta), dtype=float)
    latent = init.get("latent")
    if latent is None and latent_shape(kind, 1, 1) is not None:
        fitted = data.X @ beta
        if kind is ModelKind.A2:
            latent = np.where(obs, data.z, fitted)
        elif kind is ModelKind.B:
            daily = np.array([
                float(np.mean((data.z - fitted)[obs[:, t], t])) if obs[:, t].any() else 0.0
                for t in range(data.T)
            ])
            latent = np.concatenate([[0.0], daily])
        else:
            latent = np.zeros((data.d, data.T + 1))
            latent[:, 1:] = np.where(obs, data.z - fitted, 0.0)
    psi = ParamState(kind, beta, scalars, None if latent is None else np.array(latent, dtype=float))
    psi.validate(data.d, data.T, data.k)
    return psi


# ---------------------------------------------------------------------------
# sweep


class _Sampler:
    def __init__(self, kind, data, prior, cfg: McmcConfig):
        self.kind = kind
        self.data = data
        self.prior = prior
        self.cfg = cfg
        self.adapt = {
            name: AdaptState(target=cfg.mh_target_accept) for name in MH_PARAMS[kind]
        }
        self.transforms = {name: Transform(prior.support(name)) for name in MH_PARAMS[kind]}
        self.seconds = {}
        # consecutive MH parameters sharing one likelihood term reuse its value
        self.mh_groups = self._mh_groups()

    def _mh_groups(self):
        k = self.kind
        if k in (ModelKind.A1, ModelKind.A3_1, ModelKind.A3_2):
            return [(MH_PARAMS[k], lambda p: marginal_loglik(k, p, self.data))]
        if k is ModelKind.A2:
            return [(("theta1", "theta2"), lambda p: a2_latent_term(p, self.data))]
        if k is ModelKind.B:
            return [
                (("sigma2_eps", "sigma2_omega", "theta"), lambda p: b_obs_term(p, self.data)),
                (("rho",), lambda p: b_latent_term(p, self.data, self.prior)),
            ]
        return [(("theta", "rho"), lambda p: c_latent_term(p, self.data, self.prior))]

    def _timed(self, label, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        self.seconds[label] = self.seconds.get(label, 0.0) + time.perf_counter() - t0
        return out

    def _target(self, term, psi):
        lp = log_prior(self.kind, self.prior, psi)
        if lp == -math.inf:
            return lp
        try:
            return lp + term(psi)
        except AirstmError:
            # proposals with numerically singular covariances are rejected
            return -math.inf

    def sweep(self, psi: ParamState, rng, iteration: int) -> ParamState:
        kind, data, prior = self.kind, self.data, self.prior
        adapting = iteration < self.cfg.adapt_bound
        if kind is ModelKind.A2:
            psi.latent = self._timed("U", enbloc_update_u, psi, data, rng)
        elif kind is ModelKind.B:
            psi.latent = self._timed("Y", ffbs_model_b, psi, data, prior, rng)
        elif kind is ModelKind.C:
            psi.latent = self._timed("Y", ffbs_model_c, psi, data, prior, rng)
        psi.beta = self._timed("beta", beta_update, kind, psi, data, prior, rng)
        for name in GIBBS_PARAMS[kind]:
            value = self._timed(name, variance_gibbs_update, kind, name, psi, data, prior, rng)
            psi = psi.with_scalar(name, value)
        for names, term in self.mh_groups:
            current = None
            for name in names:
                t0 = time.perf_counter()
                state = self.adapt[name]
                state.adapting = adapting
                if current is None:
                    current = self._target(term, psi)
                base = psi

                def target(x, base=base, name=name):
                    return self._target(term, base.with_scalar(name, x))

                value, _, current = mh_update(psi[name], target, self.transforms[name], rng, state, current)
                psi = psi.with_scalar(name, value)
                self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0
        return psi


def run_mcmc(kind, ds, prior: PriorSpec, cfg: McmcConfig, rng=None, init=None, max_dense_dim=None) -> Chain:
    """Run one Metropolis-within-Gibbs chain.

    The chain is a pure function of ``(kind, ds, prior, cfg, rng state, init)``.
    """
    kind = ModelKind.parse(kind)
    data = prepare(ds) if max_dense_dim is None else prepare(ds, max_dense_dim)
    rng = rng_stream(cfg.seed) if rng is None else rng
    sampler = _Sampler(kind, data, prior, cfg)
    psi = initial_state(kind, data, prior, init)
    if kind in (ModelKind.A3_1, ModelKind.A3_2):
        data.dense_lags  # fail early on the dense-size budget
    draws = []
    post_seconds = 0.0
    for it in range(cfg.n_iter):
        t0 = time.perf_counter()
        try:
            psi = sampler.sweep(psi, rng, it)
        except AirstmError as exc:
            raise type(exc)(f"{kind.label} iteration {it}: {exc}") from exc
        elapsed = time.perf_counter() - t0
        if it >= cfg.burn_in:
            post_seconds += elapsed
            if (it - cfg.burn_in) % cfg.thin == 0:
                draws.append(psi.copy())
    return Chain(
        kind=kind,
        draws=draws,
        acceptance={n: s.acceptance_rate for n, s in sampler.adapt.items()},
        update_seconds=dict(sampler.seconds),
        sweep_seconds=post_seconds,
        n_iter=cfg.n_iter,
        burn_in=cfg.burn_in,
        covariate_names=tuple(data.ds.covariate_names),
    )


def _run_one(args):
    kind, ds, prior, cfg, rng, init = args
    return run_mcmc(kind, ds, prior, cfg, rng, init)


def run_chains(kind, ds, prior: PriorSpec, cfg: McmcConfig, init=None, workers: int = 1) -> list:
    """``cfg.n_chains`` chains on disjoint streams split from ``cfg.seed``."""
    streams = split_stream(rng_stream(cfg.seed), cfg.n_chains)
    jobs = [(kind, ds, prior, cfg, s, init) for s in streams]
    if workers > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


# ---------------------------------------------------------------------------
# CSV persistence


def latent_columns(kind, d, T) -> list[str]:
    kind = ModelKind.parse(kind)
    if kind is ModelKind.A2:
        return [f"u[{i},{t + 1}]" for t in range(T) for i in range(d)]
    if kind is ModelKind.B:
        return [f"y[{t}]" for t in range(T + 1)]
    if kind is ModelKind.C:
        return [f"y[{i},{t}]" for t in range(T + 1) for i in range(d)]
    return []


def _flat_latent(kind, latent):
    # A2 and C grids are written time-major, site-fastest
    return latent.ravel() if kind is ModelKind.B else latent.T.ravel()


def write_chain_csv(chain: Chain, path, include_latent=True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = chain.kind
    header = ["draw"] + chain.parameter_names()
    with_latent = include_latent and latent_shape(kind, 1, 1) is not None and chain.draws
    if with_latent:
        shape = chain.draws[0].latent.shape
        if kind is ModelKind.B:
            d, T = 0, shape[0] - 1
        else:
            d, T = shape[0], shape[1] - (kind is ModelKind.C)
        header += latent_columns(kind, d, T)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for n, p in enumerate(chain.draws):
            row = [n] + [repr(float(b)) for b in p.beta] + [repr(float(p[s])) for s in SCALAR_PARAMS[kind]]
            if with_latent:
                row += [repr(float(v)) for v in _flat_latent(kind, p.latent)]
            w.writerow(row)
    return path


def read_chain_csv(path, kind, covariate_names, d=None, T=None) -> Chain:
    """Rebuild retained draws from a chain CSV written by :func:`write_chain_csv`."""
    kind = ModelKind.parse(kind)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [list(map(float, r[1:])) for r in reader if r]
    k = len(covariate_names)
    names = SCALAR_PARAMS[kind]
    expected = [f"beta_{c}" for c in covariate_names] + list(names)
    if header[1 : 1 + len(expected)] != expected:
        raise ConfigError(f"{path}: columns do not match model {kind.label}")
    n_latent = len(header) - 1 - len(expected)
    shape = latent_shape(kind, d, T) if d is not None and T is not None else None
    draws = []
    for r in rows:
        latent = None
        if n_latent:
            flat = np.array(r[len(expected):])
            if kind is ModelKind.B:
                latent = flat
            elif shape is None:
                raise ConfigError("d and T are needed to rebuild latent grids")
            else:
                latent = flat.reshape(shape[1], shape[0]).T
        draws.append(ParamState(kind, np.array(r[:k]), dict(zip(names, r[k : k + len(names)])), latent))
    return Chain(kind=kind, draws=draws, covariate_names=tuple(covariate_names))
