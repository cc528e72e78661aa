import math

import numpy as np
import pytest

from airstm.dataset import Dataset, Site
from airstm.errors import ConfigError, ContractError
from airstm.gaussmath import rng_stream
from airstm.inference import (
    AdaptState,
    McmcConfig,
    Transform,
    autocorrelation,
    beta_conditional,
    diagnostics,
    effective_sample_size,
    enbloc_conditional_parts,
    enbloc_update_u,
    ffbs_model_b,
    ffbs_model_c,
    mh_update,
    read_chain_csv,
    run_mcmc,
    variance_conditional,
    write_chain_csv,
    write_diagnostics,
)
from airstm.models import ModelKind, ParamState, PriorSpec

from oracles import (
    a1_cell_cov,
    a2_cell_cov,
    a3_cell_cov,
    ar1_cov,
    beta_posterior,
    cells,
    dense_cov,
    dist,
    field_ar1_cov,
    gaussian_condition,
    toy_dataset,
)
from test_models import psi_for

PRIOR = PriorSpec()
MISSING = ((0, 1), (2, 3), (1, 0))


def observed_cells(ds):
    return [(p, c) for p, c in enumerate(cells(ds)) if not np.isnan(ds.z[c])]


def dense_beta_check(kind, ds, psi, Sigma, r_of_cell):
    obs = observed_cells(ds)
    idx = [p for p, _ in obs]
    Xo = np.array([ds.X[c] for _, c in obs])
    r = np.array([r_of_cell(c) for _, c in obs])
    mean, cov = beta_posterior(Xo, Sigma[np.ix_(idx, idx)], r, PRIOR.beta_var)
    got_mean, got_cov = beta_conditional(kind, psi, ds, PRIOR)
    np.testing.assert_allclose(got_mean, mean, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(got_cov, cov, rtol=1e-9, atol=1e-14)


def test_beta_scalar_hand_case():
    ds = Dataset([Site("a", 0, 0)], ["intercept"], np.ones((1, 1, 1)), np.array([[2.0]]), scale="log")
    psi = ParamState("A1", [0.0], dict(sigma2_eps=0.5, sigma2_omega=0.5, theta=0.1))
    mean, cov = beta_conditional("A1", psi, ds, PRIOR)
    assert mean[0] == pytest.approx(2.0 / 1.01, rel=1e-13)
    assert cov[0, 0] == pytest.approx(1.0 / 1.01, rel=1e-13)
    assert round(mean[0], 4) == 1.9802 and round(cov[0, 0], 4) == 0.9901


def test_beta_a1_dense():
    ds = toy_dataset(3, 4, missing=MISSING)
    psi = psi_for(ModelKind.A1)
    dense_beta_check("A1", ds, psi, dense_cov(ds, a1_cell_cov(ds, psi)), lambda c: ds.z[c])


@pytest.mark.parametrize("kind", [ModelKind.A3_1, ModelKind.A3_2])
def test_beta_a3_dense(kind):
    ds = toy_dataset(3, 4, missing=MISSING)
    psi = psi_for(kind)
    dense_beta_check(kind, ds, psi, dense_cov(ds, a3_cell_cov(ds, psi)), lambda c: ds.z[c])


def test_beta_a2_dense():
    ds = toy_dataset(3, 4)
    U = np.random.default_rng(1).standard_normal((3, 4))
    psi = psi_for(ModelKind.A2, latent=U)
    dense_beta_check("A2", ds, psi, dense_cov(ds, a2_cell_cov(ds, psi)), lambda c: U[c])


def test_beta_b_dense():
    ds = toy_dataset(3, 4, missing=MISSING)
    Y = np.random.default_rng(2).standard_normal(5)
    psi = psi_for(ModelKind.B, latent=Y)
    dense_beta_check("B", ds, psi, dense_cov(ds, a1_cell_cov(ds, psi)), lambda c: ds.z[c] - Y[c[1] + 1])


def test_beta_c_dense():
    ds = toy_dataset(3, 4, missing=MISSING)
    Y = np.random.default_rng(3).standard_normal((3, 5))
    psi = psi_for(ModelKind.C, latent=Y)
    n = ds.d * ds.n_days
    dense_beta_check("C", ds, psi, 0.3 * np.eye(n), lambda c: ds.z[c] - Y[c[0], c[1] + 1])


def test_variance_conditionals():
    ds = toy_dataset(3, 4, missing=MISSING)
    Y = np.random.default_rng(4).standard_normal(5)
    psi = psi_for(ModelKind.B, latent=Y)
    shape, scale = variance_conditional("B", "sigma2_eta", psi, ds, PRIOR)
    e = Y[1:] - 0.6 * Y[:-1]
    assert shape == 2.0 + 4 / 2 and scale == pytest.approx(1.0 + 0.5 * e @ e)

    Yc = np.random.default_rng(5).standard_normal((3, 5))
    psi = psi_for(ModelKind.C, latent=Yc)
    shape, scale = variance_conditional("C", "sigma2_eps", psi, ds, PRIOR)
    r = np.array([ds.z[c] - ds.X[c] @ psi.beta - Yc[c[0], c[1] + 1] for _, c in observed_cells(ds)])
    assert shape == 2.0 + r.size / 2 and scale == pytest.approx(1.0 + 0.5 * r @ r)
    shape, scale = variance_conditional("C", "sigma2_omega", psi, ds, PRIOR)
    C = np.array([[math.exp(-0.08 * dist(a, b)) for b in ds.sites] for a in ds.sites])
    E = Yc[:, 1:] - 0.6 * Yc[:, :-1]
    quad = sum(E[:, t] @ np.linalg.inv(C) @ E[:, t] for t in range(4))
    assert shape == 2.0 + 12 / 2 and scale == pytest.approx(1.0 + 0.5 * quad, rel=1e-10)

    U = np.random.default_rng(6).standard_normal((3, 4))
    psi = psi_for(ModelKind.A2, latent=U)
    shape, scale = variance_conditional("A2", "sigma2_omega", psi, ds, PRIOR)
    Sc = dense_cov(ds, a2_cell_cov(ds, psi)) / 0.7
    u = np.array([U[c] - ds.X[c] @ psi.beta for c in cells(ds)])
    assert shape == 2.0 + 6 and scale == pytest.approx(1.0 + 0.5 * u @ np.linalg.inv(Sc) @ u, rel=1e-10)
    with pytest.raises(ContractError):
        variance_conditional("A1", "sigma2_eps", psi_for(ModelKind.A1), ds, PRIOR)


def _mc_close(draws, mean, cov, k=4.0):
    n = draws.shape[0]
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < k * se)
    var = np.diag(cov)
    assert np.all(np.abs(draws.var(axis=0, ddof=1) - var) < k * var * math.sqrt(2.0 / n))


def test_ffbs_b_matches_dense():
    ds = toy_dataset(3, 4, missing=MISSING)
    psi = psi_for(ModelKind.B, latent=np.zeros(5))
    T, d = 4, 3
    CY = ar1_cov(T, 0.6, 0.2, PRIOR.sigma2_B)
    noise = dense_cov(ds, a1_cell_cov(ds, psi))
    # joint of (Y_0..Y_T, z over cells); z_(i,t) = x'beta + Y_{t+1} + e
    A = np.zeros((d * T, T + 1))
    for p, (i, t) in enumerate(cells(ds)):
        A[p, t + 1] = 1.0
    S = np.block([[CY, CY @ A.T], [A @ CY, A @ CY @ A.T + noise]])
    mu = np.concatenate([np.zeros(T + 1), [ds.X[c] @ psi.beta for c in cells(ds)]])
    obs = [T + 1 + p for p, _ in observed_cells(ds)]
    vals = np.array([ds.z[c] for _, c in observed_cells(ds)])
    mean, cov = gaussian_condition(mu, S, obs, vals, list(range(T + 1)))
    draws = ffbs_model_b(psi, ds, PRIOR, rng_stream(11), size=50_000)
    _mc_close(draws, mean, cov)


def test_ffbs_c_matches_dense():
    ds = toy_dataset(3, 4, missing=MISSING)
    d, T = 3, 4
    psi = psi_for(ModelKind.C, latent=np.zeros((d, T + 1)))
    Q = np.array([[0.7 * math.exp(-0.08 * dist(a, b)) for b in ds.sites] for a in ds.sites])
    CY = field_ar1_cov(T, 0.6, Q, PRIOR.sigma2_C)
    A = np.zeros((d * T, d * (T + 1)))
    for p, (i, t) in enumerate(cells(ds)):
        A[p, (t + 1) * d + i] = 1.0
    S = np.block([[CY, CY @ A.T], [A @ CY, A @ CY @ A.T + 0.3 * np.eye(d * T)]])
    n_y = d * (T + 1)
    mu = np.concatenate([np.zeros(n_y), [ds.X[c] @ psi.beta for c in cells(ds)]])
    obs = [n_y + p for p, _ in observed_cells(ds)]
    vals = np.array([ds.z[c] for _, c in observed_cells(ds)])
    mean, cov = gaussian_condition(mu, S, obs, vals, list(range(n_y)))
    draws = ffbs_model_c(psi, ds, PRIOR, rng_stream(12), size=50_000)  # (n, d, T+1)
    flat = draws.transpose(0, 2, 1).reshape(draws.shape[0], n_y)
    _mc_close(flat, mean, cov)


def test_c_with_one_site_equals_b():
    ds = toy_dataset(1, 6, missing=((0, 2),))
    b = ParamState("B", [0.5, 0.1], dict(sigma2_eps=0.2, sigma2_omega=0.1, sigma2_eta=0.7, theta=0.3, rho=0.4),
                   np.zeros(7))
    c = ParamState("C", [0.5, 0.1], dict(sigma2_eps=0.3, sigma2_omega=0.7, theta=0.3, rho=0.4), np.zeros((1, 7)))
    yb = ffbs_model_b(b, ds, PRIOR, rng_stream(3), size=4)
    yc = ffbs_model_c(c, ds, PRIOR, rng_stream(3), size=4)
    np.testing.assert_allclose(yc[:, 0, :], yb, rtol=1e-10, atol=1e-12)


def test_enbloc_matches_dense():
    ds = toy_dataset(3, 4)
    psi = psi_for(ModelKind.A2, latent=np.zeros((3, 4)))
    S = dense_cov(ds, a2_cell_cov(ds, psi))
    n = S.shape[0]
    J = np.block([[S, S], [S, S + 0.3 * np.eye(n)]])
    mu_u = np.array([ds.X[c] @ psi.beta for c in cells(ds)])
    vals = np.array([ds.z[c] for c in cells(ds)])
    mean, cov = gaussian_condition(np.concatenate([mu_u, mu_u]), J, list(range(n, 2 * n)), vals, list(range(n)))
    _, _, got_mean, _ = enbloc_conditional_parts(psi, ds, vals)
    np.testing.assert_allclose(got_mean, mean, rtol=1e-9, atol=1e-11)
    draws = enbloc_update_u(psi, ds, rng_stream(13), size=50_000)  # (n, d, T)
    flat = draws.transpose(0, 2, 1).reshape(draws.shape[0], n)
    _mc_close(flat, mean, cov)
    emp = np.cov(flat.T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.03


def test_enbloc_with_missing_keeps_conditional():
    # alternating imputation and en-bloc draws targets U | observed z
    ds = toy_dataset(2, 3, missing=((0, 1),))
    psi = psi_for(ModelKind.A2, latent=np.zeros((2, 3)))
    S = dense_cov(ds, a2_cell_cov(ds, psi))
    n = S.shape[0]
    J = np.block([[S, S], [S, S + 0.3 * np.eye(n)]])
    mu_u = np.array([ds.X[c] @ psi.beta for c in cells(ds)])
    obs = [n + p for p, _ in observed_cells(ds)]
    vals = np.array([ds.z[c] for _, c in observed_cells(ds)])
    mean, cov = gaussian_condition(np.concatenate([mu_u, mu_u]), J, obs, vals, list(range(n)))
    rng = rng_stream(14)
    out = np.empty((20_000, n))
    for s in range(out.shape[0]):
        psi.latent = enbloc_update_u(psi, ds, rng)
        out[s] = psi.latent.T.ravel()
    # thin-free chain: widen the tolerance by the chain's own ESS
    ess = min(effective_sample_size(out[:, j]) for j in range(n))
    se = np.sqrt(np.diag(cov) / ess)
    assert np.all(np.abs(out.mean(axis=0) - mean) < 4 * se)


def test_transform_round_trip():
    for support in (None, (0.0, 1.0), (-1.0, 1.0), (0.3, 3.0)):
        t = Transform(support)
        for x in ((0.01, 1.0, 50.0) if support is None else np.linspace(*support, 7)[1:-1]):
            assert t.from_free(t.to_free(x)) == pytest.approx(x, rel=1e-12)
    t = Transform((0.0, 1.0))
    assert 0.0 < t.from_free(-800.0) < 1.0 and 0.0 < t.from_free(800.0) < 1.0
    # jacobian against a central difference
    y, h = 0.7, 1e-6
    num = (t.from_free(y + h) - t.from_free(y - h)) / (2 * h)
    assert t.log_jacobian(y) == pytest.approx(math.log(num), rel=1e-8)


def test_mh_update_samples_toy_target():
    # Beta(3, 2) on (0, 1): mean 0.6, variance 0.04
    def log_target(x):
        return 2 * math.log(x) + math.log1p(-x)

    rng = rng_stream(21)
    tr = Transform((0.0, 1.0))
    state = AdaptState()
    x, lt = 0.5, None
    for _ in range(2_000):
        x, _, lt = mh_update(x, log_target, tr, rng, state, lt)
    state.adapting = False
    state.n_updates = state.n_accepted = 0
    xs = np.empty(40_000)
    for i in range(xs.size):
        x, _, lt = mh_update(x, log_target, tr, rng, state, lt)
        xs[i] = x
    assert np.all((xs > 0) & (xs < 1))
    assert 0.3 < state.acceptance_rate < 0.6
    se = math.sqrt(0.04 / effective_sample_size(xs))
    assert abs(xs.mean() - 0.6) < 4 * se
    assert abs(xs.var() - 0.04) < 0.004


def test_mcmc_config_checks():
    with pytest.raises(ConfigError):
        McmcConfig(n_iter=10, burn_in=10)
    with pytest.raises(ConfigError):
        McmcConfig(n_iter=10, burn_in=5, adapt_until=6)
    assert McmcConfig(n_iter=10, burn_in=3, thin=3).n_retained == 3


@pytest.mark.parametrize("kind", ["A1", "A2", "B", "C"])
def test_run_mcmc_is_deterministic(kind):
    ds = toy_dataset(3, 6, missing=((1, 2),))
    cfg = McmcConfig(n_iter=30, burn_in=10, thin=2, seed=5)
    c1, c2 = run_mcmc(kind, ds, PRIOR, cfg), run_mcmc(kind, ds, PRIOR, cfg)
    assert len(c1) == cfg.n_retained == 10
    for p, q in zip(c1.draws, c2.draws):
        assert np.array_equal(p.beta, q.beta) and p.scalars == q.scalars
        if p.latent is not None:
            assert np.array_equal(p.latent, q.latent)
    for p in c1.draws:
        for name, value in p.scalars.items():
            assert PRIOR.log_density(name, value) > -math.inf


def test_chain_csv_round_trip(tmp_path):
    ds = toy_dataset(3, 4)
    chain = run_mcmc("C", ds, PRIOR, McmcConfig(n_iter=12, burn_in=2, seed=1))
    path = write_chain_csv(chain, tmp_path / "chain.csv")
    back = read_chain_csv(path, "C", ds.covariate_names, d=3, T=4)
    assert len(back) == len(chain)
    for p, q in zip(chain.draws, back.draws):
        np.testing.assert_allclose(q.beta, p.beta, rtol=1e-15)
        np.testing.assert_allclose(q.latent, p.latent, rtol=1e-15)


def test_autocorrelation_and_ess():
    assert autocorrelation(np.array([1.0, 2.0, 3.0, 4.0]), max_lag=0)[0] == 1.0
    acf = autocorrelation(np.full(10, 3.0), max_lag=3)
    assert acf[0] == 1.0 and np.all(np.isnan(acf[1:]))
    assert math.isnan(effective_sample_size(np.full(20, 1.0)))
    x = rng_stream(31).standard_normal(1000)
    assert 700 <= effective_sample_size(x) <= 1300
    # AR(1) with rho 0.5: lag-1 correlation 0.5, ESS near n/3
    rng = rng_stream(32)
    y = np.empty(20_000)
    y[0] = rng.standard_normal()
    for t in range(1, y.size):
        y[t] = 0.5 * y[t - 1] + math.sqrt(0.75) * rng.standard_normal()
    assert autocorrelation(y, 1)[1] == pytest.approx(0.5, abs=0.03)
    assert effective_sample_size(y) == pytest.approx(y.size / 3, rel=0.15)


def test_diagnostics_report(tmp_path):
    chain = run_mcmc("A1", toy_dataset(3, 5), PRIOR, McmcConfig(n_iter=40, burn_in=10, seed=2))
    report = diagnostics(chain)
    assert [r.name for r in report] == chain.parameter_names()
    paths = write_diagnostics(report, tmp_path, "A1")
    assert all(p.exists() for p in paths.values())
    short = run_mcmc("A1", toy_dataset(3, 5), PRIOR, McmcConfig(n_iter=12, burn_in=10, seed=2))
    with pytest.raises(ConfigError):
        diagnostics(short)


def test_mh_standard_normal_acceptance_near_target():
    # log target whose free-scale (log) density is standard normal once the Jacobian is added
    def log_target(x):
        y = math.log(x)
        return -0.5 * y * y - y

    rng = rng_stream(22)
    tr = Transform(None)
    state = AdaptState()
    x, lt = 1.0, None
    for _ in range(5_000):
        x, _, lt = mh_update(x, log_target, tr, rng, state, lt)
    state.adapting = False
    state.n_updates = state.n_accepted = 0
    for _ in range(20_000):
        x, _, lt = mh_update(x, log_target, tr, rng, state, lt)
    assert abs(state.acceptance_rate - 0.44) < 0.1


def test_mh_zero_step_always_accepts():
    state = AdaptState(log_step=-math.inf, adapting=False)
    rng = rng_stream(23)
    for _ in range(100):
        _, accepted, _ = mh_update(0.3, lambda v: -50.0 * v, Transform((0.0, 1.0)), rng, state)
        assert accepted


def test_mh_respects_support():
    rng = rng_stream(24)
    tr = Transform((0.0, 1.0))
    state = AdaptState(log_step=math.log(20.0))
    x, lt = 0.5, None
    lo, hi = 1.0, 0.0
    for _ in range(100_000):
        x, _, lt = mh_update(x, lambda v: 0.0, tr, rng, state, lt)
        lo, hi = min(lo, x), max(hi, x)
    assert 0.0 < lo and hi < 1.0
