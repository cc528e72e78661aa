import math

import numpy as np
import pytest

from airstm.covariance import gneiting_corr
from airstm.dataset import spatial_distance_matrix
from airstm.errors import ConfigError, DomainError
from airstm.gaussmath import rng_stream
from airstm.inference import McmcConfig
from airstm.models import ModelKind, SCALAR_PARAMS
from airstm.simulator import (
    SimLayout,
    default_truth,
    random_layout,
    recovery_experiment,
    residual_process,
    simulate,
    to_natural,
)

N = 40_000


def layout_for(kind, d=3, T=6, **kw):
    return random_layout(default_truth(kind), d=d, T=T, rng=rng_stream(1), extent_km=(60.0, 60.0), **kw)


def emp_cov(W, c1, c2):
    a, b = W[:, c1[0], c1[1]], W[:, c2[0], c2[1]]
    return float(np.mean((a - a.mean()) * (b - b.mean())))


def check_cov(W, c1, c2, expect, var1, var2):
    se = math.sqrt((var1 * var2 + expect**2) / W.shape[0])
    assert abs(emp_cov(W, c1, c2) - expect) < 4 * se, (c1, c2, emp_cov(W, c1, c2), expect)


def test_default_truth_inside_priors():
    from airstm.models import PriorSpec

    p = PriorSpec()
    for kind in ModelKind:
        psi = default_truth(kind)
        assert set(psi.scalars) == set(SCALAR_PARAMS[kind])
        assert all(p.log_density(n, v) > -math.inf for n, v in psi.scalars.items())


def test_a1_moments():
    lay = layout_for("A1")
    H = spatial_distance_matrix(lay.sites)
    W, state = residual_process("A1", lay, rng_stream(2), size=N)
    assert state is None and W.shape == (N, 3, 6)
    s2w = 0.2
    check_cov(W, (0, 2), (0, 2), s2w, s2w, s2w)
    check_cov(W, (0, 2), (1, 2), s2w * math.exp(-0.01 * H[0, 1]), s2w, s2w)
    check_cov(W, (0, 2), (1, 3), 0.0, s2w, s2w)


def test_a2_moments():
    lay = layout_for("A2")
    H = spatial_distance_matrix(lay.sites)
    W, _ = residual_process("A2", lay, rng_stream(3), size=N)
    s2w = 0.2
    expect = s2w * math.exp(-0.5 * 2) * math.exp(-0.01 * H[0, 2])
    check_cov(W, (0, 1), (2, 3), expect, s2w, s2w)
    check_cov(W, (1, 0), (1, 0), s2w, s2w, s2w)


@pytest.mark.parametrize("kind", ["A3_1", "A3_2"])
def test_a3_moments(kind):
    lay = layout_for(kind)
    H = spatial_distance_matrix(lay.sites)
    W, _ = residual_process(kind, lay, rng_stream(4), size=N)
    s2w = 0.2
    gp = lay.truth.gneiting_params()
    check_cov(W, (0, 1), (1, 3), s2w * gneiting_corr(gp, H[0, 1], 2.0), s2w, s2w)
    check_cov(W, (2, 4), (2, 5), s2w * gneiting_corr(gp, 0.0, 1.0), s2w, s2w)


@pytest.mark.parametrize("mode", ["static", "daily"])
def test_b_moments(mode):
    lay = layout_for("B", b_omega=mode)
    H = spatial_distance_matrix(lay.sites)
    W, Y = residual_process("B", lay, rng_stream(5), size=N)
    assert Y.shape == (N, 7)
    rho, s2eta, s2w = 0.8, 0.1, 0.2
    # Y_0 ~ N(0, 1): var(Y_t) = rho^2t + s2eta (1 - rho^2t) / (1 - rho^2)
    vy = [rho ** (2 * t) + s2eta * (1 - rho ** (2 * t)) / (1 - rho**2) for t in range(7)]
    omega_lag = s2w * math.exp(-0.01 * H[0, 1])
    cross = rho**2 * vy[2] + (omega_lag if mode == "static" else 0.0)
    check_cov(W, (0, 1), (1, 3), cross, vy[2] + s2w, vy[4] + s2w)


def test_c_moments():
    lay = layout_for("C")
    H = spatial_distance_matrix(lay.sites)
    W, Y = residual_process("C", lay, rng_stream(6), size=N)
    assert Y.shape == (N, 3, 7)
    np.testing.assert_array_equal(Y[:, :, 1:], W)
    rho, s2w = 0.8, 0.2
    q = s2w * math.exp(-0.01 * H[0, 1])
    # cross-site covariance of the field after t steps from a diagonal start
    cov_t = q * (1 - rho ** (2 * 3)) / (1 - rho**2)
    var_t = [rho ** (2 * t) + s2w * (1 - rho ** (2 * t)) / (1 - rho**2) for t in range(7)]
    check_cov(W, (0, 2), (1, 2), cov_t, var_t[3], var_t[3])
    check_cov(W, (0, 2), (1, 4), rho**2 * cov_t, var_t[3], var_t[5])


def test_simulate_is_deterministic_and_masks():
    lay = layout_for("A1", d=5, T=40, missing_rate=0.2)
    a = simulate("A1", lay, rng_stream(7))
    b = simulate("A1", lay, rng_stream(7))
    np.testing.assert_array_equal(a.z, b.z)
    assert a.scale == "log"
    assert 0.1 < 1 - a.observed.mean() < 0.3
    nat = to_natural(a)
    np.testing.assert_allclose(np.log(nat.z[nat.observed]), a.z[a.observed], rtol=1e-14)
    with pytest.raises(DomainError):
        to_natural(nat)
    with pytest.raises(DomainError):
        simulate("B", lay, rng_stream(7))


def test_simulate_returns_latent():
    lay = layout_for("A2")
    ds, U = simulate("A2", lay, rng_stream(8), return_latent=True)
    assert U.shape == (3, 6)
    resid = ds.z - U
    assert abs(resid.std() - math.sqrt(0.05)) < 0.15


def test_layout_checks():
    truth = default_truth("A1")
    lay = layout_for("A1")
    with pytest.raises(ConfigError):
        SimLayout(lay.sites, 6, lay.X[:, :5], lay.covariate_names, truth)
    with pytest.raises(ConfigError):
        SimLayout(lay.sites, 6, lay.X, lay.covariate_names, truth, b_omega="weekly")
    with pytest.raises(ConfigError):
        SimLayout(lay.sites, 6, lay.X, lay.covariate_names, truth, missing_rate=1.0)


def test_recovery_experiment_runs():
    lay = layout_for("A1", d=6, T=20)
    cfg = McmcConfig(n_iter=300, burn_in=150, seed=0)
    rep = recovery_experiment("A1", lay, cfg, rng_stream(9), holdout=2)
    assert [r.parameter for r in rep.rows][:3] == ["beta_intercept", "beta_x1", "beta_x2"]
    assert len(rep.rows) == 3 + 3
    assert 0.0 <= rep.coverage <= 1.0
    assert rep.predictive_total == 40 and 0.5 <= rep.predictive_coverage <= 1.0
    again = recovery_experiment("A1", lay, cfg, rng_stream(9), holdout=2)
    assert [r.mean for r in again.rows] == [r.mean for r in rep.rows]
