import math

import numpy as np
import pytest
import statsmodels.api as sm

from airstm.dataset import Dataset, Site
from airstm.errors import ConfigError, DomainError
from airstm.evaluation import (
    STAR_RULE_VERSION,
    StationIndexRow,
    aic_screen,
    comparison_report,
    nmbf,
    nnr,
    residual_diagnostics,
    rmse_corr_coverage,
    star_rating,
    station_indexes,
    wnnr,
    write_indexes_csv,
    write_report,
    write_residual_diagnostics,
)
from airstm.prediction import PredictionTarget, PredictiveDraws, summarize_predictions

from oracles import toy_dataset


def test_nmbf_factor_two():
    z = np.array([1.0, 3.0, 7.0])
    assert nmbf(z, 2 * z) == 1.0
    assert nmbf(z, z / 2) == -1.0
    assert nmbf(z, z) == 0.0


def test_ratio_hand_cases():
    z, zh = np.array([1.0, 2.0]), np.array([1.0, 4.0])
    assert wnnr(z, zh) == pytest.approx(1 / 3, abs=1e-15)
    assert nnr(z, zh) == pytest.approx(1 / 6, abs=1e-15)
    assert wnnr(z, z) == 0.0 and nnr(z, z) == 0.0


def test_index_identities_on_random_series():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.integers(2, 40)
        z, zh = rng.lognormal(3, 0.5, n), rng.lognormal(3, 0.6, n)
        c = rng.uniform(0.01, 100)
        assert abs(nmbf(zh, z) + nmbf(z, zh)) < 1e-12
        assert abs(nmbf(c * z, c * zh) - nmbf(z, zh)) < 1e-12
        assert abs(wnnr(c * z, c * zh) - wnnr(z, zh)) < 1e-12
        assert abs(nnr(c * z, c * zh) - nnr(z, zh)) < 1e-12
        assert wnnr(z, zh) > 0 and nnr(z, zh) > 0


def test_index_domain():
    with pytest.raises(DomainError):
        nmbf([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(DomainError):
        wnnr([1.0], [1.0, 2.0])
    with pytest.raises(DomainError):
        nnr([np.nan], [1.0])
    assert nmbf([1.0, np.nan, 2.0], [2.0, 5.0, 4.0]) == 1.0


def test_rmse_corr_coverage():
    z = np.array([1.0, 2.0, 3.0, 4.0])
    p = np.array([1.5, 2.0, 2.5, 4.0])
    rmse, corr, cover = rmse_corr_coverage(z, p, p - 0.4, p + 0.4)
    assert rmse == pytest.approx(math.sqrt(0.5 / 4))
    assert corr == pytest.approx(np.corrcoef(z, p)[0, 1])
    assert cover == 0.5
    with pytest.raises(DomainError):
        rmse_corr_coverage(z, np.ones(4), z, z)


def row(name, nmbf_, wnnr_, nnr_, rmse, corr, cover):
    return StationIndexRow(name, 10, nmbf_, wnnr_, nnr_, rmse, corr, cover)


def test_stars_dominant_and_ties():
    good = [row("s", 0.01, 0.1, 0.1, 1.0, 0.9, 0.95)]
    bad = [row("s", 0.2, 0.5, 0.5, 3.0, 0.5, 0.7)]
    stars = star_rating({"A": good, "B": bad, "C": bad})
    assert stars == {"A": 3, "B": 2, "C": 2}
    assert star_rating({"A": good, "B": good}) == {"A": 3, "B": 3}
    with pytest.raises(ConfigError):
        star_rating({"A": good})


def test_stars_six_models_hand_tertiles():
    # per-index ranks (nmbf, wnnr, nnr, rmse, corr, coverage) and their means:
    # M1: 1 1 1 1 6 1 -> 11/6   M2: 2 2 2 2 1 2 -> 11/6   M3: 3 3 3 3 2 6 -> 20/6
    # M4: 4 4 4 4 3 3 -> 22/6   M5: 5 5 5 5 4 4 -> 28/6   M6: 6 6 6 6 5 5 -> 34/6
    # positions 1, 1, 3, 4, 5, 6; tertile cut-offs ceil(6/3) = 2, ceil(12/3) = 4
    tables = {
        "M1": [row("s", -0.01, 0.1, 0.1, 1.0, 0.10, 0.95)],
        "M2": [row("s", 0.02, 0.2, 0.2, 2.0, 0.90, 0.94)],
        "M3": [row("s", -0.03, 0.3, 0.3, 3.0, 0.80, 0.50)],
        "M4": [row("s", 0.04, 0.4, 0.4, 4.0, 0.70, 0.92)],
        "M5": [row("s", 0.05, 0.5, 0.5, 5.0, 0.60, 0.90)],
        "M6": [row("s", 0.06, 0.6, 0.6, 6.0, 0.50, 0.85)],
    }
    expect = {"M1": 3, "M2": 3, "M3": 2, "M4": 2, "M5": 1, "M6": 1}
    assert star_rating(tables) == expect
    shuffled = {k: tables[k] for k in ("M4", "M6", "M1", "M3", "M5", "M2")}
    assert star_rating(shuffled) == expect


def test_stars_use_station_medians():
    a = [row("s1", 0.0, 0.1, 0.1, 1.0, 0.9, 0.95), row("s2", 0.0, 0.1, 0.1, 1.0, 0.9, 0.95),
         row("s3", 5.0, 9.0, 9.0, 9.0, -0.9, 0.0)]
    b = [row("s1", 0.1, 0.2, 0.2, 2.0, 0.8, 0.9)] * 3
    # with two models the cut-offs are ceil(2/3) = 1 and ceil(4/3) = 2
    assert star_rating({"A": a, "B": b}) == {"A": 3, "B": 2}


def _holdout():
    sites = [Site("h1", 0, 0), Site("h2", 1, 1)]
    z = np.log(np.array([[10.0, 20.0, 30.0], [5.0, np.nan, 15.0]]))
    return Dataset(sites, ["intercept"], np.ones((2, 3, 1)), z, scale="log")


def test_station_indexes():
    ho = _holdout()
    targets = [PredictionTarget(s, t + 1, [1.0]) for s in ho.sites for t in range(3)]
    rng = np.random.default_rng(1)
    truth = np.nan_to_num(ho.z, nan=2.0).ravel()
    draws = truth[:, None] + np.log(2.0) + 0.01 * rng.standard_normal((6, 400))
    s = summarize_predictions(PredictiveDraws(targets, draws))
    rows = station_indexes(ho, s)
    assert [r.site_id for r in rows] == ["h1", "h2"] and [r.n_days for r in rows] == [3, 2]
    for r in rows:
        assert r.nmbf == pytest.approx(1.0, abs=0.02)
        assert r.corr == pytest.approx(1.0, abs=1e-3) and r.coverage == 0.0
    log_rows = station_indexes(ho, s, scale="log")
    assert math.isnan(log_rows[0].nmbf) and log_rows[0].rmse == pytest.approx(math.log(2.0), abs=0.01)
    with pytest.raises(ConfigError):
        station_indexes(ho, s, scale="ppm")


def test_residual_diagnostics():
    ds = toy_dataset(6, 80, seed=3)
    diag = residual_diagnostics(ds, max_lag=5)
    assert diag.cloud.shape == (15, 4)
    assert np.all(np.abs(diag.cloud[:, 3]) <= 1)
    assert diag.acf.shape == (6, 6) and np.all(diag.acf[:, 0] == 1.0)
    # independent noise: small lag-1 autocorrelation and flat correlation cloud
    assert abs(diag.median_acf(1)) < 0.3
    assert abs(diag.lowess_at(10.0)) < 0.3
    ols = sm.OLS(ds.z.ravel(), ds.X.reshape(-1, ds.k)).fit()
    np.testing.assert_allclose(diag.beta, ols.params, rtol=1e-10)


def test_residual_diagnostics_detects_persistence(tmp_path):
    rng = np.random.default_rng(4)
    ds = toy_dataset(4, 200, seed=4)
    common = np.zeros(200)
    for t in range(1, 200):
        common[t] = 0.8 * common[t - 1] + rng.standard_normal()
    z = common[None, :] + 0.3 * rng.standard_normal((4, 200))
    ds = Dataset(ds.sites, ds.covariate_names, ds.X, z, scale="log")
    diag = residual_diagnostics(ds, max_lag=3)
    assert diag.median_acf(1) > 0.6
    assert np.all(diag.cloud[:, 3] > 0.7)
    paths = write_residual_diagnostics(diag, tmp_path)
    assert all(p.exists() for p in paths.values())


def test_aic_screen_matches_statsmodels():
    rng = np.random.default_rng(5)
    d, T = 5, 40
    X = np.ones((d, T, 3))
    X[:, :, 1:] = rng.standard_normal((d, T, 2))
    z = 1.0 + 0.8 * X[:, :, 1] + 0.2 * rng.standard_normal((d, T))
    ds = toy_dataset(d, T, k=3, seed=5)
    ds = Dataset(ds.sites, ["intercept", "temp", "wind"], X, z, scale="log")
    ranked, skipped = aic_screen(ds, [(), ("temp",), ("wind",), ("temp", "wind")])
    assert skipped == []
    assert ranked[0].covariates in (("temp",), ("temp", "wind"))
    assert ranked[-1].covariates in ((), ("wind",))
    for e in ranked:
        cols = [0] + [ds.covariate_names.index(c) for c in e.covariates]
        fit = sm.OLS(z.ravel(), X.reshape(-1, 3)[:, cols]).fit()
        # statsmodels does not count the error variance as a parameter
        assert e.aic == pytest.approx(fit.aic + 2.0, rel=1e-10)
        assert e.n_params == len(cols) + 1
    with pytest.raises(ConfigError):
        aic_screen(ds, [("nope",)])


def test_aic_screen_skips_rank_deficient():
    ds = toy_dataset(3, 10, k=3, seed=6)
    X = ds.X.copy()
    X[:, :, 2] = 2 * X[:, :, 1]
    ds = Dataset(ds.sites, ["intercept", "a", "b"], X, ds.z, scale="log")
    ranked, skipped = aic_screen(ds, [("a",), ("a", "b")])
    assert [e.covariates for e in ranked] == [("a",)] and skipped == [("a", "b")]


def test_report_files(tmp_path):
    t = [row("s", 0.01, 0.1, 0.1, 1.0, 0.9, 0.95), row("u", 0.03, 0.2, 0.2, 1.5, 0.8, 0.9)]
    tables = {"A1": t, "B": t}
    stars = star_rating(tables)
    report = comparison_report(["A1", "B", "A3-1"], {"A1": (0.01, 0.001), "B": (0.02, 0.002)}, tables, stars,
                               failures={"A3-1": "dense budget exceeded"})
    assert [r.status for r in report.rows] == ["ok", "ok", "failed"]
    assert report.rows[0].index_median["rmse"] == pytest.approx(1.25)
    assert report.rows[0].index_iqr["rmse"] == pytest.approx(0.25)
    paths = write_report(report, tmp_path)
    text = paths["txt"].read_text()
    assert STAR_RULE_VERSION in text and "A3-1 failed" in text
    assert "s_per_iter" not in paths["csv"].read_text() and "s_per_iter" not in text
    lines = paths["csv"].read_text().splitlines()
    assert len(lines) == 4 and lines[3].endswith(",failed")
    assert len(paths["timing"].read_text().splitlines()) == 4
    assert len(write_indexes_csv(tables, tmp_path / "i.csv").read_text().splitlines()) == 5
    with pytest.raises(ConfigError):
        comparison_report(["C"], {}, {}, {})
