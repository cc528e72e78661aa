"""Validation indexes, star ratings, exploratory residual checks and the
model comparison report."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataset import Dataset, spatial_distance_matrix
from .errors import ConfigError, DomainError
from .models import ModelKind, model_meta

STAR_RULE_VERSION = "star-rule v1"
INDEX_NAMES = ("nmbf", "wnnr", "nnr", "rmse", "corr", "coverage")


def _paired(observed, predicted, positive=True):
    z = np.asarray(observed, dtype=float)
    zh = np.asarray(predicted, dtype=float)
    if z.shape != zh.shape:
        raise DomainError(f"series lengths differ: {z.shape} vs {zh.shape}")
    keep = ~(np.isnan(z) | np.isnan(zh))
    z, zh = z[keep], zh[keep]
    if z.size == 0:
        raise DomainError("no days where both observed and predicted values exist")
    if positive and not (np.all(z > 0) and np.all(zh > 0)):
        raise DomainError("index needs strictly positive observed and predicted values")
    return z, zh


def nmbf(observed, predicted) -> float:
    """Normalized mean bias factor; positive values mean overprediction."""
    z, zh = _paired(observed, predicted)
    if zh.mean() >= z.mean():
        return float(zh.sum() / z.sum() - 1.0)
    return float(1.0 - z.sum() / zh.sum())


def _k(z, zh):
    return np.exp(-np.abs(np.log(zh / z)))


def wnnr(observed, predicted) -> float:
    """Weighted normalized ratio mean square error, weights ``z_t / mean(z)``."""
    z, zh = _paired(observed, predicted)
    k = _k(z, zh)
    s = z / z.mean()
    return float(np.sum(s**2 * (1.0 - k) ** 2) / np.sum(s * k))


def nnr(observed, predicted) -> float:
    """Unweighted normalized ratio mean square error."""
    z, zh = _paired(observed, predicted)
    k = _k(z, zh)
    return float(np.sum((1.0 - k) ** 2) / np.sum(k))


def rmse_corr_coverage(observed, point, lo, hi):
    """RMSE and Pearson correlation of point predictions, and interval coverage."""
    z = np.asarray(observed, dtype=float)
    arrays = [np.asarray(a, dtype=float) for a in (point, lo, hi)]
    if any(a.shape != z.shape for a in arrays):
        raise DomainError("observed and prediction arrays differ in length")
    keep = ~np.isnan(z)
    for a in arrays:
        keep &= ~np.isnan(a)
    z = z[keep]
    p, lo, hi = (a[keep] for a in arrays)
    if z.size < 2:
        raise DomainError("need at least two paired days")
    if np.ptp(z) == 0 or np.ptp(p) == 0:
        raise DomainError("correlation undefined for a constant series")
    rmse = float(np.sqrt(np.mean((p - z) ** 2)))
    corr = float(np.corrcoef(z, p)[0, 1])
    coverage = float(np.mean((lo <= z) & (z <= hi)))
    return rmse, corr, coverage


@dataclass
class StationIndexRow:
    site_id: str
    n_days: int
    nmbf: float
    wnnr: float
    nnr: float
    rmse: float
    corr: float
    coverage: float


def station_indexes(holdout: Dataset, summary, scale="concentration") -> list:
    """One :class:`StationIndexRow` per held-out station.

    ``summary`` is a prediction summary whose targets cover the held-out
    (site, day) pairs; days with a missing observation are skipped.
    """
    if scale not in ("concentration", "log"):
        raise ConfigError(f"unknown index scale {scale!r}")
    point = summary.point(scale)
    lo, hi = summary.interval(scale)
    z = holdout.z if holdout.scale == "log" else np.log(holdout.z)
    z = np.exp(z) if scale == "concentration" else z
    index = {sid: i for i, sid in enumerate(holdout.site_ids)}
    per_site = {}
    for n, tg in enumerate(summary.targets):
        i = index[tg.site.id]
        obs = z[i, tg.day - 1]
        if np.isnan(obs):
            continue
        per_site.setdefault(tg.site.id, []).append((obs, point[n], lo[n], hi[n]))
    rows = []
    for sid in holdout.site_ids:
        vals = per_site.get(sid)
        if not vals:
            continue
        o, p, l, h = (np.array(c) for c in zip(*vals))
        if scale == "log":
            # ratio indexes are defined on positive values only
            bias = wnr = nr = float("nan")
        else:
            bias, wnr, nr = nmbf(o, p), wnnr(o, p), nnr(o, p)
        try:
            rmse, corr, cover = rmse_corr_coverage(o, p, l, h)
        except DomainError:
            rmse = float(np.sqrt(np.mean((p - o) ** 2)))
            corr = float("nan")
            cover = float(np.mean((l <= o) & (o <= h)))
        rows.append(StationIndexRow(sid, len(o), bias, wnr, nr, rmse, corr, cover))
    return rows


# ---------------------------------------------------------------------------
# stars


def index_medians(rows) -> dict:
    return {name: float(np.nanmedian([getattr(r, name) for r in rows])) for name in INDEX_NAMES}


def star_rating(tables: dict, nominal=0.95) -> dict:
    """Map model -> 1..3 stars from per-station index tables.

    Each index ranks the models by its median over stations (|NMBF|, WNNR,
    NNR, RMSE and |coverage - nominal| ascending, correlation descending;
    ties share the better rank). The six ranks are averaged, the averages
    ranked again, and positions in the top, middle and bottom thirds get
    3, 2 and 1 stars.
    """
    models = list(tables)
    if len(models) < 2:
        raise ConfigError("star rating needs at least two models")
    med = {m: index_medians(tables[m]) for m in models}
    scores = {
        "nmbf": [abs(med[m]["nmbf"]) for m in models],
        "wnnr": [med[m]["wnnr"] for m in models],
        "nnr": [med[m]["nnr"] for m in models],
        "rmse": [med[m]["rmse"] for m in models],
        "corr": [-med[m]["corr"] for m in models],
        "coverage": [abs(med[m]["coverage"] - nominal) for m in models],
    }
    ranks = []
    for values in scores.values():
        v = np.array(values, dtype=float)
        if np.all(np.isnan(v)):
            continue
        # an undefined index ranks last
        v = np.where(np.isnan(v), np.inf, v)
        ranks.append(rankdata(v, method="min"))
    avg = np.mean(ranks, axis=0)
    # round so that float noise in the averages cannot split a tie
    position = rankdata(np.round(avg, 12), method="min")
    M = len(models)
    top, mid = math.ceil(M / 3), math.ceil(2 * M / 3)
    return {m: 3 if p <= top else 2 if p <= mid else 1 for m, p in zip(models, position)}


# ---------------------------------------------------------------------------
# exploratory residual analysis


def _ols(ds: Dataset, cols=None):
    obs = ds.observed
    X = ds.X[obs] if cols is None else ds.X[obs][:, cols]
    y = ds.z[obs]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DomainError("covariate matrix is rank deficient")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta, X, y


@dataclass
class ResidualDiagnostics:
    beta: np.ndarray
    cloud: np.ndarray = field(repr=False)  # rows (i, j, distance_km, corr)
    acf: np.ndarray = field(repr=False)  # (d, max_lag + 1)
    site_ids: list = field(default_factory=list)

    def cloud_lowess(self, frac=2.0 / 3.0):
        """Lowess smooth of the correlation cloud: ``(distance, fitted)`` sorted by distance."""
        from statsmodels.nonparametric.smoothers_lowess import lowess

        fit = lowess(self.cloud[:, 3], self.cloud[:, 2], frac=frac, return_sorted=True)
        return fit[:, 0], fit[:, 1]

    def lowess_at(self, distance, frac=2.0 / 3.0) -> float:
        x, y = self.cloud_lowess(frac)
        return float(np.interp(distance, x, y))

    def median_acf(self, lag) -> float:
        return float(np.nanmedian(self.acf[:, lag]))


def residual_diagnostics(ds: Dataset, max_lag=20) -> ResidualDiagnostics:
    """Pooled OLS residuals: pairwise site correlations and per-site ACFs."""
    from .inference.diagnostics import autocorrelation

    beta, _, _ = _ols(ds)
    R = ds.z - ds.X @ beta
    d = ds.d
    H = spatial_distance_matrix(ds.sites)
    cloud = []
    for i in range(d):
        for j in range(i + 1, d):
            both = ~(np.isnan(R[i]) | np.isnan(R[j]))
            if both.sum() < 3:
                continue
            c = np.corrcoef(R[i, both], R[j, both])[0, 1]
            cloud.append((i, j, H[i, j], c))
    acf = np.full((d, max_lag + 1), np.nan)
    for i in range(d):
        r = R[i]
        # missing days are set to the series mean (zero contribution)
        r = np.where(np.isnan(r), np.nanmean(r), r)
        a = autocorrelation(r, max_lag)
        acf[i, : a.size] = a
    return ResidualDiagnostics(beta, np.array(cloud, dtype=float).reshape(-1, 4), acf, ds.site_ids)


@dataclass
class AicEntry:
    covariates: tuple
    n_params: int
    aic: float


def aic_screen(ds: Dataset, candidates) -> tuple[list, list]:
    """Rank candidate covariate sets by pooled-OLS AIC (ascending).

    Each candidate lists non-intercept covariate names; the intercept is
    always included. The parameter count is the number of coefficients
    plus the error variance. Returns ``(ranked entries, skipped sets)``
    where skipped sets were rank deficient.
    """
    lookup = {n: j for j, n in enumerate(ds.covariate_names)}
    entries, skipped = [], []
    for cand in candidates:
        names = tuple(cand)
        unknown = [n for n in names if n not in lookup]
        if unknown:
            raise ConfigError(f"unknown covariate(s) {unknown}")
        cols = [0] + [lookup[n] for n in names if lookup[n] != 0]
        try:
            beta, X, y = _ols(ds, cols)
        except DomainError:
            skipped.append(names)
            continue
        n = y.size
        s2 = float(np.sum((y - X @ beta) ** 2)) / n
        loglik = -0.5 * n * (math.log(2 * math.pi * s2) + 1.0)
        p = len(cols) + 1
        entries.append(AicEntry(names, p, 2 * p - 2 * loglik))
    entries.sort(key=lambda e: e.aic)
    return entries, skipped


def write_residual_diagnostics(diag: ResidualDiagnostics, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"cloud": out / "diagnostics_cloud.csv", "acf": out / "diagnostics_acf.csv"}
    with paths["cloud"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_i", "site_j", "distance_km", "corr"])
        for i, j, h, c in diag.cloud:
            w.writerow([diag.site_ids[int(i)], diag.site_ids[int(j)], repr(float(h)), repr(float(c))])
    with paths["acf"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "lag", "acf"])
        for sid, row in zip(diag.site_ids, diag.acf):
            for lag, v in enumerate(row):
                w.writerow([sid, lag, repr(float(v))])
    return paths


# ---------------------------------------------------------------------------
# comparison report


@dataclass
class ComparisonRow:
    model: str
    n_params_excl_beta: int
    n_mh: int
    biggest_matrix: str
    estimation_s_per_iter: float
    prediction_s_per_iter: float
    index_median: dict
    index_iqr: dict
    stars: int
    status: str = "ok"


@dataclass
class ComparisonReport:
    rows: list
    rule: str = STAR_RULE_VERSION
    failures: dict = field(default_factory=dict)


def comparison_report(kinds, timings: dict, tables: dict, stars: dict, failures=None) -> ComparisonReport:
    """Assemble one row per model; structural columns come from :func:`model_meta`.

    ``timings`` maps model -> ``(estimation s/iter, prediction s/iter)``.
    Models listed in ``failures`` (model -> message) get a row with only
    the structural columns filled.
    """
    failures = dict(failures or {})
    rows = []
    missing = []
    for kind in kinds:
        kind = ModelKind.parse(kind)
        meta = model_meta(kind)
        label = kind.label
        if label in failures:
            rows.append(ComparisonRow(label, meta.n_params_excl_beta, meta.n_mh_params, meta.biggest_matrix,
                                      float("nan"), float("nan"), {}, {}, 0, "failed"))
            continue
        if label not in tables or label not in timings:
            missing.append(label)
            continue
        table = tables[label]
        med, iqr = {}, {}
        for name in INDEX_NAMES:
            v = np.array([getattr(r, name) for r in table], dtype=float)
            if np.all(np.isnan(v)):
                med[name] = iqr[name] = float("nan")
                continue
            q1, q2, q3 = np.nanquantile(v, [0.25, 0.5, 0.75])
            med[name], iqr[name] = float(q2), float(q3 - q1)
        est, pred = timings[label]
        rows.append(ComparisonRow(label, meta.n_params_excl_beta, meta.n_mh_params, meta.biggest_matrix,
                                  float(est), float(pred), med, iqr, int(stars.get(label, 0))))
    if missing:
        raise ConfigError(f"missing index tables or timings for: {', '.join(missing)}")
    return ComparisonReport(rows, failures=failures)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_indexes_csv(tables: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "site_id", "n_days"] + list(INDEX_NAMES))
        for model, rows in tables.items():
            for r in rows:
                w.writerow([model, r.site_id, r.n_days] + [repr(float(getattr(r, n))) for n in INDEX_NAMES])
    return path


def write_report(report: ComparisonReport, out_dir) -> dict:
    """Write ``report.csv``, ``report.txt`` and ``report_timing.csv``.

    Wall-clock timings vary between runs, so they are kept out of
    ``report.csv``/``report.txt`` which are byte-reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "txt": out / "report.txt", "timing": out / "report_timing.csv"}
    cols = ["model", "n_params_excl_beta", "n_mh", "biggest_matrix"]
    idx_cols = [f"{n}_median" for n in INDEX_NAMES] + [f"{n}_iqr" for n in INDEX_NAMES]
    with paths["csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + idx_cols + ["stars", "status"])
        for r in report.rows:
            vals = [r.index_median.get(n, float("nan")) for n in INDEX_NAMES]
            vals += [r.index_iqr.get(n, float("nan")) for n in INDEX_NAMES]
            w.writerow([r.model, r.n_params_excl_beta, r.n_mh, r.biggest_matrix]
                       + [repr(float(v)) for v in vals] + [r.stars, r.status])
    with paths["timing"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "estimation_s_per_iter", "prediction_s_per_iter"])
        for r in report.rows:
            w.writerow([r.model, repr(r.estimation_s_per_iter), repr(r.prediction_s_per_iter)])
    lines = [f"Model comparison ({report.rule})", ""]
    header = ["", *[r.model for r in report.rows]]
    table = [
        ["N. of parameters (beta excluded)", *[str(r.n_params_excl_beta) for r in report.rows]],
        ["  estimated by MH", *[str(r.n_mh) for r in report.rows]],
        ["Biggest matrix inverted", *[r.biggest_matrix for r in report.rows]],
    ]
    for n in INDEX_NAMES:
        table.append([f"median {n}", *[_fmt(r.index_median.get(n, float("nan"))) for r in report.rows]])
    table.append(["Prediction capability", *["*" * r.stars if r.stars else "-" for r in report.rows]])
    widths = [max(len(row[c]) for row in [header] + table) for c in range(len(header))]
    for row in [header] + table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    if report.failures:
        lines.append("")
        for model, msg in sorted(report.failures.items()):
            lines.append(f"{model} failed: {msg}")
    lines.append("Timings per iteration are in report_timing.csv.")
    paths["txt"].write_text("\n".join(lines) + "\n")
    return paths
