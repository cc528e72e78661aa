"""Data model, CSV ingestion, transformations and site geometry.

Observations live in a ``(d, T)`` array with ``NaN`` marking missing cells,
covariates in a ``(d, T, k)`` array whose first column is the intercept.
Whenever a ``(d, T)`` field is flattened to a vector the order is
site-fastest within day, i.e. ``index = t * d + i`` (0-based), which is what
``field.T.ravel()`` produces.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateCovariateError,
    DomainError,
    MissingnessCapError,
    ParseError,
    SchemaError,
    UnknownSiteError,
)

INTERCEPT = "intercept"
DEFAULT_MISSING_CAP = 0.20


@dataclass(frozen=True)
class Site:
    id: str
    x_km: float
    y_km: float
    altitude_m: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x_km, self.y_km, self.altitude_m)):
            raise DomainError(f"site {self.id!r} has non-finite coordinates")


@dataclass
class Dataset:
    sites: list[Site]
    covariate_names: list[str]
    X: np.ndarray
    z: np.ndarray
    scale: str = "natural"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        d = len(self.sites)
        if self.X.ndim != 3 or self.X.shape[0] != d or self.X.shape[2] != len(self.covariate_names):
            raise SchemaError(
                f"covariate array shape {self.X.shape} does not match "
                f"{d} sites and {len(self.covariate_names)} covariates"
            )
        if self.z.shape != self.X.shape[:2]:
            raise SchemaError(f"observation shape {self.z.shape} != {self.X.shape[:2]}")
        if self.scale not in ("log", "natural"):
            raise SchemaError(f"unknown scale {self.scale!r}")
        ids = [s.id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise SchemaError("site ids must be unique")

    @property
    def d(self) -> int:
        return len(self.sites)

    @property
    def n_days(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return self.X.shape[2]

    @property
    def observed(self) -> np.ndarray:
        """Boolean ``(d, T)`` mask of present cells."""
        return ~np.isnan(self.z)

    @property
    def site_ids(self) -> list[str]:
        return [s.id for s in self.sites]

    def coords(self) -> np.ndarray:
        return np.array([[s.x_km, s.y_km] for s in self.sites], dtype=float).reshape(-1, 2)

    def missing_fraction(self) -> np.ndarray:
        if self.n_days == 0:
            return np.zeros(self.d)
        return np.isnan(self.z).mean(axis=1)

    def subset_sites(self, ids) -> "Dataset":
        index = {s.id: n for n, s in enumerate(self.sites)}
        rows = [index[i] for i in ids]
        return replace(
            self,
            sites=[self.sites[r] for r in rows],
            X=self.X[rows].copy(),
            z=self.z[rows].copy(),
        )


@dataclass(frozen=True)
class StandardizationRecord:
    names: tuple[str, ...]
    mean: np.ndarray = field(repr=False)
    sd: np.ndarray = field(repr=False)

    def apply(self, ds: Dataset) -> Dataset:
        cols = _columns_for(ds, self.names)
        X = ds.X.copy()
        X[:, :, cols] = (X[:, :, cols] - self.mean) / self.sd
        return replace(ds, X=X)

    def invert(self, ds: Dataset) -> Dataset:
        cols = _columns_for(ds, self.names)
        X = ds.X.copy()
        X[:, :, cols] = X[:, :, cols] * self.sd + self.mean
        return replace(ds, X=X)

    def apply_vector(self, names, x) -> np.ndarray:
        """Standardize one covariate vector laid out as ``names``."""
        x = np.array(x, dtype=float)
        lookup = {n: j for j, n in enumerate(names)}
        for j, name in enumerate(self.names):
            x[lookup[name]] = (x[lookup[name]] - self.mean[j]) / self.sd[j]
        return x


def _columns_for(ds, names):
    lookup = {n: j for j, n in enumerate(ds.covariate_names)}
    try:
        return [lookup[n] for n in names]
    except KeyError as exc:
        raise SchemaError(f"dataset lacks covariate {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# ingestion


def _read_rows(path, expected_prefix):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if header[: len(expected_prefix)] != expected_prefix:
            raise ParseError(path, 1, f"header must start with {','.join(expected_prefix)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, [c.strip() for c in row]))
    return header, rows


def _float(path, lineno, text, what):
    try:
        return float(text)
    except ValueError:
        raise ParseError(path, lineno, f"cannot parse {what} {text!r}") from None


def _day(path, lineno, text):
    try:
        day = int(text)
    except ValueError:
        raise ParseError(path, lineno, f"day must be an integer, got {text!r}") from None
    if day < 1:
        raise ParseError(path, lineno, f"day must be >= 1, got {day}")
    return day


def load_dataset(sites_path, observations_path, covariates_path, missing_cap=DEFAULT_MISSING_CAP) -> Dataset:
    """Read the three CSV files into a :class:`Dataset` on the natural scale.

    The number of days is the largest day index in the covariate file, and
    every (site, day) pair up to it must have a covariate row. Observation
    rows that are absent, or whose value field is empty, become missing.
    """
    _, site_rows = _read_rows(sites_path, ["id", "utmx_km", "utmy_km", "altitude_m"])
    sites = []
    for lineno, row in site_rows:
        sites.append(
            Site(
                row[0],
                _float(sites_path, lineno, row[1], "utmx_km"),
                _float(sites_path, lineno, row[2], "utmy_km"),
                _float(sites_path, lineno, row[3], "altitude_m"),
            )
        )
    if not sites:
        raise SchemaError(f"{sites_path}: no sites")
    index = {}
    for n, s in enumerate(sites):
        if s.id in index:
            raise SchemaError(f"{sites_path}: duplicate site id {s.id!r}")
        index[s.id] = n

    header, cov_rows = _read_rows(covariates_path, ["site_id", "day"])
    names = [INTERCEPT] + header[2:]
    if len(set(names)) != len(names):
        raise SchemaError(f"{covariates_path}: duplicate covariate names")
    cov = {}
    for lineno, row in cov_rows:
        if row[0] not in index:
            raise UnknownSiteError(f"{covariates_path}:{lineno}: unknown site id {row[0]!r}")
        key = (index[row[0]], _day(covariates_path, lineno, row[1]))
        if key in cov:
            raise SchemaError(f"{covariates_path}:{lineno}: duplicate row for site {row[0]!r} day {row[1]}")
        cov[key] = [_float(covariates_path, lineno, c, h) for c, h in zip(row[2:], header[2:])]
    if not cov:
        raise SchemaError(f"{covariates_path}: no covariate rows")
    n_days = max(day for _, day in cov)
    d, k = len(sites), len(names)
    X = np.ones((d, n_days, k))
    for i in range(d):
        for t in range(1, n_days + 1):
            try:
                X[i, t - 1, 1:] = cov[(i, t)]
            except KeyError:
                raise SchemaError(
                    f"{covariates_path}: no covariates for site {sites[i].id!r} day {t}"
                ) from None

    _, obs_rows = _read_rows(observations_path, ["site_id", "day", "value"])
    z = np.full((d, n_days), np.nan)
    seen = set()
    for lineno, row in obs_rows:
        if row[0] not in index:
            raise UnknownSiteError(f"{observations_path}:{lineno}: unknown site id {row[0]!r}")
        day = _day(observations_path, lineno, row[1])
        if day > n_days:
            raise SchemaError(f"{observations_path}:{lineno}: day {day} beyond covariate window {n_days}")
        key = (index[row[0]], day)
        if key in seen:
            raise SchemaError(f"{observations_path}:{lineno}: duplicate observation for site {row[0]!r} day {day}")
        seen.add(key)
        if row[2] == "" or row[2].lower() in ("na", "nan"):
            continue
        z[key[0], day - 1] = _float(observations_path, lineno, row[2], "value")

    ds = Dataset(sites, names, X, z, scale="natural")
    check_missingness(ds, missing_cap)
    return ds


def check_missingness(ds: Dataset, cap=DEFAULT_MISSING_CAP) -> None:
    frac = ds.missing_fraction()
    bad = [(s.id, f) for s, f in zip(ds.sites, frac) if f > cap + 1e-12]
    if bad:
        listing = ", ".join(f"{sid} ({f:.1%})" for sid, f in bad)
        raise MissingnessCapError(f"missing fraction above cap {cap:.0%}: {listing}")


def _fmt(x) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, out_dir) -> dict[str, Path]:
    """Write ``ds`` in the three-file CSV layout that :func:`load_dataset` reads."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "sites": out / "sites.csv",
        "observations": out / "observations.csv",
        "covariates": out / "covariates.csv",
    }
    with paths["sites"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "utmx_km", "utmy_km", "altitude_m"])
        for s in ds.sites:
            w.writerow([s.id, _fmt(s.x_km), _fmt(s.y_km), _fmt(s.altitude_m)])
    with paths["observations"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "day", "value"])
        for t in range(ds.n_days):
            for i, s in enumerate(ds.sites):
                if not np.isnan(ds.z[i, t]):
                    w.writerow([s.id, t + 1, _fmt(ds.z[i, t])])
    if ds.covariate_names[0] != INTERCEPT:
        raise SchemaError("first covariate must be the intercept")
    with paths["covariates"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "day"] + list(ds.covariate_names[1:]))
        for t in range(ds.n_days):
            for i, s in enumerate(ds.sites):
                w.writerow([s.id, t + 1] + [_fmt(v) for v in ds.X[i, t, 1:]])
    return paths


# ---------------------------------------------------------------------------
# transformations


def log_transform(ds: Dataset) -> Dataset:
    if ds.scale != "natural":
        raise DomainError("dataset is already on the log scale")
    present = ds.observed
    bad = np.argwhere(present & ~(ds.z > 0))
    if len(bad):
        i, t = bad[0]
        raise DomainError(
            f"nonpositive observation {ds.z[i, t]!r} at site {ds.sites[i].id!r} day {t + 1}"
        )
    z = ds.z.copy()
    z[present] = np.log(z[present])
    return replace(ds, z=z, scale="log")


def standardize(ds: Dataset) -> tuple[Dataset, StandardizationRecord]:
    """Centre and scale every non-intercept covariate over the observed cells.

    Uses the sample standard deviation (divisor ``n - 1``).
    """
    present = ds.observed
    if present.sum() < 2:
        raise DegenerateCovariateError("need at least two observed cells to standardize")
    names = tuple(n for n in ds.covariate_names if n != INTERCEPT)
    cols = _columns_for(ds, names)
    values = ds.X[present][:, cols]
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    flat = [n for n, s, m in zip(names, sd, mean) if not s > 1e-12 * max(1.0, abs(m))]
    if flat:
        raise DegenerateCovariateError(f"zero-variance covariate(s): {', '.join(flat)}")
    record = StandardizationRecord(names, mean, sd)
    return record.apply(ds), record


def spatial_distance_matrix(sites) -> np.ndarray:
    """Euclidean distances in km between all pairs of sites."""
    xy = np.array([[s.x_km, s.y_km] for s in sites], dtype=float).reshape(-1, 2)
    diff = xy[:, None, :] - xy[None, :, :]
    H = np.sqrt((diff**2).sum(axis=-1))
    np.fill_diagonal(H, 0.0)
    return H


def distances_to(sites, x_km, y_km) -> np.ndarray:
    xy = np.array([[s.x_km, s.y_km] for s in sites], dtype=float).reshape(-1, 2)
    return np.hypot(xy[:, 0] - x_km, xy[:, 1] - y_km)


def split_validation(ds: Dataset, holdout_ids) -> tuple[Dataset, Dataset]:
    """Partition sites into (training, held-out) datasets."""
    holdout_ids = list(holdout_ids)
    known = set(ds.site_ids)
    unknown = [h for h in holdout_ids if h not in known]
    if unknown:
        raise UnknownSiteError(f"unknown holdout site id(s): {', '.join(unknown)}")
    held = set(holdout_ids)
    train_ids = [s for s in ds.site_ids if s not in held]
    if len(train_ids) < 2 and held:
        raise ConfigError(f"holdout leaves {len(train_ids)} training site(s); need at least 2")
    hold_ids = [s for s in ds.site_ids if s in held]
    return ds.subset_sites(train_ids), ds.subset_sites(hold_ids)
