"""Convergence summaries: traces, autocorrelations, effective sample size."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .mcmc import Chain

MAX_LAG = 50


def autocorrelation(x, max_lag=MAX_LAG) -> np.ndarray:
    """Sample autocorrelation at lags ``0..max_lag`` (biased estimator).

    A constant series returns ``nan`` beyond lag 0.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    max_lag = min(max_lag, n - 1)
    xc = x - x.mean()
    denom = float(xc @ xc)
    out = np.full(max_lag + 1, np.nan)
    out[0] = 1.0
    if denom <= 0:
        return out
    for lag in range(1, max_lag + 1):
        out[lag] = float(xc[:-lag] @ xc[lag:]) / denom
    return out


def effective_sample_size(x) -> float:
    """Geyer initial-positive-sequence ESS; ``nan`` for a constant series."""
    x = np.asarray(x, dtype=float)
    n = x.size
    rho = autocorrelation(x, n - 1)
    if np.isnan(rho[-1]) and n > 1:
        return float("nan")
    tau = -1.0
    for m in range(0, n - 1, 2):
        pair = rho[m] + rho[m + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1.0 / n))


@dataclass
class ParamDiagnostics:
    name: str
    trace: np.ndarray
    acf: np.ndarray
    ess: float
    degenerate: bool
    acceptance: float

    def summary_row(self):
        t = self.trace
        return {
            "parameter": self.name,
            "mean": float(t.mean()),
            "sd": float(t.std(ddof=1)),
            "q025": float(np.quantile(t, 0.025)),
            "q975": float(np.quantile(t, 0.975)),
            "ess": self.ess,
            "degenerate": self.degenerate,
            "acceptance": self.acceptance,
        }


def diagnostics(chain: Chain, max_lag=MAX_LAG) -> list[ParamDiagnostics]:
    if len(chain) < 10:
        raise ConfigError(f"diagnostics need at least 10 retained draws, got {len(chain)}")
    out = []
    for name in chain.parameter_names():
        trace = chain.scalar_trace(name)
        acf = autocorrelation(trace, max_lag)
        ess = effective_sample_size(trace)
        out.append(
            ParamDiagnostics(
                name=name,
                trace=trace,
                acf=acf,
                ess=ess,
                degenerate=bool(np.isnan(ess) or np.ptp(trace) == 0),
                acceptance=chain.acceptance.get(name, float("nan")),
            )
        )
    return out


def write_diagnostics(report: list, out_dir, prefix: str) -> dict:
    """Write ``<prefix>_summary.csv``, ``<prefix>_acf.csv`` and ``<prefix>_trace.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{prefix}_{k}.csv" for k in ("summary", "acf", "trace")}
    with paths["summary"].open("w", newline="") as fh:
        rows = [p.summary_row() for p in report]
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    with paths["acf"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "lag", "acf"])
        for p in report:
            for lag, v in enumerate(p.acf):
                w.writerow([p.name, lag, repr(float(v))])
    with paths["trace"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw"] + [p.name for p in report])
        for n in range(len(report[0].trace)):
            w.writerow([n] + [repr(float(p.trace[n])) for p in report])
    return paths
