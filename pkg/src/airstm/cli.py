"""Command-line entry point: ``airstm simulate|fit|predict|validate|compare``.

Every command is a pure function of the configuration file, the input files
and the seed. Each output directory receives a ``manifest.json`` recording
the configuration digest, seed and package version.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_from_dict, load_config
from .dataset import (
    Dataset,
    Site,
    load_dataset,
    log_transform,
    split_validation,
    standardize,
    write_dataset,
)
from .errors import AirstmError, ConfigError, SchemaError
from .evaluation import (
    comparison_report,
    residual_diagnostics,
    star_rating,
    station_indexes,
    write_indexes_csv,
    write_report,
    write_residual_diagnostics,
)
from .gaussmath import rng_stream
from .inference import diagnostics, run_mcmc, write_chain_csv, write_diagnostics
from .models import ALL_MODELS, SCALAR_PARAMS, ModelKind, ParamState
from .prediction import (
    PredictionTarget,
    predict,
    summarize_predictions,
    targets_from_dataset,
    write_predictions_csv,
)
from .simulator import default_truth, random_layout, simulate, to_natural

log = logging.getLogger("airstm")

# fixed sub-stream keys so a model's chain does not depend on which other
# models were requested in the same run
_SIM, _FIT, _PRED = 0, 1, 2


def _model_key(kind) -> int:
    return list(ALL_MODELS).index(kind)


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_manifest(cfg: RunConfig, out: Path, command: str, files) -> None:
    _write_json(
        out / "manifest.json",
        {
            "command": command,
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "version": __version__,
            "models": [m.label for m in cfg.model_kinds()],
            "files": sorted(str(Path(f).relative_to(out)) for f in files),
        },
    )


# ---------------------------------------------------------------------------
# inputs


def simulation_truth(cfg: RunConfig) -> ParamState:
    sim = cfg.simulation
    kind = ModelKind.parse(sim.model)
    truth = default_truth(kind, sim.k)
    overrides = dict(sim.truth)
    beta = overrides.pop("beta", None)
    unknown = sorted(set(overrides) - set(SCALAR_PARAMS[kind]))
    if unknown:
        raise ConfigError(f"simulation.truth has unknown parameter(s) for {kind.label}: {', '.join(unknown)}")
    scalars = {**truth.scalars, **{k: float(v) for k, v in overrides.items()}}
    if beta is not None:
        if len(beta) != sim.k:
            raise ConfigError(f"simulation.truth.beta must have {sim.k} entries")
        truth = ParamState(kind, np.array(beta, dtype=float), scalars)
    else:
        truth = ParamState(kind, truth.beta, scalars)
    return truth


def simulated_dataset(cfg: RunConfig) -> tuple[Dataset, ParamState]:
    sim = cfg.simulation
    rng = rng_stream(cfg.seed, _SIM)
    truth = simulation_truth(cfg)
    layout = random_layout(truth, sim.d, sim.T, rng, tuple(sim.extent_km), sim.missing_rate, sim.b_omega,
                           cfg.prior_spec())
    return simulate(truth.kind, layout, rng, max_dense_dim=cfg.max_dense_dim), truth


def input_dataset(cfg: RunConfig) -> Dataset:
    """Log-scale dataset from files, or from the simulation section."""
    if cfg.data.from_files:
        ds = load_dataset(cfg.resolve(cfg.data.sites), cfg.resolve(cfg.data.observations),
                          cfg.resolve(cfg.data.covariates), cfg.data.missing_cap)
        return log_transform(ds) if cfg.data.log_transform else ds
    ds, _ = simulated_dataset(cfg)
    return ds


def split_and_standardize(cfg: RunConfig, ds: Dataset):
    """Training/held-out split; covariates standardized with training statistics."""
    holdout = list(cfg.data.holdout)
    if cfg.data.holdout_count:
        if holdout:
            raise ConfigError("give either data.holdout or data.holdout_count, not both")
        holdout = ds.site_ids[ds.d - cfg.data.holdout_count:]
    train, test = split_validation(ds, holdout)
    record = None
    if cfg.data.standardize:
        train, record = standardize(train)
        if test.d:
            test = record.apply(test)
    return train, test, record


def read_targets(path, covariate_names, record) -> list:
    """Targets file: ``site_id,utmx_km,utmy_km,altitude_m,day,<covariates>``."""
    path = Path(path)
    names = list(covariate_names[1:])
    expected = ["site_id", "utmx_km", "utmy_km", "altitude_m", "day"] + names
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise SchemaError(f"{path}: header must be {','.join(expected)}")
        targets = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                site = Site(row[0], float(row[1]), float(row[2]), float(row[3]))
                x = np.array([1.0] + [float(v) for v in row[5:]])
                day = int(row[4])
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            if record is not None:
                x = record.apply_vector(covariate_names, x)
            targets.append(PredictionTarget(site, day, x))
    return targets


# ---------------------------------------------------------------------------
# pipeline pieces


def fit_models(cfg: RunConfig, train: Dataset, out: Path, kinds, keep_going=False):
    """Run one chain per model, writing chain and diagnostics CSVs.

    Returns ``(chains, failures, files)``; with ``keep_going`` a failing
    model is recorded instead of aborting the run.
    """
    mcmc_cfg = cfg.mcmc_config()
    prior = cfg.prior_spec()
    chains, failures, files = {}, {}, []
    for kind in kinds:
        label = kind.label
        log.info("fitting %s (%d iterations)", label, mcmc_cfg.n_iter)
        try:
            chain = run_mcmc(kind, train, prior, mcmc_cfg, rng_stream(cfg.seed, _FIT, _model_key(kind)),
                             max_dense_dim=cfg.max_dense_dim)
        except AirstmError as exc:
            if not keep_going:
                raise
            log.error("%s failed: %s", label, exc)
            failures[label] = str(exc)
            continue
        chains[label] = chain
        files.append(write_chain_csv(chain, out / f"chain_{label}.csv", mcmc_cfg.save_latent))
        if len(chain) >= 10:
            files += write_diagnostics(diagnostics(chain), out, f"chain_{label}").values()
    return chains, failures, files


def predict_models(cfg: RunConfig, chains: dict, train: Dataset, targets, out: Path):
    prior = cfg.prior_spec()
    summaries, seconds, files = {}, {}, []
    for label, chain in chains.items():
        kind = ModelKind.parse(label)
        pd = predict(chain, train, targets, rng_stream(cfg.seed, _PRED, _model_key(kind)), prior)
        summary = summarize_predictions(pd, cfg.prediction.level)
        summaries[label] = summary
        seconds[label] = pd.seconds_per_draw
        files.append(write_predictions_csv(summary, out / f"predictions_{label}.csv"))
    return summaries, seconds, files


def _timing_payload(chains, pred_seconds=None):
    out = {}
    for label, chain in chains.items():
        entry = {
            "estimation_s_per_iter": chain.seconds_per_iter,
            "n_iter": chain.n_iter,
            "burn_in": chain.burn_in,
        }
        if pred_seconds is not None and label in pred_seconds:
            entry["prediction_s_per_iter"] = pred_seconds[label]
        out[label] = entry
    return out


def _holdout_targets(cfg, test):
    if test.d == 0:
        raise ConfigError("no held-out sites; set data.holdout or data.holdout_count")
    return targets_from_dataset(test)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    ds, truth = simulated_dataset(cfg)
    files = list(write_dataset(to_natural(ds), out).values())
    _write_json(
        out / "truth.json",
        {
            "model": truth.kind.label,
            "beta": [float(b) for b in truth.beta],
            "covariates": list(ds.covariate_names),
            "scalars": {k: float(v) for k, v in truth.scalars.items()},
            "scale": "log",
        },
    )
    files.append(out / "truth.json")
    write_manifest(cfg, out, "simulate", files)
    return 0


def cmd_fit(cfg: RunConfig, out: Path) -> int:
    train, _, _ = split_and_standardize(cfg, input_dataset(cfg))
    chains, _, files = fit_models(cfg, train, out, cfg.model_kinds())
    _write_json(out / "timing.json", _timing_payload(chains))
    write_manifest(cfg, out, "fit", files)
    return 0


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    train, test, record = split_and_standardize(cfg, input_dataset(cfg))
    if cfg.prediction.targets is not None:
        targets = read_targets(cfg.resolve(cfg.prediction.targets), train.covariate_names, record)
    else:
        targets = _holdout_targets(cfg, test)
    chains, _, files = fit_models(cfg, train, out, cfg.model_kinds())
    _, seconds, pfiles = predict_models(cfg, chains, train, targets, out)
    _write_json(out / "timing.json", _timing_payload(chains, seconds))
    write_manifest(cfg, out, "predict", files + pfiles)
    return 0


def _validate(cfg, out, keep_going):
    ds = input_dataset(cfg)
    train, test, _ = split_and_standardize(cfg, ds)
    targets = _holdout_targets(cfg, test)
    chains, failures, files = fit_models(cfg, train, out, cfg.model_kinds(), keep_going)
    summaries, seconds, pfiles = predict_models(cfg, chains, train, targets, out)
    tables = {}
    for label, summary in summaries.items():
        tables[label] = station_indexes(test, summary, cfg.prediction.index_scale)
    files += pfiles
    files.append(write_indexes_csv(tables, out / "indexes.csv"))
    missing = int((~test.observed).sum())
    _write_json(out / "validation_counts.json", {
        "heldout_sites": test.d,
        "heldout_cells": int(test.d * test.n_days),
        "missing_cells_excluded": missing,
    })
    files.append(out / "validation_counts.json")
    return ds, train, chains, failures, tables, seconds, files


def cmd_validate(cfg: RunConfig, out: Path) -> int:
    _, _, chains, _, _, seconds, files = _validate(cfg, out, keep_going=False)
    _write_json(out / "timing.json", _timing_payload(chains, seconds))
    write_manifest(cfg, out, "validate", files)
    return 0


def cmd_compare(cfg: RunConfig, out: Path) -> int:
    _, train, chains, failures, tables, seconds, files = _validate(cfg, out, keep_going=True)
    diag = residual_diagnostics(train)
    files += write_residual_diagnostics(diag, out).values()
    stars = star_rating(tables) if len(tables) >= 2 else {m: 3 for m in tables}
    timings = {label: (chains[label].seconds_per_iter, seconds[label]) for label in chains}
    report = comparison_report(cfg.model_kinds(), timings, tables, stars, failures)
    paths = write_report(report, out)
    files += [paths["csv"], paths["txt"]]
    _write_json(out / "timing.json", _timing_payload(chains, seconds))
    write_manifest(cfg, out, "compare", files)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "validate": cmd_validate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airstm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="YAML run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--models", help="comma-separated model list, e.g. A1,A3-1,C")
    parser.add_argument("--iters", type=int, help="total MCMC iterations")
    parser.add_argument("--burnin", type=int, help="burn-in iterations")
    parser.add_argument("--thin", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if args.models:
        cfg.models = [m.strip() for m in args.models.split(",") if m.strip()]
    for flag, key in ((args.iters, "n_iter"), (args.burnin, "burn_in"), (args.thin, "thin")):
        if flag is not None:
            cfg.mcmc[key] = flag
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except AirstmError as exc:
        print(f"airstm {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
