"""Run configuration: a YAML file with nested sections, all optional.

Example::

    seed: 7
    models: [A1, B, C]
    simulation: {model: A1, d: 10, T: 50}
    data: {holdout_count: 3}
    mcmc: {n_iter: 2000, burn_in: 1000}
    prediction: {level: 0.95, index_scale: concentration}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .covariance import DEFAULT_MAX_DENSE_DIM
from .dataset import DEFAULT_MISSING_CAP
from .errors import ConfigError
from .inference.mcmc import McmcConfig
from .models import ALL_MODELS, ModelKind, PriorSpec


@dataclass
class DataConfig:
    sites: Optional[str] = None
    observations: Optional[str] = None
    covariates: Optional[str] = None
    log_transform: bool = True
    standardize: bool = True
    missing_cap: float = DEFAULT_MISSING_CAP
    holdout: list = field(default_factory=list)
    holdout_count: int = 0

    @property
    def from_files(self) -> bool:
        return self.sites is not None


@dataclass
class SimulationConfig:
    model: str = "A1"
    d: int = 10
    T: int = 50
    k: int = 3
    extent_km: list = field(default_factory=lambda: [200.0, 200.0])
    missing_rate: float = 0.0
    b_omega: str = "static"
    truth: dict = field(default_factory=dict)


@dataclass
class PredictionConfig:
    targets: Optional[str] = None
    level: float = 0.95
    index_scale: str = "concentration"


@dataclass
class RunConfig:
    seed: int = 0
    models: list = field(default_factory=lambda: [k.label for k in ALL_MODELS])
    out: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    mcmc: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    max_dense_dim: int = DEFAULT_MAX_DENSE_DIM
    base_dir: str = "."

    def model_kinds(self) -> list:
        return [ModelKind.parse(m) for m in self.models]

    def mcmc_config(self) -> McmcConfig:
        try:
            return McmcConfig(**{**self.mcmc, "seed": self.seed})
        except TypeError as exc:
            raise ConfigError(f"mcmc: {exc}") from None

    def prior_spec(self) -> PriorSpec:
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in self.prior.items()}
        try:
            return PriorSpec(**values)
        except TypeError as exc:
            raise ConfigError(f"prior: {exc}") from None

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """SHA-256 of the resolved configuration (output directory excluded)."""
        d = self.as_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> None:
        self.model_kinds()
        self.mcmc_config()
        self.prior_spec()
        if not 0 < self.prediction.level < 1:
            raise ConfigError("prediction.level must lie in (0, 1)")
        if self.prediction.index_scale not in ("concentration", "log"):
            raise ConfigError("prediction.index_scale must be 'concentration' or 'log'")
        ModelKind.parse(self.simulation.model)
        if self.data.from_files:
            for name in ("sites", "observations", "covariates"):
                value = getattr(self.data, name)
                if value is None:
                    raise ConfigError(f"data.{name} is required when data.sites is given")
                if not self.resolve(value).is_file():
                    raise ConfigError(f"data.{name}: no such file {value}")
        if self.prediction.targets is not None and not self.resolve(self.prediction.targets).is_file():
            raise ConfigError(f"prediction.targets: no such file {self.prediction.targets}")


_SECTIONS = {"data": DataConfig, "simulation": SimulationConfig, "prediction": PredictionConfig}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**values)


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    raw = dict(raw or {})
    for name, cls in _SECTIONS.items():
        if name in raw:
            raw[name] = _build(cls, raw[name] or {}, name)
    for name in ("mcmc", "prior"):
        if name in raw and not isinstance(raw[name] or {}, dict):
            raise ConfigError(f"{name} must be a mapping")
        raw[name] = dict(raw.get(name) or {})
    if "models" in raw and isinstance(raw["models"], str):
        raw["models"] = [m.strip() for m in raw["models"].split(",") if m.strip()]
    try:
        cfg = _build(RunConfig, {**raw, "base_dir": str(base_dir)}, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return config_from_dict(raw or {}, base_dir=path.parent)
