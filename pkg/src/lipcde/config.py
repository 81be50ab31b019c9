"""Experiment configuration: strict YAML parsing, defaults, and hashing.

Every key has a documented default and unknown keys fail fast, so a config
file is always a complete, reproducible description of a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cde import CdeConfig
from .model import ModelConfig
from .sim import SimConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralSection:
    cutoff_d0: float | None = None  # None: transform length / 8
    rnn_hidden: int = 32
    z_dim: int = 1
    conv_kernel: int = 3


@dataclass(frozen=True)
class OutcomeSection:
    decoder_hidden: tuple[int, int] = (64, 32)
    propensity_hidden: int = 32
    clip_percentiles: tuple[float, float] = (1.0, 99.0)


@dataclass(frozen=True)
class EvalSection:
    missing_rates: tuple[float, ...] = (0.0, 0.15, 0.3)
    missing_seed: int = 1234
    gammas: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8)
    record_timing: bool = False  # keep metrics.json byte-stable by default


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    sim: SimConfig = field(default_factory=SimConfig)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    cde: CdeConfig = field(default_factory=lambda: CdeConfig(solver="euler", step=0.5))
    outcome: OutcomeSection = field(default_factory=OutcomeSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if not self.run_id:
            raise ConfigError("run_id must be non-empty")
        self.sim.validate()
        self.cde.validate()
        self.train.validate()
        for rate in self.eval.missing_rates:
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"missing rate must lie in [0, 1), got {rate}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            k_covariates=self.sim.k_covariates,
            n_treatments=self.sim.n_treatments,
            z_dim=self.spectral.z_dim,
            rnn_hidden=self.spectral.rnn_hidden,
            cutoff_d0=self.spectral.cutoff_d0,
            conv_kernel=self.spectral.conv_kernel,
            cde=self.cde,
            decoder_hidden=self.outcome.decoder_hidden,
            propensity_hidden=self.outcome.propensity_hidden,
            clip_percentiles=self.outcome.clip_percentiles,
        )

    def canonical_dict(self) -> dict:
        def plain(v):
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [plain(x) for x in v]
            return v

        return plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        text = json.dumps(self.canonical_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


_TUPLE_FIELDS = {"decoder_hidden", "clip_percentiles", "missing_rates", "gammas", "split"}


def _build_section(cls, data: dict, where: str):
    valid = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(valid)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section '{where}'")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in section '{where}': {exc}") from exc


_SECTIONS = {
    "sim": SimConfig,
    "spectral": SpectralSection,
    "cde": CdeConfig,
    "outcome": OutcomeSection,
    "train": TrainConfig,
    "eval": EvalSection,
}


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a YAML experiment config (unknown keys rejected)."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse YAML config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")

    top_known = {"run_id", "output_dir", *_SECTIONS}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")

    kwargs: dict = {}
    for name in ("run_id", "output_dir"):
        if name in raw:
            if not isinstance(raw[name], str):
                raise ConfigError(f"{name} must be a string")
            kwargs[name] = raw[name]
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        kwargs[name] = _build_section(cls, section, name)
    cfg = ExperimentConfig(**kwargs)
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def dump_default_config() -> str:
    """YAML text of the full default configuration (documentation aid)."""
    cfg = ExperimentConfig()
    return yaml.safe_dump(cfg.canonical_dict(), sort_keys=False)
