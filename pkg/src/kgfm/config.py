"""
Experiment configuration.

Everything that determines a run lives in one YAML file (see
``kgfm/default.yaml``). The environment may override paths only:

    KGFM_CONFIG       config file to load when none is given
    KGFM_OUTPUT_DIR   run directory
    LOG_LEVEL         logging level for the CLI and the MCP server
"""

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml
from dotenv import load_dotenv

from .errors import ConfigError
from .registry import ANNUAL, MODULES, OBSERVED_TARGETS, REGISTRY, SELECTOR_OBSERVABLES

# Load .env for local runs; the real environment still wins
try:
    load_dotenv()
except Exception:
    pass

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
DEFAULT_CONFIG_PATH = Path(__file__).with_name("default.yaml")
CONFIG_VERSION = "1"


@dataclass(frozen=True)
class DataConfig:
    n_sites: int = 20
    T: int = 365
    validation_fraction: float = 0.2


@dataclass(frozen=True)
class EncoderConfig:
    hidden1: int = 64
    hidden2: int = 64
    q_size: int = 8
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 4


@dataclass(frozen=True)
class EmbedderConfig:
    d_model: int = 64
    d_tok: int = 32
    d_ff: int = 64
    max_len: int = 512


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 64
    epochs: int = 40
    lr: float = 1e-3
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    window: int = 30
    windows_per_epoch: int = 32
    batch_size: int = 2


@dataclass(frozen=True)
class SelectorConfig:
    hidden: int = 64
    grid_step: float = 0.1
    window: int = 30
    presets_per_epoch: int = 128
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 4
    # observables synthesized per training window; each kept with keep_probability
    observables: List[str] = field(default_factory=lambda: list(SELECTOR_OBSERVABLES))
    keep_probability: float = 0.7


@dataclass(frozen=True)
class DownstreamConfig:
    # first-PBM (PBM-A) weight per module; kept off the training grid
    weights: Dict[str, float] = field(default_factory=lambda: {
        "carbon": 0.75, "water": 0.35, "nitrogen": 0.25, "thermal": 0.65})
    targets: List[str] = field(default_factory=lambda: list(OBSERVED_TARGETS))
    noise_fraction: float = 0.05
    n_sites: int = 6
    T: int = 365
    boundary: int = 300
    seed_offset: int = 1000


@dataclass(frozen=True)
class PathsConfig:
    output_dir: str = "runs/default"


@dataclass(frozen=True)
class ExperimentConfig:
    config_version: str = CONFIG_VERSION
    seed: int = 7
    data: DataConfig = field(default_factory=DataConfig)
    pbm: Dict[str, Any] = field(default_factory=dict)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)


_SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "embedder": EmbedderConfig,
    "decoder": DecoderConfig,
    "selector": SelectorConfig,
    "downstream": DownstreamConfig,
    "paths": PathsConfig,
}


def _section(cls: Any, raw: Mapping[str, Any], name: str) -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return cls(**raw)


def _validate(cfg: ExperimentConfig) -> None:
    positive = {
        "data.n_sites": cfg.data.n_sites, "data.T": cfg.data.T,
        "encoder.hidden1": cfg.encoder.hidden1, "encoder.hidden2": cfg.encoder.hidden2,
        "encoder.q_size": cfg.encoder.q_size, "encoder.batch_size": cfg.encoder.batch_size,
        "embedder.d_model": cfg.embedder.d_model, "embedder.d_tok": cfg.embedder.d_tok,
        "embedder.d_ff": cfg.embedder.d_ff, "embedder.max_len": cfg.embedder.max_len,
        "decoder.hidden": cfg.decoder.hidden, "decoder.window": cfg.decoder.window,
        "decoder.batch_size": cfg.decoder.batch_size, "selector.hidden": cfg.selector.hidden,
        "selector.window": cfg.selector.window, "selector.batch_size": cfg.selector.batch_size,
        "downstream.n_sites": cfg.downstream.n_sites,
    }
    for key, value in positive.items():
        if value <= 0:
            raise ConfigError(f"{key} must be positive, got {value}")
    if cfg.data.T < 30:
        raise ConfigError(f"data.T must be at least 30, got {cfg.data.T}")
    if not 0 < cfg.data.validation_fraction < 1:
        raise ConfigError("data.validation_fraction must be in (0, 1)")
    if not 1 <= cfg.downstream.boundary < cfg.downstream.T:
        raise ConfigError("downstream.boundary must lie inside the downstream day range")
    if set(cfg.downstream.weights) != set(MODULES):
        raise ConfigError(f"downstream.weights must name every module {MODULES}")
    for t in cfg.downstream.targets:
        if t not in REGISTRY:
            raise ConfigError(f"downstream.targets: unknown variable '{t}'")
    if not cfg.downstream.targets:
        raise ConfigError("downstream.targets must not be empty")
    for t in cfg.selector.observables:
        if t not in REGISTRY:
            raise ConfigError(f"selector.observables: unknown variable '{t}'")
        if t in ANNUAL:
            raise ConfigError(f"selector.observables: '{t}' is an annual aggregate and leaves most windows empty")
    if not cfg.selector.observables or not 0 < cfg.selector.keep_probability <= 1:
        raise ConfigError("selector.observables must be non-empty and keep_probability in (0, 1]")
    if "constants" not in cfg.pbm or "pbm_b_factors" not in cfg.pbm:
        raise ConfigError("[pbm] needs 'constants' and 'pbm_b_factors'")


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _section(cls, raw[name] or {}, name)
    for name in ("config_version", "seed", "pbm"):
        if name in raw:
            kwargs[name] = raw[name]
    cfg = ExperimentConfig(**kwargs)
    if str(cfg.config_version) != CONFIG_VERSION:
        raise ConfigError(f"config_version {cfg.config_version!r} is not supported (expected {CONFIG_VERSION})")
    _validate(cfg)
    return cfg


def load_config(path: Optional[os.PathLike] = None, seed: Optional[int] = None,
                output_dir: Optional[str] = None) -> ExperimentConfig:
    """Read the YAML config, then apply path overrides and ``seed``."""
    path = Path(path or os.getenv("KGFM_CONFIG") or DEFAULT_CONFIG_PATH)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e

    cfg = config_from_dict(raw)
    env_out = os.getenv("KGFM_OUTPUT_DIR")
    if output_dir or env_out:
        cfg = dataclasses.replace(cfg, paths=PathsConfig(output_dir=output_dir or env_out))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    return cfg


def config_snapshot(cfg: ExperimentConfig) -> Dict[str, Any]:
    return copy.deepcopy(dataclasses.asdict(cfg))


def replace(cfg: ExperimentConfig, **sections: Any) -> ExperimentConfig:
    """``dataclasses.replace`` over nested sections: ``replace(cfg, encoder={"epochs": 2})``."""
    changes: Dict[str, Any] = {}
    for name, value in sections.items():
        current = getattr(cfg, name)
        if isinstance(value, Mapping) and dataclasses.is_dataclass(current):
            changes[name] = dataclasses.replace(current, **value)
        else:
            changes[name] = value
    return dataclasses.replace(cfg, **changes)
