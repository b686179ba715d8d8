from __future__ import annotations

import hashlib
import json
import typing as t
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

type InputFormat = t.Literal["tsv", "csv", "movielens_dat", "synthetic"]
type EncoderBackend = t.Literal["transformer", "gru"]
type ModulationMode = t.Literal["unit_mean_mult", "literal_mult", "additive", "off"]
type TimeEmbeddingKind = t.Literal["sinusoidal", "learned"]

INPUT_FORMATS = ("tsv", "csv", "movielens_dat", "synthetic")
ENCODER_BACKENDS = ("transformer", "gru")
MODULATION_MODES = ("unit_mean_mult", "literal_mult", "additive", "off")
TIME_EMBEDDINGS = ("sinusoidal", "learned")

STEPS_GRID = (1, 5, 10, 15, 20, 25, 30, 35)
ALPHA_GRID = (5.0, 10.0, 15.0, 20.0)
BETA_GRID = (1.0, 2.0, 3.0, 4.0, 5.0)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _one_of(value: str, allowed: tuple[str, ...], name: str) -> None:
    _require(
        value in allowed, f"{name} must be one of {', '.join(allowed)}; got {value!r}."
    )


@dataclass(slots=True, frozen=True)
class DataConfig:
    path: str | None = None
    """Interaction log to ingest; unused for the synthetic format."""

    format: InputFormat = "tsv"
    strict: bool = True
    """Raise on malformed rows instead of skipping them."""

    min_count: int = 5
    iterative_filter: bool = True
    max_len: int = 50
    all_prefixes: bool = False
    """Train on every prefix of each sequence instead of the last pair only."""

    head_fraction: float = 0.2
    synthetic_users: int = 2000
    synthetic_items: int = 300
    synthetic_min_len: int = 8
    synthetic_max_len: int = 30

    def __post_init__(self):
        _one_of(self.format, INPUT_FORMATS, "data.format")
        _require(self.min_count >= 1, "data.min_count must be at least 1.")
        _require(self.max_len >= 1, "data.max_len must be at least 1.")
        _require(
            0.0 < self.head_fraction < 1.0, "data.head_fraction must lie in (0, 1)."
        )
        _require(self.synthetic_users >= 1, "data.synthetic_users must be positive.")
        _require(self.synthetic_items >= 2, "data.synthetic_items must be at least 2.")
        _require(
            2 <= self.synthetic_min_len <= self.synthetic_max_len,
            "data.synthetic_min_len must be >= 2 and <= data.synthetic_max_len.",
        )


@dataclass(slots=True, frozen=True)
class ModelConfig:
    dim: int = 128
    layers: int = 4
    heads: int = 4
    embed_dropout: float = 0.1
    hidden_dropout: float = 0.3
    encoder: EncoderBackend = "transformer"
    gru_layers: int = 1
    flow_hidden: int | None = None
    """Hidden width of the vector-field MLP; defaults to 2 * dim."""

    time_embedding: TimeEmbeddingKind = "sinusoidal"
    init_std: float = 0.02

    def __post_init__(self):
        _one_of(self.encoder, ENCODER_BACKENDS, "model.encoder")
        _one_of(self.time_embedding, TIME_EMBEDDINGS, "model.time_embedding")
        _require(
            self.dim >= 2 and self.dim % 2 == 0,
            "model.dim must be an even integer >= 2.",
        )
        _require(self.layers >= 1, "model.layers must be at least 1.")
        _require(
            self.heads >= 1 and self.dim % self.heads == 0,
            "model.heads must divide model.dim.",
        )
        _require(self.gru_layers >= 1, "model.gru_layers must be at least 1.")
        for name in ("embed_dropout", "hidden_dropout"):
            _require(
                0.0 <= getattr(self, name) < 1.0, f"model.{name} must lie in [0, 1)."
            )
        _require(
            self.flow_hidden is None or self.flow_hidden >= 1,
            "model.flow_hidden must be positive.",
        )
        _require(self.init_std > 0, "model.init_std must be positive.")

    @property
    def hidden(self) -> int:
        return self.flow_hidden if self.flow_hidden is not None else 2 * self.dim


@dataclass(slots=True, frozen=True)
class ModulationConfig:
    delta: float = 0.001
    """Mean offset and variance of the Gaussian modulation."""

    mode: ModulationMode = "unit_mean_mult"

    def __post_init__(self):
        _one_of(self.mode, MODULATION_MODES, "modulation.mode")
        _require(
            self.delta > 0, f"modulation.delta must be positive; got {self.delta}."
        )


@dataclass(slots=True, frozen=True)
class TrainConfig:
    alpha: float = 10.0
    beta: float = 2.0
    lr: float = 0.005
    batch_size: int = 512
    patience: int = 10
    max_epochs: int = 200
    use_prior_loss: bool = True
    use_cfm_loss: bool = True
    use_align_loss: bool = True
    grad_clip: float | None = None
    detach_flow: bool = True
    """Keep the flow-matching loss from moving the encoder and item table."""

    alpha_grid: tuple[float, ...] = ALPHA_GRID
    beta_grid: tuple[float, ...] = BETA_GRID
    workers: int = 1
    """Threads used to shard validation users."""

    def __post_init__(self):
        _require(
            self.alpha >= 0 and self.beta >= 0,
            "train.alpha and train.beta must be >= 0.",
        )
        _require(self.lr > 0, "train.lr must be positive.")
        _require(self.batch_size >= 1, "train.batch_size must be at least 1.")
        _require(self.patience >= 1, "train.patience must be at least 1.")
        _require(self.max_epochs >= 1, "train.max_epochs must be at least 1.")
        _require(
            self.grad_clip is None or self.grad_clip > 0,
            "train.grad_clip must be positive.",
        )
        _require(self.workers >= 1, "train.workers must be at least 1.")
        _require(all(a >= 0 for a in self.alpha_grid), "train.alpha_grid must be >= 0.")
        _require(all(b >= 0 for b in self.beta_grid), "train.beta_grid must be >= 0.")


@dataclass(slots=True, frozen=True)
class SamplerConfig:
    steps: int = 10
    grid: tuple[int, ...] = STEPS_GRID
    mask_history: bool = False
    """Drop already-seen items from rankings; off for protocol runs."""

    dump_top: int = 100

    def __post_init__(self):
        _require(
            self.steps >= 1, f"sampler.steps must be at least 1; got {self.steps}."
        )
        _require(
            len(self.grid) > 0 and all(s >= 1 for s in self.grid),
            "sampler.grid entries must be >= 1.",
        )
        _require(self.dump_top >= 1, "sampler.dump_top must be at least 1.")


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "modulation": ModulationConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
}


def _build[C](cls: type[C], mapping: object, prefix: str) -> C:
    """Build a config dataclass from a plain mapping, rejecting unknown keys."""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, Mapping):
        where = prefix.rstrip(".") or "<root>"
        raise ConfigError(
            f"Config section {where} must be a mapping, got {type(mapping).__name__}."
        )
    known = {f.name: f for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(str(k) for k in mapping if k not in known)
    if unknown:
        raise ConfigError(
            f"Unknown config key(s): {', '.join(prefix + k for k in unknown)}."
        )
    kwargs: dict[str, object] = {}
    for name, value in mapping.items():
        if cls is RunConfig and name in SECTIONS:
            value = _build(SECTIONS[name], value, f"{name}.")
        elif isinstance(known[name].default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(
            f"Invalid config section {prefix.rstrip('.') or '<root>'}: {exc}"
        ) from exc


@dataclass(slots=True, frozen=True)
class RunConfig:
    seed: int = 42
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        _require(
            isinstance(self.seed, int) and self.seed >= 0,
            "seed must be a non-negative integer.",
        )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object] | None) -> t.Self:
        return _build(cls, mapping, "")

    def to_dict(self) -> dict[str, t.Any]:
        return asdict(self)

    def with_overrides(self, overrides: Mapping[str, object]) -> RunConfig:
        """Apply dotted-key overrides such as ``{"train.alpha": 5}``."""
        raw = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.rpartition(".")
            target = raw
            if section:
                if section not in SECTIONS:
                    raise ConfigError(f"Unknown config key: {key}.")
                target = raw[section]
            if name not in target:
                raise ConfigError(f"Unknown config key: {key}.")
            target[name] = value
        return RunConfig.from_mapping(raw)

    def config_hash(self) -> str:
        """Hash of everything that shapes a trained model (not output or sampler)."""
        raw = self.to_dict()
        raw.pop("output_dir")
        raw.pop("sampler")
        return mapping_hash(raw)


def mapping_hash(mapping: Mapping[str, t.Any]) -> str:
    """First 12 hex digits of the SHA-256 of the canonical JSON of ``mapping``."""
    canonical = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def load_config(path: str | Path | None) -> RunConfig:
    """Read a YAML run configuration; ``None`` yields the defaults."""
    if path is None:
        return RunConfig()
    try:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"Cannot parse config file {path}: {exc}") from exc
    return RunConfig.from_mapping(loaded)


def parse_override(text: str) -> tuple[str, object]:
    """Parse a ``key=value`` CLI override; the value is read as YAML."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Override {text!r} must look like key=value.")
    return key.strip(), yaml.safe_load(value)
