"""Experiment configuration: a TOML document with a fixed schema.

Top level keys::

    scenario    "CIL" | "TIL" | "DIL"
    method      "core" | "frozen" | "finetune"
    seeds       list of run seeds (class order, split, intervention init, SGD)
    alphas      list of imbalance factors, 1.0 means balanced
    out         output directory
    similarity  "cosine" | "dot"
    k_centers   k-means centers per domain (DIL)

and the tables ``[data]``, ``[encoder]``, ``[pretrain]``, ``[intervention]``
and ``[hyper]`` whose keys mirror :class:`DataSpec`, :class:`EncoderSpec`,
:class:`~core_reft.train.TrainHyper` (twice) and
:class:`~core_reft.reft.InterventionConfig`.  Unknown keys anywhere are a
:class:`~core_reft.errors.ConfigError`.  TOML has no null, so "unset" paths
are empty strings and a zero ``clip_norm`` disables clipping.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError
from .nn import EncoderConfig
from .reft import InterventionConfig
from .train import TrainHyper

SCENARIOS = ("CIL", "TIL", "DIL")
METHODS = ("core", "frozen", "finetune")


@dataclass
class DataSpec:
    source: str = "synthetic"
    # JSON manifest of the downstream data when source == "manifest"
    manifest: str = ""
    # optional manifest of pretraining data (only needed without a checkpoint)
    base_manifest: str = ""
    n_classes: int = 25
    dim: int = 64
    per_class: int = 200
    gap_strength: float = 2.0
    seed: int = 1993
    base_classes: int = 64
    base_per_class: int = 40
    tokens: int = 8
    n_domains: int = 3
    inc: int = 5
    test_frac: float = 0.2


@dataclass
class EncoderSpec:
    checkpoint: str = ""
    depth: int = 4
    dim: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    input_mode: str = "tokens"
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    num_patches: int = 8
    token_dim: int = 8
    seed: int = 0

    def encoder_config(self) -> EncoderConfig:
        kw = dataclasses.asdict(self)
        kw.pop("checkpoint")
        return EncoderConfig(**kw)


def _pretrain_default():
    return TrainHyper(epochs=40)


def _intervention_default():
    # every block, largest rank that keeps the edits under 2% of the encoder's weights
    return InterventionConfig(layers=[0, 1, 2, 3], rank=3, positions="all")


@dataclass
class ExperimentConfig:
    scenario: str = "CIL"
    method: str = "core"
    seeds: list = field(default_factory=lambda: [1993])
    alphas: list = field(default_factory=lambda: [1.0])
    out: str = "runs/default"
    similarity: str = "cosine"
    k_centers: int = 5
    data: DataSpec = field(default_factory=DataSpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    pretrain: TrainHyper = field(default_factory=_pretrain_default)
    intervention: InterventionConfig = field(default_factory=_intervention_default)
    hyper: TrainHyper = field(default_factory=TrainHyper)

    def validate(self) -> "ExperimentConfig":
        """Check cross-field constraints; raises :class:`ConfigError`."""
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario: expected one of {SCENARIOS}, got {self.scenario!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if not self.alphas or any(not 0 < a <= 1 for a in self.alphas):
            raise ConfigError(f"alphas: each value must lie in (0, 1], got {self.alphas}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError(f"similarity: expected 'cosine' or 'dot', got {self.similarity!r}")
        if self.k_centers < 1:
            raise ConfigError("k_centers: must be >= 1")
        d = self.data
        if d.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source: expected 'synthetic' or 'manifest', got {d.source!r}")
        if d.source == "manifest" and not d.manifest:
            raise ConfigError("data.manifest: required when data.source = 'manifest'")
        if d.source == "manifest" and not (self.encoder.checkpoint or d.base_manifest):
            raise ConfigError("encoder.checkpoint or data.base_manifest is required with a manifest source")
        if d.inc < 1:
            raise ConfigError("data.inc: must be >= 1")
        if not 0 < d.test_frac < 1:
            raise ConfigError("data.test_frac: must lie in (0, 1)")
        if self.scenario == "DIL" and d.source == "synthetic" and d.n_domains < 2:
            raise ConfigError("data.n_domains: DIL needs at least 2 domains")
        try:
            enc = self.encoder.encoder_config()
            if d.source == "synthetic" and enc.input_dim != d.dim:
                raise ConfigError(f"data.dim {d.dim} does not match the encoder input size {enc.input_dim}")
            self.intervention.validate(depth=enc.depth, dim=enc.dim)
            self.hyper.validate()
            self.pretrain.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for hyper in ("pretrain", "hyper"):
            if out[hyper]["clip_norm"] is None:
                out[hyper]["clip_norm"] = 0.0
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _build(cls, raw, "")

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)


def _coerce(value, default, key):
    # the default value's type is the schema
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
        if ok and default:
            value = [_coerce(v, default[0], f"{key}[{i}]") for i, v in enumerate(value)]
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, raw, prefix, template=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a table")
    template = template if template is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = getattr(template, f.name)
        key = prefix + f.name
        if f.name not in raw:
            kwargs[f.name] = default
        elif dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), raw[f.name], key + ".", default)
        else:
            kwargs[f.name] = _coerce(raw[f.name], default, key)
    return cls(**kwargs)
