"""Run configuration: one flat namespace covering model, data, and training.

A run is fully described by a YAML mapping of the fields below; command-line
``--set key=value`` overrides are parsed with the same YAML scalar rules, so
``--set learning_rate=3e-4`` and ``--set decoder_channels=[128,64,32,16,8]``
both do what they look like. Unknown keys fail fast instead of being ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, fields
from pathlib import Path

import yaml

from .efficientnet import SCALING, normalize_variant
from .errors import ConfigError
from .training import TrainConfig
from .transforms import AugmentationPolicy, identity_policy
from .unetpp import (
    DEFAULT_DECODER_CHANNELS,
    DecoderConfig,
    SegmentationModel,
    build_model,
    parse_prune_level,
)


@dataclass
class RunConfig:
    # model
    encoder: str = "b0"
    encoder_weights: str | None = None  # path to encoder weights, or None/"none"
    use_squeeze_excite: bool = True
    decoder_channels: tuple[int, ...] = DEFAULT_DECODER_CHANNELS
    deep_supervision: bool = True
    supervision_mode: str = "final"
    prune_level: int | None = None
    upsample_mode: str = "bilinear"
    norm: str = "batch"
    head: str = "sigmoid"
    # data
    tile_size: int = 256
    threshold: float = 0.5
    augment: bool = True
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    rotate90_prob: float = 0.25
    # optimization
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss: str = "dice"
    loss_heads: str = "mean"
    smooth: float = 1.0
    seed: int = 0
    workers: int = 0

    _FLOAT_FIELDS = ("learning_rate", "smooth", "threshold",
                     "horizontal_flip_prob", "vertical_flip_prob",
                     "rotate90_prob")
    _INT_FIELDS = ("tile_size", "epochs", "batch_size", "seed", "workers")
    _BOOL_FIELDS = ("use_squeeze_excite", "deep_supervision", "augment")

    def __post_init__(self):
        # YAML 1.1 reads bare "1e30" as a string, so coerce scalars here
        for name in self._FLOAT_FIELDS + self._INT_FIELDS:
            cast = float if name in self._FLOAT_FIELDS else int
            try:
                setattr(self, name, cast(getattr(self, name)))
            except (TypeError, ValueError):
                raise ConfigError(
                    f"{name} must be a {cast.__name__}, "
                    f"got {getattr(self, name)!r}"
                ) from None
        for name in self._BOOL_FIELDS:
            value = getattr(self, name)
            if isinstance(value, int) and value in (0, 1):
                setattr(self, name, bool(value))
            elif not isinstance(value, bool):
                raise ConfigError(f"{name} must be a bool, got {value!r}")
        self.encoder = normalize_variant(self.encoder)
        if self.encoder not in SCALING:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.prune_level = parse_prune_level(self.prune_level)
        if self.tile_size < 32 or self.tile_size % 32:
            raise ConfigError(
                f"tile_size must be a positive multiple of 32, got {self.tile_size}"
            )
        # adapters run the remaining field validation
        self.decoder_config()
        self.train_config()

    @property
    def variant(self) -> str:
        return self.encoder

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_dict(cls, mapping: dict) -> "RunConfig":
        if not isinstance(mapping, dict):
            raise ConfigError(f"config must be a mapping, got {type(mapping).__name__}")
        unknown = sorted(set(mapping) - set(cls.field_names()))
        if unknown:
            raise ConfigError(
                f"unknown config keys: {', '.join(unknown)} "
                f"(valid keys: {', '.join(cls.field_names())})"
            )
        return cls(**mapping)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(loaded or {})

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        """New config with ``key=value`` strings applied over this one."""
        merged = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            if key not in self.field_names():
                raise ConfigError(f"unknown config key {key!r} in override")
            try:
                merged[key] = yaml.safe_load(raw)
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse override {item!r}: {exc}") from exc
        return RunConfig.from_dict(merged)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["decoder_channels"] = list(self.decoder_channels)
        return out

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            decoder_channels=self.decoder_channels,
            deep_supervision=self.deep_supervision,
            prune_level=self.prune_level,
            upsample_mode=self.upsample_mode,
            threshold=self.threshold,
            norm=self.norm,
            head=self.head,
            supervision_mode=self.supervision_mode,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_run_dict(self.to_dict())

    def policy(self) -> AugmentationPolicy:
        if not self.augment:
            return identity_policy()
        return AugmentationPolicy(
            horizontal_flip_prob=self.horizontal_flip_prob,
            vertical_flip_prob=self.vertical_flip_prob,
            rotate90_prob=self.rotate90_prob,
            seed=self.seed,
        )

    def build_model(self) -> SegmentationModel:
        model = build_model(self.encoder, self.decoder_config(),
                            use_squeeze_excite=self.use_squeeze_excite)
        if self.encoder_weights not in (None, "none", ""):
            from .efficientnet import load_pretrained

            load_pretrained(model.encoder, self.encoder_weights)
        return model
