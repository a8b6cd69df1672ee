"""Compound-scaled MBConv encoders (b0-b4) with multi-resolution feature taps.

Each variant is the canonical width/depth scaling of the same seven-stage
MBConv trunk. The five taps sit at cumulative strides (2, 4, 8, 16, 32) and
feed the nested decoder. Layer structure follows the reference design
(squeeze-excitation from block input channels, divisor-8 channel rounding,
ceil-scaled repeats) so parameter counts line up with published models.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import CheckpointError, ConfigError, ShapeError

log = logging.getLogger(__name__)

STEM_CHANNELS = 32
HEAD_CHANNELS = 1280
CHANNEL_DIVISOR = 8
TAP_STRIDES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class ScalingCoefficients:
    variant: str
    width_multiplier: float
    depth_multiplier: float
    nominal_resolution: int  # informational; tiles are trained at 256 regardless
    dropout_rate: float


SCALING = {
    "b0": ScalingCoefficients("b0", 1.0, 1.0, 224, 0.2),
    "b1": ScalingCoefficients("b1", 1.0, 1.1, 240, 0.2),
    "b2": ScalingCoefficients("b2", 1.1, 1.2, 260, 0.3),
    "b3": ScalingCoefficients("b3", 1.2, 1.4, 300, 0.3),
    "b4": ScalingCoefficients("b4", 1.4, 1.8, 380, 0.4),
}

VARIANTS = tuple(SCALING)


@dataclass(frozen=True)
class StageSpec:
    kernel: int
    stride: int
    expansion_ratio: int
    output_channels: int
    repeats: int
    squeeze_excite_ratio: float


# Baseline (b0) trunk; width/depth multipliers scale channels and repeats.
BASE_STAGES = (
    StageSpec(3, 1, 1, 16, 1, 0.25),
    StageSpec(3, 2, 6, 24, 2, 0.25),
    StageSpec(5, 2, 6, 40, 2, 0.25),
    StageSpec(3, 2, 6, 80, 3, 0.25),
    StageSpec(5, 1, 6, 112, 3, 0.25),
    StageSpec(5, 2, 6, 192, 4, 0.25),
    StageSpec(3, 1, 6, 320, 1, 0.25),
)


@dataclass(frozen=True)
class EncoderSpec:
    variant: str
    stem_channels: int
    stages: tuple[StageSpec, ...]
    tap_indices: tuple[int, ...]
    head_channels: int
    dropout_rate: float

    @property
    def tap_channels(self) -> tuple[int, ...]:
        return tuple(self.stages[i].output_channels for i in self.tap_indices)

    def tap_strides(self) -> tuple[int, ...]:
        stride = 2  # stem
        cumulative = []
        for stage in self.stages:
            stride *= stage.stride
            cumulative.append(stride)
        return tuple(cumulative[i] for i in self.tap_indices)

    def total_blocks(self) -> int:
        return sum(s.repeats for s in self.stages)


def normalize_variant(name: str) -> str:
    """Accept 'b3' or 'efficientnet-b3' style keys."""
    key = name.lower().removeprefix("efficientnet-").removeprefix("efficientnet_")
    if key not in SCALING:
        raise ConfigError(
            f"unknown encoder variant {name!r}; expected one of "
            + ", ".join(f"efficientnet-{v}" for v in VARIANTS)
        )
    return key


def round_channels(channels: float, multiplier: float,
                   divisor: int = CHANNEL_DIVISOR) -> int:
    """Width-scale a channel count and round to the nearest divisor multiple,
    never dropping below 90% of the scaled value."""
    scaled = channels * multiplier
    rounded = max(divisor, int(scaled + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * scaled:
        rounded += divisor
    return rounded


def scale_repeats(repeats: int, multiplier: float) -> int:
    return int(math.ceil(multiplier * repeats))


def make_encoder_spec(variant: str, use_squeeze_excite: bool = True) -> EncoderSpec:
    """Resolve a variant name to its fully scaled stage list."""
    key = normalize_variant(variant)
    coeff = SCALING[key]
    stages = tuple(
        StageSpec(
            kernel=s.kernel,
            stride=s.stride,
            expansion_ratio=s.expansion_ratio,
            output_channels=round_channels(s.output_channels, coeff.width_multiplier),
            repeats=scale_repeats(s.repeats, coeff.depth_multiplier),
            squeeze_excite_ratio=s.squeeze_excite_ratio if use_squeeze_excite else 0.0,
        )
        for s in BASE_STAGES
    )
    # tap the deepest stage at each stride level
    stride = 2
    last_at_stride: dict[int, int] = {}
    for i, stage in enumerate(stages):
        stride *= stage.stride
        last_at_stride[stride] = i
    taps = tuple(last_at_stride[s] for s in TAP_STRIDES)
    spec = EncoderSpec(
        variant=key,
        stem_channels=round_channels(STEM_CHANNELS, coeff.width_multiplier),
        stages=stages,
        tap_indices=taps,
        head_channels=round_channels(HEAD_CHANNELS, coeff.width_multiplier),
        dropout_rate=coeff.dropout_rate,
    )
    assert spec.tap_strides() == TAP_STRIDES
    return spec


class SqueezeExcite(nn.Module):
    """Channel gating; squeeze width comes from the block's input channels."""

    def __init__(self, channels: int, block_in_channels: int, ratio: float):
        super().__init__()
        squeezed = max(1, int(block_in_channels * ratio))
        self.reduce = nn.Conv2d(channels, squeezed, 1)
        self.expand = nn.Conv2d(squeezed, channels, 1)
        self.act = nn.SiLU(inplace=True)

    def forward(self, x):
        s = x.mean((2, 3), keepdim=True)
        s = self.act(self.reduce(s))
        return x * torch.sigmoid(self.expand(s))


class MBConv(nn.Module):
    """Inverted-residual block: expand, depthwise, squeeze-excite, project."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int, expansion_ratio: int, se_ratio: float):
        super().__init__()
        mid = in_channels * expansion_ratio
        self.use_residual = stride == 1 and in_channels == out_channels

        if expansion_ratio != 1:
            self.expand = nn.Sequential(
                nn.Conv2d(in_channels, mid, 1, bias=False),
                nn.BatchNorm2d(mid, eps=1e-3),
                nn.SiLU(inplace=True),
            )
        else:
            self.expand = nn.Identity()
        self.depthwise = nn.Sequential(
            nn.Conv2d(mid, mid, kernel, stride=stride, padding=kernel // 2,
                      groups=mid, bias=False),
            nn.BatchNorm2d(mid, eps=1e-3),
            nn.SiLU(inplace=True),
        )
        self.se = (SqueezeExcite(mid, in_channels, se_ratio)
                   if se_ratio > 0 else nn.Identity())
        self.project = nn.Sequential(
            nn.Conv2d(mid, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels, eps=1e-3),
        )

    def forward(self, x):
        out = self.project(self.se(self.depthwise(self.expand(x))))
        if self.use_residual:
            out = out + x
        return out


class EfficientNet(nn.Module):
    """The scaled trunk, exposing the five-tap feature pyramid.

    With include_head=True the classification head (1x1 conv, pooling,
    dropout, fc) is attached as in the reference design; segmentation
    encoders are built without it.
    """

    def __init__(self, spec: EncoderSpec, include_head: bool = False,
                 num_classes: int = 1000):
        super().__init__()
        self.spec = spec
        self.stem = nn.Sequential(
            nn.Conv2d(3, spec.stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(spec.stem_channels, eps=1e-3),
            nn.SiLU(inplace=True),
        )
        stages = []
        in_ch = spec.stem_channels
        for stage in spec.stages:
            blocks = []
            for r in range(stage.repeats):
                blocks.append(MBConv(
                    in_channels=in_ch,
                    out_channels=stage.output_channels,
                    kernel=stage.kernel,
                    stride=stage.stride if r == 0 else 1,
                    expansion_ratio=stage.expansion_ratio,
                    se_ratio=stage.squeeze_excite_ratio,
                ))
                in_ch = stage.output_channels
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

        if include_head:
            self.head = nn.Sequential(
                nn.Conv2d(in_ch, spec.head_channels, 1, bias=False),
                nn.BatchNorm2d(spec.head_channels, eps=1e-3),
                nn.SiLU(inplace=True),
            )
            self.classifier = nn.Linear(spec.head_channels, num_classes)
            self.dropout = nn.Dropout(spec.dropout_rate)
        else:
            self.head = None
            self.classifier = None

        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels
                fan_out //= m.groups
                nn.init.normal_(m.weight, 0, math.sqrt(2.0 / fan_out))
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.uniform_(m.weight, -1.0 / math.sqrt(m.in_features),
                                 1.0 / math.sqrt(m.in_features))
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor,
                max_level: int | None = None) -> list[torch.Tensor]:
        """Return the feature pyramid (deepest tap last).

        max_level limits computation to the first max_level+1 taps, which is
        what decoder pruning relies on to skip the deep stages.
        """
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected NCHW batch with 3 channels, got {tuple(x.shape)}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeError(
                f"spatial size {tuple(x.shape[2:])} not divisible by 32"
            )
        last_tap = self.spec.tap_indices[-1 if max_level is None else max_level]
        taps = set(self.spec.tap_indices)
        features = []
        out = self.stem(x)
        for i, stage in enumerate(self.stages):
            if i > last_tap:
                break
            out = stage(out)
            if i in taps:
                features.append(out)
        return features

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise ConfigError("encoder was built without a classification head")
        out = self.head(self.forward(x)[-1])
        out = out.mean((2, 3))
        return self.classifier(self.dropout(out))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def make_encoder(variant: str, use_squeeze_excite: bool = True) -> EfficientNet:
    """Features-only encoder for the given variant."""
    return EfficientNet(make_encoder_spec(variant, use_squeeze_excite))


def extract_features(encoder: EfficientNet, batch: torch.Tensor) -> list[torch.Tensor]:
    """Feature pyramid for a normalized batch; see EfficientNet.forward."""
    return encoder(batch)


def load_pretrained(encoder: EfficientNet,
                    weights_source: str | Path | None) -> list[str]:
    """Load encoder weights from a saved state dict.

    Returns the (empty on success) mismatch report. A missing source is not
    an error: the encoder keeps its random initialization and a warning goes
    to the run log. Shape or name mismatches raise CheckpointError listing
    every offending tensor.
    """
    if weights_source is None or str(weights_source) in ("", "none"):
        log.warning("no encoder weights source given; keeping random initialization")
        return []
    path = Path(weights_source)
    if not path.exists():
        log.warning("encoder weights %s not found; keeping random initialization", path)
        return []
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = encoder.state_dict()
    mismatches = []
    for name, tensor in own.items():
        if name not in state:
            mismatches.append(f"missing from checkpoint: {name}")
        elif tuple(state[name].shape) != tuple(tensor.shape):
            mismatches.append(
                f"shape mismatch for {name}: checkpoint "
                f"{tuple(state[name].shape)} vs model {tuple(tensor.shape)}"
            )
    for name in state:
        if name not in own:
            mismatches.append(f"unexpected in checkpoint: {name}")
    if mismatches:
        raise CheckpointError(
            "encoder weights do not fit:\n  " + "\n  ".join(mismatches)
        )
    encoder.load_state_dict(state)
    return mismatches
