"""Nested dense-skip decoder lattice with deep supervision and pruning.

The lattice is the triangle of nodes (i, j) with i + j <= L - 1: row i is a
resolution level (row 0 the shallowest), column j the re-processing depth.
Column 0 holds the encoder taps; a node at j >= 1 concatenates every earlier
node of its row with the 2x-upsampled node one row down and one column back,
then applies two conv-norm-activation blocks. Prediction heads sit on row 0.

Pruning at level k keeps the ancestors of head k, i.e. the sub-triangle
i + j <= k, and is exact: it shares weights and computation order with the
full lattice, so the k = L-1 pruning reproduces the final head bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .efficientnet import EfficientNet, make_encoder
from .errors import ConfigError, ShapeError

Node = tuple[int, int]

DEFAULT_DECODER_CHANNELS = (256, 128, 64, 32, 16)


@dataclass
class DecoderConfig:
    # widths from the deepest decoder row to row 0 (top row last)
    decoder_channels: tuple[int, ...] = DEFAULT_DECODER_CHANNELS
    deep_supervision: bool = True
    prune_level: int | None = None  # k: predict from head k using nodes i+j <= k
    upsample_mode: str = "bilinear"  # or "nearest"
    threshold: float = 0.5
    norm: str = "batch"  # or "group"
    head: str = "sigmoid"  # or "softmax" (2-channel, channel 1 = building)
    supervision_mode: str = "final"  # inference: "final" head or "mean" of heads

    def __post_init__(self):
        self.decoder_channels = tuple(self.decoder_channels)
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.norm not in ("batch", "group"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.head not in ("sigmoid", "softmax"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.supervision_mode not in ("final", "mean"):
            raise ConfigError(f"unknown supervision_mode {self.supervision_mode!r}")


def parse_prune_level(value) -> int | None:
    """Accept None, an int, or the 'L3' spelling."""
    if value is None or value == "none":
        return None
    if isinstance(value, str):
        if not value.upper().startswith("L"):
            raise ConfigError(f"prune level {value!r} should look like 'L3'")
        value = value[1:]
    try:
        level = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse prune level {value!r}") from None
    if level < 1:
        raise ConfigError(f"prune level must be >= 1, got {level}")
    return level


@dataclass
class NodeGrid:
    """Pure lattice structure: nodes, wiring, channel bookkeeping."""

    depth: int
    node_channels: dict[Node, int]
    edges: dict[Node, tuple[Node, ...]] = field(default_factory=dict)

    @property
    def nodes(self) -> list[Node]:
        return sorted(self.node_channels)

    @property
    def decoder_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n[1] >= 1]

    def fan_in(self, node: Node) -> int:
        return len(self.edges.get(node, ()))

    def input_channels(self, node: Node) -> int:
        return sum(self.node_channels[src] for src in self.edges[node])

    def is_acyclic(self) -> bool:
        # every edge increases the column index, so a cycle would need a
        # column-decreasing edge somewhere
        return all(src[1] < node[1] for node, srcs in self.edges.items()
                   for src in srcs)

    def pruned(self, level: int) -> "NodeGrid":
        """Sub-lattice of the ancestors of head `level`: nodes i + j <= level."""
        if not 1 <= level <= self.depth - 1:
            raise ConfigError(
                f"prune level {level} outside 1..{self.depth - 1}"
            )
        keep = {n for n in self.node_channels if n[0] + n[1] <= level}
        return NodeGrid(
            depth=level + 1,
            node_channels={n: c for n, c in self.node_channels.items() if n in keep},
            edges={n: e for n, e in self.edges.items() if n in keep},
        )


def build_grid(depth: int, feature_channels: tuple[int, ...],
               config: DecoderConfig | None = None) -> NodeGrid:
    """Wire the dense-skip lattice for a pyramid with `depth` levels."""
    config = config or DecoderConfig()
    if depth < 2:
        raise ConfigError(f"lattice needs depth >= 2, got {depth}")
    if len(feature_channels) != depth:
        raise ConfigError(
            f"got {len(feature_channels)} feature channels for depth {depth}"
        )
    if len(config.decoder_channels) < depth - 1:
        raise ConfigError(
            f"decoder_channels has {len(config.decoder_channels)} entries, "
            f"need at least {depth - 1}"
        )

    def row_width(i: int) -> int:
        return config.decoder_channels[-(i + 1)]

    node_channels: dict[Node, int] = {}
    edges: dict[Node, tuple[Node, ...]] = {}
    for i in range(depth):
        node_channels[(i, 0)] = feature_channels[i]
    for j in range(1, depth):
        for i in range(depth - j):
            node_channels[(i, j)] = row_width(i)
            inputs = [(i, prev) for prev in range(j)] + [(i + 1, j - 1)]
            edges[(i, j)] = tuple(inputs)
    return NodeGrid(depth=depth, node_channels=node_channels, edges=edges)


@dataclass
class SegmentationOutput:
    """Per-pixel building probabilities plus any supervision-head maps."""

    probabilities: torch.Tensor          # (N, 1, H, W) in [0, 1]
    head_outputs: list[torch.Tensor]     # one map per head when supervision is on


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class NodeBlock(nn.Module):
    """Two 3x3 conv-norm-activation stages on the concatenated inputs."""

    def __init__(self, in_channels: int, out_channels: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            _norm_layer(norm, out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            _norm_layer(norm, out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class NestedDecoder(nn.Module):
    def __init__(self, grid: NodeGrid, config: DecoderConfig):
        super().__init__()
        self.grid = grid
        self.config = config
        self.blocks = nn.ModuleDict({
            f"x_{i}_{j}": NodeBlock(grid.input_channels((i, j)),
                                    grid.node_channels[(i, j)], config.norm)
            for (i, j) in grid.decoder_nodes
        })
        head_out = 1 if config.head == "sigmoid" else 2
        row0 = grid.node_channels[(0, 1)]
        last = grid.depth - 1
        head_columns = range(1, last + 1) if config.deep_supervision else [last]
        self.heads = nn.ModuleDict({
            f"head_{j}": nn.Conv2d(row0, head_out, 1) for j in head_columns
        })
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def _upsample(self, x: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x, scale_factor=2, mode=self.config.upsample_mode)

    def _squash(self, logits: torch.Tensor) -> torch.Tensor:
        # logits live at row-0 stride (2); bring them to input resolution first
        logits = self._upsample(logits)
        if self.config.head == "sigmoid":
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)[:, 1:2]

    def forward(self, features: list[torch.Tensor],
                max_depth: int | None = None) -> SegmentationOutput:
        last = self.grid.depth - 1 if max_depth is None else max_depth
        for i in range(last + 1):
            expected = self.grid.node_channels[(i, 0)]
            if features[i].shape[1] != expected:
                raise ShapeError(
                    f"node X^{i},0 expects {expected} channels, "
                    f"pyramid level {i} has {features[i].shape[1]}"
                )
        x: dict[Node, torch.Tensor] = {(i, 0): features[i] for i in range(last + 1)}
        for j in range(1, last + 1):
            for i in range(last - j + 1):
                inputs = [x[(i, prev)] for prev in range(j)]
                inputs.append(self._upsample(x[(i + 1, j - 1)]))
                x[(i, j)] = self.blocks[f"x_{i}_{j}"](torch.cat(inputs, dim=1))

        if max_depth is not None and f"head_{last}" not in self.heads:
            raise ConfigError(
                f"no head at column {last}; deep supervision is off"
            )
        if self.config.deep_supervision:
            heads = [self._squash(self.heads[f"head_{j}"](x[(0, j)]))
                     for j in range(1, last + 1)]
        else:
            heads = [self._squash(self.heads[f"head_{last}"](x[(0, last)]))]

        if self.config.deep_supervision and self.config.supervision_mode == "mean":
            probabilities = torch.stack(heads).mean(dim=0)
        else:
            probabilities = heads[-1]
        head_outputs = heads if self.config.deep_supervision else []
        return SegmentationOutput(probabilities=probabilities,
                                  head_outputs=head_outputs)


class SegmentationModel(nn.Module):
    """Encoder taps wired into the nested decoder; the end-to-end network."""

    def __init__(self, encoder: EfficientNet, config: DecoderConfig | None = None):
        super().__init__()
        self.config = config or DecoderConfig()
        self.encoder = encoder
        self.grid = build_grid(
            depth=len(encoder.spec.tap_indices),
            feature_channels=encoder.spec.tap_channels,
            config=self.config,
        )
        self.decoder = NestedDecoder(self.grid, self.config)

    def forward(self, batch: torch.Tensor,
                max_depth: int | None = None) -> SegmentationOutput:
        features = self.encoder(batch, max_level=max_depth)
        return self.decoder(features, max_depth=max_depth)


class PrunedModel(nn.Module):
    """View of a trained model that stops at supervision head `level`.

    Weights are shared with the parent; nothing is copied.
    """

    def __init__(self, parent: SegmentationModel, level: int):
        super().__init__()
        if not parent.config.deep_supervision:
            raise ConfigError("pruning requires deep supervision heads")
        if not 1 <= level <= parent.grid.depth - 1:
            raise ConfigError(
                f"prune level {level} outside 1..{parent.grid.depth - 1}"
            )
        self.parent = parent
        self.level = level
        self.grid = parent.grid.pruned(level)

    def forward(self, batch: torch.Tensor) -> SegmentationOutput:
        out = self.parent(batch, max_depth=self.level)
        # prediction comes from the level's own head, not a head average
        return SegmentationOutput(probabilities=out.head_outputs[-1],
                                  head_outputs=out.head_outputs)


def prune(model: SegmentationModel, level: int) -> PrunedModel:
    return PrunedModel(model, level)


def predict_mask(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Binary mask from a probability map; strictly greater than threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold {threshold} outside [0, 1]")
    if isinstance(probabilities, torch.Tensor):
        probabilities = probabilities.detach().cpu().numpy()
    return (np.asarray(probabilities) > threshold).astype(np.uint8)


def build_model(variant: str, config: DecoderConfig | None = None,
                use_squeeze_excite: bool = True) -> SegmentationModel:
    return SegmentationModel(make_encoder(variant, use_squeeze_excite), config)
