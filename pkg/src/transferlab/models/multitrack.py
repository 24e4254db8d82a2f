"""Multi-track grid networks: depth x width residual grids with one
classification head per track.

The grid has ``depth`` rows and ``width`` columns ("tracks"). All tracks
share a 3x3 stem. Row r of track j applies a basic residual block to track
j's previous-row output; the block output is then fused with the same-row
outputs of all earlier tracks (channel concatenation followed by a 1x1
convolution back to the row's planned channel count, plus batchnorm/ReLU).
Track 1 has nothing to fuse and stays a plain residual stack. Each track
ends in global average pooling and its own affine head, so head j sees the
features of tracks 1..j and nothing later — shallower heads trade model
capacity for fewer track-specific late layers.

Rows follow a ResNet-style channel schedule derived from the stem width:
channels double each row up to 8x the stem, with stride 2 on rows 2-4.
A custom per-row (channels, stride) plan can override this.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn

from .base import (
    BUILD_LOCK,
    HeadSelector,
    MultiHeadNetwork,
    ensemble_log_probs,
    init_conv_bn,
)
from .blocks import BasicBlock, _conv_bn

MAX_GRID = 8


def default_channel_plan(depth: int, stem_channels: int = 64) -> tuple[tuple[int, int], ...]:
    """Per-row (channels, stride): double channels up to 8x stem, stride 2
    on rows 2-4 (input resolution bottoms out at 4x4 for 32x32 inputs)."""
    plan = []
    for row in range(depth):
        channels = stem_channels * 2 ** min(row, 3)
        stride = 2 if 1 <= row <= 3 else 1
        plan.append((channels, stride))
    return tuple(plan)


@dataclass(frozen=True)
class MultiTrackConfig:
    """Architecture description for a depth x width grid network."""

    depth: int
    width: int
    stem_channels: int = 64
    channel_plan: Optional[tuple[tuple[int, int], ...]] = None
    fusion: str = "concat-1x1"
    num_classes: int = 10

    def __post_init__(self):
        if not (1 <= self.depth <= MAX_GRID):
            raise ValueError(f"depth must be in [1, {MAX_GRID}], got {self.depth}")
        if not (1 <= self.width <= MAX_GRID):
            raise ValueError(f"width must be in [1, {MAX_GRID}], got {self.width}")
        if self.stem_channels < 1:
            raise ValueError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.fusion != "concat-1x1":
            raise ValueError(f"unsupported fusion {self.fusion!r}")
        if self.channel_plan is not None:
            plan = tuple(tuple(row) for row in self.channel_plan)
            if len(plan) != self.depth:
                raise ValueError(
                    f"channel_plan has {len(plan)} rows but depth is {self.depth}"
                )
            for channels, stride in plan:
                if channels < 1 or stride not in (1, 2):
                    raise ValueError(f"bad channel_plan row ({channels}, {stride})")
            object.__setattr__(self, "channel_plan", plan)

    def resolved_plan(self) -> tuple[tuple[int, int], ...]:
        if self.channel_plan is not None:
            return self.channel_plan
        return default_channel_plan(self.depth, self.stem_channels)

    def to_dict(self) -> dict:
        return {
            "kind": "multitrack",
            "depth": self.depth,
            "width": self.width,
            "stem_channels": self.stem_channels,
            "channel_plan": [list(row) for row in self.resolved_plan()],
            "fusion": self.fusion,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiTrackConfig":
        plan = d.get("channel_plan")
        return cls(
            depth=d["depth"],
            width=d["width"],
            stem_channels=d.get("stem_channels", 64),
            channel_plan=tuple(tuple(row) for row in plan) if plan else None,
            fusion=d.get("fusion", "concat-1x1"),
            num_classes=d.get("num_classes", 10),
        )


class _Fusion(nn.Module):
    """Concatenate same-row feature maps and project back to row channels."""

    def __init__(self, n_inputs: int, channels: int):
        super().__init__()
        self.project = nn.Sequential(
            nn.Conv2d(n_inputs * channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, own: torch.Tensor, earlier: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.project(torch.cat([own, *earlier], dim=1))


class MultiTrackNet(MultiHeadNetwork):
    input_hw = (32, 32)

    def __init__(self, config: MultiTrackConfig):
        super().__init__()
        self.grid = config
        self.num_classes = config.num_classes
        self.head_count = config.width
        self.block_count = config.depth * config.width

        plan = config.resolved_plan()
        self.stem = _conv_bn(3, config.stem_channels, 3, padding=1)

        rows = []
        fusions = []
        in_ch = config.stem_channels
        for out_ch, stride in plan:
            rows.append(nn.ModuleList(
                BasicBlock(in_ch, out_ch, stride) for _ in range(config.width)
            ))
            # track j fuses its own block output with j earlier track outputs
            fusions.append(nn.ModuleList(
                _Fusion(j + 1, out_ch) if j > 0 else nn.Identity()
                for j in range(config.width)
            ))
            in_ch = out_ch
        self.rows = nn.ModuleList(rows)
        self.fusions = nn.ModuleList(fusions)
        self.heads = nn.ModuleList(
            nn.Linear(in_ch, config.num_classes) for _ in range(config.width)
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def _advance_row(self, row: int, states: Sequence[torch.Tensor],
                     width: int) -> list[torch.Tensor]:
        """Compute row ``row`` outputs for tracks 0..width-1 from the
        previous-row states (state[j] feeds track j's block)."""
        outs: list[torch.Tensor] = []
        for j in range(width):
            block_out = self.rows[row][j](states[j])
            if j == 0:
                outs.append(block_out)
            else:
                outs.append(self.fusions[row][j](block_out, outs[:j]))
        return outs

    def _head_logits(self, j: int, features: torch.Tensor) -> torch.Tensor:
        return self.heads[j](torch.flatten(self.pool(features), 1))

    def forward(self, x):
        width = self.grid.width
        states = [self.stem(x)] * width
        for row in range(self.grid.depth):
            states = self._advance_row(row, states, width)
        return torch.stack([self._head_logits(j, states[j]) for j in range(width)])

    def config(self) -> dict:
        return self.grid.to_dict()

    def track_modules(self, track: int) -> list[nn.Module]:
        """Modules owned exclusively by 1-based track ``track`` (its blocks,
        its fusions, its head; the stem is shared and belongs to no track)."""
        if not (1 <= track <= self.grid.width):
            raise ValueError(f"track must be in [1, {self.grid.width}], got {track}")
        j = track - 1
        mods: list[nn.Module] = [self.rows[r][j] for r in range(self.grid.depth)]
        mods += [self.fusions[r][j] for r in range(self.grid.depth)]
        mods.append(self.heads[j])
        return mods

    def track_parameters(self, track: int):
        for mod in self.track_modules(track):
            yield from mod.parameters()

    def stages(self, selector: HeadSelector) -> list[tuple[str, Callable]]:
        """Row-granularity chain for the sub-grid feeding ``selector``.

        Head j only depends on tracks 1..j, so its chain carries a tuple of
        j per-track states through each row; the ensemble carries all tracks
        and finishes with the averaged log-softmax of every head.
        """
        if selector.kind == "head":
            if selector.index > self.grid.width:
                raise ValueError(f"selector {selector} exceeds width {self.grid.width}")
            width = selector.index
        else:
            width = self.grid.width

        def make_row_stage(row: int):
            def stage(state):
                if row == 0:
                    states = [state] * width
                else:
                    states = list(state) if isinstance(state, tuple) else [state]
                outs = self._advance_row(row, states, width)
                return outs[0] if width == 1 else tuple(outs)
            return stage

        def final_stage(state):
            states = list(state) if isinstance(state, tuple) else [state]
            if selector.kind == "head":
                return self._head_logits(width - 1, states[-1])
            heads = torch.stack(
                [self._head_logits(j, states[j]) for j in range(width)]
            )
            return ensemble_log_probs(heads)

        stages: list[tuple[str, Callable]] = [("stem", self.stem)]
        stages += [(f"row{r + 1}", make_row_stage(r)) for r in range(self.grid.depth)]
        stages.append(("head", final_stage))
        return stages


def build_multitrack(config: MultiTrackConfig, seed: int = 0) -> MultiTrackNet:
    """Construct a grid network with seed-deterministic initial weights."""
    with BUILD_LOCK:
        torch.manual_seed(seed)
        model = MultiTrackNet(config)
        init_conv_bn(model)
    return model
