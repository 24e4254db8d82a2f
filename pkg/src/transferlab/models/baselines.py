"""Single-head baseline classifiers for 32x32 inputs.

Three families, each adapted to CIFAR geometry (3x3 stem, no early
downsampling, global average pooling into one affine head):

* ``resnet18``: the standard CIFAR variant — 8 basic residual blocks in four
  stages of two, channels 64/128/256/512, stride 2 at stages 2-4.
* ``googlenet_small``: five inception blocks (four branches each: 1x1, 3x3,
  double-3x3, pool-projection) in three stages separated by max-pooling.
* ``mobilenet_small``: eight depthwise-separable blocks, channels rising
  from 64 to 512 with stride 2 at blocks 2, 4 and 6.

All of them answer ``forward`` with stacked logits [1, N, num_classes] so
they are drop-in black-box targets or proxies next to multi-track models.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn

from .base import BUILD_LOCK, HeadSelector, MultiHeadNetwork, init_conv_bn
from .blocks import BasicBlock, DepthwiseSeparableBlock, InceptionBlock, _conv_bn

BASELINE_NAMES = ("resnet18", "googlenet_small", "mobilenet_small")


class _SingleHead(MultiHeadNetwork):
    """Shared scaffolding: stem -> blocks -> pool -> affine, one head."""

    head_count = 1
    input_hw = (32, 32)

    def __init__(self, name: str, num_classes: int):
        super().__init__()
        self.name = name
        self.num_classes = num_classes
        self.pool = nn.AdaptiveAvgPool2d(1)

    def _head(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.pool(features), 1))

    def forward(self, x):
        out = self.stem(x)
        for block in self.blocks:
            out = block(out)
        return self._head(out).unsqueeze(0)

    def config(self) -> dict:
        return {"kind": self.name, "num_classes": self.num_classes}

    def stages(self, selector: HeadSelector) -> list[tuple[str, Callable]]:
        if selector.kind == "head" and selector.index != 1:
            raise ValueError(f"{self.name} has a single head, got selector {selector}")
        stages: list[tuple[str, Callable]] = [("stem", self.stem)]
        stages += [(f"block{i + 1}", blk) for i, blk in enumerate(self.blocks)]
        stages.append(("head", self._head))
        return stages


class CifarResNet18(_SingleHead):
    def __init__(self, num_classes: int = 10):
        super().__init__("resnet18", num_classes)
        self.stem = _conv_bn(3, 64, 3, padding=1)
        plan = [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)]
        blocks = []
        in_ch = 64
        for out_ch, stride in plan:
            blocks.append(BasicBlock(in_ch, out_ch, stride))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(in_ch, num_classes)
        self.block_count = len(blocks)


class GoogleNetSmall(_SingleHead):
    def __init__(self, num_classes: int = 10):
        super().__init__("googlenet_small", num_classes)
        self.stem = _conv_bn(3, 64, 3, padding=1)
        inc = [
            InceptionBlock(64, 16, (24, 32), (4, 8), 8),      # -> 64 @ 32x32
            nn.MaxPool2d(2),
            InceptionBlock(64, 32, (32, 48), (8, 24), 24),    # -> 128 @ 16x16
            InceptionBlock(128, 32, (32, 48), (8, 24), 24),   # -> 128 @ 16x16
            nn.MaxPool2d(2),
            InceptionBlock(128, 64, (64, 96), (16, 48), 48),  # -> 256 @ 8x8
            InceptionBlock(256, 64, (64, 96), (16, 48), 48),  # -> 256 @ 8x8
        ]
        self.blocks = nn.ModuleList(inc)
        self.fc = nn.Linear(256, num_classes)
        self.block_count = sum(isinstance(m, InceptionBlock) for m in inc)


class MobileNetSmall(_SingleHead):
    def __init__(self, num_classes: int = 10):
        super().__init__("mobilenet_small", num_classes)
        self.stem = _conv_bn(3, 32, 3, padding=1)
        plan = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1), (512, 1)]
        blocks = []
        in_ch = 32
        for out_ch, stride in plan:
            blocks.append(DepthwiseSeparableBlock(in_ch, out_ch, stride))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(in_ch, num_classes)
        self.block_count = len(blocks)


_BASELINES = {
    "resnet18": CifarResNet18,
    "googlenet_small": GoogleNetSmall,
    "mobilenet_small": MobileNetSmall,
}


def build_baseline(name: str, num_classes: int = 10, seed: int = 0) -> MultiHeadNetwork:
    """Construct a named baseline with seed-deterministic initial weights."""
    if name not in _BASELINES:
        raise ValueError(f"unknown baseline {name!r}; choose from {BASELINE_NAMES}")
    with BUILD_LOCK:
        torch.manual_seed(seed)
        model = _BASELINES[name](num_classes=num_classes)
        init_conv_bn(model)
    return model
