"""Convolutional building blocks shared by the zoo architectures."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class BasicBlock(nn.Module):
    """Standard two-conv residual block with a projection shortcut when the
    shape changes (stride != 1 or channel count differs)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class DepthwiseSeparableBlock(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1, each with batchnorm+ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels, in_channels, 3, stride, 1, groups=in_channels, bias=False
        )
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        out = F.relu(self.bn1(self.depthwise(x)))
        return F.relu(self.bn2(self.pointwise(out)))


class InceptionBlock(nn.Module):
    """Four-branch inception module (1x1, 3x3, double-3x3, pool-projection).

    Branch widths are given as (b1, b3, b5, bp); outputs concatenate to
    b1 + b3 + b5 + bp channels.
    """

    def __init__(self, in_channels: int, b1: int, b3: tuple[int, int],
                 b5: tuple[int, int], bp: int):
        super().__init__()
        self.branch1 = _conv_bn(in_channels, b1, 1)
        self.branch3 = nn.Sequential(
            _conv_bn(in_channels, b3[0], 1),
            _conv_bn(b3[0], b3[1], 3, padding=1),
        )
        self.branch5 = nn.Sequential(
            _conv_bn(in_channels, b5[0], 1),
            _conv_bn(b5[0], b5[1], 3, padding=1),
            _conv_bn(b5[1], b5[1], 3, padding=1),
        )
        self.branch_pool = nn.Sequential(
            nn.MaxPool2d(3, stride=1, padding=1),
            _conv_bn(in_channels, bp, 1),
        )
        self.out_channels = b1 + b3[1] + b5[1] + bp

    def forward(self, x):
        return torch.cat(
            [self.branch1(x), self.branch3(x), self.branch5(x), self.branch_pool(x)],
            dim=1,
        )


def _conv_bn(in_channels: int, out_channels: int, kernel: int, padding: int = 0) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel, padding=padding, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )
