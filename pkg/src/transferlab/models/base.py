"""Shared model surface: multi-head networks, head selection, ensembling.

Every network in the zoo maps an image batch to stacked per-head logits
of shape [heads, N, num_classes]. Single-head baselines use heads == 1.
A :class:`HeadSelector` picks either one head or the ensemble of all heads;
downstream code (training metrics, attacks, transfer evaluation) only ever
consumes the selector's per-example log-probabilities, so the same code path
serves every architecture.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

# Model construction seeds and consumes the process-global torch RNG;
# serializing builds keeps seed -> parameters deterministic even when
# concurrent jobs build models at the same time.
BUILD_LOCK = threading.Lock()


@dataclass(frozen=True)
class HeadSelector:
    """Selects one output head (1-based index) or the all-head ensemble."""

    kind: str  # "head" | "ensemble"
    index: Optional[int] = None

    def __post_init__(self):
        if self.kind == "head":
            if self.index is None or self.index < 1:
                raise ValueError(f"head selector needs a 1-based index, got {self.index}")
        elif self.kind == "ensemble":
            if self.index is not None:
                raise ValueError("ensemble selector takes no index")
        else:
            raise ValueError(f"unknown selector kind {self.kind!r}")

    @classmethod
    def head(cls, index: int) -> "HeadSelector":
        return cls(kind="head", index=index)

    @classmethod
    def ensemble(cls) -> "HeadSelector":
        return cls(kind="ensemble")

    @classmethod
    def parse(cls, text: str) -> "HeadSelector":
        text = text.strip().lower()
        if text == "ensemble":
            return cls.ensemble()
        if text.startswith("head"):
            return cls.head(int(text[4:]))
        raise ValueError(f"cannot parse selector {text!r} (expected 'headK' or 'ensemble')")

    def __str__(self) -> str:
        return "ensemble" if self.kind == "ensemble" else f"head{self.index}"


def all_selectors(head_count: int) -> list[HeadSelector]:
    """Every head plus the ensemble (just head 1 for single-head models)."""
    sels = [HeadSelector.head(i) for i in range(1, head_count + 1)]
    if head_count > 1:
        sels.append(HeadSelector.ensemble())
    return sels


def ensemble_log_probs(heads: torch.Tensor, mode: str = "log_softmax") -> torch.Tensor:
    """Collapse stacked head logits [H, N, C] to ensemble log-probs [N, C].

    ``log_softmax`` (default) averages per-head log-softmax vectors, which is
    invariant to per-head logit shifts and scales the heads equally.
    ``logit_mean`` averages raw logits first; kept for sensitivity analysis.
    """
    if heads.ndim != 3:
        raise ValueError(f"expected stacked head logits [H, N, C], got {tuple(heads.shape)}")
    if mode == "log_softmax":
        return F.log_softmax(heads, dim=-1).mean(dim=0)
    if mode == "logit_mean":
        return F.log_softmax(heads.mean(dim=0), dim=-1)
    raise ValueError(f"unknown ensemble mode {mode!r}")


def selector_log_probs(
    heads: torch.Tensor,
    selector: HeadSelector,
    ensemble_mode: str = "log_softmax",
) -> torch.Tensor:
    """Per-example log-probabilities [N, C] of the selected head/ensemble.

    Note that NLL of the default ensemble equals the mean of per-head
    cross-entropies, since NLL is linear in the log-probability vector.
    """
    if selector.kind == "ensemble":
        return ensemble_log_probs(heads, mode=ensemble_mode)
    if selector.index > heads.shape[0]:
        raise ValueError(
            f"selector {selector} out of range for {heads.shape[0]} heads"
        )
    return F.log_softmax(heads[selector.index - 1], dim=-1)


def selector_nll(
    heads: torch.Tensor,
    labels: torch.Tensor,
    selector: HeadSelector,
    reduction: str = "mean",
) -> torch.Tensor:
    """Cross-entropy of the selected head (or ensemble) against labels."""
    return F.nll_loss(selector_log_probs(heads, selector), labels, reduction=reduction)


class MultiHeadNetwork(nn.Module):
    """Base class for all zoo networks.

    Subclasses set ``head_count``, ``num_classes`` and ``block_count``,
    implement ``forward`` returning [heads, N, num_classes], provide a
    self-describing ``config()`` dict (enough to rebuild the architecture),
    and expose ``stages`` for block-granularity gradient analysis.
    """

    head_count: int = 1
    num_classes: int = 10
    block_count: int = 0
    input_channels: int = 3
    input_hw: Optional[tuple] = None  # (H, W) contract; None = any size

    def config(self) -> dict:
        raise NotImplementedError

    def stages(self, selector: HeadSelector) -> list[tuple[str, Callable]]:
        """Block-boundary decomposition of the forward map for ``selector``.

        Returns (name, fn) pairs; composing the fns in order over an input
        batch yields the selector's logits (head) or log-probs (ensemble).
        Stage states may be tensors or tuples of tensors.
        """
        raise NotImplementedError

    def forward_heads(self, images: torch.Tensor) -> torch.Tensor:
        """Forward pass returning all head logits, with shape checks."""
        if images.ndim != 4 or images.shape[1] != self.input_channels:
            raise ValueError(
                f"expected [N, {self.input_channels}, H, W] input, got {tuple(images.shape)}"
            )
        if self.input_hw is not None and tuple(images.shape[2:]) != tuple(self.input_hw):
            raise ValueError(
                f"expected {self.input_hw} spatial input, got {tuple(images.shape[2:])}"
            )
        heads = self(images)
        if not torch.isfinite(heads).all():
            raise ValueError("forward pass produced non-finite logits")
        return heads


def init_conv_bn(module: nn.Module) -> None:
    """He-normal conv init and unit-affine batchnorm, applied recursively.

    Explicit so that parameter initialization is stable across torch
    releases (model builds must be reproducible from a seed alone).
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            # fan-out per group: grouped/depthwise convs reach fewer outputs
            fan = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
            nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            nn.init.uniform_(m.bias, -bound, bound)
