"""Architecture size accounting: parameters, blocks, multiply-adds."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .base import MultiHeadNetwork


@dataclass(frozen=True)
class ModelStats:
    parameter_count: int
    block_count: int
    madds_per_image: int


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_madds(model: nn.Module, input_hw: tuple[int, int] = (32, 32)) -> int:
    """Multiply-add estimate for one image, measured with shape hooks on a
    dummy forward (convolutions and affine layers only; elementwise ops and
    normalization are ignored, as is standard for MAdd accounting)."""
    total = 0

    def conv_hook(module: nn.Conv2d, args, output):
        nonlocal total
        out_elems = output.numel()  # includes the batch dim (N=1)
        per_elem = module.in_channels // module.groups
        per_elem *= module.kernel_size[0] * module.kernel_size[1]
        total += out_elems * per_elem

    def linear_hook(module: nn.Linear, args, output):
        nonlocal total
        total += output.numel() * module.in_features

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    try:
        model.eval()
        with torch.no_grad():
            model(torch.zeros(1, 3, *input_hw))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return int(total)


def model_stats(model: MultiHeadNetwork, input_hw: tuple[int, int] = (32, 32)) -> ModelStats:
    return ModelStats(
        parameter_count=count_parameters(model),
        block_count=model.block_count,
        madds_per_image=count_madds(model, input_hw),
    )
