"""Model zoo: single-head baselines and multi-track grid networks."""

from __future__ import annotations

import numpy as np
import torch

from ..data import ImageBatch
from .base import (
    HeadSelector,
    MultiHeadNetwork,
    all_selectors,
    ensemble_log_probs,
    selector_log_probs,
    selector_nll,
)
from .baselines import BASELINE_NAMES, build_baseline
from .multitrack import (
    MultiTrackConfig,
    MultiTrackNet,
    build_multitrack,
    default_channel_plan,
)
from .stats import ModelStats, count_madds, count_parameters, model_stats

__all__ = [
    "HeadSelector",
    "MultiHeadNetwork",
    "MultiTrackConfig",
    "MultiTrackNet",
    "ModelStats",
    "BASELINE_NAMES",
    "all_selectors",
    "build_baseline",
    "build_from_config",
    "build_multitrack",
    "count_madds",
    "count_parameters",
    "default_channel_plan",
    "ensemble_log_probs",
    "forward_heads",
    "model_stats",
    "selector_log_probs",
    "selector_nll",
]


def build_from_config(config: dict, seed: int = 0) -> MultiHeadNetwork:
    """Rebuild any zoo model from its self-describing config dict."""
    kind = config.get("kind")
    if kind == "multitrack":
        return build_multitrack(MultiTrackConfig.from_dict(config), seed=seed)
    if kind in BASELINE_NAMES:
        return build_baseline(kind, num_classes=config.get("num_classes", 10), seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def forward_heads(
    model: MultiHeadNetwork,
    batch: "ImageBatch | np.ndarray | torch.Tensor",
    device: str | torch.device | None = None,
) -> torch.Tensor:
    """Evaluation-mode forward pass over an image batch.

    Accepts an :class:`ImageBatch`, a numpy array, or a tensor; returns
    stacked head logits [heads, N, num_classes] with gradients disabled.
    """
    images = batch.data if isinstance(batch, ImageBatch) else batch
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    if device is not None:
        images = images.to(device)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model.forward_heads(images)
    finally:
        model.train(was_training)
