"""Proxy-model training with momentum SGD and per-head metrics.

The recipe is deliberately plain: momentum SGD with coupled L2 weight decay,
a single constant learning rate, no augmentation, no schedule. Multi-head
networks train on the unweighted sum of per-head cross-entropies, which
reduces to ordinary cross-entropy for single-head baselines.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSplit, LabelBatch, make_batches
from .errors import TrainingDivergedError
from .models import (
    HeadSelector,
    MultiHeadNetwork,
    build_from_config,
    selector_log_probs,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "transferlab-ckpt-v1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_per_head: list[float]
    acc_per_head: list[float]
    acc_ensemble: float
    seconds: float


@dataclass
class TrainingLog:
    train_config: TrainConfig
    model_config: dict
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> Path:
        """Fixed column order: epoch, loss_total, per-head losses, per-head
        accuracies, ensemble accuracy, seconds."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        heads = len(self.records[0].loss_per_head) if self.records else 1
        header = (
            ["epoch", "loss_total"]
            + [f"loss_head{i}" for i in range(1, heads + 1)]
            + [f"acc_head{i}" for i in range(1, heads + 1)]
            + ["acc_ensemble", "seconds"]
        )
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["# " + _config_header(self.train_config)])
            writer.writerow(header)
            for rec in self.records:
                writer.writerow(
                    [rec.epoch, repr(rec.loss_total)]
                    + [repr(v) for v in rec.loss_per_head]
                    + [repr(v) for v in rec.acc_per_head]
                    + [repr(rec.acc_ensemble), repr(rec.seconds)]
                )
        return path


def _config_header(config: TrainConfig) -> str:
    return (
        f"epochs={config.epochs} learning_rate={config.learning_rate} "
        f"momentum={config.momentum} weight_decay={config.weight_decay} "
        f"batch_size={config.batch_size} seed={config.seed}"
    )


def multi_head_loss(heads: torch.Tensor, labels) -> torch.Tensor:
    """Sum over heads of the mean cross-entropy against ``labels``.

    Equals plain cross-entropy for a single head; identical heads double it.
    """
    y = torch.from_numpy(labels.labels) if isinstance(labels, LabelBatch) else labels
    if heads.ndim != 3:
        raise ValueError(f"expected stacked head logits [H, N, C], got {tuple(heads.shape)}")
    num_classes = heads.shape[-1]
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= num_classes):
        raise ValueError(
            f"labels out of range [0, {num_classes}): [{int(y.min())}, {int(y.max())}]"
        )
    return torch.stack([F.cross_entropy(h, y) for h in heads]).sum()


def make_optimizer(model: MultiHeadNetwork, config: TrainConfig) -> torch.optim.Optimizer:
    """Momentum SGD with coupled L2 decay: v <- mu*v + (g + wd*w); w -= lr*v."""
    return torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def predict_split(
    model: MultiHeadNetwork,
    split: DatasetSplit,
    selector: HeadSelector,
    batch_size: int = 256,
    device=None,
) -> np.ndarray:
    """Per-example predicted classes in split order (ties -> lowest class)."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad():
            for images, _ in make_batches(split, min(batch_size, len(split))):
                x = torch.from_numpy(images.data)
                if device is not None:
                    x = x.to(device)
                log_probs = selector_log_probs(model(x), selector)
                preds.append(np.argmax(log_probs.cpu().numpy(), axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds)


def evaluate_accuracy(
    model: MultiHeadNetwork,
    split: DatasetSplit,
    selector: HeadSelector,
    batch_size: int = 256,
    device=None,
) -> float:
    preds = predict_split(model, split, selector, batch_size=batch_size, device=device)
    return float(np.mean(preds == split.labels.labels))


def _evaluate_all_heads(
    model: MultiHeadNetwork, split: DatasetSplit, batch_size: int, device
) -> tuple[list[float], float]:
    """Accuracy per head plus the ensemble in one pass over the split."""
    was_training = model.training
    model.eval()
    head_correct = np.zeros(model.head_count, dtype=np.int64)
    ens_correct = 0
    try:
        with torch.no_grad():
            for images, labels in make_batches(split, min(batch_size, len(split))):
                x = torch.from_numpy(images.data)
                if device is not None:
                    x = x.to(device)
                heads = model(x).cpu()
                y = labels.labels
                for h in range(model.head_count):
                    preds = np.argmax(heads[h].numpy(), axis=1)
                    head_correct[h] += int(np.sum(preds == y))
                ens = selector_log_probs(heads, HeadSelector.ensemble()) \
                    if model.head_count > 1 else heads[0]
                ens_preds = np.argmax(ens.numpy(), axis=1)
                ens_correct += int(np.sum(ens_preds == y))
    finally:
        model.train(was_training)
    n = len(split)
    return (head_correct / n).tolist(), ens_correct / n


def train(
    model: MultiHeadNetwork,
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    config: TrainConfig,
    device=None,
    checkpoint_dir: Optional[str | Path] = None,
    run_id: str = "run",
    checkpoint_epochs: Optional[Iterable[int]] = None,
    eval_batch_size: int = 256,
) -> tuple[MultiHeadNetwork, TrainingLog]:
    """Train ``model`` in place and return it with a per-epoch log.

    Deterministic given the config seed (model init is the builder's job;
    batch order and optimizer state derive from the seed here). Divergence
    aborts with the offending epoch/batch. ``checkpoint_epochs`` adds
    explicit epochs to the ``checkpoint_every`` schedule; the final epoch is
    always checkpointed when a directory is given.
    """
    log = TrainingLog(train_config=config, model_config=model.config())
    logger.info("training %s: %s", run_id, _config_header(config))
    if config.epochs == 0:
        return model, log

    if device is not None:
        model.to(device)
    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    wanted_epochs = set(checkpoint_epochs or ())

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        model.train()
        epoch_loss = 0.0
        head_loss = np.zeros(model.head_count)
        n_batches = 0
        # distinct, reproducible shuffle per epoch
        batches = make_batches(
            train_split, config.batch_size, shuffle_seed=config.seed * 100003 + epoch
        )
        for b, (images, labels) in enumerate(batches):
            x = torch.from_numpy(images.data)
            y = torch.from_numpy(labels.labels)
            if device is not None:
                x, y = x.to(device), y.to(device)
            optimizer.zero_grad()
            heads = model(x)
            per_head = torch.stack([F.cross_entropy(h, y) for h in heads])
            loss = per_head.sum()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {float(loss.detach())} at epoch {epoch} batch {b}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            head_loss += per_head.detach().cpu().numpy()
            n_batches += 1

        acc_heads, acc_ens = _evaluate_all_heads(model, test_split, eval_batch_size, device)
        record = EpochRecord(
            epoch=epoch,
            loss_total=epoch_loss / n_batches,
            loss_per_head=(head_loss / n_batches).tolist(),
            acc_per_head=acc_heads,
            acc_ensemble=acc_ens,
            seconds=time.perf_counter() - start,
        )
        log.records.append(record)
        logger.info(
            "%s epoch %d/%d loss %.4f acc %.4f (%.1fs)",
            run_id, epoch, config.epochs, record.loss_total, acc_ens, record.seconds,
        )

        if checkpoint_dir is not None:
            due = epoch == config.epochs or epoch in wanted_epochs
            if config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0:
                due = True
            if due:
                path = Path(checkpoint_dir) / run_id / f"epoch_{epoch}.ckpt"
                save_checkpoint(path, model, optimizer, epoch, config)
                log.checkpoints.append(str(path))
    return model, log


def save_checkpoint(
    path: str | Path,
    model: MultiHeadNetwork,
    optimizer: Optional[torch.optim.Optimizer],
    epoch: int,
    train_config: TrainConfig,
) -> Path:
    """Self-describing checkpoint: architecture config travels with the
    parameters, so a checkpoint alone is enough to rebuild the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "model_config": model.config(),
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
            "epoch": epoch,
            "train_config": train_config.to_dict(),
            "torch_rng_state": torch.get_rng_state(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[MultiHeadNetwork, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a recognized checkpoint: {path}")
    model = build_from_config(payload["model_config"])
    model.load_state_dict(payload["model_state"])
    meta = {k: payload[k] for k in ("model_config", "train_config", "epoch")}
    meta["optimizer_state"] = payload.get("optimizer_state")
    return model, meta
