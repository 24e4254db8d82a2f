"""Transferability measurement: attack-success-rate matrices and sweeps.

Adversarial batches are crafted once per (proxy, selector, attack) and then
scored against every target. Failed cells never become silent zeros; they
are recorded as explicit missing entries with the failure reason.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .attacks import AdversarialBatch, AttackConfig, run_attack
from .data import DatasetSplit, ImageBatch, LabelBatch, make_batches, subsample
from .errors import UnmetDependencyError
from .models import (
    HeadSelector,
    MultiHeadNetwork,
    MultiTrackConfig,
    all_selectors,
    selector_log_probs,
)
from .records import append_records, config_digest
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ASRRecord:
    """Attack-success rates of one (proxy, selector, attack, target) cell.

    ``asr_all`` counts every adversarial example the target misclassifies;
    ``asr_valid`` restricts to examples the target classified correctly when
    clean (the stricter convention). Table reproductions use ``asr_all``.
    """

    proxy: str
    selector: str
    attack: str
    target: str
    epsilon: float
    sample_count: int
    asr_all: float
    asr_valid: float
    clean_accuracy: float
    meta: dict = field(default_factory=dict)

    def key(self) -> tuple[str, str, str, str]:
        return (self.proxy, self.selector, self.attack, self.target)

    def to_dict(self) -> dict:
        return {
            "record_kind": "asr",
            "proxy": self.proxy,
            "selector": self.selector,
            "attack": self.attack,
            "target": self.target,
            "epsilon": self.epsilon,
            "sample_count": self.sample_count,
            "asr_all": self.asr_all,
            "asr_valid": self.asr_valid,
            "clean_accuracy": self.clean_accuracy,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ASRRecord":
        fields = {k: d[k] for k in (
            "proxy", "selector", "attack", "target", "epsilon",
            "sample_count", "asr_all", "asr_valid", "clean_accuracy",
        )}
        return cls(meta=d.get("meta", {}), **fields)


@dataclass
class ASRMatrix:
    """Keyed collection of ASR records plus explicit missing-cell markers."""

    records: dict = field(default_factory=dict)
    missing: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, record: ASRRecord) -> None:
        key = record.key()
        if key in self.records:
            raise ValueError(f"duplicate ASR cell {key}")
        self.records[key] = record

    def mark_missing(self, key: tuple, reason: str) -> None:
        self.missing[key] = reason

    def transfer_records(self) -> list[ASRRecord]:
        return [r for r in self.records.values() if r.proxy != r.target]

    def whitebox_records(self) -> list[ASRRecord]:
        return [r for r in self.records.values() if r.proxy == r.target]

    def to_dicts(self) -> list[dict]:
        out = [r.to_dict() for r in self.records.values()]
        out += [
            {"record_kind": "asr_missing", "key": list(k), "reason": v}
            for k, v in self.missing.items()
        ]
        return out

    def save(self, path: str | Path) -> Path:
        append_records(path, self.to_dicts())
        return Path(path)


def target_selector(model: MultiHeadNetwork) -> HeadSelector:
    """How a model answers when used as a black-box target: its ensemble
    when multi-headed, otherwise its single head."""
    return HeadSelector.ensemble() if model.head_count > 1 else HeadSelector.head(1)


def _predict(model: MultiHeadNetwork, images: np.ndarray, batch_size: int, device) -> np.ndarray:
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad():
            sel = target_selector(model)
            for i in range(0, len(images), batch_size):
                x = torch.from_numpy(images[i : i + batch_size])
                if device is not None:
                    x = x.to(device)
                log_probs = selector_log_probs(model(x), sel)
                preds.append(np.argmax(log_probs.cpu().numpy(), axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds)


def attack_success_rate(
    target: MultiHeadNetwork,
    adv: AdversarialBatch,
    labels,
    batch_size: int = 256,
    device=None,
) -> dict:
    """Score one adversarial batch against one target.

    Returns the metric fragment: asr over all examples, asr over the
    target's clean-correct subset, and the target's clean accuracy on the
    originating images.
    """
    y = labels.labels if isinstance(labels, LabelBatch) else np.asarray(labels)
    if len(adv) == 0 or len(y) != len(adv):
        raise ValueError(f"bad batch: {len(adv)} adversarial examples, {len(y)} labels")
    adv_preds = _predict(target, adv.adv.data, batch_size, device)
    clean_preds = _predict(target, adv.origin.data, batch_size, device)

    mis = adv_preds != y
    clean_correct = clean_preds == y
    n_clean_correct = int(clean_correct.sum())
    asr_all = float(np.mean(mis))
    asr_valid = float(np.mean(mis[clean_correct])) if n_clean_correct else 0.0
    return {
        "asr_all": asr_all,
        "asr_valid": asr_valid,
        "clean_accuracy": float(np.mean(clean_correct)),
        "sample_count": len(y),
        "n_clean_correct": n_clean_correct,
    }


def craft_adversarial_split(
    model: MultiHeadNetwork,
    selector: HeadSelector,
    split: DatasetSplit,
    config: AttackConfig,
    batch_size: int = 128,
    device=None,
) -> AdversarialBatch:
    """Attack a whole split in batches and concatenate the results."""
    parts = []
    for images, labels in make_batches(split, min(batch_size, len(split))):
        parts.append(run_attack(model, selector, images, labels, config, device=device))
    adv = np.concatenate([p.adv.data for p in parts])
    origin = np.concatenate([p.origin.data for p in parts])
    return AdversarialBatch(
        adv=ImageBatch(adv),
        origin=ImageBatch(origin),
        config=config,
        selector=str(selector),
    )


def transfer_matrix(
    proxies: Mapping[str, MultiHeadNetwork],
    targets: Mapping[str, MultiHeadNetwork],
    attacks: Sequence[AttackConfig],
    eval_split: DatasetSplit,
    selectors: Optional[Mapping[str, Sequence[HeadSelector]]] = None,
    proxy_meta: Optional[Mapping[str, dict]] = None,
    target_meta: Optional[Mapping[str, dict]] = None,
    batch_size: int = 128,
    device=None,
    include_self: bool = True,
) -> ASRMatrix:
    """Full (proxy, selector, attack) x target grid over ``eval_split``.

    Adversarial examples are crafted once per proxy/selector/attack and
    reused for every target. Self cells (proxy == target) are white-box
    sanity measurements; transfer conclusions only use proxy != target.
    Cell failures are recorded in ``matrix.missing`` and never abort the
    rest of the grid.
    """
    matrix = ASRMatrix(metadata={"eval_size": len(eval_split)})
    labels = eval_split.labels
    proxy_meta = proxy_meta or {}
    target_meta = target_meta or {}

    for proxy_id, proxy in proxies.items():
        sels = (selectors or {}).get(proxy_id) or all_selectors(proxy.head_count)
        for attack in attacks:
            for sel in sels:
                try:
                    adv = craft_adversarial_split(
                        proxy, sel, eval_split, attack,
                        batch_size=batch_size, device=device,
                    )
                except Exception as exc:  # cell failure, not harness failure
                    logger.warning(
                        "attack failed for proxy=%s selector=%s attack=%s: %s",
                        proxy_id, sel, attack.name, exc,
                    )
                    for target_id in targets:
                        matrix.mark_missing(
                            (proxy_id, str(sel), attack.name, target_id),
                            f"attack failed: {exc}",
                        )
                    continue
                for target_id, target in targets.items():
                    if not include_self and target_id == proxy_id:
                        continue
                    try:
                        frag = attack_success_rate(
                            target, adv, labels, batch_size=batch_size, device=device
                        )
                    except Exception as exc:
                        matrix.mark_missing(
                            (proxy_id, str(sel), attack.name, target_id),
                            f"evaluation failed: {exc}",
                        )
                        continue
                    meta = dict(proxy_meta.get(proxy_id, {}))
                    meta["target_meta"] = target_meta.get(target_id, {})
                    matrix.add(ASRRecord(
                        proxy=proxy_id,
                        selector=str(sel),
                        attack=attack.name,
                        target=target_id,
                        epsilon=attack.epsilon,
                        sample_count=frag["sample_count"],
                        asr_all=frag["asr_all"],
                        asr_valid=frag["asr_valid"],
                        clean_accuracy=frag["clean_accuracy"],
                        meta=meta,
                    ))
    return matrix


@dataclass(frozen=True)
class SweepSpec:
    """Grid of architectures and train lengths to search for the best ASR."""

    sizes: tuple = ((2, 2), (2, 3), (2, 4), (2, 5),
                    (3, 2), (3, 3), (3, 4), (3, 5),
                    (4, 2), (4, 3), (4, 4), (4, 5),
                    (5, 2), (5, 3), (5, 4), (5, 5))
    epochs: tuple = (5, 10, 15, 20, 25, 30, 35, 40, 45, 50)
    seeds: tuple = (0,)
    baselines: tuple = ()
    stem_channels: int = 64

    def __post_init__(self):
        if not self.sizes and not self.baselines:
            raise ValueError("sweep needs at least one architecture")
        if not self.epochs:
            raise ValueError("sweep needs at least one epoch value")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")
        for d, w in self.sizes:
            MultiTrackConfig(depth=d, width=w)  # validate ranges


@dataclass(frozen=True)
class BestSelection:
    family: str
    target: str
    attack: str
    mean_asr: float
    selector: str
    epoch: int
    size: Optional[tuple] = None
    per_seed: tuple = ()

    def to_dict(self) -> dict:
        return {
            "record_kind": "best",
            "family": self.family,
            "target": self.target,
            "attack": self.attack,
            "mean_asr": self.mean_asr,
            "selector": self.selector,
            "epoch": self.epoch,
            "size": list(self.size) if self.size else None,
            "per_seed": list(self.per_seed),
        }


def select_best(records: Sequence[ASRRecord], value_field: str = "asr_all") -> dict:
    """Best mean-over-seeds transfer cell per (proxy family, target, attack).

    Groups records by every tunable coordinate (size, epoch, selector),
    averages over seeds within a group, and returns the argmax group with
    full provenance. Pure function over records, so it can be audited or
    re-run from persisted files alone.
    """
    groups: dict = {}
    for rec in records:
        if rec.proxy == rec.target:
            continue
        family = rec.meta.get("family", rec.proxy)
        size = (rec.meta["depth"], rec.meta["width"]) if "depth" in rec.meta else None
        gkey = (family, rec.target, rec.attack, size, rec.meta.get("epoch"), rec.selector)
        groups.setdefault(gkey, []).append(getattr(rec, value_field))

    best: dict = {}
    for (family, tgt, atk, size, epoch, sel), values in sorted(groups.items()):
        mean = float(np.mean(values))
        key = (family, tgt, atk)
        if key not in best or mean > best[key].mean_asr:
            best[key] = BestSelection(
                family=family, target=tgt, attack=atk, mean_asr=mean,
                selector=sel, epoch=epoch, size=size, per_seed=tuple(values),
            )
    return best


def stratified_eval_subset(split: DatasetSplit, size: Optional[int], seed: int) -> DatasetSplit:
    """Seeded class-balanced evaluation subset (or the split itself)."""
    if size is None or size >= len(split):
        return split
    return subsample(split, fraction=size / len(split), seed=seed)


class TrainedModelCache:
    """Content-addressed store of trained checkpoints.

    Keys are digests of (architecture config, train config, seed), so
    sweeps and re-runs never retrain an unchanged cell. A miss with
    training disabled raises :class:`UnmetDependencyError`.
    """

    def __init__(self, cache_dir: str | Path, train_if_missing: bool = True, device=None):
        self.cache_dir = Path(cache_dir)
        self.train_if_missing = train_if_missing
        self.device = device

    def cell_key(self, model_config: dict, train_config: TrainConfig, seed: int) -> str:
        return config_digest({
            "arch": model_config,
            "train": train_config.to_dict(),
            "seed": seed,
        })

    def checkpoint_path(self, key: str, epoch: int) -> Path:
        return self.cache_dir / key / f"epoch_{epoch}.ckpt"

    def get(
        self,
        model_config: dict,
        train_config: TrainConfig,
        seed: int,
        train_split: Optional[DatasetSplit],
        test_split: Optional[DatasetSplit],
        epochs_needed: Optional[Sequence[int]] = None,
    ) -> dict:
        """Ensure checkpoints exist for every epoch in ``epochs_needed``
        (default: just the final epoch); returns {epoch: checkpoint path}."""
        epochs = sorted(set(epochs_needed or [train_config.epochs]))
        if any(e > train_config.epochs for e in epochs):
            raise ValueError(f"requested epochs {epochs} beyond {train_config.epochs}")
        key = self.cell_key(model_config, train_config, seed)
        paths = {e: self.checkpoint_path(key, e) for e in epochs}
        hits = {e: p for e, p in paths.items() if p.exists()}
        if len(hits) == len(paths):
            return paths
        if not self.train_if_missing:
            missing = [str(p) for e, p in paths.items() if e not in hits]
            raise UnmetDependencyError(
                f"trained checkpoints missing and training is disabled: {missing}"
            )
        from .models import build_from_config

        if epochs == [0]:
            # evaluation-only path: epoch 0 is the seeded initialization,
            # reproducible without data
            model = build_from_config(model_config, seed=seed)
            save_checkpoint(paths[0], model, None, 0, replace(train_config, seed=seed))
            return paths
        if train_split is None or test_split is None:
            raise UnmetDependencyError(
                "cache miss and no training data supplied"
            )
        model = build_from_config(model_config, seed=seed)
        cfg = replace(train_config, seed=seed)
        _, log = train(
            model, train_split, test_split, cfg,
            device=self.device,
            checkpoint_dir=self.cache_dir,
            run_id=key,
            checkpoint_epochs=epochs,
        )
        log.to_csv(self.cache_dir / f"{key}.log.csv")
        append_records(
            self.cache_dir / f"{key}.log.jsonl",
            [
                {
                    "record_kind": "accuracy",
                    "epoch": rec.epoch,
                    "loss_total": rec.loss_total,
                    "acc_per_head": rec.acc_per_head,
                    "acc_ensemble": rec.acc_ensemble,
                    "seconds": rec.seconds,
                    "arch": model_config,
                    "seed": seed,
                }
                for rec in log.records
            ],
        )
        still_missing = [str(p) for p in paths.values() if not p.exists()]
        if still_missing:
            raise UnmetDependencyError(f"training did not produce: {still_missing}")
        return paths


def sweep_and_select(
    spec: SweepSpec,
    train_config: TrainConfig,
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    eval_split: DatasetSplit,
    targets: Mapping[str, MultiHeadNetwork],
    attacks: Sequence[AttackConfig],
    cache: TrainedModelCache,
    target_meta: Optional[Mapping[str, dict]] = None,
    batch_size: int = 128,
    device=None,
) -> tuple[list[ASRRecord], dict]:
    """Evaluate every sweep cell (trained or cache-loaded) and pick the best.

    One training run per (architecture, seed) serves every epoch in the
    grid via intermediate checkpoints. Returns (all transfer records,
    best record per (family, target, attack)).
    """
    max_epoch = max(spec.epochs)
    base = replace(train_config, epochs=max_epoch)
    records: list[ASRRecord] = []

    def eval_cell(model_config: dict, family: str, seed: int, extra_meta: dict):
        paths = cache.get(
            model_config, base, seed, train_split, test_split, epochs_needed=spec.epochs
        )
        for epoch in spec.epochs:
            model, _ = load_checkpoint(paths[epoch])
            if device is not None:
                model.to(device)
            proxy_id = f"{family}" + (
                f"_{extra_meta['depth']}x{extra_meta['width']}" if "depth" in extra_meta else ""
            ) + f"_e{epoch}_s{seed}"
            meta = dict(extra_meta, family=family, epoch=epoch, seed=seed)
            matrix = transfer_matrix(
                {proxy_id: model}, targets, attacks, eval_split,
                proxy_meta={proxy_id: meta}, target_meta=target_meta,
                batch_size=batch_size, device=device, include_self=True,
            )
            records.extend(matrix.records.values())

    for depth, width in spec.sizes:
        cfg = MultiTrackConfig(depth=depth, width=width, stem_channels=spec.stem_channels)
        for seed in spec.seeds:
            eval_cell(cfg.to_dict(), "multitrack", seed, {"depth": depth, "width": width})
    for name in spec.baselines:
        for seed in spec.seeds:
            eval_cell({"kind": name, "num_classes": 10}, name, seed, {})

    transfer = [r for r in records if r.proxy != r.target]
    return records, select_best(transfer)
