"""End-to-end experiment orchestration.

A run is content-addressed by its config digest: completed runs are never
redone, trained models are cached across runs by (architecture, train
config, seed) digest, and every metric lands in append-only record files
under the run directory. A crashed run leaves its completed records intact
and is marked incomplete.

Layout under ``output_dir``:

    cache/<model-digest>/epoch_<k>.ckpt     shared trained-model cache
    runs/<config-digest>/run.json           status marker
    runs/<config-digest>/records/asr.jsonl  ASR records (+ missing markers)
    runs/<config-digest>/records/accuracy.jsonl
    runs/<config-digest>/records/cost.jsonl
    runs/<config-digest>/logs/<model-id>.csv
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import data as datamod
from .config import ExperimentConfig
from .diagnostics import profile_cost
from .errors import UnmetDependencyError
from .evaluation import (
    SweepSpec,
    TrainedModelCache,
    stratified_eval_subset,
    sweep_and_select,
    transfer_matrix,
)
from .records import append_records
from .training import load_checkpoint

logger = logging.getLogger(__name__)

DESK_SCALE_FRACTION = 0.2
DESK_SCALE_EVAL_SIZE = 1000


@dataclass
class RunResult:
    run_dir: Path
    records_dir: Path
    status: str  # "complete" | "cached" | "incomplete"
    trained: int = 0
    cells: int = 0
    missing: int = 0


def _marker_path(run_dir: Path) -> Path:
    return run_dir / "run.json"


def _write_marker(run_dir: Path, status: str, payload: dict) -> None:
    marker = dict(payload, status=status, updated=time.time())
    _marker_path(run_dir).write_text(json.dumps(marker, indent=2, sort_keys=True))


def load_data(config: ExperimentConfig, desk_scale: bool = False):
    """Resolve the configured dataset into (train, test) splits."""
    data_cfg = config.data
    root = Path(data_cfg["root"])
    if data_cfg.get("synthetic"):
        syn = data_cfg["synthetic"]
        datamod.ensure_synthetic_dataset(
            root, syn["train_size"], syn["test_size"], seed=syn.get("seed", 0)
        )
        train_split, test_split = datamod.load_cifar10(root, require_official_sizes=False)
    else:
        train_split, test_split = datamod.load_cifar10(root)
    fraction = data_cfg.get("subsample_fraction", 1.0)
    if desk_scale:
        fraction = min(fraction, DESK_SCALE_FRACTION)
    if fraction < 1.0:
        train_split = datamod.subsample(train_split, fraction, seed=data_cfg.get("seed", 0))
    return train_split, test_split


def _proxy_meta(model_cfg: dict, epoch: int) -> dict:
    meta = {"family": model_cfg["kind"], "seed": model_cfg.get("seed", 0), "epoch": epoch}
    if model_cfg["kind"] == "multitrack":
        meta["depth"] = model_cfg["depth"]
        meta["width"] = model_cfg["width"]
    return meta


def _stamp(records, digest: str):
    """Attach run provenance so every persisted number is traceable."""
    written = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    for rec in records:
        rec["provenance"] = {"config_digest": digest, "written": written}
        yield rec


def run_experiment(
    config: ExperimentConfig,
    desk_scale: bool = False,
    train_if_missing: bool = True,
    device=None,
    workers: Optional[int] = None,
    force: bool = False,
) -> RunResult:
    """Execute load -> train-or-cache -> attack -> evaluate -> persist.

    Idempotent: an unchanged config re-run returns immediately with the
    existing records untouched.
    """
    digest = config.digest() + ("-desk" if desk_scale else "")
    output_dir = Path(config.output_dir)
    run_dir = output_dir / "runs" / digest
    records_dir = run_dir / "records"
    result = RunResult(run_dir=run_dir, records_dir=records_dir, status="incomplete")

    marker = _marker_path(run_dir)
    if marker.exists() and not force:
        try:
            status = json.loads(marker.read_text()).get("status")
        except json.JSONDecodeError:
            status = None
        if status == "complete":
            logger.info("run %s already complete; nothing to do", digest)
            result.status = "cached"
            return result

    run_dir.mkdir(parents=True, exist_ok=True)
    records_dir.mkdir(parents=True, exist_ok=True)
    # restarting an incomplete run rewrites its records from scratch
    # (record files are append-only within a run, never across retries)
    for name in ("asr.jsonl", "accuracy.jsonl", "cost.jsonl"):
        (records_dir / name).unlink(missing_ok=True)
    _write_marker(run_dir, "incomplete", {"config": config.to_dict(), "desk_scale": desk_scale})

    try:
        train_split, test_split = load_data(config, desk_scale=desk_scale)
        eval_size = config.eval.get("eval_size")
        if desk_scale:
            eval_size = min(eval_size or DESK_SCALE_EVAL_SIZE, DESK_SCALE_EVAL_SIZE)
        eval_split = stratified_eval_subset(
            test_split, eval_size, seed=config.data.get("seed", 0)
        )

        cache = TrainedModelCache(
            output_dir / "cache", train_if_missing=train_if_missing, device=device
        )
        train_cfg = config.train_config()
        n_workers = workers or config.workers

        # train (or load) every configured model
        def prepare(model_cfg: dict):
            arch = {k: v for k, v in model_cfg.items() if k not in ("id", "seed")}
            paths = cache.get(arch, train_cfg, model_cfg.get("seed", 0),
                              train_split, test_split)
            model, meta = load_checkpoint(paths[train_cfg.epochs])
            if device is not None:
                model.to(device)
            return model_cfg["id"], model

        models = {}
        if n_workers > 1 and len(config.models) > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                for mid, model in pool.map(prepare, config.models):
                    models[mid] = model
        else:
            for model_cfg in config.models:
                mid, model = prepare(model_cfg)
                models[mid] = model
        result.trained = len(models)

        # per-epoch accuracy records come from training logs if present
        _persist_accuracy_records(config, cache, train_cfg, records_dir,
                                  config.digest())

        proxies = {mid: models[mid] for mid in config.eval["proxies"]}
        targets = {mid: models[mid] for mid in config.eval["targets"]}
        proxy_meta = {
            mid: _proxy_meta(config.model_config(mid), train_cfg.epochs) for mid in proxies
        }
        target_meta = {
            mid: {"family": config.model_config(mid)["kind"]} for mid in targets
        }
        matrix = transfer_matrix(
            proxies, targets, config.attack_configs(), eval_split,
            proxy_meta=proxy_meta, target_meta=target_meta,
            batch_size=config.eval.get("batch_size", 128),
            device=device, include_self=config.eval.get("include_self", True),
        )
        append_records(records_dir / "asr.jsonl",
                       _stamp(matrix.to_dicts(), config.digest()))
        result.cells = len(matrix.records)
        result.missing = len(matrix.missing)

        if config.profile:
            cost_records = [
                profile_cost(
                    models[mid],
                    batch_size=config.profile["batch_size"],
                    repetitions=config.profile["repetitions"],
                    device=device,
                    architecture=mid,
                ).to_dict()
                for mid in models
            ]
            append_records(records_dir / "cost.jsonl",
                           _stamp(cost_records, config.digest()))

        status = "complete" if not matrix.missing else "incomplete"
        _write_marker(run_dir, status, {
            "config": config.to_dict(),
            "desk_scale": desk_scale,
            "cells": result.cells,
            "missing": result.missing,
        })
        result.status = status
        return result
    except Exception:
        _write_marker(run_dir, "incomplete", {"config": config.to_dict()})
        raise


def _persist_accuracy_records(config, cache, train_cfg, records_dir: Path,
                              digest: str) -> None:
    """Copy per-epoch test accuracies from cached training logs to records."""
    # Training logs are written next to checkpoints as <cache>/<key>.log.jsonl
    out = []
    for model_cfg in config.models:
        arch = {k: v for k, v in model_cfg.items() if k not in ("id", "seed")}
        key = cache.cell_key(arch, train_cfg, model_cfg.get("seed", 0))
        log_path = cache.cache_dir / f"{key}.log.jsonl"
        if not log_path.exists():
            continue
        from .records import read_records

        for rec in read_records(log_path):
            rec = dict(rec)
            rec["model_id"] = model_cfg["id"]
            rec["family"] = model_cfg["kind"]
            out.append(rec)
    if out:
        append_records(records_dir / "accuracy.jsonl", _stamp(out, digest))


def run_sweep(
    config: ExperimentConfig,
    desk_scale: bool = False,
    train_if_missing: bool = True,
    device=None,
) -> RunResult:
    """Run the configured sweep grid and persist per-cell + best records."""
    if not config.sweep:
        raise UnmetDependencyError("config has no sweep section")
    digest = config.digest() + "-sweep" + ("-desk" if desk_scale else "")
    output_dir = Path(config.output_dir)
    run_dir = output_dir / "runs" / digest
    records_dir = run_dir / "records"
    result = RunResult(run_dir=run_dir, records_dir=records_dir, status="incomplete")

    marker = _marker_path(run_dir)
    if marker.exists():
        try:
            if json.loads(marker.read_text()).get("status") == "complete":
                result.status = "cached"
                return result
        except json.JSONDecodeError:
            pass
    run_dir.mkdir(parents=True, exist_ok=True)
    records_dir.mkdir(parents=True, exist_ok=True)
    _write_marker(run_dir, "incomplete", {"config": config.to_dict()})

    train_split, test_split = load_data(config, desk_scale=desk_scale)
    eval_size = config.eval.get("eval_size")
    if desk_scale:
        eval_size = min(eval_size or DESK_SCALE_EVAL_SIZE, DESK_SCALE_EVAL_SIZE)
    eval_split = stratified_eval_subset(test_split, eval_size, seed=config.data.get("seed", 0))

    cache = TrainedModelCache(output_dir / "cache", train_if_missing=train_if_missing,
                              device=device)
    spec = SweepSpec(
        sizes=tuple(tuple(s) for s in config.sweep["sizes"]),
        epochs=tuple(config.sweep["epochs"]),
        seeds=tuple(config.sweep["seeds"]),
        baselines=tuple(config.sweep["baselines"]),
        stem_channels=config.sweep["stem_channels"],
    )

    # targets are the configured eval targets, trained at the fixed recipe
    train_cfg = config.train_config()
    targets = {}
    target_meta = {}
    for mid in config.eval["targets"]:
        model_cfg = config.model_config(mid)
        arch = {k: v for k, v in model_cfg.items() if k not in ("id", "seed")}
        paths = cache.get(arch, train_cfg, model_cfg.get("seed", 0), train_split, test_split)
        model, _ = load_checkpoint(paths[train_cfg.epochs])
        if device is not None:
            model.to(device)
        targets[mid] = model
        target_meta[mid] = {"family": model_cfg["kind"]}

    records, best = sweep_and_select(
        spec, train_cfg, train_split, test_split, eval_split,
        targets, config.attack_configs(), cache,
        target_meta=target_meta, batch_size=config.eval.get("batch_size", 128),
        device=device,
    )
    for name in ("asr.jsonl", "best.jsonl"):
        (records_dir / name).unlink(missing_ok=True)
    append_records(records_dir / "asr.jsonl",
                   _stamp([r.to_dict() for r in records], config.digest()))
    append_records(records_dir / "best.jsonl",
                   _stamp([b.to_dict() for b in best.values()], config.digest()))
    result.cells = len(records)
    _write_marker(run_dir, "complete", {"config": config.to_dict(), "cells": len(records)})
    result.status = "complete"
    return result
