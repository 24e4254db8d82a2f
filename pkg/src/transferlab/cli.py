"""Command-line interface.

Verbs mirror the experiment lifecycle: ``data`` (fetch/synth/inspect),
``train``, ``attack``, ``eval``, ``sweep``, ``report``, ``profile``.
Exit codes: 0 success, 1 validation failure, 2 runtime failure,
3 incomplete-records render.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import tarfile
import urllib.error
import urllib.request
from pathlib import Path

from . import __version__
from .config import DATA_ROOT_ENV, ExperimentConfig, load_config
from .errors import (
    ConfigValidationError,
    IncompleteRecordsError,
    MissingRecordsError,
    TransferLabError,
)

logger = logging.getLogger("transferlab")

CIFAR10_BINARY_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR10_BINARY_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_INCOMPLETE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad usage is a validation failure (exit 1)
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override every seed in the config")
    parser.add_argument("--workers", type=int, default=None,
                        help="concurrent training jobs")
    parser.add_argument("--desk-scale", action="store_true",
                        help="reduced-scale mode: 20%% stratified train data, "
                             "1000-example eval subset")
    parser.add_argument("--device", default=None, help="torch device (default cpu)")
    parser.add_argument("--no-train", action="store_true",
                        help="fail instead of training on a cache miss")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transferlab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="dataset management")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_fetch = data_sub.add_parser("fetch", help="download the CIFAR-10 binary archive")
    p_fetch.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV, "data"))
    p_synth = data_sub.add_parser("synth", help="write a synthetic dataset in the "
                                                "CIFAR-10 binary layout")
    p_synth.add_argument("--root", required=True)
    p_synth.add_argument("--train-size", type=int, default=2000)
    p_synth.add_argument("--test-size", type=int, default=500)
    p_synth.add_argument("--seed", type=int, default=0)
    p_inspect = data_sub.add_parser("inspect", help="validate and summarize a data root")
    p_inspect.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV, "data"))
    p_inspect.add_argument("--relaxed", action="store_true",
                           help="accept non-official split sizes")

    for verb, helptext in (
        ("train", "train every configured model (idempotent via the cache)"),
        ("attack", "craft and persist adversarial batches for each proxy"),
        ("eval", "full pipeline: load -> train/cache -> attack -> evaluate -> persist"),
        ("sweep", "size x epoch sweep with best-cell selection"),
    ):
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("--config", required=True, help="experiment YAML")
        _add_common(p)

    p_report = sub.add_parser("report", help="render tables/figures from records")
    p_report.add_argument("--kind", required=True,
                          choices=["single_step_transfer", "multi_step_transfer",
                                   "width_heads", "epoch_curves", "accuracy_curve",
                                   "depth_heads", "overhead"])
    p_report.add_argument("--records", nargs="+", required=True,
                          help="record files (JSONL)")
    p_report.add_argument("--out", default="reports")
    p_report.add_argument("--format", nargs="+", default=["csv", "json"],
                          choices=["csv", "json", "svg"])
    p_report.add_argument("--fixed-epoch", type=int, default=30)
    p_report.add_argument("--fixed-size", type=int, nargs=2, default=[3, 4])
    p_report.add_argument("--attack", default=None, choices=[None, "fgsm", "bim"])
    p_report.add_argument("--value", default="asr_all", choices=["asr_all", "asr_valid"])

    p_profile = sub.add_parser("profile", help="time forward/backward passes")
    p_profile.add_argument("--config", required=True)
    p_profile.add_argument("--batch-size", type=int, default=None)
    p_profile.add_argument("--repetitions", type=int, default=None)
    p_profile.add_argument("--out", default=None, help="append cost records here")
    p_profile.add_argument("--device", default=None)
    return parser


def _load_config_with_overrides(args) -> ExperimentConfig:
    config = load_config(args.config)
    raw = config.to_dict()
    if getattr(args, "seed", None) is not None:
        raw["train"]["seed"] = args.seed
        raw["data"]["seed"] = args.seed
        for model in raw["models"]:
            model["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        raw["workers"] = args.workers
    from .config import validate_config

    return validate_config(raw)


# ---------------------------------------------------------------------------
# data verbs
# ---------------------------------------------------------------------------

def _cmd_data_fetch(args) -> int:
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    archive = root / "cifar-10-binary.tar.gz"
    if not (root / "cifar-10-batches-bin" / "test_batch.bin").exists():
        print(f"downloading {CIFAR10_BINARY_URL} -> {archive}")
        try:
            with urllib.request.urlopen(CIFAR10_BINARY_URL, timeout=60) as resp, \
                    open(archive, "wb") as out:
                while True:
                    chunk = resp.read(1 << 20)
                    if not chunk:
                        break
                    out.write(chunk)
        except (urllib.error.URLError, OSError) as exc:
            print(f"download failed: {exc}\n"
                  f"If this host is offline, obtain cifar-10-binary.tar.gz "
                  f"elsewhere and unpack it under {root}.", file=sys.stderr)
            return EXIT_RUNTIME
        digest = hashlib.md5(archive.read_bytes()).hexdigest()
        if digest != CIFAR10_BINARY_MD5:
            print(f"checksum mismatch: {digest} != {CIFAR10_BINARY_MD5}", file=sys.stderr)
            return EXIT_RUNTIME
        with tarfile.open(archive) as tar:
            tar.extractall(root)
    return _summarize_root(root, relaxed=False)


def _cmd_data_synth(args) -> int:
    from .data import ensure_synthetic_dataset

    root = ensure_synthetic_dataset(args.root, args.train_size, args.test_size,
                                    seed=args.seed)
    print(f"synthetic dataset ready under {root}")
    return _summarize_root(root, relaxed=True)


def _summarize_root(root: Path, relaxed: bool) -> int:
    from .data import load_cifar10

    train, test = load_cifar10(root, require_official_sizes=not relaxed)
    print(f"train: {len(train)} examples, test: {len(test)} examples")
    for name, digest in sorted(train.provenance.items()):
        if name != "source":
            print(f"  {name}: sha256 {digest[:16]}...")
    return EXIT_OK


def _cmd_data_inspect(args) -> int:
    return _summarize_root(Path(args.root), relaxed=args.relaxed)


# ---------------------------------------------------------------------------
# pipeline verbs
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    from .evaluation import TrainedModelCache
    from .runner import load_data

    config = _load_config_with_overrides(args)
    train_split, test_split = load_data(config, desk_scale=args.desk_scale)
    cache = TrainedModelCache(Path(config.output_dir) / "cache",
                              train_if_missing=not args.no_train, device=args.device)
    train_cfg = config.train_config()
    for model_cfg in config.models:
        arch = {k: v for k, v in model_cfg.items() if k not in ("id", "seed")}
        paths = cache.get(arch, train_cfg, model_cfg.get("seed", 0),
                          train_split, test_split)
        print(f"{model_cfg['id']}: checkpoint {paths[train_cfg.epochs]}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    from .evaluation import (TrainedModelCache, craft_adversarial_split,
                             stratified_eval_subset)
    from .models import all_selectors
    from .runner import DESK_SCALE_EVAL_SIZE, load_data
    from .training import load_checkpoint

    config = _load_config_with_overrides(args)
    train_split, test_split = load_data(config, desk_scale=args.desk_scale)
    eval_size = config.eval.get("eval_size")
    if args.desk_scale:
        eval_size = min(eval_size or DESK_SCALE_EVAL_SIZE, DESK_SCALE_EVAL_SIZE)
    eval_split = stratified_eval_subset(test_split, eval_size,
                                        seed=config.data.get("seed", 0))
    cache = TrainedModelCache(Path(config.output_dir) / "cache",
                              train_if_missing=not args.no_train, device=args.device)
    train_cfg = config.train_config()
    out_dir = Path(config.output_dir) / "adversarial" / config.digest()
    for mid in config.eval["proxies"]:
        model_cfg = config.model_config(mid)
        arch = {k: v for k, v in model_cfg.items() if k not in ("id", "seed")}
        paths = cache.get(arch, train_cfg, model_cfg.get("seed", 0),
                          train_split, test_split)
        model, _ = load_checkpoint(paths[train_cfg.epochs])
        if args.device:
            model.to(args.device)
        for attack in config.attack_configs():
            for sel in all_selectors(model.head_count):
                adv = craft_adversarial_split(
                    model, sel, eval_split, attack,
                    batch_size=config.eval.get("batch_size", 128), device=args.device,
                )
                path = out_dir / f"{mid}_{attack.name}_{sel}.npz"
                adv.save(path)
                print(f"{path}  (max linf {adv.linf_distances.max():.4f})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .runner import run_experiment

    config = _load_config_with_overrides(args)
    result = run_experiment(
        config, desk_scale=args.desk_scale,
        train_if_missing=not args.no_train,
        device=args.device, workers=args.workers,
    )
    print(f"run {result.status}: {result.records_dir} "
          f"({result.cells} cells, {result.missing} missing)")
    return EXIT_OK if result.status in ("complete", "cached") else EXIT_RUNTIME


def _cmd_sweep(args) -> int:
    from .runner import run_sweep

    config = _load_config_with_overrides(args)
    result = run_sweep(config, desk_scale=args.desk_scale,
                       train_if_missing=not args.no_train, device=args.device)
    print(f"sweep {result.status}: {result.records_dir} ({result.cells} records)")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .reports import ReportSpec, render_report

    spec = ReportSpec(
        kind=args.kind,
        record_paths=tuple(args.records),
        output_dir=args.out,
        formats=tuple(args.format),
        fixed_epoch=args.fixed_epoch,
        fixed_size=tuple(args.fixed_size),
        value_field=args.value,
        attack=args.attack,
    )
    result = render_report(spec)
    for path in result.paths:
        print(path)
    if not result.complete:
        print(f"warning: {len(result.missing_cells)} cells have no records "
              f"(rendered as dashes)", file=sys.stderr)
        return EXIT_INCOMPLETE
    return EXIT_OK


def _cmd_profile(args) -> int:
    from .diagnostics import profile_cost
    from .models import build_from_config
    from .records import append_records

    config = _load_config_with_overrides(args) if args.config else None
    profile_cfg = config.profile or {"batch_size": 32, "repetitions": 7}
    batch_size = args.batch_size or profile_cfg["batch_size"]
    reps = args.repetitions or profile_cfg["repetitions"]
    reports = []
    for model_cfg in config.models:
        arch = {k: v for k, v in model_cfg.items() if k not in ("id", "seed")}
        model = build_from_config(arch, seed=model_cfg.get("seed", 0))
        report = profile_cost(model, batch_size=batch_size, repetitions=reps,
                              device=args.device, architecture=model_cfg["id"])
        reports.append(report)
        print(f"{model_cfg['id']}: forward {report.forward_mean*1e3:.1f}ms  "
              f"fwd+bwd {report.sum_mean*1e3:.1f}ms  "
              f"params {report.stats.parameter_count:,}  "
              f"blocks {report.stats.block_count}")
    if args.out:
        append_records(args.out, [r.to_dict() for r in reports])
        print(f"cost records appended to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    handlers = {
        "train": _cmd_train,
        "attack": _cmd_attack,
        "eval": _cmd_eval,
        "sweep": _cmd_sweep,
        "report": _cmd_report,
        "profile": _cmd_profile,
    }
    try:
        if args.command == "data":
            sub = {"fetch": _cmd_data_fetch, "synth": _cmd_data_synth,
                   "inspect": _cmd_data_inspect}[args.data_command]
            return sub(args)
        return handlers[args.command](args)
    except ConfigValidationError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except (MissingRecordsError, IncompleteRecordsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except TransferLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
