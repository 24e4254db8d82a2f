"""Tables and figures rendered from persisted record files.

Reports are pure functions of JSONL record files: nothing here touches
models or data. Tables render to CSV (canonical, exactly re-parseable:
fractions serialized with ``repr`` so ``parse(render(x)) == x``) and JSON;
curves render to SVG. Cells without backing records appear as ``-``.

Table kinds:

* ``single_step_transfer`` / ``multi_step_transfer`` — proxy-family rows x
  target columns, one column group at the fixed recipe (epoch 30, 3x4 grid)
  and one with the best tuned value over everything present.
* ``width_heads`` — (attack, width) rows x head columns plus the ensemble,
  averaged over seeds and targets at the fixed epoch.

Figure kinds: ``epoch_curves``, ``accuracy_curve``, ``depth_heads``,
``overhead``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IncompleteRecordsError, MissingRecordsError
from .evaluation import ASRRecord
from .records import read_record_files

DASH = "-"

TABLE_KINDS = ("single_step_transfer", "multi_step_transfer", "width_heads")
FIGURE_KINDS = ("epoch_curves", "accuracy_curve", "depth_heads", "overhead")
_TABLE_ATTACK = {"single_step_transfer": "fgsm", "multi_step_transfer": "bim"}


@dataclass(frozen=True)
class ReportSpec:
    kind: str
    record_paths: tuple
    output_dir: str
    formats: tuple = ("csv", "json")
    fixed_epoch: int = 30
    fixed_size: tuple = (3, 4)
    value_field: str = "asr_all"
    attack: Optional[str] = None  # width_heads/depth_heads/epoch_curves filter

    def __post_init__(self):
        if self.kind not in TABLE_KINDS + FIGURE_KINDS:
            raise ValueError(f"unknown report kind {self.kind!r}")


@dataclass
class RenderResult:
    paths: list
    complete: bool
    missing_cells: list = field(default_factory=list)


def _load_asr_records(paths: Sequence[str | Path]) -> list[ASRRecord]:
    missing_files = [str(p) for p in paths if not Path(p).exists()]
    if missing_files:
        raise MissingRecordsError(f"record files not found: {missing_files}")
    raw = read_record_files(paths)
    return [ASRRecord.from_dict(r) for r in raw if r.get("record_kind") == "asr"]


def _fmt(value: Optional[float]) -> str:
    return DASH if value is None else repr(float(value))


def _parse_cell(text: str) -> Optional[float]:
    return None if text == DASH else float(text)


def _group_mean(records: list[ASRRecord], value_field: str) -> dict:
    """Mean over seeds for each (family, target, size, epoch, selector)."""
    acc: dict = {}
    for rec in records:
        if rec.proxy == rec.target:
            continue
        family = rec.meta.get("family", rec.proxy)
        tfam = rec.meta.get("target_meta", {}).get("family", rec.target)
        size = (rec.meta.get("depth"), rec.meta.get("width")) \
            if rec.meta.get("depth") is not None else None
        key = (family, tfam, rec.attack, size, rec.meta.get("epoch"), rec.selector)
        acc.setdefault(key, []).append(getattr(rec, value_field))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# transfer tables (single/multi step)
# ---------------------------------------------------------------------------

def _transfer_table(records: list[ASRRecord], attack: str, fixed_epoch: int,
                    fixed_size: tuple, value_field: str) -> dict:
    """-> {"rows": [family...], "columns": [target...], "cells": {...}}.

    ``cells[(family, "fixed:<target>")]`` is the seed-mean at the fixed
    recipe under the best selector; ``tuned:`` columns take the max over
    every (size, epoch, selector) group present.
    """
    means = _group_mean([r for r in records if r.attack == attack], value_field)
    families = sorted({k[0] for k in means}, key=lambda f: (f != "multitrack", f))
    targets = sorted({k[1] for k in means})
    cells: dict = {}
    for family in families:
        for tfam in targets:
            fixed_vals = [
                v for (f, t, a, size, epoch, sel), v in means.items()
                if f == family and t == tfam and epoch == fixed_epoch
                and (f != "multitrack" or size == tuple(fixed_size))
            ]
            tuned_vals = [
                v for (f, t, a, size, epoch, sel), v in means.items()
                if f == family and t == tfam
            ]
            cells[(family, f"fixed:{tfam}")] = max(fixed_vals) if fixed_vals else None
            cells[(family, f"tuned:{tfam}")] = max(tuned_vals) if tuned_vals else None
    return {"rows": families, "targets": targets, "cells": cells}


def _write_transfer_csv(table: dict, path: Path) -> None:
    columns = [f"fixed:{t}" for t in table["targets"]] + \
              [f"tuned:{t}" for t in table["targets"]]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["proxy"] + columns)
        for family in table["rows"]:
            writer.writerow([family] + [_fmt(table["cells"][(family, c)]) for c in columns])


def parse_transfer_csv(path: str | Path) -> dict:
    """Inverse of the transfer-table CSV: {(proxy, column): value-or-None}."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        cells = {}
        for row in reader:
            for col, text in zip(header[1:], row[1:]):
                cells[(row[0], col)] = _parse_cell(text)
    return cells


# ---------------------------------------------------------------------------
# width x heads table
# ---------------------------------------------------------------------------

def _width_heads_table(records: list[ASRRecord], fixed_epoch: int,
                       fixed_depth: int, value_field: str,
                       attacks: Sequence[str] = ("fgsm", "bim")) -> dict:
    """Rows (attack, width); head columns up to the widest grid, then the
    ensemble; values averaged over seeds and targets at the fixed recipe."""
    rows: dict = {}
    widths = set()
    for rec in records:
        meta = rec.meta
        if meta.get("family") != "multitrack" or rec.proxy == rec.target:
            continue
        if meta.get("epoch") != fixed_epoch or meta.get("depth") != fixed_depth:
            continue
        widths.add(meta["width"])
        key = (rec.attack, meta["width"], rec.selector)
        rows.setdefault(key, []).append(getattr(rec, value_field))
    if not widths:
        return {"attacks": list(attacks), "widths": [], "max_width": 0, "cells": {}}
    max_width = max(widths)
    cells = {}
    for attack in attacks:
        for width in sorted(widths):
            for head in range(1, max_width + 1):
                vals = rows.get((attack, width, f"head{head}"))
                cells[(attack, width, f"head{head}")] = \
                    float(np.mean(vals)) if vals else None
            vals = rows.get((attack, width, "ensemble"))
            cells[(attack, width, "all")] = float(np.mean(vals)) if vals else None
    return {"attacks": list(attacks), "widths": sorted(widths),
            "max_width": max_width, "cells": cells}


def _write_width_heads_csv(table: dict, path: Path) -> None:
    head_cols = [f"head{h}" for h in range(1, table["max_width"] + 1)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["attack", "width"] + head_cols + ["all"])
        for attack in table["attacks"]:
            for width in table["widths"]:
                row = [attack, width]
                row += [_fmt(table["cells"][(attack, width, c)]) for c in head_cols]
                row.append(_fmt(table["cells"][(attack, width, "all")]))
                writer.writerow(row)


def parse_width_heads_csv(path: str | Path) -> dict:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        cells = {}
        for row in reader:
            for col, text in zip(header[2:], row[2:]):
                cells[(row[0], int(row[1]), col)] = _parse_cell(text)
    return cells


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def _plot(fig_fn, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = fig_fn(plt)
    fig.savefig(path, format="svg")
    plt.close(fig)


def _epoch_curves_figure(records: list[ASRRecord], attack: str, value_field: str):
    means = _group_mean([r for r in records if r.attack == attack], value_field)
    targets = sorted({k[1] for k in means})
    if not targets:
        raise IncompleteRecordsError(f"no transfer records for attack {attack!r}")

    def draw(plt):
        fig, axes = plt.subplots(1, len(targets), figsize=(4 * len(targets), 3.2),
                                 squeeze=False)
        for ax, tfam in zip(axes[0], targets):
            per_family: dict = {}
            for (f, t, a, size, epoch, sel), v in means.items():
                if t != tfam or epoch is None:
                    continue
                per_family.setdefault(f, {}).setdefault(epoch, []).append(v)
            for fam, by_epoch in sorted(per_family.items()):
                xs = sorted(by_epoch)
                ys = [max(by_epoch[e]) for e in xs]  # best selector per epoch
                ax.plot(xs, ys, marker="o", label=fam)
            ax.set_title(f"target: {tfam}")
            ax.set_xlabel("epoch")
            ax.set_ylabel("attack success rate")
            ax.grid(alpha=0.3)
            ax.legend(fontsize=8)
        fig.suptitle(f"{attack} transfer vs training epochs")
        fig.tight_layout()
        return fig

    return draw


def _accuracy_curve_figure(raw_records: list[dict]):
    accs = [r for r in raw_records if r.get("record_kind") == "accuracy"]
    if not accs:
        raise IncompleteRecordsError("no accuracy records")

    def draw(plt):
        fig, ax = plt.subplots(figsize=(6, 4))
        by_family: dict = {}
        for rec in accs:
            fam = rec.get("family") or rec.get("arch", {}).get("kind", "model")
            by_family.setdefault(fam, {}).setdefault(rec["epoch"], []).append(
                rec["acc_ensemble"]
            )
        for fam, by_epoch in sorted(by_family.items()):
            xs = sorted(by_epoch)
            ys = [float(np.mean(by_epoch[e])) for e in xs]
            ax.plot(xs, ys, marker="o", label=fam)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        return fig

    return draw


def _depth_heads_figure(records: list[ASRRecord], attack: str, fixed_epoch: int,
                        value_field: str):
    means = _group_mean([r for r in records if r.attack == attack], value_field)
    series: dict = {}
    for (f, t, a, size, epoch, sel), v in means.items():
        if f != "multitrack" or size is None or epoch != fixed_epoch:
            continue
        series.setdefault(sel, {}).setdefault(size[0], []).append(v)
    if not series:
        raise IncompleteRecordsError(
            f"no multitrack records at epoch {fixed_epoch} for attack {attack!r}"
        )

    def draw(plt):
        fig, ax = plt.subplots(figsize=(6, 4))
        for sel, by_depth in sorted(series.items()):
            xs = sorted(by_depth)
            ys = [float(np.mean(by_depth[d])) for d in xs]
            ax.plot(xs, ys, marker="o", label=sel)
        ax.set_xlabel("depth (rows)")
        ax.set_ylabel("attack success rate")
        ax.set_title(f"{attack} transfer vs grid depth")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        return fig

    return draw


def _overhead_figure(raw_records: list[dict]):
    costs = [r for r in raw_records if r.get("record_kind") == "cost"]
    if not costs:
        raise IncompleteRecordsError("no cost records")

    def draw(plt):
        fig, ax = plt.subplots(figsize=(6, 4))
        costs_sorted = sorted(costs, key=lambda r: r["sum_mean"])
        labels = [r["architecture"] for r in costs_sorted]
        sums = [r["sum_mean"] for r in costs_sorted]
        errs = [r["sum_std"] for r in costs_sorted]
        ax.bar(labels, sums, yerr=errs, color="#4878a8")
        ax.set_ylabel("forward+backward seconds per batch")
        ax.set_title(f"cost at batch size {costs_sorted[0]['batch_size']}")
        ax.grid(alpha=0.3, axis="y")
        plt.setp(ax.get_xticklabels(), rotation=20, ha="right", fontsize=8)
        fig.tight_layout()
        return fig

    return draw


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def render_report(spec: ReportSpec) -> RenderResult:
    """Render ``spec.kind`` from its record files into ``spec.output_dir``.

    Tables always render (dashes mark gaps) and report completeness;
    figures with no backing data raise :class:`IncompleteRecordsError`.
    """
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = RenderResult(paths=[], complete=True)

    if spec.kind in TABLE_KINDS:
        records = _load_asr_records(spec.record_paths)
        if spec.kind in _TABLE_ATTACK:
            table = _transfer_table(
                records, _TABLE_ATTACK[spec.kind], spec.fixed_epoch,
                tuple(spec.fixed_size), spec.value_field,
            )
            writer, parser_name = _write_transfer_csv, "transfer"
        else:
            table = _width_heads_table(
                records, spec.fixed_epoch, spec.fixed_size[0], spec.value_field
            )
            writer, parser_name = _write_width_heads_csv, "width_heads"
        result.missing_cells = [k for k, v in table["cells"].items() if v is None]
        result.complete = bool(table["cells"]) and not result.missing_cells
        if "csv" in spec.formats:
            path = out_dir / f"{spec.kind}.csv"
            writer(table, path)
            result.paths.append(path)
        if "json" in spec.formats:
            path = out_dir / f"{spec.kind}.json"
            payload = {
                "kind": spec.kind,
                "cells": {"|".join(map(str, k)): v for k, v in table["cells"].items()},
            }
            path.write_text(json.dumps(payload, indent=2, sort_keys=True))
            result.paths.append(path)
        return result

    # figures
    raw = read_record_files([p for p in spec.record_paths if Path(p).exists()])
    if not raw and not all(Path(p).exists() for p in spec.record_paths):
        raise MissingRecordsError(
            f"record files not found: {[str(p) for p in spec.record_paths]}"
        )
    if spec.kind == "epoch_curves":
        records = _load_asr_records(spec.record_paths)
        draw = _epoch_curves_figure(records, spec.attack or "fgsm", spec.value_field)
    elif spec.kind == "accuracy_curve":
        draw = _accuracy_curve_figure(raw)
    elif spec.kind == "depth_heads":
        records = _load_asr_records(spec.record_paths)
        draw = _depth_heads_figure(records, spec.attack or "fgsm", spec.fixed_epoch,
                                   spec.value_field)
    else:
        draw = _overhead_figure(raw)
    path = out_dir / f"{spec.kind}.svg"
    _plot(draw, path)
    result.paths.append(path)
    return result
