"""Append-only JSONL record files and content digests.

Every experiment artifact (ASR measurements, cost profiles, training
metadata) is persisted as one JSON object per line. Readers never depend on
in-memory state from the writer process, which keeps the report layer a pure
function of files on disk.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and no whitespace so that semantically
    identical structures (up to key order) share one byte representation."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_digest(obj: Any) -> str:
    """Stable 12-hex-char content address for a JSON-serializable config."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]


def file_digest(path: str | Path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def append_records(path: str | Path, records: Iterable[dict]) -> int:
    """Append records to a JSONL file, creating parent directories.

    Returns the number of records written. The write is line-buffered and
    flushed per call; concurrent writers must use separate files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "a", encoding="utf-8") as f:
        for rec in records:
            f.write(canonical_json(rec))
            f.write("\n")
            n += 1
        f.flush()
        os.fsync(f.fileno())
    return n


def read_records(path: str | Path) -> Iterator[dict]:
    """Yield records from a JSONL file; blank lines are ignored."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_record_files(paths: Iterable[str | Path]) -> list[dict]:
    out: list[dict] = []
    for p in paths:
        out.extend(read_records(p))
    return out
