"""Canonical JSON helpers.

Every artifact file (corpora, traces, outcomes, reports, logs) is written
through these helpers so that identical inputs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def canonical_dumps(obj) -> str:
    """Deterministic single-line JSON: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path, records, header=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(canonical_dumps(header) + "\n")
        for rec in records:
            fh.write(canonical_dumps(rec) + "\n")


def read_jsonl(path, expect_header=False):
    """Returns (header, records); header is None unless expect_header."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [json.loads(line) for line in lines if line.strip()]
    if expect_header:
        if not rows:
            raise ValueError(f"{path}: empty file, expected a header line")
        return rows[0], rows[1:]
    return None, rows


def sha256_hex(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_obj(obj) -> str:
    """Digest of the canonical JSON encoding."""
    return sha256_hex(canonical_dumps(obj))
