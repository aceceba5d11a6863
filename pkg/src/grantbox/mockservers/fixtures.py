"""Baseline fixture trees for sandbox tests and demos."""

from __future__ import annotations

import json
import random
from pathlib import Path

from .profiles import (
    DEFAULT_BOOKINGS,
    DEFAULT_DB,
    DEFAULT_GIT,
    DEFAULT_INBOX,
    DEFAULT_INSTANCES,
    DEFAULT_NOTES,
    DEFAULT_TRACES,
)

_STATE_FILES = {
    "data/mockdb.json": DEFAULT_DB,
    "emails/inbox.json": DEFAULT_INBOX,
    "notes/pages.json": DEFAULT_NOTES,
    "travel/bookings.json": DEFAULT_BOOKINGS,
    "cloud/instances.json": DEFAULT_INSTANCES,
    "observability/traces.json": DEFAULT_TRACES,
    "git/state.json": DEFAULT_GIT,
}


def build_baseline(root, ballast_files: int = 0, ballast_bytes: int = 0, seed: int = 7) -> Path:
    """Lay down a baseline image directory with all mock-server state seeded.

    ``ballast_files`` adds deterministic filler under ``workspace/ballast`` so
    that copy-based reset/rebuild timings are measurable rather than noise.
    """
    root = Path(root)
    for rel in ("workspace", "tmp", "scratch"):
        (root / rel).mkdir(parents=True, exist_ok=True)
    for rel, payload in _STATE_FILES.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
    (root / "workspace" / "report.txt").write_text("quarterly report: all systems nominal\n", encoding="utf-8")
    if ballast_files:
        rng = random.Random(seed)
        ballast = root / "workspace" / "ballast"
        ballast.mkdir(parents=True, exist_ok=True)
        for i in range(ballast_files):
            blob = bytes(rng.getrandbits(8) for _ in range(ballast_bytes or 1024))
            (ballast / f"blob_{i:04d}.bin").write_bytes(blob)
    return root
