"""Run records: per-iteration metric rows plus a JSON-serializable summary."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict, seed: int) -> str:
    payload = canonical_json({"config": config, "seed": seed})
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [r["t"] for r in self.rows]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("rows must be strictly increasing in t")

    def summary_json(self) -> str:
        return json.dumps(_jsonable(self.summary), sort_keys=True, indent=2) + "\n"

    def write(self, directory, stem: str) -> tuple:
        """Write ``<stem>.jsonl`` (rows) and ``<stem>.json`` (summary).

        An existing summary with different content is never overwritten.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        summary_path = directory / f"{stem}.json"
        rows_path = directory / f"{stem}.jsonl"
        text = self.summary_json()
        if summary_path.exists() and summary_path.read_text() != text:
            raise FileExistsError(
                f"{summary_path} exists with different content; refusing to overwrite"
            )
        summary_path.write_text(text)
        with rows_path.open("w") as fh:
            for row in self.rows:
                fh.write(canonical_json(row) + "\n")
        return rows_path, summary_path
