"""Append-only JSONL registry of fine-tune metric records.

Each line carries exactly the run-key fields plus the two measurements and
a timestamp; records are never mutated, and a fresh grid invocation opens
a new numbered registry file instead of rewriting an old one.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

from .metrics import MetricRecord, RunKey

RECORD_FIELDS = ("mt", "ms", "ds", "iteration", "mtr_epoch", "ft_epoch",
                 "task", "task_kind", "val_loss", "test_metric")


def record_to_dict(record: MetricRecord, ts: float | None = None) -> dict:
    d = {
        "mt": record.key.mt,
        "ms": record.key.ms,
        "ds": record.key.ds,
        "iteration": record.key.iteration,
        "mtr_epoch": record.key.mtr_epoch,
        "ft_epoch": record.key.ft_epoch,
        "task": record.key.task,
        "task_kind": record.task_kind,
        "val_loss": record.val_loss,
        "test_metric": record.test_metric,
    }
    d["ts"] = time.time() if ts is None else ts
    return d


def record_from_dict(d: dict) -> MetricRecord:
    missing = [f for f in RECORD_FIELDS if f not in d]
    if missing:
        raise ValueError(f"registry record missing fields {missing}")
    key = RunKey(mt=d["mt"], ms=d["ms"], ds=d["ds"], iteration=int(d["iteration"]),
                 mtr_epoch=int(d["mtr_epoch"]), ft_epoch=int(d["ft_epoch"]), task=d["task"])
    return MetricRecord(key=key, task_kind=d["task_kind"],
                        val_loss=float(d["val_loss"]), test_metric=float(d["test_metric"]))


class RegistryWriter:
    """Serialized single writer appending to one registry file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, records: list[MetricRecord]) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(record_to_dict(rec)) + "\n")
                fh.flush()


def new_registry_path(directory: str | Path) -> Path:
    """Next free registry-NNNN.jsonl name under a registry directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = 1
    while (directory / f"registry-{n:04d}.jsonl").exists():
        n += 1
    return directory / f"registry-{n:04d}.jsonl"


def registry_files(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob("registry-*.jsonl"))
    return [path]


def read_registry(path: str | Path, lenient: bool = False) -> list[MetricRecord]:
    """Read one registry file, or every registry-*.jsonl in a directory.

    With lenient=True a truncated trailing line (an interrupted append)
    is skipped instead of raising, which is what resume wants.
    """
    records: list[MetricRecord] = []
    for file in registry_files(path):
        with file.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(record_from_dict(json.loads(line)))
                except (json.JSONDecodeError, ValueError) as exc:
                    if lenient:
                        continue
                    raise ValueError(f"{file}:{lineno}: bad registry line: {exc}") from None
    return records


def registry_fingerprint(records: list[MetricRecord]) -> str:
    """Canonical serialization without timestamps, for replication checks."""
    lines = [json.dumps(record_to_dict(r, ts=0.0), sort_keys=True)
             for r in sorted(records, key=lambda r: (r.key, r.task_kind))]
    return "\n".join(lines)


def write_run_metadata(path: str | Path, metadata: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")
