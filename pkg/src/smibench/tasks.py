"""Fine-tune benchmark task ingestion.

Tasks arrive as canonical "smiles,label" CSVs with a JSON sidecar that
records the task kind, the row count, and the split policy used, so a
result can always be traced back to the exact splits. The six standard
tasks can be downloaded, or replaced offline by bundled miniature
stand-ins via fixtures mode.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .curation import DataError, split_indices
from .fixtures import classification_labels, generate_corpus, regression_labels
from .metrics import CLASSIFICATION, REGRESSION
from .seeding import derive_seed

log = logging.getLogger(__name__)

_S3 = "https://deepchemdata.s3-us-west-1.amazonaws.com/datasets"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    expected_rows: int
    url: str
    smiles_column: str
    label_column: str


TASK_SPECS = {
    "bace_regression": TaskSpec("bace_regression", REGRESSION, 1513,
                                f"{_S3}/bace.csv", "mol", "pIC50"),
    "delaney": TaskSpec("delaney", REGRESSION, 1127,
                        f"{_S3}/delaney-processed.csv", "smiles",
                        "measured log solubility in mols per litre"),
    "lipo": TaskSpec("lipo", REGRESSION, 4200,
                     f"{_S3}/Lipophilicity.csv", "smiles", "exp"),
    "bace_classification": TaskSpec("bace_classification", CLASSIFICATION, 1513,
                                    f"{_S3}/bace.csv", "mol", "Class"),
    "hiv": TaskSpec("hiv", CLASSIFICATION, 40000,
                    f"{_S3}/HIV.csv", "smiles", "HIV_active"),
    "tox21_sr_p53": TaskSpec("tox21_sr_p53", CLASSIFICATION, 8000,
                             f"{_S3}/tox21.csv.gz", "smiles", "SR-p53"),
}

TASK_NAMES = tuple(TASK_SPECS)
DEFAULT_SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class TaskDataset:
    name: str
    kind: str
    smiles: list[str]
    labels: np.ndarray
    split_seed: int
    split_fractions: tuple[float, float, float]

    def split_indices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Deterministic train/val/test indices from the recorded policy."""
        n = len(self.smiles)
        f_train, f_val, f_test = self.split_fractions
        holdout = split_indices(n, f_val + f_test, self.split_seed)
        train = holdout.train_indices
        rest = holdout.val_indices
        inner = split_indices(len(rest), f_test / (f_val + f_test), self.split_seed + 1)
        return train, rest[inner.train_indices], rest[inner.val_indices]


def task_csv_path(directory: str | Path, name: str) -> Path:
    return Path(directory) / f"{name}.csv"


def write_task(directory: str | Path, dataset: TaskDataset, source: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = task_csv_path(directory, dataset.name)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["smiles", "label"])
        for s, y in zip(dataset.smiles, dataset.labels):
            writer.writerow([s, repr(float(y))])
    sidecar = {
        "name": dataset.name,
        "kind": dataset.kind,
        "rows": len(dataset.smiles),
        "source": source,
        "split_policy": {
            "kind": "seeded_random",
            "fractions": list(dataset.split_fractions),
            "seed": dataset.split_seed,
        },
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_task(directory: str | Path, name: str) -> TaskDataset:
    path = task_csv_path(directory, name)
    if not path.exists():
        raise DataError(f"task file {path} not found; run fetch-tasks first")
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise DataError(f"task sidecar {sidecar_path} not found")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    smiles: list[str] = []
    labels: list[float] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["smiles", "label"]:
            raise DataError(f"{path}: expected header 'smiles,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 cells, got {len(row)}")
            try:
                labels.append(float(row[1]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric label {row[1]!r}") from None
            smiles.append(row[0])
    policy = sidecar.get("split_policy", {})
    return TaskDataset(
        name=name,
        kind=sidecar["kind"],
        smiles=smiles,
        labels=np.array(labels, dtype=np.float64),
        split_seed=int(policy.get("seed", 0)),
        split_fractions=tuple(policy.get("fractions", DEFAULT_SPLIT_FRACTIONS)),
    )


def make_fixture_task(spec: TaskSpec, rows: int, seed: int) -> TaskDataset:
    """Miniature offline stand-in with the same file contract as a download.

    For classification the generator is re-seeded until every canonical
    split contains both classes, so downstream AUC is always defined.
    """
    for attempt in range(64):
        gen_seed = seed + attempt * 1000003
        smiles = generate_corpus(rows, seed=gen_seed, unique=True)
        if spec.kind == REGRESSION:
            labels = regression_labels(smiles, seed=gen_seed + 1)
        else:
            labels = classification_labels(smiles)
        dataset = TaskDataset(spec.name, spec.kind, smiles, labels,
                              split_seed=gen_seed, split_fractions=DEFAULT_SPLIT_FRACTIONS)
        if spec.kind == REGRESSION:
            return dataset
        if all(0.0 < labels[idx].mean() < 1.0 for idx in dataset.split_indices()):
            return dataset
    raise RuntimeError(f"could not build a two-class fixture for {spec.name}")


def _check_row_count(spec: TaskSpec, rows: int) -> None:
    lo, hi = 0.8 * spec.expected_rows, 1.2 * spec.expected_rows
    if not lo <= rows <= hi:
        log.warning("task %s has %d rows, outside 20%% of the expected %d",
                    spec.name, rows, spec.expected_rows)


def _download_task(spec: TaskSpec, split_seed: int) -> TaskDataset:
    import requests

    resp = requests.get(spec.url, timeout=120)
    resp.raise_for_status()
    payload = resp.content
    if spec.url.endswith(".gz"):
        payload = gzip.decompress(payload)
    reader = csv.DictReader(io.StringIO(payload.decode("utf-8")))
    smiles: list[str] = []
    labels: list[float] = []
    for row in reader:
        raw = (row.get(spec.label_column) or "").strip()
        if raw == "":
            continue
        smiles.append(row[spec.smiles_column])
        labels.append(float(raw))
    if not smiles:
        raise DataError(f"{spec.name}: no usable rows in downloaded file")
    _check_row_count(spec, len(smiles))
    return TaskDataset(spec.name, spec.kind, smiles,
                       np.array(labels, dtype=np.float64),
                       split_seed=split_seed, split_fractions=DEFAULT_SPLIT_FRACTIONS)


def fetch_tasks(names: list[str], directory: str | Path, *, fixtures: bool = False,
                fixture_rows: int = 64, seed: int = 0) -> list[Path]:
    """Materialize task CSVs, downloading or generating fixture stand-ins."""
    paths = []
    for name in names:
        if name not in TASK_SPECS:
            raise DataError(f"unknown task {name!r}; known tasks: {', '.join(TASK_SPECS)}")
        spec = TASK_SPECS[name]
        task_seed = derive_seed(seed, "task", name) & 0x7FFFFFFF
        if fixtures:
            rows = max(fixture_rows, 32)
            dataset = make_fixture_task(spec, rows, seed=task_seed)
            source = f"fixture(rows={rows})"
        else:
            dataset = _download_task(spec, split_seed=task_seed)
            source = spec.url
        paths.append(write_task(directory, dataset, source))
    return paths
