"""Experiment-grid execution with replayable seeds and resume.

A grid is the Cartesian product of model types, model sizes, and data
sizes; each configuration is pre-trained once, and every epoch checkpoint
is fine-tuned on every task for the configured number of iterations. All
per-run seeds derive from a keyed hash of the master seed and the run key,
so any slice of the grid can be replayed in isolation. Data sizes are
nested prefixes of one shuffled corpus, so every configuration sees the
same training and validation rows for a given size.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .curation import DescriptorTable, split_indices
from .families import ModelFamily
from .models import ModelConfig, MtrModel, load_checkpoint
from .registry import (RegistryWriter, new_registry_path, read_registry,
                       record_from_dict, write_run_metadata)
from .seeding import derive_seed
from .tasks import load_task
from .tokenizer import Vocabulary, encode_batch
from .training import AdamWConfig, TaskSplits, TrainConfig, train_ft, train_mtr

log = logging.getLogger(__name__)


@dataclass
class SizeSpec:
    name: str
    hidden_size: int
    intermediate_size: int
    num_layers: int
    num_heads: int


@dataclass
class DataSlice:
    name: str
    rows: int


@dataclass
class GridSpec:
    """The five experiment axes plus the shared training settings."""

    model_types: list[str]
    model_sizes: list[SizeSpec]
    data_sizes: list[DataSlice]
    tasks: list[str]
    iterations: int = 5
    mtr_epochs: int = 7
    ft_epochs: int = 7
    master_seed: int = 7
    batch_size: int = 64
    mtr_peak_lr: float = 1e-4
    ft_peak_lr: float = 1e-2
    warmup_epochs: int = 1
    max_len: int = 96
    val_fraction: float = 0.05
    adamw: AdamWConfig = dc_field(default_factory=AdamWConfig)

    def __post_init__(self):
        for mt in self.model_types:
            ModelFamily.from_name(mt)
        if len({s.name for s in self.model_sizes}) != len(self.model_sizes):
            raise ValueError("duplicate model size names")
        if len({d.name for d in self.data_sizes}) != len(self.data_sizes):
            raise ValueError("duplicate data size names")

    @property
    def config_count(self) -> int:
        return len(self.model_types) * len(self.model_sizes) * len(self.data_sizes)

    def configurations(self):
        """Canonical enumeration order of (mt, size_spec, data_slice)."""
        for mt in self.model_types:
            for size in self.model_sizes:
                for data in self.data_sizes:
                    yield mt, size, data

    def records_per_task(self) -> int:
        return (self.config_count * self.mtr_epochs * self.ft_epochs * self.iterations)

    def to_dict(self) -> dict:
        return {
            "model_types": list(self.model_types),
            "model_sizes": [vars(s) for s in self.model_sizes],
            "data_sizes": [vars(d) for d in self.data_sizes],
            "tasks": list(self.tasks),
            "iterations": self.iterations,
            "mtr_epochs": self.mtr_epochs,
            "ft_epochs": self.ft_epochs,
            "master_seed": self.master_seed,
            "batch_size": self.batch_size,
            "mtr_peak_lr": self.mtr_peak_lr,
            "ft_peak_lr": self.ft_peak_lr,
            "warmup_epochs": self.warmup_epochs,
            "max_len": self.max_len,
            "val_fraction": self.val_fraction,
            "adamw": vars(self.adamw),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        d["model_sizes"] = [SizeSpec(**s) for s in d["model_sizes"]]
        slices = []
        for item in d["data_sizes"]:
            if isinstance(item, dict):
                slices.append(DataSlice(**item))
            else:
                slices.append(DataSlice(name=str(item), rows=int(item)))
        d["data_sizes"] = slices
        if "adamw" in d:
            d["adamw"] = AdamWConfig(**d["adamw"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "GridSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def model_config_for(spec: GridSpec, mt: str, size: SizeSpec,
                     vocab_size: int, num_properties: int) -> ModelConfig:
    return ModelConfig(
        family=ModelFamily.from_name(mt),
        hidden_size=size.hidden_size,
        intermediate_size=size.intermediate_size,
        num_layers=size.num_layers,
        num_heads=size.num_heads,
        vocab_size=vocab_size,
        num_properties=num_properties,
    )


def checkpoint_path(out_dir: Path, mt: str, ms: str, ds: str, seed: int, epoch: int) -> Path:
    return out_dir / "checkpoints" / f"{mt}_{ms}_{ds}_seed{seed}_epoch{epoch}.ckpt"


def shuffled_corpus(spec: GridSpec, table: DescriptorTable) -> DescriptorTable:
    """Master-seeded corpus shuffle; data sizes are prefixes of the result,
    so a smaller slice is always a subset of a larger one."""
    order = np.random.default_rng(
        derive_seed(spec.master_seed, "corpus_shuffle")).permutation(table.num_rows)
    return table.take(order)


def _mtr_train_config(spec: GridSpec, seed: int) -> TrainConfig:
    return TrainConfig(batch_size=spec.batch_size, epochs=spec.mtr_epochs,
                       peak_lr=spec.mtr_peak_lr, warmup_epochs=spec.warmup_epochs,
                       seed=seed, adamw=spec.adamw)


def _ft_train_config(spec: GridSpec, seed: int) -> TrainConfig:
    return TrainConfig(batch_size=spec.batch_size, epochs=spec.ft_epochs,
                       peak_lr=spec.ft_peak_lr, warmup_epochs=spec.warmup_epochs,
                       seed=seed, adamw=spec.adamw)


def _mtr_job(payload: dict) -> dict:
    """Train one (mt, ms, ds) configuration; checkpoints go to disk."""
    spec: GridSpec = payload["spec"]
    mt, size, data = payload["mt"], payload["size"], payload["data"]
    table: DescriptorTable = payload["table"]
    vocab_tokens: list[str] = payload["vocab_tokens"]
    out_dir = Path(payload["out_dir"])

    vocab = Vocabulary(vocab_tokens)
    family = ModelFamily.from_name(mt)
    seed = derive_seed(spec.master_seed, "mtr", mt, size.name, data.name)
    slice_table = table.head(data.rows)
    batch_all = encode_batch(slice_table.smiles, family, spec.max_len, vocab)
    plan = split_indices(slice_table.num_rows, spec.val_fraction,
                         derive_seed(spec.master_seed, "split", data.name))
    config = model_config_for(spec, mt, size, len(vocab), table.num_columns)
    model = MtrModel(config, seed=seed)
    train_config = _mtr_train_config(spec, seed)
    run_id = {"mt": mt, "ms": size.name, "ds": data.name}
    checkpoints = train_mtr(model, slice_table, plan, train_config, batch_all,
                            run_id=run_id, checkpoint_dir=out_dir / "checkpoints")
    metadata = {
        "run": run_id,
        "phase": "mtr",
        "seed": seed,
        "generator": "numpy-PCG64",
        "rows": data.rows,
        "model_config": config.to_dict(),
        "train_config": {"batch_size": train_config.batch_size, "epochs": train_config.epochs,
                         "peak_lr": train_config.peak_lr,
                         "warmup_epochs": train_config.warmup_epochs,
                         "eta_min": train_config.eta_min, "adamw": vars(train_config.adamw)},
        "val_losses": [c.val_loss for c in checkpoints],
        "checkpoints": [c.path for c in checkpoints],
    }
    write_run_metadata(out_dir / "runs" / f"mtr_{mt}_{size.name}_{data.name}.json", metadata)
    return metadata


def _ft_job(payload: dict) -> list[dict]:
    """Fine-tune every (mtr_epoch, iteration) of one configuration on one
    task; returns plain record dicts in canonical order."""
    spec: GridSpec = payload["spec"]
    mt, size, data = payload["mt"], payload["size"], payload["data"]
    task_name: str = payload["task"]
    tasks_dir = Path(payload["tasks_dir"])
    out_dir = Path(payload["out_dir"])
    vocab = Vocabulary(payload["vocab_tokens"])
    skip: set[tuple] = payload["skip"]

    family = ModelFamily.from_name(mt)
    task = load_task(tasks_dir, task_name)
    train_idx, val_idx, test_idx = task.split_indices()
    enc = encode_batch(task.smiles, family, spec.max_len, vocab)
    splits = TaskSplits(
        train=enc.take(train_idx), train_labels=task.labels[train_idx],
        val=enc.take(val_idx), val_labels=task.labels[val_idx],
        test=enc.take(test_idx), test_labels=task.labels[test_idx],
    )

    mtr_seed = derive_seed(spec.master_seed, "mtr", mt, size.name, data.name)
    out_records: list[dict] = []
    for mtr_epoch in range(spec.mtr_epochs):
        needed = [it for it in range(spec.iterations)
                  if (mt, size.name, data.name, task_name, mtr_epoch, it) not in skip]
        if not needed:
            continue
        ckpt_file = checkpoint_path(out_dir, mt, size.name, data.name, mtr_seed, mtr_epoch)
        config, arrays, _ = load_checkpoint(ckpt_file)
        model = MtrModel(config, seed=0)
        model.load_state(arrays)
        for iteration in needed:
            ft_seed = derive_seed(spec.master_seed, "ft", mt, size.name, data.name,
                                  task_name, mtr_epoch)
            records = train_ft(model, splits, task.kind,
                               _ft_train_config(spec, ft_seed), iteration)
            for rec in records:
                out_records.append({
                    "mt": mt, "ms": size.name, "ds": data.name,
                    "iteration": iteration, "mtr_epoch": mtr_epoch,
                    "ft_epoch": rec.epoch, "task": task_name, "task_kind": task.kind,
                    "val_loss": rec.val_loss, "test_metric": rec.test_metric,
                })
    return out_records


def _run_jobs(jobs, job_fn, workers: int):
    """Run jobs over a bounded pool, yielding results in submission order."""
    if workers <= 1:
        for job in jobs:
            yield job_fn(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(job_fn, job) for job in jobs]
        for fut in futures:
            yield fut.result()


def run_grid(spec: GridSpec, table: DescriptorTable, vocab: Vocabulary,
             tasks_dir: str | Path, out_dir: str | Path,
             workers: int = 1, resume: bool = False) -> Path:
    """Execute the full grid and append the records to a new registry file.

    Returns the path of the registry file written by this invocation. With
    resume=True, configurations whose checkpoints exist and fine-tune runs
    already present in the registry directory are skipped, and the combined
    registry equals an uninterrupted run up to timestamps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks_dir = Path(tasks_dir)
    max_rows = max(d.rows for d in spec.data_sizes)
    if table.num_rows < max_rows:
        raise ValueError(f"curated table has {table.num_rows} rows but the grid "
                         f"needs {max_rows}")

    shuffled = shuffled_corpus(spec, table)

    done_ft: set[tuple] = set()
    if resume:
        for rec in read_registry(out_dir / "registry", lenient=True):
            done_ft.add((rec.key.mt, rec.key.ms, rec.key.ds, rec.key.task,
                         rec.key.mtr_epoch, rec.key.iteration, rec.key.ft_epoch))
    complete_ft = {key[:6] for key in done_ft
                   if all(key[:6] + (e,) in done_ft for e in range(spec.ft_epochs))}

    vocab_tokens = vocab.tokens

    mtr_jobs = []
    for mt, size, data in spec.configurations():
        seed = derive_seed(spec.master_seed, "mtr", mt, size.name, data.name)
        have_all = all(
            checkpoint_path(out_dir, mt, size.name, data.name, seed, e).exists()
            for e in range(spec.mtr_epochs))
        if resume and have_all:
            log.info("resume: skipping pre-training for %s %s %s", mt, size.name, data.name)
            continue
        mtr_jobs.append({"spec": spec, "mt": mt, "size": size, "data": data,
                         "table": shuffled, "vocab_tokens": vocab_tokens,
                         "out_dir": str(out_dir)})
    for meta in _run_jobs(mtr_jobs, _mtr_job, workers):
        log.info("pre-trained %(mt)s %(ms)s %(ds)s", meta["run"])

    ft_jobs = []
    for mt, size, data in spec.configurations():
        for task_name in spec.tasks:
            ft_jobs.append({"spec": spec, "mt": mt, "size": size, "data": data,
                            "task": task_name, "tasks_dir": str(tasks_dir),
                            "out_dir": str(out_dir), "vocab_tokens": vocab_tokens,
                            "skip": complete_ft})

    registry_path = new_registry_path(out_dir / "registry")
    writer = RegistryWriter(registry_path)
    for record_dicts in _run_jobs(ft_jobs, _ft_job, workers):
        writer.append([record_from_dict(d) for d in record_dicts])

    spec.save(out_dir / "grid_spec.json")
    return registry_path
