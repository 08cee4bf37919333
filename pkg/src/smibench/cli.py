"""Command-line entry point.

Verbs: curate, fetch-tasks, pretrain, finetune, grid, report. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import logging
import sys
from pathlib import Path

from .curation import (DataError, DescriptorTable, curate, read_descriptor_csv,
                       write_column_stats, write_descriptor_csv)
from .families import ModelFamily
from .fixtures import generate_corpus
from .gridrun import GridSpec, run_grid, shuffled_corpus
from .metrics import MetricRecord, RunKey
from .models import MtrModel, load_checkpoint
from .registry import RegistryWriter, new_registry_path, read_registry
from .reporting import render_reports
from .seeding import derive_seed
from .tasks import TASK_NAMES, fetch_tasks, load_task
from .tokenizer import (Vocabulary, build_vocab, encode_batch, read_corpus,
                        write_corpus)
from .training import NumericError, TaskSplits, TrainConfig, train_ft

log = logging.getLogger("smibench")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_grid_spec() -> GridSpec:
    """The packaged desk-scale grid: tiny models, a laptop-sized corpus."""
    text = importlib.resources.files("smibench").joinpath("desk.json").read_text("utf-8")
    return GridSpec.from_dict(json.loads(text))


def _load_spec(path: str | None) -> GridSpec:
    if path is None:
        return default_grid_spec()
    return GridSpec.load(path)


def load_curated(data_dir: str | Path) -> tuple[DescriptorTable, Vocabulary]:
    data_dir = Path(data_dir)
    csv_path = data_dir / "curated.csv"
    vocab_path = data_dir / "vocab.txt"
    if not csv_path.exists() or not vocab_path.exists():
        raise DataError(f"curated dataset not found under {data_dir} "
                        "(expected curated.csv and vocab.txt; run curate first)")
    smiles, values, present, names = read_descriptor_csv(csv_path)
    return DescriptorTable(smiles, values, present, names), Vocabulary.load(vocab_path)


def _add_common(parser: argparse.ArgumentParser, suppress: bool = False) -> None:
    # The flags are accepted both before and after the verb. The subparser
    # copies default to SUPPRESS so they never clobber a value that was
    # already parsed at the top level.
    def dflt(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--config", default=dflt(None),
                        help="grid spec JSON (defaults to the packaged desk grid)")
    parser.add_argument("--seed", type=int, default=dflt(None),
                        help="override the master seed")
    parser.add_argument("--workers", type=int, default=dflt(1),
                        help="parallel runs in the grid")
    parser.add_argument("--resume", action="store_true", default=dflt(False),
                        help="skip runs already completed")
    parser.add_argument("--fixtures", action="store_true", default=dflt(False),
                        help="use bundled miniature task stand-ins instead of downloads")
    parser.add_argument("--partial", action="store_true", default=dflt(False),
                        help="tolerate an incomplete grid when reporting")


def build_parser() -> _Parser:
    parser = _Parser(prog="smibench", description=__doc__)
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    p = sub.add_parser("curate",
                       help="build the curated descriptor table and vocabulary")
    _add_common(p, suppress=True)
    p.add_argument("corpus", nargs="?", help="SMILES corpus, one molecule per line")
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="generate a synthetic corpus of N molecules instead of reading one")
    p.add_argument("--descriptors", help="precomputed descriptor CSV (smiles,<props...>)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lo-q", type=float, default=0.001)
    p.add_argument("--hi-q", type=float, default=0.999)
    p.add_argument("--no-outlier-mask", action="store_true")
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--no-zscore", action="store_true")

    p = sub.add_parser("fetch-tasks",
                       help="download the benchmark tasks or install fixtures")
    _add_common(p, suppress=True)
    p.add_argument("names", nargs="*", default=[], help=f"task names (default: all of {', '.join(TASK_NAMES)})")
    p.add_argument("--out", required=True, help="task directory")
    p.add_argument("--rows", type=int, default=64, help="rows per fixture task")

    p = sub.add_parser("pretrain",
                       help="pre-train one (model type, size, data size) configuration")
    _add_common(p, suppress=True)
    p.add_argument("--data", required=True, help="curated dataset directory")
    p.add_argument("--mt", required=True, help="model type (ChemBERTa, ChemLLaMA, ChemBART)")
    p.add_argument("--ms", required=True, help="model size name from the grid spec")
    p.add_argument("--ds", required=True, help="data size name from the grid spec")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("finetune",
                       help="fine-tune one checkpoint on one task")
    _add_common(p, suppress=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="curated dataset directory (for the vocabulary)")
    p.add_argument("--tasks", required=True, help="task directory")
    p.add_argument("--task", required=True, help="task name")
    p.add_argument("--iteration", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (registry appended)")

    p = sub.add_parser("grid",
                       help="run the full experiment grid")
    _add_common(p, suppress=True)
    p.add_argument("--data", required=True, help="curated dataset directory")
    p.add_argument("--tasks", required=True, help="task directory")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report",
                       help="render best-average and TES/STD tables plus figures")
    _add_common(p, suppress=True)
    p.add_argument("--registry", required=True, help="registry file or directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--es-mode", choices=("mean", "sum"), default="mean")
    p.add_argument("--groupings", nargs="*", default=["MT", "MTMS", "MTDS", "MSDS"])
    return parser


def cmd_curate(args) -> int:
    if args.synthetic is not None:
        seed = args.seed if args.seed is not None else 7
        smiles = generate_corpus(args.synthetic, seed=seed)
    elif args.corpus:
        smiles = read_corpus(args.corpus)
    elif args.descriptors:
        smiles = None
    else:
        raise UsageError("curate needs a corpus file, --synthetic N, or --descriptors")

    values = present = names = None
    if args.descriptors:
        smiles_csv, values, present, names = read_descriptor_csv(args.descriptors)
        smiles = smiles_csv
    if not smiles:
        raise DataError("empty corpus")

    table, report = curate(
        smiles, values, present, names,
        lo_q=args.lo_q, hi_q=args.hi_q,
        mask_outlier_cells=not args.no_outlier_mask,
        prune=not args.no_prune,
        normalize=not args.no_zscore,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_descriptor_csv(out / "curated.csv", table)
    write_column_stats(out / "column_stats.json", table)
    write_corpus(out / "corpus.txt", table.smiles)
    build_vocab(table.smiles).save(out / "vocab.txt")
    (out / "curation_report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "curation_report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    print(report.to_text())
    return EXIT_OK


def cmd_fetch_tasks(args) -> int:
    names = args.names or list(TASK_NAMES)
    seed = args.seed if args.seed is not None else 0
    paths = fetch_tasks(names, args.out, fixtures=args.fixtures,
                        fixture_rows=args.rows, seed=seed)
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    spec = _load_spec(args.config)
    if args.seed is not None:
        spec.master_seed = args.seed
    table, vocab = load_curated(args.data)
    sizes = {s.name: s for s in spec.model_sizes}
    slices = {d.name: d for d in spec.data_sizes}
    if args.ms not in sizes:
        raise UsageError(f"unknown model size {args.ms!r}; spec has {sorted(sizes)}")
    if args.ds not in slices:
        raise UsageError(f"unknown data size {args.ds!r}; spec has {sorted(slices)}")
    family = ModelFamily.from_name(args.mt)
    size, data = sizes[args.ms], slices[args.ds]

    from .gridrun import _mtr_job
    meta = _mtr_job({"spec": spec, "mt": family.display_name, "size": size, "data": data,
                     "table": shuffled_corpus(spec, table),
                     "vocab_tokens": vocab.tokens, "out_dir": args.out})
    print(f"pre-trained {args.mt} {args.ms} {args.ds}: "
          f"val losses {[round(v, 6) for v in meta['val_losses']]}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    spec = _load_spec(args.config)
    if args.seed is not None:
        spec.master_seed = args.seed
    _, vocab = load_curated(args.data)
    config, arrays, extra = load_checkpoint(args.checkpoint)
    model = MtrModel(config, seed=0)
    model.load_state(arrays)
    run_id = extra.get("run_id", {})
    mt = run_id.get("mt", config.family.display_name)
    ms, ds = run_id.get("ms", "?"), run_id.get("ds", "?")
    mtr_epoch = int(extra.get("epoch", 0))

    task = load_task(args.tasks, args.task)
    train_idx, val_idx, test_idx = task.split_indices()
    enc = encode_batch(task.smiles, config.family, spec.max_len, vocab)
    splits = TaskSplits(
        train=enc.take(train_idx), train_labels=task.labels[train_idx],
        val=enc.take(val_idx), val_labels=task.labels[val_idx],
        test=enc.take(test_idx), test_labels=task.labels[test_idx],
    )
    ft_seed = derive_seed(spec.master_seed, "ft", mt, ms, ds, args.task, mtr_epoch)
    train_config = TrainConfig(batch_size=spec.batch_size, epochs=spec.ft_epochs,
                               peak_lr=spec.ft_peak_lr, warmup_epochs=spec.warmup_epochs,
                               seed=ft_seed, adamw=spec.adamw)
    records = train_ft(model, splits, task.kind, train_config, args.iteration)

    out = Path(args.out)
    writer = RegistryWriter(new_registry_path(out / "registry"))
    writer.append([
        MetricRecord(
            key=RunKey(mt=mt, ms=ms, ds=ds, iteration=args.iteration,
                       mtr_epoch=mtr_epoch, ft_epoch=r.epoch, task=args.task),
            task_kind=task.kind, val_loss=r.val_loss, test_metric=r.test_metric)
        for r in records
    ])
    for r in records:
        print(f"epoch {r.epoch}: val_loss {r.val_loss:.6f} test_metric {r.test_metric:.6f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    spec = _load_spec(args.config)
    if args.seed is not None:
        spec.master_seed = args.seed
    table, vocab = load_curated(args.data)
    registry = run_grid(spec, table, vocab, args.tasks, args.out,
                        workers=args.workers, resume=args.resume)
    records = read_registry(Path(args.out) / "registry")
    print(f"grid complete: {spec.config_count} configurations, "
          f"{len(records)} records in {registry.parent}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_registry(args.registry)
    if not records:
        raise DataError(f"no records found in {args.registry}")
    reports = render_reports(records, args.out, groupings=tuple(args.groupings),
                             es_mode=args.es_mode, partial=args.partial)
    for grouping, report in reports.items():
        for kind, table in report.tes.items():
            best = report.best_group(kind)
            print(f"[{grouping}] best {kind} group: {' '.join(best)} "
                  f"(TES {table[best]:.6f})")
    print(f"report written to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "curate": cmd_curate,
    "fetch-tasks": cmd_fetch_tasks,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "grid": cmd_grid,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
