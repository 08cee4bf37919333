"""Task metrics, best-model selection, and error-sum aggregation.

The aggregation works in five steps per grouping scheme: average the test
metric per group and task, take the best average as the task benchmark,
sign each record's deviation from the benchmark so positive always means
worse, average the deviations into a per-task error sum (ES), and sum a
group's ES values across a task family into its total error sum (TES)
with the population standard deviation of the pooled deviations alongside.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

REGRESSION = "regression"
CLASSIFICATION = "classification"
TASK_KINDS = (REGRESSION, CLASSIFICATION)

GROUPINGS = ("MT", "MTMS", "MTDS", "MSDS")
_GROUP_FIELDS = {
    "MT": ("mt",),
    "MTMS": ("mt", "ms"),
    "MTDS": ("mt", "ds"),
    "MSDS": ("ms", "ds"),
}

ES_MODES = ("mean", "sum")


def rmse(pred, label) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"rmse: shapes {pred.shape} and {label.shape} differ")
    if pred.size == 0:
        raise ValueError("rmse: empty input")
    return float(np.sqrt(np.mean((pred - label) ** 2)))


def mae(pred, label) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"mae: shapes {pred.shape} and {label.shape} differ")
    if pred.size == 0:
        raise ValueError("mae: empty input")
    return float(np.mean(np.abs(pred - label)))


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic.

    Equals (pairs with positive above negative + half the ties) divided by
    the number of positive-negative pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auc_roc: scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc: need at least one positive and one negative label")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # Tied scores share the average of their ranks (1-based).
        ranks[order[i: j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True, order=True)
class RunKey:
    """One fine-tune evaluation coordinate in the experiment grid."""

    mt: str
    ms: str
    ds: str
    iteration: int
    mtr_epoch: int
    ft_epoch: int
    task: str


@dataclass(frozen=True)
class MetricRecord:
    key: RunKey
    task_kind: str
    val_loss: float
    test_metric: float

    def group_key(self, grouping: str) -> tuple[str, ...]:
        return tuple(getattr(self.key, f) for f in _GROUP_FIELDS[grouping])


@dataclass
class BestMetricsSet:
    """The record with the lowest validation loss per
    (mt, ms, ds, iteration, task) cell."""

    records: list[MetricRecord]

    def __len__(self) -> int:
        return len(self.records)

    def tasks(self, task_kind: str | None = None) -> list[str]:
        names = {r.key.task for r in self.records
                 if task_kind is None or r.task_kind == task_kind}
        return sorted(names)

    def for_task(self, task: str) -> list[MetricRecord]:
        return [r for r in self.records if r.key.task == task]


def _selection_cell(record: MetricRecord):
    k = record.key
    return (k.mt, k.ms, k.ds, k.iteration, k.task)


def select_best(records: list[MetricRecord]) -> BestMetricsSet:
    """Minimum validation loss over the (mtr_epoch, ft_epoch) grid of each
    cell; ties broken by the lexicographically smaller epoch pair.

    The grid axes are inferred from the records; any missing combination is
    an error that lists the absent keys.
    """
    if not records:
        raise ValueError("select_best: no records")
    axes = {
        "mt": sorted({r.key.mt for r in records}),
        "ms": sorted({r.key.ms for r in records}),
        "ds": sorted({r.key.ds for r in records}),
        "iteration": sorted({r.key.iteration for r in records}),
        "mtr_epoch": sorted({r.key.mtr_epoch for r in records}),
        "ft_epoch": sorted({r.key.ft_epoch for r in records}),
        "task": sorted({r.key.task for r in records}),
    }
    seen = {(r.key.mt, r.key.ms, r.key.ds, r.key.iteration,
             r.key.mtr_epoch, r.key.ft_epoch, r.key.task) for r in records}
    missing = [combo for combo in itertools.product(
        axes["mt"], axes["ms"], axes["ds"], axes["iteration"],
        axes["mtr_epoch"], axes["ft_epoch"], axes["task"]) if combo not in seen]
    if missing:
        shown = ", ".join(map(str, missing[:10]))
        raise ValueError(f"select_best: {len(missing)} grid cells missing: {shown}"
                         + ("..." if len(missing) > 10 else ""))
    return select_best_partial(records)


def select_best_partial(records: list[MetricRecord]) -> BestMetricsSet:
    """Like select_best but tolerant of an incomplete grid."""
    best: dict[tuple, MetricRecord] = {}
    for rec in records:
        cell = _selection_cell(rec)
        cur = best.get(cell)
        if cur is None or (rec.val_loss, rec.key.mtr_epoch, rec.key.ft_epoch) < (
                cur.val_loss, cur.key.mtr_epoch, cur.key.ft_epoch):
            best[cell] = rec
    return BestMetricsSet(sorted(best.values(), key=lambda r: r.key))


def group_average(best: BestMetricsSet, grouping: str, task: str) -> dict[tuple, float]:
    """Arithmetic mean of the test metric per group for one task."""
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")
    sums: dict[tuple, list[float]] = {}
    for rec in best.records:
        if rec.key.task != task:
            continue
        sums.setdefault(rec.group_key(grouping), []).append(rec.test_metric)
    if not sums:
        raise ValueError(f"group_average: no records for task {task!r}")
    return {g: float(np.mean(vals)) for g, vals in sorted(sums.items())}


def benchmark(averages: dict[tuple, float], task_kind: str) -> tuple[float, tuple]:
    """Best group average: the lowest for regression, the highest for
    classification. Returns (value, group)."""
    if not averages:
        raise ValueError("benchmark: empty averages")
    if task_kind == REGRESSION:
        group = min(sorted(averages), key=lambda g: averages[g])
    elif task_kind == CLASSIFICATION:
        group = max(sorted(averages), key=lambda g: averages[g])
    else:
        raise ValueError(f"unknown task kind {task_kind!r}")
    return averages[group], group


def signed_deviation(test_metric: float, benchmark_value: float, task_kind: str) -> float:
    """Deviation from the benchmark, signed so positive is always worse."""
    if task_kind == REGRESSION:
        return test_metric - benchmark_value
    if task_kind == CLASSIFICATION:
        return benchmark_value - test_metric
    raise ValueError(f"unknown task kind {task_kind!r}")


def deviations(best: BestMetricsSet, benchmark_value: float, task: str,
               task_kind: str) -> list[tuple[MetricRecord, float]]:
    return [(rec, signed_deviation(rec.test_metric, benchmark_value, task_kind))
            for rec in best.for_task(task)]


@dataclass
class TaskSummary:
    task: str
    task_kind: str
    averages: dict[tuple, float]
    benchmark_value: float
    benchmark_group: tuple


@dataclass
class GroupReport:
    """ES per task plus TES and STD per group, for one grouping scheme."""

    grouping: str
    es_mode: str
    task_summaries: dict[str, TaskSummary] = field(default_factory=dict)
    es: dict[str, dict[tuple, float]] = field(default_factory=dict)          # task -> group -> ES
    tes: dict[str, dict[tuple, float]] = field(default_factory=dict)         # kind -> group -> TES
    std: dict[str, dict[tuple, float]] = field(default_factory=dict)         # kind -> group -> STD

    def best_group(self, task_kind: str) -> tuple | None:
        table = self.tes.get(task_kind)
        if not table:
            return None
        return min(sorted(table), key=lambda g: table[g])


def build_group_report(best: BestMetricsSet, grouping: str,
                       es_mode: str = "mean") -> GroupReport:
    """Run the averaging, benchmark, deviation, ES, and TES/STD steps for
    one grouping scheme.

    ES defaults to the mean of a group's per-record deviations, which keeps
    groups with different record counts comparable and makes the
    benchmark-attaining group's ES on its benchmark task exactly zero; the
    plain sum is available as es_mode="sum". Regression and classification
    families are aggregated separately, never mixed.
    """
    if es_mode not in ES_MODES:
        raise ValueError(f"es_mode must be one of {ES_MODES}, got {es_mode!r}")
    report = GroupReport(grouping=grouping, es_mode=es_mode)
    all_groups = sorted({rec.group_key(grouping) for rec in best.records})

    for kind in TASK_KINDS:
        tasks = best.tasks(kind)
        if not tasks:
            continue
        pooled: dict[tuple, list[float]] = {g: [] for g in all_groups}
        tes: dict[tuple, float] = {g: 0.0 for g in all_groups}
        for task in tasks:
            averages = group_average(best, grouping, task)
            missing = [g for g in all_groups if g not in averages]
            if missing:
                raise ValueError(f"incomplete task coverage: groups {missing} have no "
                                 f"records for task {task!r}")
            bench_value, bench_group = benchmark(averages, kind)
            report.task_summaries[task] = TaskSummary(task, kind, averages,
                                                      bench_value, bench_group)
            es_task: dict[tuple, float] = {}
            for g in all_groups:
                devs = [signed_deviation(rec.test_metric, bench_value, kind)
                        for rec in best.for_task(task) if rec.group_key(grouping) == g]
                pooled[g].extend(devs)
                if es_mode == "mean":
                    # Deviation of the group mean: identical to the mean of
                    # the deviations, and exactly zero for the benchmark
                    # group on its own task.
                    es_task[g] = signed_deviation(averages[g], bench_value, kind)
                else:
                    es_task[g] = float(np.sum(devs))
                tes[g] += es_task[g]
            report.es[task] = es_task
        report.tes[kind] = tes
        report.std[kind] = {g: float(np.std(np.asarray(pooled[g]))) for g in all_groups}
    return report


def error_sum(report: GroupReport, group: tuple, task: str) -> float:
    return report.es[task][group]


def total_error_sum(report: GroupReport, group: tuple, task_kind: str) -> float:
    return report.tes[task_kind][group]


def deviation_std(report: GroupReport, group: tuple, task_kind: str) -> float:
    return report.std[task_kind][group]
