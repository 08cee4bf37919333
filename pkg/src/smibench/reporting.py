"""Report rendering: delimited tables, a markdown summary, and figures.

For every grouping scheme the report emits the best-average table (one row
per task: the benchmark value and the group attaining it), the full
group-averages matrix, and the TES/STD table with the lowest-TES group
flagged. Figures mirror the TES tables as bar charts and are written next
to the CSVs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import (CLASSIFICATION, GROUPINGS, REGRESSION, BestMetricsSet,
                      GroupReport, MetricRecord, build_group_report,
                      select_best, select_best_partial)

_KIND_METRIC = {REGRESSION: "RMSE", CLASSIFICATION: "AUC-ROC"}


def _group_label(group: tuple) -> str:
    return " ".join(group)


def write_best_average_csv(path: Path, report: GroupReport) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_kind", "metric", "task", "avg_metric", "group"])
        for kind in (REGRESSION, CLASSIFICATION):
            for task, summary in sorted(report.task_summaries.items()):
                if summary.task_kind != kind:
                    continue
                writer.writerow([kind, _KIND_METRIC[kind], task,
                                 repr(summary.benchmark_value),
                                 _group_label(summary.benchmark_group)])


def write_group_averages_csv(path: Path, report: GroupReport) -> None:
    tasks = sorted(report.task_summaries)
    groups = sorted({g for s in report.task_summaries.values() for g in s.averages})
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group"] + tasks)
        for g in groups:
            writer.writerow([_group_label(g)] +
                            [repr(report.task_summaries[t].averages[g]) for t in tasks])


def write_tes_std_csv(path: Path, report: GroupReport) -> None:
    groups = sorted({g for table in report.tes.values() for g in table})
    best = {kind: report.best_group(kind) for kind in (REGRESSION, CLASSIFICATION)}
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group",
                         "regression_tes", "regression_std", "regression_best",
                         "classification_tes", "classification_std", "classification_best"])
        for g in groups:
            row = [_group_label(g)]
            for kind in (REGRESSION, CLASSIFICATION):
                if kind in report.tes:
                    row.extend([repr(report.tes[kind][g]), repr(report.std[kind][g]),
                                "1" if best[kind] == g else "0"])
                else:
                    row.extend(["", "", ""])
            writer.writerow(row)


def render_tes_figure(path: Path, report: GroupReport) -> None:
    kinds = [k for k in (REGRESSION, CLASSIFICATION) if k in report.tes]
    if not kinds:
        return
    fig, axes = plt.subplots(1, len(kinds), figsize=(6.0 * len(kinds), 4.0), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        table = report.tes[kind]
        groups = sorted(table)
        labels = [_group_label(g) for g in groups]
        values = [table[g] for g in groups]
        errors = [report.std[kind][g] for g in groups]
        bars = ax.bar(range(len(groups)), values, yerr=errors, capsize=3,
                      color="steelblue", alpha=0.85)
        best = report.best_group(kind)
        for g, bar in zip(groups, bars):
            if g == best:
                bar.set_color("darkorange")
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("total error sum")
        ax.set_title(f"{kind} ({_KIND_METRIC[kind]}), grouped by {report.grouping}")
        ax.axhline(0.0, color="black", linewidth=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _markdown_table(header: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return lines


def write_markdown(path: Path, reports: dict[str, GroupReport], es_mode: str) -> None:
    lines = ["# Benchmark report", "",
             f"Error sums aggregate signed deviations per task with mode `{es_mode}`; "
             "positive always means worse than the benchmark group.", ""]
    for grouping, report in reports.items():
        lines.append(f"## Grouping: {grouping}")
        lines.append("")
        lines.append("### Best average metric per task")
        rows = []
        for task, summary in sorted(report.task_summaries.items()):
            rows.append([summary.task_kind, task, f"{summary.benchmark_value:.6f}",
                         _group_label(summary.benchmark_group)])
        lines.extend(_markdown_table(["kind", "task", "best avg", "group"], rows))
        lines.append("")
        lines.append("### TES and STD")
        groups = sorted({g for table in report.tes.values() for g in table})
        rows = []
        for g in groups:
            row = [_group_label(g)]
            for kind in (REGRESSION, CLASSIFICATION):
                if kind in report.tes:
                    mark = "**" if report.best_group(kind) == g else ""
                    row.append(f"{mark}{report.tes[kind][g]:.6f}{mark}")
                    row.append(f"{report.std[kind][g]:.6f}")
                else:
                    row.extend(["", ""])
            rows.append(row)
        lines.extend(_markdown_table(
            ["group", "regression TES", "regression STD",
             "classification TES", "classification STD"], rows))
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def render_reports(records: list[MetricRecord], out_dir: str | Path,
                   groupings: tuple[str, ...] = GROUPINGS, es_mode: str = "mean",
                   partial: bool = False) -> dict[str, GroupReport]:
    """Select the best records and write every table and figure.

    Without partial=True an incomplete grid is an error listing the
    missing keys.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best: BestMetricsSet = (select_best_partial(records) if partial
                            else select_best(records))
    reports: dict[str, GroupReport] = {}
    for grouping in groupings:
        report = build_group_report(best, grouping, es_mode=es_mode)
        reports[grouping] = report
        write_best_average_csv(out_dir / f"best_avg_{grouping}.csv", report)
        write_group_averages_csv(out_dir / f"group_averages_{grouping}.csv", report)
        write_tes_std_csv(out_dir / f"tes_std_{grouping}.csv", report)
        render_tes_figure(out_dir / f"fig_tes_{grouping}.png", report)
    write_markdown(out_dir / "report.md", reports, es_mode)
    return reports
