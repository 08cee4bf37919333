import json
from pathlib import Path

import numpy as np
import pytest

from smibench.cli import main
from smibench.curation import read_descriptor_csv
from smibench.fixtures import generate_corpus
from smibench.gridrun import DataSlice, GridSpec, SizeSpec
from smibench.metrics import CLASSIFICATION, REGRESSION
from smibench.registry import read_registry
from smibench.tasks import load_task
from smibench.tokenizer import write_corpus


def small_spec_file(tmp_path, **overrides) -> Path:
    spec = GridSpec(
        model_types=["ChemBERTa"],
        model_sizes=[SizeSpec("Small", 8, 16, 1, 2)],
        data_sizes=[DataSlice("D1", 30)],
        tasks=["bace_regression"],
        iterations=1, mtr_epochs=2, ft_epochs=2, master_seed=3,
        batch_size=16, mtr_peak_lr=1e-3, ft_peak_lr=1e-2,
        warmup_epochs=1, max_len=40, val_fraction=0.1,
    )
    for key, value in overrides.items():
        setattr(spec, key, value)
    path = tmp_path / "spec.json"
    spec.save(path)
    return path


class TestCurateCommand:
    def test_planted_defects_audited(self, tmp_path):
        # Corpus with duplicates; a descriptor CSV with an outlier cell and
        # a constant column. The report has to match the hand counts.
        rows = [
            ("CCO", 1.0, 5.0, 7.0),
            ("CCN", 2.0, 5.0, 8.0),
            ("CCC", 3.0, 5.0, 9.0),
            ("CCO", 4.0, 5.0, 10.0),   # duplicate smiles
            ("CCS", 5.0, 5.0, 1e9),    # outlier in column c
            ("COC", 6.0, 5.0, 11.0),
        ]
        csv_path = tmp_path / "desc.csv"
        csv_path.write_text("smiles,a,b,c\n" + "\n".join(
            f"{s},{x},{y},{z}" for s, x, y, z in rows) + "\n")
        out = tmp_path / "out"
        code = main(["curate", "--descriptors", str(csv_path), "--out", str(out),
                     "--lo-q", "0.05", "--hi-q", "0.95"])
        assert code == 0
        report = json.loads((out / "curation_report.json").read_text())
        assert report["rows_in"] == 6
        assert report["duplicates_removed"] == 1
        assert report["rows_after_dedup"] == 5
        # Column b is constant (min == median): removed. Column c keeps its
        # row but masks the 1e9 cell.
        assert "b" in report["columns_removed"]
        assert report["cells_masked_as_outliers"] >= 1
        smiles, values, present, names = read_descriptor_csv(out / "curated.csv")
        assert "b" not in names
        assert len(smiles) == 5
        # Retained columns are normalized over present cells.
        for j in range(values.shape[1]):
            col = values[:, j][present[:, j]]
            assert abs(col.mean()) <= 1e-9
            assert abs(col.std() - 1.0) <= 1e-9
        assert (out / "vocab.txt").exists()
        assert (out / "curation_report.txt").exists()

    def test_synthetic_corpus(self, tmp_path):
        out = tmp_path / "out"
        assert main(["curate", "--synthetic", "64", "--seed", "5",
                     "--out", str(out)]) == 0
        smiles, values, present, names = read_descriptor_csv(out / "curated.csv")
        assert len(smiles) > 0 and len(names) <= 8

    def test_curate_idempotent_with_stages_disabled(self, tmp_path):
        out1 = tmp_path / "one"
        assert main(["curate", "--synthetic", "80", "--seed", "5",
                     "--out", str(out1)]) == 0
        out2 = tmp_path / "two"
        assert main(["curate", "--descriptors", str(out1 / "curated.csv"),
                     "--out", str(out2), "--no-prune",
                     "--lo-q", "0", "--hi-q", "1"]) == 0
        a = read_descriptor_csv(out1 / "curated.csv")
        b = read_descriptor_csv(out2 / "curated.csv")
        assert a[0] == b[0] and a[3] == b[3]
        np.testing.assert_allclose(b[1][b[2]], a[1][a[2]], atol=1e-9)

    def test_empty_corpus_exits_2(self, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        assert main(["curate", str(empty), "--out", str(tmp_path / "o")]) == 2

    def test_missing_args_exits_1(self, tmp_path):
        assert main(["curate", "--out", str(tmp_path / "o")]) == 1


class TestFetchTasksCommand:
    def test_fixtures_install_six_tasks(self, tmp_path):
        out = tmp_path / "tasks"
        assert main(["fetch-tasks", "--out", str(out), "--fixtures"]) == 0
        files = sorted(out.glob("*.csv"))
        assert len(files) == 6
        for name in ("bace_classification", "hiv", "tox21_sr_p53"):
            task = load_task(out, name)
            assert task.kind == CLASSIFICATION
            assert len(task.smiles) >= 32
            assert set(np.unique(task.labels)) == {0.0, 1.0}
        for name in ("bace_regression", "delaney", "lipo"):
            assert load_task(out, name).kind == REGRESSION

    def test_sidecar_records_split_policy(self, tmp_path):
        out = tmp_path / "tasks"
        main(["fetch-tasks", "bace_regression", "--out", str(out), "--fixtures"])
        sidecar = json.loads((out / "bace_regression.json").read_text())
        assert sidecar["split_policy"]["kind"] == "seeded_random"
        assert sidecar["rows"] >= 32

    def test_unknown_task_exits_2(self, tmp_path):
        assert main(["fetch-tasks", "nonesuch", "--out", str(tmp_path), "--fixtures"]) == 2


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """curate + fetch-tasks once for the command round-trip tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    tasks = root / "tasks"
    corpus = generate_corpus(60, seed=11, unique=True)
    write_corpus(root / "corpus.txt", corpus)
    assert main(["curate", str(root / "corpus.txt"), "--out", str(data)]) == 0
    assert main(["fetch-tasks", "bace_regression", "bace_classification",
                 "--out", str(tasks), "--fixtures", "--rows", "36"]) == 0
    return root, data, tasks


class TestTrainingCommands:
    def test_pretrain_then_finetune(self, pipeline_dirs, tmp_path):
        root, data, tasks = pipeline_dirs
        spec = small_spec_file(tmp_path)
        out = tmp_path / "run"
        code = main(["--config", str(spec), "pretrain", "--data", str(data),
                     "--mt", "ChemBERTa", "--ms", "Small", "--ds", "D1",
                     "--out", str(out)])
        assert code == 0
        ckpts = sorted((out / "checkpoints").glob("*.ckpt"))
        assert len(ckpts) == 2
        assert (out / "runs").exists()

        code = main(["--config", str(spec), "finetune",
                     "--checkpoint", str(ckpts[0]), "--data", str(data),
                     "--tasks", str(tasks), "--task", "bace_regression",
                     "--iteration", "0", "--out", str(out)])
        assert code == 0
        records = read_registry(out / "registry")
        assert len(records) == 2
        assert {r.key.task for r in records} == {"bace_regression"}

    def test_pretrain_unknown_size_exits_1(self, pipeline_dirs, tmp_path):
        root, data, tasks = pipeline_dirs
        spec = small_spec_file(tmp_path)
        assert main(["--config", str(spec), "pretrain", "--data", str(data),
                     "--mt", "ChemBERTa", "--ms", "Giant", "--ds", "D1",
                     "--out", str(tmp_path / "x")]) == 1

    def test_missing_data_dir_exits_2(self, tmp_path):
        spec = small_spec_file(tmp_path)
        assert main(["--config", str(spec), "pretrain", "--data", str(tmp_path / "nope"),
                     "--mt", "ChemBERTa", "--ms", "Small", "--ds", "D1",
                     "--out", str(tmp_path / "x")]) == 2


class TestGridAndReportCommands:
    def test_grid_then_report(self, pipeline_dirs, tmp_path):
        root, data, tasks = pipeline_dirs
        spec = small_spec_file(
            tmp_path, model_types=["ChemBERTa", "ChemLLaMA"],
            tasks=["bace_regression", "bace_classification"], iterations=2)
        out = tmp_path / "grid"
        assert main(["--config", str(spec), "grid", "--data", str(data),
                     "--tasks", str(tasks), "--out", str(out)]) == 0
        records = read_registry(out / "registry")
        assert len(records) == 2 * 1 * 1 * 2 * 2 * 2 * 2  # mt ms ds me fe iter tasks

        report_dir = tmp_path / "report"
        assert main(["report", "--registry", str(out / "registry"),
                     "--out", str(report_dir)]) == 0
        for grouping in ("MT", "MTMS", "MTDS", "MSDS"):
            assert (report_dir / f"best_avg_{grouping}.csv").exists()
            assert (report_dir / f"tes_std_{grouping}.csv").exists()
            assert (report_dir / f"group_averages_{grouping}.csv").exists()
            assert (report_dir / f"fig_tes_{grouping}.png").exists()
        assert (report_dir / "report.md").exists()

        # The TES table marks exactly one best group per family.
        import csv as csv_mod
        with open(report_dir / "tes_std_MT.csv") as fh:
            rows = list(csv_mod.DictReader(fh))
        assert sum(int(r["regression_best"]) for r in rows) == 1
        assert sum(int(r["classification_best"]) for r in rows) == 1

    def test_report_partial_grid(self, pipeline_dirs, tmp_path):
        root, data, tasks = pipeline_dirs
        spec = small_spec_file(tmp_path, tasks=["bace_regression", "bace_classification"])
        out = tmp_path / "grid"
        assert main(["--config", str(spec), "grid", "--data", str(data),
                     "--tasks", str(tasks), "--out", str(out)]) == 0
        reg_file = next((out / "registry").glob("*.jsonl"))
        lines = reg_file.read_text().splitlines()
        reg_file.write_text("\n".join(lines[:-1]) + "\n")
        assert main(["report", "--registry", str(out / "registry"),
                     "--out", str(tmp_path / "r1")]) == 2
        assert main(["--partial", "report", "--registry", str(out / "registry"),
                     "--out", str(tmp_path / "r2")]) == 0

    def test_report_empty_registry_exits_2(self, tmp_path):
        empty = tmp_path / "registry-0001.jsonl"
        empty.write_text("")
        assert main(["report", "--registry", str(empty),
                     "--out", str(tmp_path / "r")]) == 2

    def test_report_is_deterministic(self, pipeline_dirs, tmp_path):
        root, data, tasks = pipeline_dirs
        spec = small_spec_file(tmp_path, tasks=["bace_regression", "bace_classification"])
        out = tmp_path / "grid"
        assert main(["--config", str(spec), "grid", "--data", str(data),
                     "--tasks", str(tasks), "--out", str(out)]) == 0
        outputs = []
        for name in ("r1", "r2"):
            rdir = tmp_path / name
            assert main(["report", "--registry", str(out / "registry"),
                         "--out", str(rdir)]) == 0
            outputs.append({p.name: p.read_bytes()
                            for p in sorted(rdir.glob("*.csv")) + [rdir / "report.md"]})
        assert outputs[0] == outputs[1]


def test_no_command_exits_1():
    assert main([]) == 1


def test_unknown_command_exits_1():
    assert main(["frobnicate"]) == 1
