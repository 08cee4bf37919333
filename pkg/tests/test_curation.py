import numpy as np
import pytest

from smibench import (DescriptorTable, MoleculeRecord, builtin_descriptors,
                      curate, dedup, epoch_permutation, mask_outliers,
                      prune_constant_columns, split, zscore)
from smibench.curation import (DescriptorError, DataError, compute_column_stats,
                               read_descriptor_csv, split_indices,
                               write_descriptor_csv)
from smibench.fixtures import generate_corpus


def make_table(columns: dict[str, list[float]], present: dict[str, list[bool]] | None = None):
    names = list(columns)
    values = np.array([columns[n] for n in names], dtype=np.float64).T
    if present is None:
        pres = np.ones_like(values, dtype=bool)
    else:
        pres = np.array([present[n] for n in names], dtype=bool).T
    smiles = [f"C{'C' * i}" for i in range(values.shape[0])]
    return DescriptorTable(smiles, values, pres, names)


class TestDedup:
    def test_first_occurrence_kept(self):
        assert dedup(["CCO", "CCO", "CCN"]) == ["CCO", "CCN"]

    def test_empty(self):
        assert dedup([]) == []

    def test_molecule_records(self):
        records = [MoleculeRecord("CCO", np.zeros(1), np.ones(1, dtype=bool)),
                   MoleculeRecord("CCO", np.ones(1), np.ones(1, dtype=bool))]
        kept = dedup(records)
        assert len(kept) == 1 and kept[0].descriptors[0] == 0.0

    def test_planted_duplicates_against_set_oracle(self):
        rng = np.random.default_rng(5)
        base = [f"C{'N' * int(i)}" for i in rng.integers(0, 900, size=1000)]
        expected = len(set(base))
        assert len(dedup(base)) == expected


class TestBuiltinDescriptors:
    def test_methane(self):
        d = builtin_descriptors("C")
        assert d[0] == 1 and d[1] == 0 and d[2] == 0

    def test_benzene_graph_oracle(self):
        # By hand: six aromatic atoms in a cycle, six bonds, 6 - 6 + 1 ring.
        d = builtin_descriptors("c1ccccc1")
        assert d[0] == 6
        assert d[1] == 6
        assert d[2] == 1
        assert d[4] == 6

    def test_isobutane(self):
        d = builtin_descriptors("CC(C)C")
        assert d[0] == 4 and d[1] == 3 and d[7] == 1

    def test_disconnected_components(self):
        # Two fragments joined by a dot: no bond between them.
        d = builtin_descriptors("CC.CC")
        assert d[0] == 4 and d[1] == 2 and d[2] == 0

    def test_ring_closure_across_dot(self):
        # Legal SMILES: the ring-bond pair bridges the dot, one component.
        d = builtin_descriptors("C1.C1")
        assert d[0] == 2 and d[1] == 1 and d[2] == 0

    def test_heteroatoms_and_halogens(self):
        d = builtin_descriptors("NCCl")
        assert d[5] == 2  # N and Cl
        assert d[6] == 1  # Cl

    def test_mol_weight_water_like(self):
        # [OH2]: one oxygen plus two explicit hydrogens.
        d = builtin_descriptors("[OH2]")
        assert d[3] == pytest.approx(15.999 + 2 * 1.008)

    def test_dangling_ring_digit_raises_naming_digit(self):
        with pytest.raises(DescriptorError, match="1"):
            builtin_descriptors("C1CC")

    def test_fixture_corpus_parses(self):
        for smiles in generate_corpus(200, seed=9):
            builtin_descriptors(smiles)


class TestMaskOutliers:
    def test_extreme_value_masked_by_quantile_oracle(self):
        table = make_table({"x": [1.0, 2.0, 3.0, 1e38]})
        out = mask_outliers(table, 0.0, 0.75)
        # Sorting oracle: the 0.75 quantile of [1,2,3,1e38] is far below 1e38.
        hi = np.quantile(np.sort([1.0, 2.0, 3.0, 1e38]), 0.75)
        assert 1e38 > hi
        assert out.present[:, 0].tolist() == [True, True, True, False]
        assert out.values[3, 0] == 1e38  # value untouched

    def test_full_range_unchanged(self):
        table = make_table({"x": [5.0, -3.0, 2.0, 9.0]})
        out = mask_outliers(table, 0.0, 1.0)
        assert out.present.all()

    def test_all_equal_column_unchanged(self):
        table = make_table({"x": [2.0, 2.0, 2.0]})
        out = mask_outliers(table, 0.25, 0.75)
        assert out.present.all()

    def test_single_present_value_warns_and_skips(self):
        table = make_table({"x": [1.0, 2.0]}, {"x": [True, False]})
        out = mask_outliers(table, 0.1, 0.9)
        assert out.present[0, 0]

    def test_bad_quantiles_rejected(self):
        table = make_table({"x": [1.0, 2.0]})
        with pytest.raises(ValueError):
            mask_outliers(table, 0.9, 0.1)

    def test_masked_cells_excluded_from_quantiles(self):
        # The huge value is already masked, so it cannot widen the range.
        table = make_table({"x": [1.0, 2.0, 3.0, 4.0, 1e30]},
                           {"x": [True, True, True, True, False]})
        out = mask_outliers(table, 0.0, 1.0)
        assert out.present[:, 0].tolist() == [True, True, True, True, False]


class TestZscore:
    def test_closed_form(self):
        table = make_table({"x": [1.0, 2.0, 3.0]})
        out = zscore(table)
        expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0) * np.sqrt(2.0 / 3.0)
        np.testing.assert_allclose(out.values[:, 0],
                                   [-1.22474487, 0.0, 1.22474487], atol=1e-8)
        assert out.column_stats[0].std == pytest.approx(0.81649658, abs=1e-8)

    def test_zero_variance_flagged_not_divided(self):
        table = make_table({"x": [5.0, 5.0, 5.0]})
        out = zscore(table)
        assert out.pruning_flags == ["x"]
        assert out.values[:, 0].tolist() == [5.0, 5.0, 5.0]

    def test_random_column_normalized_against_recomputed_stats(self):
        rng = np.random.default_rng(11)
        col = rng.normal(37.0, 12.0, size=10_000)
        table = make_table({"x": col.tolist()})
        out = zscore(table)
        assert abs(out.values[:, 0].mean()) <= 1e-9
        assert abs(out.values[:, 0].std() - 1.0) <= 1e-9

    def test_only_present_cells_used_and_updated(self):
        table = make_table({"x": [0.0, 10.0, 20.0, 1e9]},
                           {"x": [True, True, True, False]})
        out = zscore(table)
        assert out.values[3, 0] == 1e9
        present_vals = out.values[:3, 0]
        assert abs(present_vals.mean()) <= 1e-9


class TestPruneConstantColumns:
    def test_min_equals_median_removed(self):
        table = make_table({"x": [0.0, 0.0, 0.0, 0.0, 5.0], "y": [1.0, 2.0, 3.0, 4.0, 5.0]})
        pruned, removed = prune_constant_columns(table)
        assert removed == ["x"]
        assert pruned.column_names == ["y"]

    def test_varying_column_kept(self):
        table = make_table({"x": [1.0, 2.0, 3.0]})
        _, removed = prune_constant_columns(table)
        assert removed == []

    def test_even_count_median_convention(self):
        # Median of [0,0,1,1] is 0.5 (mean of the middle two) > min 0.
        table = make_table({"x": [0.0, 0.0, 1.0, 1.0]})
        pruned, removed = prune_constant_columns(table)
        assert removed == []
        assert sorted([0.0, 0.0, 1.0, 1.0])[1:3] == [0.0, 1.0]  # median oracle by sort
        assert np.median([0.0, 0.0, 1.0, 1.0]) == 0.5

    def test_survivor_rule_equivalence(self):
        rng = np.random.default_rng(3)
        cols = {f"c{i}": rng.choice([0.0, 0.0, 1.0, 2.0], size=9).tolist() for i in range(20)}
        table = make_table(cols)
        pruned, removed = prune_constant_columns(table)
        for name in table.column_names:
            vals = np.array(cols[name])
            survives = vals.min() < np.median(vals)
            assert (name in pruned.column_names) == survives


class TestSplit:
    def test_counts(self):
        table = make_table({"x": list(range(10))})
        plan = split(table, 0.2, seed=7)
        assert len(plan.train_indices) == 8 and len(plan.val_indices) == 2

    def test_deterministic(self):
        a = split_indices(100, 0.2, seed=7)
        b = split_indices(100, 0.2, seed=7)
        assert (a.train_indices == b.train_indices).all()
        assert (a.val_indices == b.val_indices).all()

    def test_different_seeds_differ(self):
        a = split_indices(1000, 0.2, seed=7)
        b = split_indices(1000, 0.2, seed=8)
        assert not (a.val_indices == b.val_indices).all()

    def test_disjoint_and_covering(self):
        plan = split_indices(57, 0.3, seed=1)
        combined = np.sort(np.concatenate([plan.train_indices, plan.val_indices]))
        assert (combined == np.arange(57)).all()

    def test_empty_side_rejected(self):
        with pytest.raises(ValueError):
            split_indices(10, 0.01, seed=0)


class TestEpochPermutation:
    def test_single_row(self):
        assert epoch_permutation(1, 0, seed=0).tolist() == [0]

    def test_repeatable(self):
        assert (epoch_permutation(50, 3, 9) == epoch_permutation(50, 3, 9)).all()

    def test_epochs_differ(self):
        assert not (epoch_permutation(1000, 0, 9) == epoch_permutation(1000, 1, 9)).all()

    def test_is_bijection(self):
        perm = epoch_permutation(64, 2, 5)
        assert sorted(perm.tolist()) == list(range(64))


class TestPipeline:
    def test_audited_fixture_counts(self):
        # 12 molecules with 2 planted duplicates; builtin descriptors.
        base = generate_corpus(10, seed=21, unique=True)
        corpus = base + [base[0], base[3]]
        table, report = curate(corpus, lo_q=0.0, hi_q=1.0)
        assert report.rows_in == 12
        assert report.duplicates_removed == 2
        assert report.rows_after_dedup == 10
        assert report.rows_out == 10
        assert report.columns_in == 8
        assert report.columns_out == len(table.column_names)
        assert report.columns_out == 8 - len(report.columns_removed)

    def test_retained_columns_normalized_and_non_constant(self):
        corpus = generate_corpus(300, seed=33, unique=True)
        table, report = curate(corpus)
        for j, name in enumerate(table.column_names):
            col = table.values[:, j][table.present[:, j]]
            assert abs(col.mean()) <= 1e-9, name
            assert abs(col.std() - 1.0) <= 1e-9, name
            assert col.min() < np.median(col), name

    def test_outlier_cells_masked_not_dropped(self):
        corpus = generate_corpus(200, seed=4, unique=True)
        table, report = curate(corpus, lo_q=0.05, hi_q=0.95)
        assert table.num_rows == report.rows_after_dedup
        assert report.cells_masked_as_outliers > 0

    def test_empty_corpus_raises(self):
        with pytest.raises(DataError):
            curate([])


class TestDescriptorCsv:
    def test_roundtrip(self, tmp_path):
        corpus = generate_corpus(50, seed=8, unique=True)
        table, _ = curate(corpus)
        path = tmp_path / "table.csv"
        write_descriptor_csv(path, table)
        smiles, values, present, names = read_descriptor_csv(path)
        assert smiles == table.smiles
        assert names == table.column_names
        assert (present == table.present).all()
        np.testing.assert_array_equal(values[present], table.values[table.present])

    def test_missing_cells(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("smiles,a,b\nCCO,1.5,\nCCN,,2.5\n")
        smiles, values, present, names = read_descriptor_csv(path)
        assert present.tolist() == [[True, False], [False, True]]

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("smiles,a\nCCO,1.0,9\n")
        with pytest.raises(DataError, match=":2"):
            read_descriptor_csv(path)

    def test_non_numeric_cell_reports_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("smiles,a\nCCO,x\n")
        with pytest.raises(DataError, match=":2"):
            read_descriptor_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("mol,a\nCCO,1\n")
        with pytest.raises(DataError):
            read_descriptor_csv(path)


def test_curate_with_supplied_descriptors_dedups_rows():
    smiles = ["CCO", "CCN", "CCO", "CCC"]
    values = np.array([[1.0, 5.0], [2.0, 6.0], [9.0, 9.0], [3.0, 4.0]])
    table, report = curate(smiles, values, np.ones_like(values, dtype=bool), ["a", "b"],
                           lo_q=0.0, hi_q=1.0, normalize=False, prune=False)
    assert table.smiles == ["CCO", "CCN", "CCC"]
    # First occurrence wins: the CCO row keeps [1, 5].
    assert table.values[0].tolist() == [1.0, 5.0]
    assert report.duplicates_removed == 1


def test_compute_column_stats_median_convention():
    table = make_table({"x": [0.0, 0.0, 1.0, 1.0]})
    stats = compute_column_stats(table)
    assert stats[0].median == 0.5
