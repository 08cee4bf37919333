"""Dataset curation for multi-task regression pre-training.

Pipeline order is fixed: dedup -> descriptors -> outlier mask ->
prune constant columns -> z-score. Each stage reports its row/column
counts so a curation run can be audited end to end. Outliers are masked
out of the loss, not dropped, so a molecule keeps contributing to its
other properties.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .tokenizer import tokenize

log = logging.getLogger(__name__)

DEFAULT_LO_QUANTILE = 0.001
DEFAULT_HI_QUANTILE = 0.999

BUILTIN_DESCRIPTOR_NAMES = [
    "atom_count",
    "bond_count",
    "ring_count",
    "mol_weight",
    "aromatic_atom_count",
    "heteroatom_count",
    "halogen_count",
    "branch_count",
]

# Standard atomic weights for the elements the minimal parser knows about.
_ATOMIC_WEIGHTS = {
    "H": 1.008, "Li": 6.94, "B": 10.811, "C": 12.011, "N": 14.007,
    "O": 15.999, "F": 18.998, "Na": 22.990, "Mg": 24.305, "Al": 26.982,
    "Si": 28.085, "P": 30.974, "S": 32.06, "K": 39.098, "Ca": 40.078,
    "Fe": 55.845, "Zn": 65.38, "Se": 78.971, "Cl": 35.453, "Br": 79.904,
    "I": 126.904,
}

_ORGANIC_ATOMS = {"B", "C", "N", "O", "P", "S", "F", "I", "Cl", "Br"}
_AROMATIC_ATOMS = {"b", "c", "n", "o", "p", "s"}
_HALOGENS = {"F", "Cl", "Br", "I"}
_BOND_CHARS = {"-", "=", "#", ":", "/", "\\", "~"}

_BRACKET_RE = re.compile(r"\[(?P<isotope>\d+)?(?P<symbol>[A-Z][a-z]?|[a-z])"
                         r"(?P<chiral>@{1,2})?(?:H(?P<hcount>\d*))?"
                         r"(?P<charge>\+\d*|-\d*|\++|-+)?\]")


class DescriptorError(ValueError):
    """Raised when the minimal graph parse cannot resolve connectivity."""


class DataError(ValueError):
    """Raised for malformed input files."""


@dataclass
class MoleculeRecord:
    smiles: str
    descriptors: np.ndarray
    present: np.ndarray


@dataclass
class ColumnStats:
    minimum: float
    median: float
    mean: float
    std: float
    lo_quantile: float
    hi_quantile: float


@dataclass
class DescriptorTable:
    """Molecules-by-properties matrix with a per-cell presence mask."""

    smiles: list[str]
    values: np.ndarray        # (N, P) float64
    present: np.ndarray       # (N, P) bool
    column_names: list[str]
    column_stats: list[ColumnStats] | None = None
    pruning_flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        n, p = self.values.shape
        if len(self.smiles) != n or self.present.shape != (n, p) or len(self.column_names) != p:
            raise ValueError("inconsistent table dimensions")

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def num_columns(self) -> int:
        return self.values.shape[1]

    def record(self, i: int) -> MoleculeRecord:
        return MoleculeRecord(self.smiles[i], self.values[i].copy(), self.present[i].copy())

    def records(self) -> list[MoleculeRecord]:
        return [self.record(i) for i in range(self.num_rows)]

    def copy(self) -> "DescriptorTable":
        return DescriptorTable(list(self.smiles), self.values.copy(), self.present.copy(),
                               list(self.column_names),
                               None if self.column_stats is None else list(self.column_stats),
                               list(self.pruning_flags))

    def head(self, n: int) -> "DescriptorTable":
        """First n rows, used for nested data-size slices."""
        return DescriptorTable(self.smiles[:n], self.values[:n].copy(), self.present[:n].copy(),
                               list(self.column_names),
                               None if self.column_stats is None else list(self.column_stats))

    def take(self, indices: np.ndarray) -> "DescriptorTable":
        """Row subset/reorder by index array."""
        indices = np.asarray(indices)
        return DescriptorTable([self.smiles[i] for i in indices],
                               self.values[indices].copy(), self.present[indices].copy(),
                               list(self.column_names),
                               None if self.column_stats is None else list(self.column_stats))


@dataclass
class SplitPlan:
    seed: int
    train_indices: np.ndarray
    val_indices: np.ndarray


@dataclass
class CurationReport:
    """Stage-by-stage accounting of a curation run."""

    rows_in: int = 0
    rows_after_dedup: int = 0
    duplicates_removed: int = 0
    columns_in: int = 0
    cells_masked_as_outliers: int = 0
    outlier_warnings: list[str] = field(default_factory=list)
    columns_removed: list[str] = field(default_factory=list)
    columns_out: int = 0
    rows_out: int = 0
    lo_quantile: float = DEFAULT_LO_QUANTILE
    hi_quantile: float = DEFAULT_HI_QUANTILE

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self) -> str:
        lines = [
            "curation report",
            f"  rows in:                 {self.rows_in}",
            f"  duplicates removed:      {self.duplicates_removed}",
            f"  rows after dedup:        {self.rows_after_dedup}",
            f"  columns in:              {self.columns_in}",
            f"  outlier quantiles:       [{self.lo_quantile}, {self.hi_quantile}]",
            f"  cells masked as outlier: {self.cells_masked_as_outliers}",
            f"  columns removed:         {len(self.columns_removed)}"
            + (f" ({', '.join(self.columns_removed)})" if self.columns_removed else ""),
            f"  final shape:             {self.rows_out} rows x {self.columns_out} columns",
        ]
        lines.extend(f"  warning: {w}" for w in self.outlier_warnings)
        return "\n".join(lines)


def dedup(records: list) -> list:
    """Keep the first occurrence of each distinct SMILES, preserving order.

    Accepts MoleculeRecord objects or plain SMILES strings.
    """
    seen: set[str] = set()
    out = []
    for rec in records:
        key = rec.smiles if isinstance(rec, MoleculeRecord) else rec
        if key not in seen:
            seen.add(key)
            out.append(rec)
    return out


def _parse_bracket_atom(token: str):
    m = _BRACKET_RE.match(token)
    if m is None:
        # Unrecognized bracket content still counts as one atom of unknown
        # element; chemistry validation is out of scope.
        return "?", False, 0
    symbol = m.group("symbol")
    aromatic = symbol.islower()
    hcount = m.group("hcount")
    if hcount is None:
        explicit_h = 0
    else:
        explicit_h = int(hcount) if hcount else 1
    return symbol.capitalize() if aromatic else symbol, aromatic, explicit_h


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra

    def component_count(self) -> int:
        return len({self.find(i) for i in range(len(self.parent))})


def _parse_graph(smiles: str):
    """Minimal molecular graph: atoms, bonds, branch count, explicit H."""
    atoms: list[tuple[str, bool]] = []   # (element, aromatic)
    bonds: list[tuple[int, int]] = []
    explicit_h = 0
    branch_count = 0
    branch_stack: list[int | None] = []
    ring_open: dict[str, int] = {}
    last_atom: int | None = None

    for tok in tokenize(smiles):
        if tok.startswith("["):
            symbol, aromatic, hc = _parse_bracket_atom(tok)
            explicit_h += hc
            atoms.append((symbol, aromatic))
        elif tok in _ORGANIC_ATOMS:
            atoms.append((tok, False))
        elif tok in _AROMATIC_ATOMS:
            atoms.append((tok.upper(), True))
        elif tok == "(":
            branch_count += 1
            branch_stack.append(last_atom)
            continue
        elif tok == ")":
            last_atom = branch_stack.pop() if branch_stack else None
            continue
        elif tok == ".":
            last_atom = None
            continue
        elif tok.isdigit() or tok.startswith("%"):
            key = tok.lstrip("%")
            if last_atom is None:
                raise DescriptorError(f"ring-bond digit {key} before any atom in {smiles!r}")
            if key in ring_open:
                bonds.append((ring_open.pop(key), last_atom))
            else:
                ring_open[key] = last_atom
            continue
        elif tok in _BOND_CHARS:
            continue
        else:
            # Stereo or charge marks outside brackets; no graph effect.
            continue
        new_atom = len(atoms) - 1
        if last_atom is not None:
            bonds.append((last_atom, new_atom))
        last_atom = new_atom

    if ring_open:
        digits = ", ".join(sorted(ring_open))
        raise DescriptorError(f"dangling ring-bond digit {digits} in {smiles!r}")
    return atoms, bonds, branch_count, explicit_h


def builtin_descriptors(smiles: str) -> np.ndarray:
    """Eight graph descriptors from a minimal SMILES parse.

    ring_count uses the cyclomatic formula bonds - atoms + components.
    mol_weight sums heavy-atom weights plus explicit bracket hydrogens;
    implicit hydrogens are not modelled.
    """
    atoms, bonds, branch_count, explicit_h = _parse_graph(smiles)
    uf = _UnionFind(len(atoms))
    for a, b in bonds:
        uf.union(a, b)
    components = uf.component_count() if atoms else 0
    ring_count = len(bonds) - len(atoms) + components
    weight = sum(_ATOMIC_WEIGHTS.get(sym, 0.0) for sym, _ in atoms)
    weight += explicit_h * _ATOMIC_WEIGHTS["H"]
    return np.array([
        len(atoms),
        len(bonds),
        ring_count,
        weight,
        sum(1 for _, aromatic in atoms if aromatic),
        sum(1 for sym, _ in atoms if sym not in ("C", "H")),
        sum(1 for sym, _ in atoms if sym in _HALOGENS),
        branch_count,
    ], dtype=np.float64)


def compute_column_stats(table: DescriptorTable, lo_q: float = DEFAULT_LO_QUANTILE,
                         hi_q: float = DEFAULT_HI_QUANTILE) -> list[ColumnStats]:
    """Per-column stats over present cells only."""
    stats = []
    for j in range(table.num_columns):
        col = table.values[:, j][table.present[:, j]]
        if col.size == 0:
            stats.append(ColumnStats(np.nan, np.nan, np.nan, np.nan, np.nan, np.nan))
            continue
        stats.append(ColumnStats(
            minimum=float(col.min()),
            median=float(np.median(col)),
            mean=float(col.mean()),
            std=float(col.std()),
            lo_quantile=float(np.quantile(col, lo_q)),
            hi_quantile=float(np.quantile(col, hi_q)),
        ))
    return stats


def mask_outliers(table: DescriptorTable, lo_q: float = DEFAULT_LO_QUANTILE,
                  hi_q: float = DEFAULT_HI_QUANTILE,
                  report: CurationReport | None = None) -> DescriptorTable:
    """Mask cells strictly outside the per-column [lo_q, hi_q] quantiles.

    Values stay in place; only the presence mask changes. Columns with
    fewer than two present values are left alone with a warning.
    """
    if not 0.0 <= lo_q < hi_q <= 1.0:
        raise ValueError(f"quantiles must satisfy 0 <= lo < hi <= 1, got {lo_q}, {hi_q}")
    out = table.copy()
    masked = 0
    for j in range(out.num_columns):
        present = out.present[:, j]
        col = out.values[:, j][present]
        if col.size < 2:
            msg = (f"column {out.column_names[j]!r} has {col.size} present values; "
                   "outlier masking skipped")
            log.warning(msg)
            if report is not None:
                report.outlier_warnings.append(msg)
            continue
        lo = np.quantile(col, lo_q)
        hi = np.quantile(col, hi_q)
        outlier = present & ((out.values[:, j] < lo) | (out.values[:, j] > hi))
        masked += int(outlier.sum())
        out.present[outlier, j] = False
    if report is not None:
        report.cells_masked_as_outliers += masked
        report.lo_quantile = lo_q
        report.hi_quantile = hi_q
    return out


def prune_constant_columns(table: DescriptorTable) -> tuple[DescriptorTable, list[str]]:
    """Drop columns whose present-value minimum equals their median.

    Covers constant and near-degenerate columns; zero-variance columns are
    always caught because all-equal values have min == median. Columns with
    no present values at all are dropped too.
    """
    removed: list[str] = []
    keep: list[int] = []
    for j in range(table.num_columns):
        col = table.values[:, j][table.present[:, j]]
        if col.size == 0 or float(col.min()) == float(np.median(col)):
            removed.append(table.column_names[j])
        else:
            keep.append(j)
    pruned = DescriptorTable(
        list(table.smiles),
        table.values[:, keep].copy(),
        table.present[:, keep].copy(),
        [table.column_names[j] for j in keep],
    )
    return pruned, removed


def zscore(table: DescriptorTable) -> DescriptorTable:
    """Normalize each column to zero mean and unit variance over present
    cells, using population statistics. Columns that cannot be normalized
    (zero variance or fewer than two present values) are flagged for
    pruning instead of divided; the fitted stats land in column_stats for
    reuse at inference time."""
    out = table.copy()
    out.pruning_flags = []
    stats: list[ColumnStats] = []
    for j in range(out.num_columns):
        present = out.present[:, j]
        col = out.values[:, j][present]
        if col.size < 2 or float(col.std()) == 0.0:
            out.pruning_flags.append(out.column_names[j])
            stats.append(ColumnStats(
                minimum=float(col.min()) if col.size else np.nan,
                median=float(np.median(col)) if col.size else np.nan,
                mean=float(col.mean()) if col.size else np.nan,
                std=0.0,
                lo_quantile=np.nan, hi_quantile=np.nan,
            ))
            continue
        mean = float(col.mean())
        std = float(col.std())
        out.values[present, j] = (out.values[present, j] - mean) / std
        stats.append(ColumnStats(
            minimum=float(col.min()), median=float(np.median(col)),
            mean=mean, std=std,
            lo_quantile=float(np.quantile(col, DEFAULT_LO_QUANTILE)),
            hi_quantile=float(np.quantile(col, DEFAULT_HI_QUANTILE)),
        ))
    out.column_stats = stats
    return out


def split_indices(n: int, val_fraction: float, seed: int) -> SplitPlan:
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError(f"val_fraction {val_fraction} leaves an empty side for {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitPlan(seed, np.sort(perm[n_val:]), np.sort(perm[:n_val]))


def split(table: DescriptorTable, val_fraction: float, seed: int) -> SplitPlan:
    """Seeded train/validation partition, identical across runs and
    platforms for the same seed (PCG64 generator)."""
    return split_indices(table.num_rows, val_fraction, seed)


def epoch_permutation(n: int, epoch: int, seed: int) -> np.ndarray:
    """Deterministic shuffle of [0, n) for one training epoch."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    return np.random.default_rng([seed & 0xFFFF_FFFF_FFFF_FFFF, epoch]).permutation(n)


def curate(smiles_list: list[str], values: np.ndarray | None = None,
           present: np.ndarray | None = None, column_names: list[str] | None = None,
           *, lo_q: float = DEFAULT_LO_QUANTILE, hi_q: float = DEFAULT_HI_QUANTILE,
           mask_outlier_cells: bool = True, prune: bool = True,
           normalize: bool = True) -> tuple[DescriptorTable, CurationReport]:
    """Run the full curation pipeline.

    When no descriptor matrix is given the eight built-in graph descriptors
    are computed for every molecule.
    """
    report = CurationReport(rows_in=len(smiles_list))
    if not smiles_list:
        raise DataError("empty corpus")

    if values is None:
        unique = dedup(list(smiles_list))
        vals = np.stack([builtin_descriptors(s) for s in unique])
        pres = np.ones(vals.shape, dtype=bool)
        names = list(BUILTIN_DESCRIPTOR_NAMES)
    else:
        if present is None:
            present = np.isfinite(values)
        if column_names is None:
            raise ValueError("column_names required when descriptor values are supplied")
        keep_idx = []
        seen: set[str] = set()
        for i, s in enumerate(smiles_list):
            if s not in seen:
                seen.add(s)
                keep_idx.append(i)
        unique = [smiles_list[i] for i in keep_idx]
        vals = values[keep_idx].astype(np.float64).copy()
        pres = present[keep_idx].copy()
        names = list(column_names)

    report.rows_after_dedup = len(unique)
    report.duplicates_removed = report.rows_in - len(unique)
    report.columns_in = vals.shape[1]

    table = DescriptorTable(unique, vals, pres, names)
    if mask_outlier_cells:
        table = mask_outliers(table, lo_q, hi_q, report=report)
    if prune:
        table, removed = prune_constant_columns(table)
        report.columns_removed = removed
    if normalize:
        table = zscore(table)
        if table.pruning_flags:
            flagged = set(table.pruning_flags)
            keep = [j for j, name in enumerate(table.column_names) if name not in flagged]
            report.columns_removed.extend(sorted(flagged))
            table = DescriptorTable(
                list(table.smiles), table.values[:, keep].copy(), table.present[:, keep].copy(),
                [table.column_names[j] for j in keep],
                [table.column_stats[j] for j in keep] if table.column_stats else None,
            )
    else:
        table.column_stats = compute_column_stats(table, lo_q, hi_q)

    report.rows_out = table.num_rows
    report.columns_out = table.num_columns
    return table, report


def read_descriptor_csv(path: str | Path):
    """Read "smiles,<prop1>,...,<propP>" with empty cells as missing.

    Returns (smiles, values, present, column_names).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip().lower() != "smiles":
            raise DataError(f"{path}: first header column must be 'smiles', got {header[:1]}")
        column_names = [h.strip() for h in header[1:]]
        smiles: list[str] = []
        rows: list[list[float]] = []
        mask: list[list[bool]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            smiles.append(row[0])
            vals, pres = [], []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    vals.append(0.0)
                    pres.append(False)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
                    pres.append(True)
            rows.append(vals)
            mask.append(pres)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return smiles, np.array(rows, dtype=np.float64), np.array(mask, dtype=bool), column_names


def write_descriptor_csv(path: str | Path, table: DescriptorTable) -> None:
    """Write the table in the descriptor CSV format; masked cells are empty."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["smiles"] + table.column_names)
        for i in range(table.num_rows):
            row = [table.smiles[i]]
            for j in range(table.num_columns):
                row.append(repr(float(table.values[i, j])) if table.present[i, j] else "")
            writer.writerow(row)


def write_column_stats(path: str | Path, table: DescriptorTable) -> None:
    payload = {
        "column_names": table.column_names,
        "stats": [asdict(s) for s in (table.column_stats or [])],
    }
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
