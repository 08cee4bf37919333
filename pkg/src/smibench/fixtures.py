"""Deterministic synthetic SMILES corpora and toy task labels.

The generator composes self-contained fragments (rings closed, brackets
balanced), so every emitted string tokenizes and graph-parses cleanly.
Used for the desk-scale corpus, offline task stand-ins, and test fixtures.
"""

from __future__ import annotations

import numpy as np

from .curation import builtin_descriptors

# Each fragment starts and ends inside one molecule piece; concatenation
# of fragments therefore stays syntactically plausible.
_FRAGMENTS = [
    "C", "CC", "CCO", "CCN", "CO", "CN", "CS",
    "c1ccccc1", "c1ccncc1", "c1ccsc1",
    "C1CCCCC1", "C1CCNCC1", "C1CC1",
    "C(=O)O", "C(=O)N", "C(=O)C", "C#N", "C=C", "C=O",
    "CCl", "CBr", "CF", "CI",
    "[C@@H](O)C", "[C@H](N)C", "[NH2+]C", "[O-]", "C[N+](C)(C)C",
    "C%10CCCC%10", "OCC", "NCC", "SC",
]

_BRANCHABLE = [
    "C", "O", "N", "CC", "C=O", "CCO", "c1ccccc1", "Cl", "Br", "F",
]


def generate_smiles(rng: np.random.Generator, max_fragments: int = 6) -> str:
    """One random plausible SMILES string."""
    n = int(rng.integers(1, max_fragments + 1))
    parts = [str(rng.choice(_FRAGMENTS))]
    for _ in range(n - 1):
        if rng.random() < 0.25:
            parts.append("C(" + str(rng.choice(_BRANCHABLE)) + ")")
        else:
            parts.append(str(rng.choice(_FRAGMENTS)))
    return "".join(parts)


def generate_corpus(n: int, seed: int, max_fragments: int = 6,
                    unique: bool = False) -> list[str]:
    """n random SMILES; with unique=True, n distinct strings."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        s = generate_smiles(rng, max_fragments)
        if unique:
            if s in seen:
                continue
            seen.add(s)
        out.append(s)
    return out


def regression_labels(smiles_list: list[str], seed: int) -> np.ndarray:
    """Continuous labels correlated with the molecular graph: a blend of
    weight, rings, and heteroatoms plus a little noise."""
    rng = np.random.default_rng(seed)
    desc = np.stack([builtin_descriptors(s) for s in smiles_list])
    label = 0.02 * desc[:, 3] + 0.5 * desc[:, 2] + 0.3 * desc[:, 5]
    return label + rng.normal(0.0, 0.1, size=len(smiles_list))


def classification_labels(smiles_list: list[str]) -> np.ndarray:
    """Binary labels: molecules above the corpus median atom count.

    The median split guarantees both classes appear in any corpus with
    enough distinct sizes.
    """
    atoms = np.array([builtin_descriptors(s)[0] for s in smiles_list])
    labels = (atoms > np.median(atoms)).astype(np.float64)
    if labels.min() == labels.max():
        # Degenerate corpus; force one row into the other class.
        labels[int(np.argmax(atoms))] = 1.0
        labels[int(np.argmin(atoms))] = 0.0
    return labels
