"""Atom-level SMILES tokenization, vocabularies, and sequence encoding.

Tokenization is regex based: bracket atoms, the two-letter halogens,
double stereo markers, and two-digit ring escapes are kept whole, and any
other character is a token of its own, so the concatenation of the tokens
always reproduces the input string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .families import ModelFamily

MAX_SEQ_LEN = 512

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
MASK_TOKEN = "<mask>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN)

# Every vocabulary reserves the same ids for the specials.
PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID = 0, 1, 2, 3, 4

# Multi-character chemistry tokens are tried first; "." at the end makes
# every remaining character its own token.
_TOKEN_RE = re.compile(r"\[[^\[\]]*\]|Br|Cl|@@|%\d{2}|.", re.DOTALL)


class TokenizationError(ValueError):
    """Raised for strings that cannot be split into tokens."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def tokenize(smiles: str) -> list[str]:
    """Split a SMILES string into atom-level tokens.

    Raises TokenizationError when an opening "[" has no matching "]".
    """
    tokens: list[str] = []
    for match in _TOKEN_RE.finditer(smiles):
        tok = match.group(0)
        if tok == "[":
            raise TokenizationError("unbalanced '[' without matching ']'", match.start())
        tokens.append(tok)
    return tokens


class Vocabulary:
    """Bijective token-to-id map with the five special tokens on ids 0-4."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with the special tokens {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        self.pad_id = 0
        self.bos_id = 1
        self.eos_id = 2
        self.unk_id = 3
        self.mask_id = 4

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id_of(self, token: str) -> int:
        """Id of a token, falling back to the unknown-token id."""
        return self._ids.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise ValueError(f"id {token_id} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[token_id]

    def save(self, path: str | Path) -> None:
        """Write one token per line; the line number is the id."""
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line != ""])


def build_vocab(corpus: list[str]) -> Vocabulary:
    """Deterministic vocabulary over a corpus: specials first, then all
    observed tokens in lexicographic order."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seen: set[str] = set()
    for smiles in corpus:
        seen.update(tokenize(smiles))
    return Vocabulary(list(SPECIAL_TOKENS) + sorted(seen))


@dataclass
class EncodedSequence:
    """Token ids padded to a fixed length with the matching attention mask."""

    ids: np.ndarray
    attention_mask: np.ndarray
    content_length: int


@dataclass
class EncodedBatch:
    """Stacked encodings, ids and mask of shape (batch, max_len)."""

    ids: np.ndarray
    attention_mask: np.ndarray
    content_lengths: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, indices: np.ndarray) -> "EncodedBatch":
        return EncodedBatch(self.ids[indices], self.attention_mask[indices],
                            self.content_lengths[indices])


def encode(smiles: str, family: ModelFamily, max_len: int, vocab: Vocabulary) -> EncodedSequence:
    """Encode one SMILES string for the given model family.

    All three families share the layout [bos, tokens..., eos, pad...]; the
    decoder family's contract that an eos terminates the content region
    before any padding (its namesake tokenizer would omit the eos) holds by
    construction. Inputs longer than max_len are truncated so the terminal
    eos survives, since eos pooling depends on it.
    """
    if not isinstance(family, ModelFamily):
        raise TypeError(f"family must be a ModelFamily, got {type(family).__name__}")
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    if max_len > MAX_SEQ_LEN:
        raise ValueError(f"max_len must not exceed {MAX_SEQ_LEN}, got {max_len}")
    body = tokenize(smiles)[: max_len - 2]
    ids = [vocab.bos_id] + [vocab.id_of(tok) for tok in body] + [vocab.eos_id]
    n = len(ids)
    ids.extend([vocab.pad_id] * (max_len - n))
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return EncodedSequence(np.array(ids, dtype=np.int64), mask, n)


def encode_batch(smiles_list: list[str], family: ModelFamily, max_len: int,
                 vocab: Vocabulary) -> EncodedBatch:
    seqs = [encode(s, family, max_len, vocab) for s in smiles_list]
    return EncodedBatch(
        np.stack([s.ids for s in seqs]),
        np.stack([s.attention_mask for s in seqs]),
        np.array([s.content_length for s in seqs], dtype=np.int64),
    )


def decode(seq: EncodedSequence, vocab: Vocabulary) -> str:
    """Inverse of encode: strip special tokens and concatenate the rest."""
    specials = {vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id, vocab.mask_id}
    return "".join(vocab.token_of(int(i)) for i in seq.ids if int(i) not in specials)


def read_corpus(path: str | Path) -> list[str]:
    """One SMILES per line, UTF-8, no header; blank lines are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip()]


def write_corpus(path: str | Path, smiles_list: list[str]) -> None:
    Path(path).write_text("\n".join(smiles_list) + "\n", encoding="utf-8")
