"""Transformer family definitions shared by the tokenizer, models, and reports."""

from __future__ import annotations

from enum import Enum


class ModelFamily(Enum):
    """The three architectures under comparison.

    The pooling token is the single sequence position whose hidden state
    feeds a prediction head: the encoder family reads the leading bos
    position, the decoder and encoder-decoder families read the terminal
    eos position.
    """

    ENCODER = "encoder"
    DECODER = "decoder"
    ENCODER_DECODER = "encoder_decoder"

    @property
    def display_name(self) -> str:
        """Name used in run keys and report tables."""
        return _DISPLAY_NAMES[self]

    @property
    def pooling_token(self) -> str:
        return "bos" if self is ModelFamily.ENCODER else "eos"

    @classmethod
    def from_name(cls, name: str) -> "ModelFamily":
        key = name.strip().lower().replace("-", "_")
        for fam in cls:
            if key in (fam.value, fam.display_name.lower()):
                return fam
        raise ValueError(f"unknown model family {name!r}; expected one of "
                         f"{[f.value for f in cls]} or {[f.display_name for f in cls]}")


_DISPLAY_NAMES = {
    ModelFamily.ENCODER: "ChemBERTa",
    ModelFamily.DECODER: "ChemLLaMA",
    ModelFamily.ENCODER_DECODER: "ChemBART",
}
