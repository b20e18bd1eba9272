"""Whitespace-plus-wordpiece toy tokenizer with character offsets.

The subword vocabulary is deliberately small: multi-digit numbers fall apart
into single digits and "elderly" splits into two pieces, so span-mapping code
is forced through its multi-subword path.
"""
from __future__ import annotations

from ..errors import SpanResolutionError

# Greedy longest-match units.  Order does not matter; matching picks the
# longest vocabulary entry at each position.
_WORDS = (
    "photo", "of", "person", "as",
    "man", "woman", "boy", "girl", "baby",
    "eld", "erly",
    "year", "old",
)
_CHARS = tuple("abcdefghijklmnopqrstuvwxyz0123456789-")

VOCAB = tuple(dict.fromkeys(_WORDS + _CHARS))

PAD_ID = 0
MAX_TOKENS = 16


class ToyTokenizer:
    """Deterministic tokenizer: whitespace split, then greedy subword match."""

    vocab = VOCAB
    pad_id = PAD_ID
    max_tokens = MAX_TOKENS

    def __init__(self):
        self._ids = {piece: i + 1 for i, piece in enumerate(VOCAB)}
        self._by_len = sorted(VOCAB, key=len, reverse=True)

    @property
    def vocab_size(self) -> int:
        return len(VOCAB) + 1  # + pad

    def tokenize(self, text: str) -> list[tuple[str, int, int]]:
        """Return (piece, start, end) triples; offsets index into ``text``."""
        out: list[tuple[str, int, int]] = []
        i = 0
        lowered = text.lower()
        n = len(text)
        while i < n:
            if text[i].isspace():
                i += 1
                continue
            match = None
            for piece in self._by_len:
                if lowered.startswith(piece, i):
                    match = piece
                    break
            if match is None:
                raise SpanResolutionError(
                    f"cannot tokenize {text!r}: no vocabulary piece at offset {i} ({text[i]!r})"
                )
            out.append((match, i, i + len(match)))
            i += len(match)
        return out

    def encode(self, text: str) -> list[int]:
        return [self._ids[piece] for piece, _, _ in self.tokenize(text)]

    def offsets(self, text: str) -> list[tuple[int, int]]:
        return [(s, e) for _, s, e in self.tokenize(text)]
