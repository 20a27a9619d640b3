"""Whitespace + punctuation tokenization and the token vocabulary.

Deliberately simple: lowercase, punctuation split into single-character
tokens, no subwords. Out-of-vocabulary tokens map to [UNK] at embedding
time.
"""
from __future__ import annotations

import re
from pathlib import Path

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    """Tokens with (start, exclusive_end) character offsets into `text`."""
    return [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def normalize_value(text: str) -> str:
    """Comparison form for slot values: lowercase, trimmed, collapsed spaces."""
    return " ".join(text.lower().split())


def content_tokens(text: str) -> list[str]:
    """Tokenization with punctuation-only tokens removed (value matching)."""
    return [t for t in tokenize(text) if any(c.isalnum() for c in t)]


class Vocabulary:
    """Token -> id map with the reserved tokens pinned to the first ids."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def ids(self, tokens: list[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    @classmethod
    def build(cls, texts: list[str]) -> "Vocabulary":
        seen: set[str] = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(sorted(seen))

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tokens = [ln for ln in lines if ln]
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary file must start with reserved tokens {RESERVED}")
        return cls(tokens[4:])
