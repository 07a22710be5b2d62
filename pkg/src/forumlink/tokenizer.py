"""Frequency-cutoff vocabulary and fixed-length token-id encoding.

Tokenization is word-level: text is lowercased and split on whitespace,
with punctuation marks kept as their own tokens. Encoding pads or
truncates at the tail to a uniform sequence length.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word and single-punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]  # index == id; tokens[0] is PAD, tokens[1] is UNK
    max_size: int
    min_count: int

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError("vocabulary must start with the PAD and UNK tokens")
        if len(self.tokens) > self.max_size:
            raise ValueError("vocabulary exceeds max_size")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def to_json(self) -> str:
        payload = {"tokens": list(self.tokens), "max_size": self.max_size, "min_count": self.min_count}
        return json.dumps(payload, ensure_ascii=False) + "\n"

    @staticmethod
    def from_json(text: str) -> "Vocab":
        data = json.loads(text)
        return Vocab(tokens=tuple(data["tokens"]), max_size=data["max_size"], min_count=data["min_count"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            return Vocab.from_json(fh.read())


def build_vocab(texts: Iterable[str], max_size: int = 20000, min_count: int = 2) -> Vocab:
    """Count tokens over the corpus and keep the most frequent ones.

    Tokens are ranked by descending count, ties broken lexicographically,
    truncated to max_size - 2 content tokens after dropping tokens seen
    fewer than min_count times.
    """
    if max_size < 2:
        raise ValueError("max_size must be >= 2 to hold PAD and UNK")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenize(text))
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )[: max_size - 2]
    return Vocab(tokens=(PAD_TOKEN, UNK_TOKEN, *ranked), max_size=max_size, min_count=min_count)


def encode(text: str, vocab: Vocab, seq_len: int) -> list[int]:
    """Encode to exactly seq_len ids: truncate long tails, pad short ones."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    ids = [vocab.id_of(t) for t in tokenize(text)[:seq_len]]
    ids.extend([PAD_ID] * (seq_len - len(ids)))
    return ids


def decode_content(ids: Iterable[int], vocab: Vocab) -> list[str]:
    """Map non-PAD ids back to tokens (UNK stays the UNK token)."""
    return [vocab.token_of(i) for i in ids if i != PAD_ID]
