"""Token corpora and synthetic Zipf data.

A corpus is a vocabulary file with one token per line (line ``j`` is bin
``j``) plus a records file with one token per line, each record standing
for one user.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from shufflehist._validation import check_positive, check_positive_int
from shufflehist.exceptions import CorpusError
from shufflehist.protocol import Dataset

__all__ = ["Corpus", "load_corpus", "synth_zipf", "zipf_pmf"]


@dataclass(frozen=True)
class Corpus:
    """A vocabulary and the records that mapped onto it.

    Attributes:
        vocabulary: Tokens in bin order.
        records: Recognised record tokens, in file order.
        skipped: Records dropped as unknown (lenient mode only).
    """

    vocabulary: tuple[str, ...]
    records: tuple[str, ...]
    skipped: int = 0

    @property
    def d(self) -> int:
        return len(self.vocabulary)

    @property
    def n(self) -> int:
        return len(self.records)

    def dataset(self) -> Dataset:
        ids = {tok: i for i, tok in enumerate(self.vocabulary, start=1)}
        return Dataset(np.array([ids[r] for r in self.records], dtype=np.int64), self.d)


def _read_lines(path: str | os.PathLike) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path} is not valid UTF-8: {exc}") from exc
    lines = [line.strip() for line in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    return lines


def load_corpus(
    vocab_path: str | os.PathLike, records_path: str | os.PathLike, lenient: bool = False
) -> Corpus:
    """Read a vocabulary and a records file.

    Blank record lines are ignored. Blank vocabulary lines are rejected,
    since they would shift the bin ids of later tokens.

    Raises:
        OSError: A file cannot be read.
        CorpusError: Invalid UTF-8, duplicate or blank vocabulary tokens,
            unknown record tokens (strict mode), or no usable records.
    """
    vocab = _read_lines(vocab_path)
    if not vocab:
        raise CorpusError(f"vocabulary {vocab_path} is empty")
    seen: dict[str, int] = {}
    for lineno, tok in enumerate(vocab, start=1):
        if not tok:
            raise CorpusError(f"{vocab_path}:{lineno}: blank vocabulary line")
        if tok in seen:
            raise CorpusError(f"{vocab_path}:{lineno}: duplicate token {tok!r} (first on line {seen[tok]})")
        seen[tok] = lineno
    records: list[str] = []
    skipped = 0
    for lineno, tok in enumerate(_read_lines(records_path), start=1):
        if not tok:
            continue
        if tok in seen:
            records.append(tok)
        elif lenient:
            skipped += 1
        else:
            raise CorpusError(f"{records_path}:{lineno}: token {tok!r} is not in the vocabulary")
    if not records:
        raise CorpusError(f"{records_path} holds no usable records")
    return Corpus(tuple(vocab), tuple(records), skipped)


def zipf_pmf(d: int, s: float) -> np.ndarray:
    """Zipf law truncated to ``[1, d]``: ``P(j) = j^-s / H``."""
    d = check_positive_int(d, "d")
    s = check_positive(s, "s")
    logw = -s * np.log(np.arange(1, d + 1, dtype=float))
    w = np.exp(logw - logw.max())
    return w / w.sum()


def synth_zipf(n: int, d: int, s: float, seed: int) -> Dataset:
    """``n`` i.i.d. items from the truncated Zipf law, deterministic in ``seed``."""
    n = check_positive_int(n, "n")
    rng = np.random.default_rng(int(seed))
    items = rng.choice(d, size=n, p=zipf_pmf(d, s)) + 1
    return Dataset(items.astype(np.int64), d)
