"""Vectorised message batches and the shared bit-flip sampler.

A batch holds ``N`` binary messages of dimension ``d``. Two layouts exist:

* :class:`SparseBatch` keeps, CSR style, the sorted 0-based positions of
  the 1s in every message.
* :class:`DenseBatch` keeps the bits packed eight to a byte.

Both are produced from the same draw of flip positions, so a dense and a
sparse simulation that share a generator state hold exactly the same
messages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from shufflehist.exceptions import DomainError

# Above this flip probability, comparing one uniform per position beats
# drawing geometric gaps between successes.
_DENSE_SAMPLING_Q = 0.2


def bernoulli_positions(total: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices in ``[0, total)`` of i.i.d. Bernoulli(q) successes.

    Sparse regimes sample the gaps between successes from a geometric law,
    so the cost scales with the number of successes rather than ``total``.
    """
    total = int(total)
    if total <= 0 or q <= 0.0:
        return np.empty(0, dtype=np.int64)
    if q >= 1.0:
        return np.arange(total, dtype=np.int64)
    if q > _DENSE_SAMPLING_Q:
        out = []
        chunk = 1 << 24
        for start in range(0, total, chunk):
            stop = min(total, start + chunk)
            out.append(np.flatnonzero(rng.random(stop - start) < q) + start)
        return np.concatenate(out).astype(np.int64, copy=False)

    mean = total * q
    pieces = []
    last = -1
    while True:
        size = int(mean - (last + 1) * q + 6.0 * math.sqrt(mean) + 64)
        # Any gap past the end is equivalent; clipping keeps cumsum from
        # overflowing when tiny q makes numpy saturate at the int64 maximum.
        gaps = np.minimum(rng.geometric(q, size=max(size, 64)), total + 1)
        pos = np.cumsum(gaps) + last
        if pos[-1] >= total:
            pieces.append(pos[: np.searchsorted(pos, total)])
            break
        pieces.append(pos)
        last = int(pos[-1])
    return np.concatenate(pieces)


def _index_dtype(d: int) -> np.dtype:
    return np.dtype(np.int32) if d < 2**31 else np.dtype(np.int64)


@dataclass(frozen=True)
class SparseBatch:
    """A batch of binary messages stored as sorted per-message index lists.

    Attributes:
        indptr: ``N + 1`` offsets into ``indices``.
        indices: Concatenated 0-based positions of the 1 bits.
        d: Message dimension.
    """

    indptr: np.ndarray
    indices: np.ndarray
    d: int

    @property
    def n_messages(self) -> int:
        return int(self.indptr.size - 1)

    def __len__(self) -> int:
        return self.n_messages

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    def column_sums(self) -> np.ndarray:
        """Number of messages with a 1 in each of the ``d`` positions."""
        return np.bincount(self.indices, minlength=self.d).astype(np.int64)

    def row(self, r: int) -> np.ndarray:
        return self.indices[self.indptr[r] : self.indptr[r + 1]]

    def take(self, rows: np.ndarray) -> "SparseBatch":
        """Sub-batch made of the given message rows, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        lengths = self.row_lengths()[rows]
        indptr = np.zeros(rows.size + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        if rows.size == 0 or indptr[-1] == 0:
            return SparseBatch(indptr, self.indices[:0].copy(), self.d)
        starts = self.indptr[rows]
        # Position of every kept entry in the source index array.
        offsets = np.arange(indptr[-1], dtype=np.int64) - np.repeat(indptr[:-1], lengths)
        return SparseBatch(indptr, self.indices[np.repeat(starts, lengths) + offsets], self.d)

    def to_dense(self) -> "DenseBatch":
        return DenseBatch.from_sparse(self)

    def to_bit_rows(self) -> np.ndarray:
        """Unpacked ``(N, d)`` uint8 matrix. Intended for small batches."""
        out = np.zeros((self.n_messages, self.d), dtype=np.uint8)
        rows = np.repeat(np.arange(self.n_messages), self.row_lengths())
        out[rows, self.indices] = 1
        return out

    @staticmethod
    def concatenate(batches: "list[SparseBatch]", d: int | None = None) -> "SparseBatch":
        if not batches:
            if d is None:
                raise DomainError("cannot infer the dimension of an empty batch list")
            return SparseBatch.empty(d)
        dims = {b.d for b in batches}
        if len(dims) != 1:
            raise DomainError(f"batches have mismatched dimensions {sorted(dims)}")
        dim = dims.pop()
        lengths = np.concatenate([b.row_lengths() for b in batches])
        indptr = np.zeros(lengths.size + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        indices = np.concatenate([b.indices for b in batches]).astype(_index_dtype(dim), copy=False)
        return SparseBatch(indptr, indices, dim)

    @staticmethod
    def empty(d: int) -> "SparseBatch":
        return SparseBatch(np.zeros(1, dtype=np.int64), np.empty(0, dtype=_index_dtype(d)), d)

    @staticmethod
    def from_bit_rows(rows: np.ndarray) -> "SparseBatch":
        rows = np.asarray(rows)
        if rows.ndim != 2:
            raise DomainError("bit rows must form a 2-D array")
        r, c = np.nonzero(rows)
        indptr = np.zeros(rows.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=rows.shape[0]), out=indptr[1:])
        return SparseBatch(indptr, c.astype(_index_dtype(rows.shape[1])), int(rows.shape[1]))

    @staticmethod
    def from_positions(ones: np.ndarray, n_messages: int, d: int) -> "SparseBatch":
        """Build a batch from sorted linear positions ``message * d + bit``."""
        bounds = np.arange(n_messages + 1, dtype=np.int64) * d
        indptr = np.searchsorted(ones, bounds).astype(np.int64)
        rows = np.repeat(np.arange(n_messages, dtype=np.int64), np.diff(indptr))
        cols = (ones - rows * d).astype(_index_dtype(d))
        return SparseBatch(indptr, cols, d)


@dataclass(frozen=True)
class DenseBatch:
    """A batch of binary messages with bits packed little-endian into bytes."""

    packed: np.ndarray
    d: int

    @property
    def n_messages(self) -> int:
        return int(self.packed.shape[0])

    def __len__(self) -> int:
        return self.n_messages

    @property
    def nbytes(self) -> int:
        return int(self.packed.nbytes)

    def column_sums(self, chunk_rows: int = 4096) -> np.ndarray:
        sums = np.zeros(self.d, dtype=np.int64)
        for start in range(0, self.n_messages, chunk_rows):
            block = np.unpackbits(
                self.packed[start : start + chunk_rows], axis=1, count=self.d, bitorder="little"
            )
            sums += block.sum(axis=0, dtype=np.int64)
        return sums

    def row(self, r: int) -> np.ndarray:
        return np.unpackbits(self.packed[r], count=self.d, bitorder="little")

    def take(self, rows: np.ndarray) -> "DenseBatch":
        return DenseBatch(self.packed[np.asarray(rows, dtype=np.int64)], self.d)

    def to_bit_rows(self) -> np.ndarray:
        return np.unpackbits(self.packed, axis=1, count=self.d, bitorder="little")

    def to_sparse(self, chunk_rows: int = 4096) -> SparseBatch:
        parts = [
            SparseBatch.from_bit_rows(
                np.unpackbits(self.packed[s : s + chunk_rows], axis=1, count=self.d, bitorder="little")
            )
            for s in range(0, self.n_messages, chunk_rows)
        ]
        return SparseBatch.concatenate(parts, d=self.d)

    @staticmethod
    def concatenate(batches: "list[DenseBatch]", d: int | None = None) -> "DenseBatch":
        if not batches:
            if d is None:
                raise DomainError("cannot infer the dimension of an empty batch list")
            return DenseBatch(np.zeros((0, (d + 7) // 8), dtype=np.uint8), d)
        dims = {b.d for b in batches}
        if len(dims) != 1:
            raise DomainError(f"batches have mismatched dimensions {sorted(dims)}")
        return DenseBatch(np.concatenate([b.packed for b in batches], axis=0), dims.pop())

    @staticmethod
    def from_bit_rows(rows: np.ndarray) -> "DenseBatch":
        rows = np.asarray(rows, dtype=np.uint8)
        return DenseBatch(np.packbits(rows, axis=1, bitorder="little"), int(rows.shape[1]))

    @staticmethod
    def from_sparse(batch: SparseBatch, chunk_rows: int = 4096) -> "DenseBatch":
        width = (batch.d + 7) // 8
        packed = np.zeros((batch.n_messages, width), dtype=np.uint8)
        lengths = batch.row_lengths()
        for start in range(0, batch.n_messages, chunk_rows):
            stop = min(batch.n_messages, start + chunk_rows)
            lo, hi = batch.indptr[start], batch.indptr[stop]
            block = np.zeros((stop - start, batch.d), dtype=np.uint8)
            rows = np.repeat(np.arange(stop - start), lengths[start:stop])
            block[rows, batch.indices[lo:hi]] = 1
            packed[start:stop] = np.packbits(block, axis=1, bitorder="little")
        return DenseBatch(packed, batch.d)


def flip_positions(
    items: np.ndarray, d: int, k: int, q: float, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Sorted linear positions of the 1 bits produced by the flip randomizer.

    User ``i`` (0-based) owns messages ``i*(k+1) .. i*(k+1)+k``; the first
    is the randomized one-hot encoding of ``items[i]`` and the rest are
    randomized zero strings. Message ``r`` occupies linear positions
    ``r*d .. r*d+d-1``.

    Returns:
        The positions and the number of messages.
    """
    n = int(items.size)
    n_messages = n * (k + 1)
    flips = bernoulli_positions(n_messages * d, q, rng)
    if n == 0:
        return flips, 0
    encodings = np.arange(n, dtype=np.int64) * ((k + 1) * d) + (items.astype(np.int64) - 1)
    # A flip landing on an encoding bit clears it; every other encoding bit stays set.
    at = np.searchsorted(flips, encodings)
    hit = np.zeros(n, dtype=bool)
    valid = at < flips.size
    hit[valid] = flips[at[valid]] == encodings[valid]
    kept_flips = np.delete(flips, at[hit])
    kept_enc = encodings[~hit]
    ones = np.insert(kept_flips, np.searchsorted(kept_flips, kept_enc), kept_enc)
    return ones, n_messages


def flip_batch(
    items: np.ndarray, d: int, k: int, q: float, rng: np.random.Generator
) -> SparseBatch:
    ones, n_messages = flip_positions(items, d, k, q, rng)
    return SparseBatch.from_positions(ones, n_messages, d)


def flip_column_sums(
    items: np.ndarray, d: int, k: int, q: float, rng: np.random.Generator
) -> np.ndarray:
    """Sample the analyzer's sufficient statistic without building messages.

    Column ``j`` of the batch sums ``c_j`` encodings of ``j`` (each a 1 kept
    with probability 1-q) and ``n(k+1) - c_j`` other messages (each a 1 with
    probability q), so its total is a sum of two independent binomials.
    """
    n_messages = items.size * (k + 1)
    enc = np.bincount(items - 1, minlength=d).astype(np.int64)
    return rng.binomial(enc, 1.0 - q) + rng.binomial(n_messages - enc, q)
