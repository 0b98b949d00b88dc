"""Top-t selection from frequency estimates and its quality metrics.

Rankings sort values in decreasing order and break ties by the smaller
bin index, for estimates and true histograms alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from shufflehist._validation import check_positive_int
from shufflehist.exceptions import DomainError
from shufflehist.protocol import Dataset, Estimate

__all__ = ["CandidateSet", "alpha_bound", "alpha_gap", "f1_score", "rank_value", "top_t"]


@dataclass(frozen=True)
class CandidateSet:
    """``t`` distinct 1-based bins, stored in rank order."""

    items: tuple[int, ...]
    t: int

    def __post_init__(self) -> None:
        items = tuple(int(i) for i in self.items)
        if len(items) != self.t or len(set(items)) != self.t:
            raise DomainError(f"a candidate set needs exactly t={self.t} distinct bins")
        if items and min(items) < 1:
            raise DomainError("bins are 1-based")
        object.__setattr__(self, "items", items)

    def __contains__(self, j) -> bool:
        return int(j) in self.items

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return self.t

    def as_set(self) -> frozenset[int]:
        return frozenset(self.items)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.items, dtype=np.int64)


def _values(est) -> np.ndarray:
    if isinstance(est, Estimate):
        return est.z
    if isinstance(est, Dataset):
        return est.histogram()
    values = np.asarray(est, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise DomainError("expected a non-empty 1-D vector of frequencies")
    return values


def _ranking(values: np.ndarray) -> np.ndarray:
    # A stable sort of the negated values keeps equal entries in index order.
    return np.argsort(-values, kind="stable")


def top_t(est, t: int) -> CandidateSet:
    """The ``t`` bins of largest value, ties going to the smaller index.

    >>> top_t([0.1, 0.4, 0.4, 0.1], 1).items
    (2,)
    """
    values = _values(est)
    t = check_positive_int(t, "t")
    if t > values.size:
        raise DomainError(f"t={t} exceeds the number of bins {values.size}")
    return CandidateSet(tuple(int(i) + 1 for i in _ranking(values)[:t]), t)


def rank_value(values, t: int) -> float:
    """``v_[t]``, the ``t``-th largest entry."""
    values = _values(values)
    t = check_positive_int(t, "t")
    if t > values.size:
        raise DomainError(f"t={t} exceeds the number of bins {values.size}")
    return float(np.partition(values, values.size - t)[values.size - t])


def _check_candidates(cands: CandidateSet, hist: np.ndarray, t: int) -> np.ndarray:
    if cands.t != t:
        raise DomainError(f"candidate set has size {cands.t}, expected t={t}")
    idx = cands.as_array()
    if idx.max() > hist.size:
        raise DomainError(f"candidate bins must lie in [1, {hist.size}]")
    return idx


def alpha_gap(cands: CandidateSet, data, t: int) -> float:
    """Smallest ``alpha >= 0`` for which every candidate has frequency above ``hist_[t] - alpha``.

    Args:
        cands: Candidate bins.
        data: The :class:`Dataset`, or its exact histogram.
        t: Target size.
    """
    hist = _values(data)
    idx = _check_candidates(cands, hist, t)
    return max(0.0, rank_value(hist, t) - float(hist[idx - 1].min()))


def f1_score(cands: CandidateSet, data, t: int) -> float:
    """Fraction of candidates among the tie-resolved true top ``t``.

    With ``|C| = t`` precision, recall and F1 coincide.
    """
    hist = _values(data)
    _check_candidates(cands, hist, t)
    truth = top_t(hist, t).as_set()
    return len(cands.as_set() & truth) / t


def alpha_bound(params, d: int, t: int) -> float:
    """Gap guaranteed at 90% confidence, ``4 sqrt((k+1)/n q(1-q) ln 20d) / (1-2q)``.

    This doubles the maximum-error width: if every estimate is within
    ``alpha/2`` of the truth, a bin can only displace one that is at most
    ``alpha`` more frequent.

    Args:
        params: Any object with ``n``, ``k`` and ``q`` attributes, such as
            :class:`~shufflehist.protocol.ProtocolParams` or
            :class:`~shufflehist.params.ParamSolution`.
        d: Number of bins.
        t: Target size, at most ``d``.
    """
    d = check_positive_int(d, "d")
    t = check_positive_int(t, "t")
    if t > d:
        raise DomainError(f"t={t} exceeds d={d}")
    n, k, q = int(params.n), int(params.k), float(params.q)
    floor = math.log(20.0 * d) / (n * (k + 1))
    if not floor <= q < 0.5:
        raise DomainError(f"q={q} must lie in [{floor:.6g}, 1/2) for the bound to hold")
    return 4.0 * math.sqrt((k + 1) / n * q * (1.0 - q) * math.log(20.0 * d)) / (1.0 - 2.0 * q)
