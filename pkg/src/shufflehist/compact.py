"""Communication-reduced variants of the flip protocol.

Sparse messages
    A message is sent as the sorted list of positions holding a 1. With
    ``q`` small, each message costs about ``log2(d) (1 + dq)`` bits.

Count-min hashing
    Each user hashes their item into ``V`` independent smaller domains of
    size ``d_hat`` and runs the sparse protocol once per repetition,
    labelling the messages with the repetition index. Collisions only add
    mass, so the analyzer takes the minimum over repetitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from shufflehist import _streams
from shufflehist._batch import SparseBatch, flip_batch, flip_column_sums
from shufflehist._validation import (
    check_bits,
    check_dimension,
    check_items,
    check_nonneg_int,
    check_positive,
    check_positive_int,
    check_probability,
)
from shufflehist.exceptions import DomainError, InfeasibleParametersError, OutOfRegimeError
from shufflehist.params import MAX_DELTA, PRIVACY_CONSTANT, privacy_ratio
from shufflehist.protocol import Dataset, Estimate, ProtocolParams, debias

__all__ = [
    "CM_THRESHOLD_CONSTANT",
    "CMSolution",
    "HashFamily",
    "LabeledBatch",
    "LabeledMessage",
    "SparseMessage",
    "analyze_cm",
    "cm_dimensions",
    "cm_privacy_budget",
    "default_repetitions",
    "expected_sparse_bits",
    "parse_message",
    "randomize_cm",
    "randomize_cm_batch",
    "repetition_estimates",
    "run_cm_protocol",
    "solve_cm",
    "to_dense",
    "to_sparse",
]

#: Threshold constant of the count-min hypothesis on ``k``. The base
#: protocol uses 132/5; the larger value is the default here.
CM_THRESHOLD_CONSTANT = 134.0 / 5.0


@dataclass(frozen=True)
class SparseMessage:
    """A binary message given by the sorted 1-based positions of its 1s."""

    ones: tuple[int, ...]
    d: int

    def __post_init__(self) -> None:
        d = check_dimension(self.d)
        ones = tuple(int(i) for i in self.ones)
        if any(b <= a for a, b in zip(ones, ones[1:])):
            raise DomainError("sparse indices must be strictly increasing")
        if ones and (ones[0] < 1 or ones[-1] > d):
            raise DomainError(f"sparse indices must lie in [1, {d}]")
        object.__setattr__(self, "ones", ones)
        object.__setattr__(self, "d", d)

    def __len__(self) -> int:
        return len(self.ones)

    def __str__(self) -> str:
        return ",".join(map(str, self.ones))


@dataclass(frozen=True)
class LabeledMessage:
    """A sparse message tagged with its repetition index ``label`` in ``[1, V]``."""

    label: int
    payload: SparseMessage

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", check_positive_int(self.label, "label"))

    def __str__(self) -> str:
        return f"{self.label}:{self.payload}"


def parse_message(text: str, d: int) -> SparseMessage | LabeledMessage:
    """Parse the text form ``i1,i2,...`` or ``v:i1,i2,...``."""
    label, sep, body = text.strip().rpartition(":")
    try:
        ones = tuple(int(t) for t in body.split(",")) if body else ()
        payload = SparseMessage(ones, d)
        return LabeledMessage(int(label), payload) if sep else payload
    except ValueError as exc:
        raise DomainError(f"malformed sparse message {text!r}: {exc}") from exc


def to_sparse(x) -> SparseMessage:
    """Sparse form of a 0/1 vector. ``to_sparse("0101")`` gives ``[2, 4]``."""
    bits = check_bits(x)
    return SparseMessage(tuple(int(i) + 1 for i in np.flatnonzero(bits)), bits.size)


def to_dense(s: SparseMessage) -> np.ndarray:
    """Dense 0/1 vector of a sparse message."""
    if not isinstance(s, SparseMessage):
        raise DomainError(f"expected a SparseMessage, got {type(s).__name__}")
    out = np.zeros(s.d, dtype=np.uint8)
    if s.ones:
        out[np.asarray(s.ones) - 1] = 1
    return out


def expected_sparse_bits(d: int, q: float) -> float:
    """Upper bound ``log2(d) (1 + d q)`` on the expected size of one sparse message."""
    d = check_dimension(d)
    q = check_probability(q, "q")
    return math.log2(d) * (1.0 + d * q)


def default_repetitions(d: int) -> int:
    """Default number of hash repetitions, ``ceil(log2 d)`` (at least 1)."""
    return max(1, math.ceil(math.log2(check_dimension(d))))


def cm_dimensions(n: int, d: int, V: int) -> int:
    """Hashed dimension ``ceil(n (100 d)^(1/V))``."""
    n = check_positive_int(n, "n")
    d = check_dimension(d)
    V = check_positive_int(V, "V")
    if V == 1:
        return 100 * n * d
    x = n * (100.0 * d) ** (1.0 / V)
    nearest = round(x)
    # Powers such as (10^6)^(1/2) come back a few ulps off an exact integer.
    if abs(x - nearest) <= 1e-9 * x:
        return int(nearest)
    return math.ceil(x)


def cm_privacy_budget(eps: float, delta: float, V: int) -> tuple[float, float]:
    """Per-repetition budget ``(eps / (4 sqrt(V ln(1/delta))), delta / (2V))``."""
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    V = check_positive_int(V, "V")
    return eps / (4.0 * math.sqrt(V * math.log(1.0 / delta))), delta / (2.0 * V)


_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    """The splitmix64 finaliser, a bijection on 64-bit words."""
    x = x ^ (x >> np.uint64(30))
    x = x * _MIX1
    x = x ^ (x >> np.uint64(27))
    x = x * _MIX2
    return x ^ (x >> np.uint64(31))


class HashFamily:
    """``V`` hash functions from ``[1, d]`` into ``[1, d_hat]``.

    Function ``v`` permutes the 64-bit word ``j`` under keys derived from
    ``(seed, v)`` and reduces the result modulo ``d_hat``. Nothing is
    stored besides ``2V`` keys. Explicit lookup tables can be supplied
    instead, which tests use to engineer collisions.

    Args:
        V: Number of functions.
        d: Source dimension.
        d_hat: Target dimension.
        seed: Public randomness.
        tables: Optional ``(V, d)`` array of 1-based hash values.
    """

    def __init__(self, V: int, d: int, d_hat: int, seed: int = 0, tables=None):
        self.V = check_positive_int(V, "V")
        self.d = check_dimension(d)
        self.d_hat = check_positive_int(d_hat, "d_hat")
        self.seed = int(seed)
        if tables is not None:
            tables = np.asarray(tables, dtype=np.int64)
            if tables.shape != (self.V, self.d):
                raise DomainError(f"hash tables must have shape {(self.V, self.d)}, got {tables.shape}")
            if tables.min() < 1 or tables.max() > self.d_hat:
                raise DomainError(f"hash values must lie in [1, {self.d_hat}]")
        self._tables = tables
        seq = np.random.SeedSequence(self.seed, spawn_key=(_streams.HASH,))
        self._keys = seq.generate_state(2 * self.V, dtype=np.uint64).reshape(self.V, 2)

    @classmethod
    def from_tables(cls, tables, d_hat: int) -> "HashFamily":
        tables = np.atleast_2d(np.asarray(tables, dtype=np.int64))
        return cls(tables.shape[0], tables.shape[1], d_hat, tables=tables)

    @classmethod
    def identity(cls, d: int, V: int = 1) -> "HashFamily":
        """Every function is the identity on ``[1, d]``."""
        return cls.from_tables(np.tile(np.arange(1, d + 1), (V, 1)), d)

    def __call__(self, v: int, items) -> np.ndarray:
        """Hash 1-based ``items`` with function ``v`` in ``[1, V]``."""
        if not 1 <= int(v) <= self.V:
            raise DomainError(f"hash index must lie in [1, {self.V}], got {v}")
        items = check_items(np.atleast_1d(items), self.d)
        if self._tables is not None:
            return self._tables[int(v) - 1, items - 1]
        key_a, key_b = self._keys[int(v) - 1]
        mixed = _mix64((items.astype(np.uint64) ^ key_a) + key_b)
        return (mixed % np.uint64(self.d_hat)).astype(np.int64) + 1

    def table(self, v: int) -> np.ndarray:
        """Hash value of every item, as a length-``d`` array."""
        return self(v, np.arange(1, self.d + 1))

    def __repr__(self) -> str:
        kind = "tables" if self._tables is not None else f"seed={self.seed}"
        return f"HashFamily(V={self.V}, d={self.d}, d_hat={self.d_hat}, {kind})"


@dataclass(frozen=True)
class LabeledBatch:
    """Messages over ``[1, d_hat]`` with a repetition label per message."""

    labels: np.ndarray
    batch: SparseBatch
    V: int

    @property
    def n_messages(self) -> int:
        return self.batch.n_messages

    def __len__(self) -> int:
        return self.n_messages

    def take(self, rows) -> "LabeledBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledBatch(self.labels[rows], self.batch.take(rows), self.V)

    def messages(self) -> list[LabeledMessage]:
        return [
            LabeledMessage(int(v), SparseMessage(tuple(self.batch.row(r) + 1), self.batch.d))
            for r, v in enumerate(self.labels)
        ]

    @staticmethod
    def concatenate(parts: "Sequence[LabeledBatch]") -> "LabeledBatch":
        if not parts:
            raise DomainError("nothing to concatenate")
        return LabeledBatch(
            np.concatenate([p.labels for p in parts]),
            SparseBatch.concatenate([p.batch for p in parts]),
            max(p.V for p in parts),
        )

    @staticmethod
    def from_messages(messages: Iterable[LabeledMessage], V: int, d_hat: int) -> "LabeledBatch":
        messages = list(messages)
        labels = np.array([m.label for m in messages], dtype=np.int64)
        lengths = np.array([len(m.payload) for m in messages], dtype=np.int64)
        if any(m.payload.d != d_hat for m in messages):
            raise DomainError(f"every payload must have dimension {d_hat}")
        indptr = np.zeros(len(messages) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        flat = [i - 1 for m in messages for i in m.payload.ones]
        return LabeledBatch(labels, SparseBatch(indptr, np.asarray(flat, dtype=np.int64), d_hat), V)


def randomize_cm_batch(
    items, family: HashFamily, k: int, q: float, rng: np.random.Generator
) -> LabeledBatch:
    """All users' ``V (k+1)`` labelled messages, ordered by repetition then user."""
    items = check_items(items, family.d)
    k = check_nonneg_int(k, "k")
    q = check_probability(q, "q")
    parts = []
    for v in range(1, family.V + 1):
        batch = flip_batch(family(v, items), family.d_hat, k, q, rng)
        parts.append(LabeledBatch(np.full(batch.n_messages, v, dtype=np.int64), batch, family.V))
    return LabeledBatch.concatenate(parts)


def randomize_cm(
    item: int, family: HashFamily, k: int, q: float, rng: np.random.Generator
) -> list[LabeledMessage]:
    """One user's ``V (k+1)`` labelled sparse messages."""
    return randomize_cm_batch(np.array([item]), family, k, q, rng).messages()


def _as_labeled(messages, family: HashFamily) -> LabeledBatch:
    if isinstance(messages, LabeledBatch):
        return messages
    return LabeledBatch.from_messages(messages, family.V, family.d_hat)


def repetition_estimates(
    messages, family: HashFamily, params: ProtocolParams, *, lenient: bool = False
) -> np.ndarray:
    """Estimates over the hashed domain, one row per repetition.

    Returns:
        A ``(V, d_hat)`` array whose row ``v - 1`` analyses the messages
        labelled ``v``.

    Raises:
        DomainError: On labels outside ``[1, V]`` or, unless ``lenient``,
            a repetition that does not hold exactly ``n(k+1)`` messages.
    """
    lb = _as_labeled(messages, family)
    V, d_hat = family.V, family.d_hat
    if lb.batch.d != d_hat:
        raise DomainError(f"messages have dimension {lb.batch.d}, the hash family maps to {d_hat}")
    if lb.labels.size and (lb.labels.min() < 1 or lb.labels.max() > V):
        raise DomainError(f"message labels must lie in [1, {V}]")
    per_label = np.bincount(lb.labels - 1, minlength=V) if lb.labels.size else np.zeros(V, int)
    if not lenient and not np.all(per_label == params.n_messages):
        raise DomainError(
            f"every repetition needs n(k+1) = {params.n_messages} messages, got {per_label.tolist()}"
        )
    entry_labels = np.repeat(lb.labels - 1, lb.batch.row_lengths())
    flat = entry_labels * d_hat + lb.batch.indices
    sums = np.bincount(flat, minlength=V * d_hat).reshape(V, d_hat)
    return debias(sums, per_label[:, None], params.n, params.q)


def _min_over_repetitions(hashed: np.ndarray, family: HashFamily) -> np.ndarray:
    z = np.full(family.d, np.inf)
    for v in range(1, family.V + 1):
        np.minimum(z, hashed[v - 1, family.table(v) - 1], out=z)
    return z


def analyze_cm(
    messages, family: HashFamily, params: ProtocolParams, *, lenient: bool = False
) -> Estimate:
    """Count-min analyzer: ``z_j = min_v zhat^(v)[h_v(j)]``.

    ``params`` describes the protocol over the source domain, so
    ``params.d`` must equal ``family.d``. Each repetition is analysed at
    dimension ``family.d_hat``.
    """
    if params.d != family.d:
        raise DomainError(f"params are for d={params.d}, the hash family for d={family.d}")
    hashed = repetition_estimates(messages, family, params, lenient=lenient)
    return Estimate(_min_over_repetitions(hashed, family), params)


@dataclass(frozen=True)
class CMSolution:
    """Solved parameters of the count-min protocol.

    Attributes:
        V: Hash repetitions.
        d_hat: Hashed dimension.
        eps_bar, delta_bar: Budget of each repetition.
        k, q, q_hat, q_tilde, scale: As for the base protocol, at the
            per-repetition budget and with floor ``ln(20 d_hat V)/(n(k+1))``.
        bound: ``2 sqrt((k+1)/n q(1-q) ln(20 d_hat V)) / (1-2q)``, holding
            for all bins with probability at least ``9/10 - (1/100)^V``.
        const: Threshold constant used for the smallest admissible ``k``.
    """

    V: int
    d_hat: int
    eps_bar: float
    delta_bar: float
    k: int
    q: float
    q_hat: float
    q_tilde: float
    scale: float
    bound: float
    n: int
    d: int
    eps: float
    delta: float
    const: float

    @property
    def confidence(self) -> float:
        return 0.9 - 0.01**self.V

    def protocol_params(self) -> ProtocolParams:
        return ProtocolParams(n=self.n, d=self.d, k=self.k, q=self.q, eps=self.eps, delta=self.delta)

    def hash_family(self, seed: int = 0) -> HashFamily:
        return HashFamily(self.V, self.d, self.d_hat, seed=seed)

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def solve_cm(
    eps: float,
    delta: float,
    n: int,
    d: int,
    V: int | None = None,
    k: int | None = None,
    *,
    d_hat: int | None = None,
    const: float = CM_THRESHOLD_CONSTANT,
) -> CMSolution:
    """Solve the count-min protocol for a central (eps, delta) target.

    Args:
        eps, delta: Target budget after composing the ``V`` repetitions.
        n: Users.
        d: Source dimension.
        V: Repetitions. Defaults to :func:`default_repetitions`.
        k: Fabricated messages per user and repetition. Defaults to the
            smallest admissible value.
        d_hat: Override of :func:`cm_dimensions`.
        const: Threshold constant; 134/5 by default, 132/5 reproduces the
            base protocol's threshold.

    Raises:
        InfeasibleParametersError: If ``k`` is below the threshold.
    """
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    if delta > MAX_DELTA:
        raise OutOfRegimeError(f"the guarantees assume delta <= {MAX_DELTA}, got {delta}")
    n = check_positive_int(n, "n")
    d = check_dimension(d)
    V = default_repetitions(d) if V is None else check_positive_int(V, "V")
    d_hat = cm_dimensions(n, d, V) if d_hat is None else check_positive_int(d_hat, "d_hat")
    eps_bar, delta_bar = cm_privacy_budget(eps, delta, V)
    r2 = privacy_ratio(eps_bar) ** 2
    log4 = math.log(4.0 / delta_bar)
    log_floor = math.log(20.0 * d_hat * V)
    threshold = max(const / n * r2 * log4, 2.0 / n * log_floor - 1.0)
    k_min = max(1, math.floor(threshold) + 1)
    if k is None:
        k = k_min
    k = check_nonneg_int(k, "k")
    if k < k_min:
        raise InfeasibleParametersError(
            f"k={k} is below the count-min threshold {threshold:.6g} (need k >= {k_min})"
        )
    c = PRIVACY_CONSTANT / (n * k) * r2 * log4
    q_hat = 2.0 * c / (1.0 + math.sqrt(1.0 - 4.0 * c))
    q_tilde = log_floor / (n * (k + 1))
    q = max(q_hat, q_tilde)
    bound = 2.0 * math.sqrt((k + 1) / n * q * (1.0 - q) * log_floor) / (1.0 - 2.0 * q)
    return CMSolution(
        V=V, d_hat=d_hat, eps_bar=eps_bar, delta_bar=delta_bar, k=k, q=q, q_hat=q_hat,
        q_tilde=q_tilde, scale=1.0 / (1.0 - 2.0 * q), bound=bound, n=n, d=d, eps=eps,
        delta=delta, const=const,
    )


def run_cm_protocol(
    data: Dataset,
    params: ProtocolParams,
    family: HashFamily,
    seed: int,
    *,
    simulation: str = "messages",
    stream_key: tuple[int, ...] = (),
) -> Estimate:
    """Run the count-min protocol end to end.

    ``simulation="counts"`` samples each repetition's per-position sums
    from their exact binomial law instead of building messages.
    """
    if data.d != family.d or data.n != params.n:
        raise DomainError("data, params and hash family disagree on n or d")
    rng = _streams.stream(seed, *stream_key, _streams.RANDOMIZE)
    if simulation == "counts":
        sums = np.stack(
            [
                flip_column_sums(family(v, data.items), family.d_hat, params.k, params.q, rng)
                for v in range(1, family.V + 1)
            ]
        )
        hashed = debias(sums, params.n_messages, params.n, params.q)
        return Estimate(_min_over_repetitions(hashed, family), params)
    if simulation != "messages":
        raise DomainError(f"simulation must be 'messages' or 'counts', got {simulation!r}")
    lb = randomize_cm_batch(data.items, family, params.k, params.q, rng)
    order = _streams.stream(seed, *stream_key, _streams.SHUFFLE).permutation(lb.n_messages)
    return analyze_cm(lb.take(order), family, params)
