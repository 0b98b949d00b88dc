"""The flip histogram protocol: randomizer, shuffler and analyzer.

Each user one-hot encodes an item in ``[1, d]``, applies per-bit
randomized response with flip probability ``q`` to the encoding and to
``k`` additional all-zero strings, and submits the resulting ``k + 1``
messages. The shuffler permutes all ``n(k+1)`` messages uniformly and the
analyzer de-biases the per-position sums:

    z_j = (1/n) * sum_i (y_ij - q) / (1 - 2q)

Items and bins are 1-based throughout the public API; position ``j - 1``
of any array holds bin ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from shufflehist import _streams
from shufflehist._batch import (
    DenseBatch,
    SparseBatch,
    bernoulli_positions,
    flip_batch,
    flip_column_sums,
)
from shufflehist._validation import (
    check_bits,
    check_dimension,
    check_items,
    check_nonneg_int,
    check_positive_int,
    check_probability,
)
from shufflehist.exceptions import DomainError, ResourceLimitError

__all__ = [
    "Dataset",
    "Estimate",
    "ProtocolParams",
    "ShuffledBatch",
    "analyze_flip",
    "debias",
    "encode_one_hot",
    "randomize_bits",
    "randomize_flip",
    "randomize_flip_batch",
    "run_protocol",
    "shuffle",
]

Batch = Union[SparseBatch, DenseBatch]

#: Default ceiling on the packed size of a dense simulated batch.
DEFAULT_DENSE_BUDGET = 1 << 30


@dataclass(frozen=True)
class Dataset:
    """The users' items, each an integer in ``[1, d]``."""

    items: np.ndarray
    d: int

    def __post_init__(self) -> None:
        d = check_dimension(self.d)
        items = check_items(self.items, d)
        if items.size < 1:
            raise DomainError("a dataset needs at least one user")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "items", items)

    @property
    def n(self) -> int:
        return int(self.items.size)

    def counts(self) -> np.ndarray:
        return np.bincount(self.items - 1, minlength=self.d).astype(np.int64)

    def histogram(self) -> np.ndarray:
        """Exact frequency of every bin, ``hist_j = count_j / n``."""
        return self.counts() / self.n


@dataclass(frozen=True)
class ProtocolParams:
    """Parameters of one protocol execution.

    ``eps`` and ``delta`` record the privacy target the parameters were
    solved for. They are ``None`` when ``k`` and ``q`` were set by hand,
    in which case no privacy guarantee is implied.
    """

    n: int
    d: int
    k: int
    q: float
    eps: float | None = None
    delta: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "n", check_positive_int(self.n, "n"))
        object.__setattr__(self, "d", check_dimension(self.d))
        object.__setattr__(self, "k", check_nonneg_int(self.k, "k"))
        object.__setattr__(self, "q", check_probability(self.q, "q", high=0.5, high_open=True))

    @property
    def scale(self) -> float:
        """The de-bias factor ``1 / (1 - 2q)``."""
        return 1.0 / (1.0 - 2.0 * self.q)

    @property
    def n_messages(self) -> int:
        return self.n * (self.k + 1)

    @classmethod
    def solve(
        cls,
        n: int,
        d: int,
        eps: float,
        delta: float,
        k: int | None = None,
        mode: str = "max",
        beta: float | None = None,
    ) -> "ProtocolParams":
        """Solve ``q`` (and ``k`` when omitted) for an (eps, delta) target."""
        from shufflehist import params as _params

        if k is None:
            k = _params.min_k(eps, delta, n, mode, d=d)
        sol = _params.solve_q(eps, delta, n, k, mode, d=d, beta=beta)
        return cls(n=n, d=d, k=sol.k, q=sol.q, eps=eps, delta=delta)


@dataclass(frozen=True)
class ShuffledBatch:
    """Messages in shuffled order.

    The permutation is kept next to the storage and applied on access, so
    shuffling a million messages does not copy them.
    """

    storage: Batch
    order: np.ndarray
    n: int
    k: int | None = None

    @property
    def d(self) -> int:
        return self.storage.d

    @property
    def n_messages(self) -> int:
        return self.storage.n_messages

    def __len__(self) -> int:
        return self.n_messages

    @property
    def messages(self) -> Batch:
        """The batch materialised in shuffled order."""
        return self.storage.take(self.order)

    def __iter__(self):
        for r in self.order:
            yield self.storage.row(int(r))

    def column_sums(self) -> np.ndarray:
        # Column sums do not depend on message order.
        return self.storage.column_sums()


@dataclass(frozen=True)
class Estimate:
    """De-biased frequency estimates ``z`` (bin ``j`` at ``z[j-1]``)."""

    z: np.ndarray
    params: ProtocolParams | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return int(self.z.size)

    def max_error(self, hist: np.ndarray) -> float:
        return float(np.max(np.abs(self.z - np.asarray(hist, dtype=float))))


def encode_one_hot(item: int, d: int) -> np.ndarray:
    """The length-``d`` string with a single 1 at position ``item``.

    >>> encode_one_hot(1, 3).tolist()
    [1, 0, 0]
    """
    d = check_dimension(d)
    item = check_positive_int(item, "item")
    if item > d:
        raise DomainError(f"item must lie in [1, {d}], got {item}")
    out = np.zeros(d, dtype=np.uint8)
    out[item - 1] = 1
    return out


def randomize_bit_rows(rows: np.ndarray, q: float, rng: np.random.Generator) -> np.ndarray:
    """Flip every bit of a ``(N, d)`` 0/1 matrix independently with probability ``q``."""
    q = check_probability(q, "q")
    rows = np.asarray(rows, dtype=np.uint8)
    flat = rows.reshape(-1).copy()
    flat[bernoulli_positions(flat.size, q, rng)] ^= 1
    return flat.reshape(rows.shape)


def randomize_bits(x, q: float, rng: np.random.Generator) -> np.ndarray:
    """Randomized response on a binary string.

    Args:
        x: 0/1 vector (or a string such as ``"101"``).
        q: Flip probability in ``[0, 1]``. Values of 1/2 and above are
            allowed here for auditing; the protocol itself needs ``q < 1/2``.
        rng: Source of randomness.

    Returns:
        The randomized string as a ``uint8`` vector.
    """
    bits = check_bits(x)
    return randomize_bit_rows(bits[None, :], q, rng)[0]


def randomize_flip(
    item: int, d: int, k: int, q: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """One user's ``k + 1`` messages: their randomized encoding, then ``k`` randomized zeros."""
    encode_one_hot(item, d)  # validates item and d
    k = check_nonneg_int(k, "k")
    q = check_probability(q, "q")
    batch = flip_batch(np.array([item], dtype=np.int64), d, k, q, rng)
    return list(batch.to_bit_rows())


def randomize_flip_batch(
    items: np.ndarray, d: int, k: int, q: float, rng: np.random.Generator
) -> SparseBatch:
    """Messages of all users, user-major and unshuffled, in sparse form.

    Message ``i*(k+1)`` is user ``i``'s encoding and the following ``k``
    are that user's fabricated zero strings, exactly as if
    :func:`randomize_flip` had been called per user.
    """
    d = check_dimension(d)
    items = check_items(items, d)
    k = check_nonneg_int(k, "k")
    q = check_probability(q, "q")
    return flip_batch(items, d, k, q, rng)


def _as_batch(messages) -> tuple[Batch, int, int | None]:
    """Coerce per-user message sequences to a dense batch."""
    users = [list(user) for user in messages]
    rows = [check_bits(m, "message") for user in users for m in user]
    if not rows:
        return DenseBatch.concatenate([], d=0), len(users), None
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise DomainError(f"messages have mismatched dimensions {sorted(dims)}")
    sizes = {len(user) for user in users}
    k = sizes.pop() - 1 if len(sizes) == 1 else None
    return DenseBatch.from_bit_rows(np.vstack(rows)), len(users), k


def shuffle(
    batches: Union[Batch, Iterable[Sequence]],
    rng: np.random.Generator,
    *,
    n: int | None = None,
    k: int | None = None,
) -> ShuffledBatch:
    """Uniformly permute the concatenation of all users' messages.

    Args:
        batches: Either a sequence holding each user's message sequence,
            or an already concatenated :class:`SparseBatch`/:class:`DenseBatch`.
        rng: Source of the permutation (Fisher-Yates).
        n: User count. Needed only when passing a concatenated batch.
        k: Fabricated messages per user, when known.

    Returns:
        The shuffled batch.
    """
    if isinstance(batches, (SparseBatch, DenseBatch)):
        storage = batches
        if n is None:
            if k is None:
                raise DomainError("n or k is required when shuffling a concatenated batch")
            n = storage.n_messages // (k + 1)
    else:
        storage, n_users, k_found = _as_batch(batches)
        n = n_users if n is None else n
        k = k_found if k is None else k
    order = rng.permutation(storage.n_messages)
    return ShuffledBatch(storage=storage, order=order, n=int(n), k=k)


def debias(column_sums: np.ndarray, n_messages: int, n: int, q: float) -> np.ndarray:
    """Turn per-position sums of 1s into unbiased frequency estimates."""
    return (np.asarray(column_sums, dtype=np.float64) - n_messages * q) / (n * (1.0 - 2.0 * q))


def analyze_flip(batch, params: ProtocolParams, *, lenient: bool = False) -> Estimate:
    """De-bias and re-scale the per-position sums of a batch.

    Args:
        batch: A :class:`ShuffledBatch`, a raw batch, or an iterable of
            0/1 messages.
        params: Protocol parameters; ``n``, ``q`` and ``d`` are used.
        lenient: Accept a message count other than ``n(k+1)``. Meant for
            attack experiments in which corrupt users break the budget.

    Returns:
        The estimate over ``[1, d]``.
    """
    if not isinstance(batch, (ShuffledBatch, SparseBatch, DenseBatch)):
        rows = [check_bits(m, "message") for m in batch]
        batch = (
            DenseBatch.from_bit_rows(np.vstack(rows))
            if rows
            else DenseBatch.concatenate([], d=params.d)
        )
    if batch.n_messages and batch.d != params.d:
        raise DomainError(f"messages have dimension {batch.d}, params expect {params.d}")
    if not lenient and batch.n_messages != params.n_messages:
        raise DomainError(
            f"expected n(k+1) = {params.n_messages} messages, got {batch.n_messages}"
        )
    sums = batch.column_sums() if batch.n_messages else np.zeros(params.d, dtype=np.int64)
    return Estimate(debias(sums, batch.n_messages, params.n, params.q), params)


def _check_consistent(data: Dataset, params: ProtocolParams) -> None:
    if data.n != params.n or data.d != params.d:
        raise DomainError(
            f"params are for (n={params.n}, d={params.d}) but data has (n={data.n}, d={data.d})"
        )


def run_protocol(
    data: Dataset,
    params: ProtocolParams,
    seed: int,
    *,
    layout: str = "sparse",
    simulation: str = "messages",
    stream_key: tuple[int, ...] = (),
    dense_budget: int = DEFAULT_DENSE_BUDGET,
) -> Estimate:
    """Run randomizer, shuffler and analyzer end to end.

    Args:
        data: The users' items.
        params: Parameters consistent with ``data``.
        seed: Master seed. The same seed and key give the same estimate.
        layout: ``"sparse"`` (index lists) or ``"dense"`` (packed bits).
            Both consume randomness identically and give identical output.
        simulation: ``"messages"`` materialises every message.
            ``"counts"`` samples the per-position sums directly from their
            exact binomial law, which is far cheaper when ``n(k+1)d`` is
            huge but does not reproduce the message-level random stream.
        stream_key: Extra keys (for instance ``(sweep, trial)``) that
            select an independent stream under the same master seed.
        dense_budget: Largest packed dense batch, in bytes, that will be built.

    Returns:
        The estimate.
    """
    _check_consistent(data, params)
    rng = _streams.stream(seed, *stream_key, _streams.RANDOMIZE)
    if simulation == "counts":
        sums = flip_column_sums(data.items, data.d, params.k, params.q, rng)
        return Estimate(debias(sums, params.n_messages, params.n, params.q), params)
    if simulation != "messages":
        raise DomainError(f"simulation must be 'messages' or 'counts', got {simulation!r}")

    if layout == "dense":
        need = params.n_messages * ((params.d + 7) // 8)
        if need > dense_budget:
            raise ResourceLimitError(
                f"a dense batch would need {need} bytes (budget {dense_budget}); "
                "use the sparse layout or the count-min protocol instead"
            )
    elif layout != "sparse":
        raise DomainError(f"layout must be 'sparse' or 'dense', got {layout!r}")

    batch: Batch = flip_batch(data.items, data.d, params.k, params.q, rng)
    if layout == "dense":
        batch = batch.to_dense()
    shuffled = shuffle(
        batch, _streams.stream(seed, *stream_key, _streams.SHUFFLE), n=params.n, k=params.k
    )
    return analyze_flip(shuffled, params)
