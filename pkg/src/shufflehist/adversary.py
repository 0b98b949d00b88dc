"""Manipulation attacks on the flip protocol and on Hadamard response.

Corrupt users in the flip protocol may send arbitrary binary strings but
are held to ``k + 1`` messages each. A coalition of ``m`` users then moves
any single estimate by at most ``(m/n)(k+1)/(1-2q)``, whatever it sends.
Hadamard response is far more fragile. There, a corrupt user who places
every message inside the target row's positive set adds about
``(k+1)/n`` to that bin's estimate.

Attack runs are coupled with an honest run. Both share the honest users'
randomness and differ only in what the coalition sends, so the per-trial
difference isolates the coalition's effect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from shufflehist import _streams
from shufflehist._batch import SparseBatch, bernoulli_positions, flip_batch
from shufflehist._validation import (
    check_dimension,
    check_items,
    check_nonneg_int,
    check_positive,
    check_positive_int,
    check_probability,
)
from shufflehist.exceptions import DomainError
from shufflehist.params import robustness_bound
from shufflehist.protocol import Dataset, Estimate, ProtocolParams, analyze_flip, shuffle

__all__ = [
    "AttackReport",
    "AttackSpec",
    "HadParams",
    "analyze_had",
    "attack_had",
    "compare_per_user_bias",
    "forge_flip_messages",
    "had_params",
    "hadamard_row_positive_set",
    "randomize_had",
    "randomize_had_batch",
    "run_attacked_flip",
    "run_attacked_had",
    "run_had_protocol",
]

STRATEGIES = ("honest_lie", "flood_bit", "had_flood")


@dataclass(frozen=True)
class AttackSpec:
    """A coalition of ``m`` users targeting bin ``target`` with a forging strategy."""

    target: int
    m: int
    strategy: str = "flood_bit"

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", check_positive_int(self.target, "target"))
        object.__setattr__(self, "m", check_nonneg_int(self.m, "m"))
        strategy = str(self.strategy).replace("-", "_").lower()
        if strategy not in STRATEGIES:
            raise DomainError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        object.__setattr__(self, "strategy", strategy)

    def validate(self, n: int, d: int) -> None:
        if self.m > n:
            raise DomainError(f"coalition size m={self.m} exceeds n={n}")
        if self.target > d:
            raise DomainError(f"target {self.target} lies outside [1, {d}]")


def forge_flip_messages(
    spec: AttackSpec,
    params: ProtocolParams,
    rng: np.random.Generator,
    *,
    messages_per_user: int | None = None,
) -> SparseBatch:
    """Messages sent by the coalition, user-major.

    ``honest_lie`` runs the honest randomizer on the target item.
    ``flood_bit`` sends messages whose target bit is 1 and whose other
    bits are ``Ber(q)`` noise, as an honest fabricated message would be.

    Args:
        spec: The attack.
        params: Protocol parameters.
        rng: Randomness of the forgery.
        messages_per_user: Messages per corrupt user. Defaults to the
            honest budget ``k + 1``; larger values model unconstrained
            flooding and are only allowed with ``flood_bit``.
    """
    spec.validate(params.n, params.d)
    per_user = params.k + 1 if messages_per_user is None else check_positive_int(
        messages_per_user, "messages_per_user"
    )
    if spec.strategy == "honest_lie":
        if per_user != params.k + 1:
            raise DomainError("honest_lie always sends the honest k + 1 messages")
        items = np.full(spec.m, spec.target, dtype=np.int64)
        return flip_batch(items, params.d, params.k, params.q, rng)
    if spec.strategy != "flood_bit":
        raise DomainError(f"{spec.strategy} is not a flip-protocol strategy")
    count = spec.m * per_user
    noise = bernoulli_positions(count * params.d, params.q, rng)
    target_bits = np.arange(count, dtype=np.int64) * params.d + (spec.target - 1)
    return SparseBatch.from_positions(np.union1d(noise, target_bits), count, params.d)


@dataclass(frozen=True, eq=False)
class AttackReport:
    """Per-trial outcome of a coupled attack experiment.

    Attributes:
        protocol: ``"flip"`` or ``"had"``.
        strategy: Forging strategy.
        n, m, target: Population, coalition size and targeted bin.
        z_honest: Target estimate of each honest run.
        z_corrupt: Target estimate of the matching corrupted run.
        hist_target: True frequency of the target bin.
        bound: Probability-1 bound on ``|z_corrupt - z_honest|``
            (``nan`` where no such bound applies).
        expected_bias: Expected ``z_corrupt - z_honest`` where known.
        constrained: Corrupt users respected the message budget.
        max_error_honest, max_error_corrupt: Per-trial maximum error over
            all bins of each run.
    """

    protocol: str
    strategy: str
    n: int
    m: int
    target: int
    z_honest: np.ndarray
    z_corrupt: np.ndarray
    hist_target: float
    bound: float
    expected_bias: float = math.nan
    constrained: bool = True
    max_error_honest: np.ndarray | None = field(default=None, compare=False)
    max_error_corrupt: np.ndarray | None = field(default=None, compare=False)
    details: dict = field(default_factory=dict, compare=False)

    @property
    def trials(self) -> int:
        return int(self.z_honest.size)

    @property
    def bias(self) -> np.ndarray:
        """Per-trial shift ``z_corrupt - z_honest``."""
        return self.z_corrupt - self.z_honest

    @property
    def mean_bias(self) -> float:
        return float(np.mean(self.bias))

    @property
    def bias_se(self) -> float:
        return float(np.std(self.bias, ddof=1) / math.sqrt(self.trials)) if self.trials > 1 else math.nan

    def within_bound(self) -> np.ndarray:
        """Trials in which the shift respects ``bound``.

        Integer message counts make the shift exact up to a few ulps; the
        comparison allows a relative slack of 1e-12.
        """
        return np.abs(self.bias) <= self.bound * (1.0 + 1e-12)

    def rows(self) -> list[dict]:
        return [
            {
                "trial": t,
                "protocol": self.protocol,
                "strategy": self.strategy,
                "m": self.m,
                "z_target_honest": float(h),
                "z_target_corrupt": float(c),
                "bias": float(c - h),
                "bound": self.bound,
            }
            for t, (h, c) in enumerate(zip(self.z_honest, self.z_corrupt))
        ]


def _coalition(coalition, m: int, n: int) -> np.ndarray:
    if coalition is None:
        return np.arange(m, dtype=np.int64)
    users = np.unique(np.asarray(coalition, dtype=np.int64))
    if users.size != m or (users.size and (users[0] < 0 or users[-1] >= n)):
        raise DomainError(f"coalition must list {m} distinct user indices in [0, {n})")
    return users


def _honest_rows(users: np.ndarray, n: int, per_user: int) -> np.ndarray:
    keep = np.ones(n, dtype=bool)
    keep[users] = False
    honest_users = np.flatnonzero(keep)
    return (honest_users[:, None] * per_user + np.arange(per_user)).reshape(-1)


def run_attacked_flip(
    data: Dataset,
    params: ProtocolParams,
    spec: AttackSpec,
    seed: int,
    trials: int,
    *,
    coalition=None,
    messages_per_user: int | None = None,
) -> AttackReport:
    """Coupled honest and corrupted runs of the flip protocol.

    In trial ``t`` every user's honest messages come from stream
    ``(seed, t)``. The corrupted run keeps the non-coalition users'
    messages and replaces the coalition's with a forgery drawn from a
    separate stream.

    Args:
        data: True items of all users, coalition included.
        params: Protocol parameters.
        spec: The attack.
        seed: Master seed.
        trials: Number of coupled pairs.
        coalition: 0-based indices of the corrupt users. Defaults to the
            first ``spec.m`` users.
        messages_per_user: Override of the corrupt message budget (see
            :func:`forge_flip_messages`). Budgets above ``k + 1`` are
            reported with ``bound = nan``.
    """
    spec.validate(params.n, params.d)
    trials = check_positive_int(trials, "trials")
    users = _coalition(coalition, spec.m, params.n)
    per_user = params.k + 1
    honest_rows = _honest_rows(users, params.n, per_user)
    constrained = messages_per_user in (None, per_user)
    hist = data.histogram()
    z_hon, z_cor = np.empty(trials), np.empty(trials)
    err_hon, err_cor = np.empty(trials), np.empty(trials)
    for t in range(trials):
        rng = _streams.stream(seed, t, _streams.RANDOMIZE)
        honest = flip_batch(data.items, params.d, params.k, params.q, rng)
        forged = forge_flip_messages(
            spec, params, _streams.stream(seed, t, _streams.FORGE), messages_per_user=messages_per_user
        )
        corrupt = SparseBatch.concatenate([honest.take(honest_rows), forged])
        shuffle_rng = _streams.stream(seed, t, _streams.SHUFFLE)
        zh = analyze_flip(shuffle(honest, shuffle_rng, n=params.n), params).z
        zc = analyze_flip(shuffle(corrupt, shuffle_rng, n=params.n), params, lenient=not constrained).z
        z_hon[t], z_cor[t] = zh[spec.target - 1], zc[spec.target - 1]
        err_hon[t], err_cor[t] = np.max(np.abs(zh - hist)), np.max(np.abs(zc - hist))
    if spec.strategy == "honest_lie":
        liars = int(np.sum(data.items[users] != spec.target))
        expected = liars / params.n
    else:
        expected = math.nan
    bound = robustness_bound(params.n, params.k, params.q, spec.m) if constrained else math.nan
    return AttackReport(
        protocol="flip", strategy=spec.strategy, n=params.n, m=spec.m, target=spec.target,
        z_honest=z_hon, z_corrupt=z_cor, hist_target=float(hist[spec.target - 1]),
        bound=bound, expected_bias=expected, constrained=constrained,
        max_error_honest=err_hon, max_error_corrupt=err_cor, details={"k": params.k, "q": params.q},
    )


# ----------------------------------------------------------------------------
# Hadamard response
# ----------------------------------------------------------------------------


def _next_pow2(x: int) -> int:
    return 1 << max(0, (int(x) - 1).bit_length())


def _is_pow2(x: int) -> bool:
    return x >= 1 and x & (x - 1) == 0


@dataclass(frozen=True)
class HadParams:
    """Parameters of Hadamard response.

    Attributes:
        d: Number of bins.
        D: Padded dimension, a power of two at least ``2d``.
        tau: Indices per message.
        k: Blanket messages per user.
        n: Users.
    """

    d: int
    D: int
    tau: int
    k: int
    n: int

    def __post_init__(self) -> None:
        check_dimension(self.d)
        check_positive_int(self.tau, "tau")
        check_nonneg_int(self.k, "k")
        check_positive_int(self.n, "n")
        if not _is_pow2(self.D) or self.D < 2 * self.d:
            raise DomainError(f"D must be a power of two >= 2d = {2 * self.d}, got {self.D}")

    @property
    def n_messages(self) -> int:
        return self.n * (self.k + 1)


def had_params(eps: float, delta: float, n: int, d: int) -> HadParams:
    """Parameters with unit leading constants.

    ``k = ceil(ln(1/(eps delta)) / eps^2)``, ``tau = ceil(log2 n)`` (at
    least 1) and ``D = 2 next_pow2(d)``.
    """
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    n = check_positive_int(n, "n")
    d = check_dimension(d)
    if eps * delta >= 1.0:
        raise DomainError("Hadamard response parameters need eps * delta < 1")
    k = math.ceil(math.log(1.0 / (eps * delta)) / eps**2)
    tau = max(1, math.ceil(math.log2(n)))
    return HadParams(d=d, D=2 * _next_pow2(d), tau=tau, k=k, n=n)


def _check_row(j: int, D: int) -> None:
    if not _is_pow2(D):
        raise DomainError(f"D must be a power of two, got {D}")
    if not 1 <= j <= D - 1:
        raise DomainError(f"row index must lie in [1, {D - 1}], got {j}")


def hadamard_row_positive_set(j: int, D: int) -> np.ndarray:
    """Columns (1-based) where row ``j + 1`` of the Sylvester Hadamard matrix is +1.

    Entry ``(r, c)`` is +1 iff ``popcount((r-1) & (c-1))`` is even.
    """
    j, D = int(j), int(D)
    _check_row(j, D)
    cols = np.arange(D, dtype=np.int64)
    return cols[(np.bitwise_count(cols & j) & 1) == 0] + 1


def _sample_positive(rows: np.ndarray, D: int, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Uniform 1-based columns from the positive sets of ``rows`` (broadcast over ``shape``).

    A uniform column with odd parity is mapped to an even one by toggling
    the lowest set bit of the row; the map is a bijection, so the result is
    uniform on the positive set.
    """
    cols = rng.integers(0, D, size=shape, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, *([1] * (len(shape) - 1)))
    odd = (np.bitwise_count(cols & rows) & 1).astype(bool)
    low_bit = rows & -rows
    return np.where(odd, cols ^ low_bit, cols) + 1


def randomize_had_batch(items, hp: HadParams, rng: np.random.Generator) -> np.ndarray:
    """All users' messages as an ``(n(k+1), tau)`` array of 1-based columns, user-major."""
    items = check_items(items, hp.d)
    n = items.size
    msgs = rng.integers(1, hp.D + 1, size=(n, hp.k + 1, hp.tau), dtype=np.int64)
    msgs[:, 0, :] = _sample_positive(items, hp.D, (n, hp.tau), rng)
    return msgs.reshape(n * (hp.k + 1), hp.tau)


def randomize_had(item: int, hp: HadParams, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """One user's ``k + 1`` messages; the first encodes ``item``, the rest are blankets."""
    return [tuple(int(v) for v in row) for row in randomize_had_batch([item], hp, rng)]


def attack_had(target: int, m: int, hp: HadParams, rng: np.random.Generator) -> np.ndarray:
    """Coalition messages: ``m(k+1)`` messages drawn inside the target's positive set."""
    m = check_nonneg_int(m, "m")
    _check_row(target, hp.D)
    if m > hp.n:
        raise DomainError(f"coalition size m={m} exceeds n={hp.n}")
    count = m * (hp.k + 1)
    return _sample_positive(np.full(count, target), hp.D, (count, hp.tau), rng)


def _positive_counts(msgs: np.ndarray, d: int, chunk: int = 1 << 22) -> np.ndarray:
    """For every bin ``j`` in ``[1, d]``, messages lying wholly in its positive set."""
    zero_based = msgs - 1
    counts = np.zeros(d, dtype=np.int64)
    rows_per_bin = max(1, chunk // max(1, msgs.size))
    for start in range(1, d + 1, rows_per_bin):
        bins = np.arange(start, min(d + 1, start + rows_per_bin), dtype=np.int64)
        parity = np.bitwise_count(zero_based[None, :, :] & bins[:, None, None]) & 1
        counts[start - 1 : start - 1 + bins.size] = np.sum(~parity.any(axis=2), axis=1)
    return counts


def analyze_had(messages, hp: HadParams, *, lenient: bool = False) -> Estimate:
    """``z_j = (c_j - N 2^-tau) / (n (1 - 2^-tau))`` with ``N`` the message count.

    ``c_j`` counts messages whose every index lies in bin ``j``'s positive set.
    """
    msgs = np.asarray(messages, dtype=np.int64).reshape(-1, hp.tau)
    if not lenient and msgs.shape[0] != hp.n_messages:
        raise DomainError(f"expected n(k+1) = {hp.n_messages} messages, got {msgs.shape[0]}")
    if msgs.size and (msgs.min() < 1 or msgs.max() > hp.D):
        raise DomainError(f"message indices must lie in [1, {hp.D}]")
    p = 2.0**-hp.tau
    c = _positive_counts(msgs, hp.d)
    return Estimate((c - msgs.shape[0] * p) / (hp.n * (1.0 - p)))


def run_had_protocol(data: Dataset, hp: HadParams, seed: int, *, stream_key: tuple[int, ...] = ()) -> Estimate:
    if data.n != hp.n or data.d != hp.d:
        raise DomainError("data and Hadamard parameters disagree on n or d")
    msgs = randomize_had_batch(data.items, hp, _streams.stream(seed, *stream_key, _streams.RANDOMIZE))
    order = _streams.stream(seed, *stream_key, _streams.SHUFFLE).permutation(msgs.shape[0])
    return analyze_had(msgs[order], hp)


def run_attacked_had(
    data: Dataset, hp: HadParams, target: int, m: int, seed: int, trials: int, *, coalition=None
) -> AttackReport:
    """Coupled honest and corrupted runs of Hadamard response."""
    trials = check_positive_int(trials, "trials")
    _check_row(target, hp.D)
    if target > hp.d:
        raise DomainError(f"target {target} lies outside [1, {hp.d}]")
    users = _coalition(coalition, m, hp.n)
    honest_rows = _honest_rows(users, hp.n, hp.k + 1)
    hist = data.histogram()
    z_hon, z_cor = np.empty(trials), np.empty(trials)
    err_hon, err_cor = np.empty(trials), np.empty(trials)
    for t in range(trials):
        honest = randomize_had_batch(data.items, hp, _streams.stream(seed, t, _streams.RANDOMIZE))
        forged = attack_had(target, m, hp, _streams.stream(seed, t, _streams.FORGE))
        corrupt = np.concatenate([honest[honest_rows], forged])
        shuffle_rng = _streams.stream(seed, t, _streams.SHUFFLE)
        zh = analyze_had(honest[shuffle_rng.permutation(honest.shape[0])], hp).z
        zc = analyze_had(corrupt[shuffle_rng.permutation(corrupt.shape[0])], hp).z
        z_hon[t], z_cor[t] = zh[target - 1], zc[target - 1]
        err_hon[t], err_cor[t] = np.max(np.abs(zh - hist)), np.max(np.abs(zc - hist))
    # Coalition users holding the target would have contributed ~1/n each honestly.
    holders = int(np.sum(data.items[users] == target))
    expected = (m * (hp.k + 1) - holders) / hp.n
    return AttackReport(
        protocol="had", strategy="had_flood", n=hp.n, m=m, target=target, z_honest=z_hon,
        z_corrupt=z_cor, hist_target=float(hist[target - 1]), bound=math.nan,
        expected_bias=expected, max_error_honest=err_hon, max_error_corrupt=err_cor,
        details={"k": hp.k, "tau": hp.tau, "D": hp.D},
    )


def compare_per_user_bias(eps: float, delta: float, n: int, d: int, *, mode: str = "max") -> dict:
    """Analytic per-corrupt-user bias of both protocols at a matched budget.

    Hadamard response lets each corrupt user add ``(k_had + 1)/n``; the
    flip protocol allows at most ``(k_flip + 1)/((1 - 2q) n)``.
    """
    flip = ProtocolParams.solve(n, d, eps, delta, mode=mode)
    hp = had_params(eps, delta, n, d)
    had_bias = (hp.k + 1) / n
    flip_bias = robustness_bound(n, flip.k, flip.q, 1)
    return {
        "had_k": hp.k,
        "had_tau": hp.tau,
        "flip_k": flip.k,
        "flip_q": flip.q,
        "had_per_user_bias": had_bias,
        "flip_per_user_bound": flip_bias,
        "ratio": had_bias / flip_bias,
    }
