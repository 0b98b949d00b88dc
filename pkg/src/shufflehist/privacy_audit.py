"""Exact privacy auditing of the two-bin reduction.

The privacy analysis reduces the ``d``-dimensional protocol to a mechanism
``B_{m,q}`` over two-bit messages. One real user holding ``x`` in
``{01, 10}`` randomizes it, ``m`` fabricated users randomize ``00``, and only
the four-cell histogram of the ``m + 1`` messages is released. Cells are
indexed by the message read as a binary number plus one: ``00 -> 1``,
``01 -> 2``, ``10 -> 3``, ``11 -> 4``.

The noise histogram is ``Multinomial(m; (1-q)^2, q(1-q), q(1-q), q^2)``.
All exact computations are done in log space with log-gamma factorials
and enumerate the ``O(m^3)`` outcomes in a fixed lexicographic order, so
results are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import gammaln, logsumexp

from shufflehist._validation import check_bits, check_nonneg_int, check_probability
from shufflehist.exceptions import DomainError, ResourceLimitError
from shufflehist.params import PRIVACY_CONSTANT, privacy_ratio
from shufflehist.protocol import randomize_bits

__all__ = [
    "DEFAULT_CAP",
    "ConcentrationSet",
    "GoodNoiseReport",
    "NoiseVec",
    "OutputDistribution",
    "audit_b",
    "audit_b_directions",
    "bmq_hypothesis",
    "check_good_noise",
    "check_noise_concentration",
    "exact_output_distribution",
    "hockey_stick_delta",
    "increment_pmf",
    "mechanism_b",
    "noise_pmf",
    "sample_noise",
    "sample_mechanism_b",
]

#: Largest ``m`` enumerated unless the caller raises the cap.
DEFAULT_CAP = 200

#: Relative slack allowed when comparing exact probabilities.
SLACK = 1e-9


@dataclass(frozen=True)
class NoiseVec:
    """Four cell counts ``f = (f1, f2, f3, f4)`` summing to ``m``."""

    f: tuple[int, int, int, int]
    m: int

    def __post_init__(self) -> None:
        f = tuple(int(v) for v in self.f)
        if len(f) != 4 or min(f) < 0 or sum(f) != self.m:
            raise DomainError(f"a noise vector needs four non-negative counts summing to {self.m}")
        object.__setattr__(self, "f", f)

    def __iter__(self):
        return iter(self.f)

    def __getitem__(self, i: int) -> int:
        return self.f[i]


def noise_pmf(q: float) -> np.ndarray:
    """Cell probabilities of one randomized ``00`` message."""
    return np.array([(1 - q) ** 2, q * (1 - q), q * (1 - q), q**2])


def _parse_input(x) -> str:
    if isinstance(x, str):
        label = x
    else:
        label = "".join(map(str, check_bits(x).tolist()))
    if label not in ("01", "10"):
        raise DomainError(f"the reduced mechanism takes x in {{01, 10}}, got {x!r}")
    return label


def increment_pmf(x, q: float) -> np.ndarray:
    """Law of the cell hit by the real user's randomized message ``R_{2,q}(x)``."""
    bits = [int(c) for c in _parse_input(x)]
    out = np.empty(4)
    for cell in range(4):
        out_bits = ((cell >> 1) & 1, cell & 1)
        flips = sum(a != b for a, b in zip(bits, out_bits))
        out[cell] = q**flips * (1 - q) ** (2 - flips)
    return out


def sample_noise(m: int, q: float, rng: np.random.Generator) -> NoiseVec:
    """Histogram of ``m`` randomized ``00`` messages."""
    m = check_nonneg_int(m, "m")
    q = check_probability(q, "q")
    return NoiseVec(tuple(rng.multinomial(m, noise_pmf(q))), m)


def mechanism_b(x, m: int, q: float, rng: np.random.Generator) -> NoiseVec:
    """One release of ``B_{m,q}(x)``: noise plus the real user's cell."""
    label = _parse_input(x)
    noise = sample_noise(m, q, rng)
    msg = randomize_bits(label, q, rng)
    counts = list(noise.f)
    counts[2 * int(msg[0]) + int(msg[1])] += 1
    return NoiseVec(tuple(counts), m + 1)


def sample_mechanism_b(x, m: int, q: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` independent releases of ``B_{m,q}(x)`` as a ``(size, 4)`` array."""
    m = check_nonneg_int(m, "m")
    q = check_probability(q, "q")
    out = rng.multinomial(m, noise_pmf(q), size=size)
    cells = rng.choice(4, size=size, p=increment_pmf(x, q))
    out[np.arange(size), cells] += 1
    return out


def _check_cap(m: int, cap: int) -> None:
    if m > cap:
        raise ResourceLimitError(
            f"m={m} exceeds the enumeration cap {cap}; pass a larger cap to enumerate anyway"
        )


def _triangle(s: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``(a, b)`` with ``a, b >= 0`` and ``a + b <= s``, ordered lexicographically."""
    a = np.repeat(np.arange(s + 1), np.arange(s + 1, 0, -1))
    starts = np.repeat(np.cumsum(np.r_[0, np.arange(s + 1, 1, -1)]), np.arange(s + 1, 0, -1))
    b = np.arange(a.size) - starts
    return a, b


def _outcome_blocks(total: int) -> Iterator[np.ndarray]:
    """Outcomes ``y`` with ``sum(y) = total``, one block per value of ``y1``."""
    for y1 in range(total + 1):
        y2, y3 = _triangle(total - y1)
        y4 = total - y1 - y2 - y3
        yield np.column_stack([np.full(y2.size, y1), y2, y3, y4])


def _shifted_logs(y: np.ndarray, m: int, log_p: np.ndarray) -> np.ndarray:
    """``log M(y - e_j)`` for the four cells ``j`` and every row ``y`` of a block.

    With ``sum(y) = m + 1``, ``M(y - e_j) = m! / prod(y_i!) * prod(p_i^y_i) * y_j / p_j``,
    so one log-gamma evaluation per cell serves all four shifts. Entries
    with ``y_j = 0`` are ``-inf``.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        weighted = np.where(y > 0, y * log_p, 0.0)
        base = gammaln(m + 1) - gammaln(y + 1).sum(axis=1) + weighted.sum(axis=1)
        return base[:, None] + np.log(y) - log_p


def _log_output(shifted: np.ndarray, log_r: np.ndarray) -> np.ndarray:
    """Log of ``P[B_{m,q}(x) = y] = sum_j R_x(j) M(y - e_j)``."""
    return logsumexp(shifted + log_r, axis=1)


@dataclass(frozen=True)
class OutputDistribution:
    """Exact law of ``B_{m,q}(x)``.

    Attributes:
        outcomes: ``(K, 4)`` array of cell counts summing to ``m + 1``,
            ordered lexicographically in ``(y1, y2, y3)``.
        log_probs: Log probability of each outcome.
        x: Input label, ``"01"`` or ``"10"``.
        m, q: Mechanism parameters.
    """

    outcomes: np.ndarray
    log_probs: np.ndarray
    x: str
    m: int
    q: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def __len__(self) -> int:
        return int(self.log_probs.size)

    def total(self) -> float:
        return float(np.sum(self.probs))

    def as_dict(self) -> dict[tuple[int, int, int, int], float]:
        return {tuple(int(v) for v in y): float(p) for y, p in zip(self.outcomes, self.probs)}

    def prob(self, y) -> float:
        y = np.asarray(y)
        match = np.flatnonzero(np.all(self.outcomes == y, axis=1))
        return float(np.exp(self.log_probs[match[0]])) if match.size else 0.0


def exact_output_distribution(x, m: int, q: float, cap: int = DEFAULT_CAP) -> OutputDistribution:
    """Enumerate the full law of ``B_{m,q}(x)``.

    Raises:
        ResourceLimitError: If ``m`` exceeds ``cap``.
    """
    label = _parse_input(x)
    m = check_nonneg_int(m, "m")
    q = check_probability(q, "q", low_open=True, high_open=True)
    _check_cap(m, cap)
    log_p = np.log(noise_pmf(q))
    log_r = np.log(increment_pmf(label, q))
    blocks = list(_outcome_blocks(m + 1))
    outcomes = np.concatenate(blocks).astype(np.int32)
    log_probs = np.concatenate([_log_output(_shifted_logs(y, m, log_p), log_r) for y in blocks])
    return OutputDistribution(outcomes, log_probs, label, m, q)


def _hockey_stick_logs(log_p: np.ndarray, log_q: np.ndarray, eps: float) -> float:
    # P - e^eps Q = P (1 - exp(eps + log Q - log P)), positive where log P > eps + log Q.
    diff = eps + log_q - log_p
    pos = diff < 0
    return float(np.sum(-np.exp(log_p[pos]) * np.expm1(diff[pos])))


def hockey_stick_delta(P: OutputDistribution, Q: OutputDistribution, eps: float) -> float:
    """Tight ``delta`` at ``eps``: ``sum_y max(0, P(y) - e^eps Q(y))``."""
    if eps < 0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    if P.outcomes.shape != Q.outcomes.shape or not np.array_equal(P.outcomes, Q.outcomes):
        raise DomainError("distributions must be enumerated over the same outcomes")
    return _hockey_stick_logs(P.log_probs, Q.log_probs, eps)


def audit_b_directions(m: int, q: float, eps: float, cap: int = DEFAULT_CAP) -> tuple[float, float]:
    """Tight ``delta`` of ``B_{m,q}`` at ``eps`` for (01 vs 10) and (10 vs 01).

    Outcomes are streamed block by block, so memory stays ``O(m^2)``.
    """
    m = check_nonneg_int(m, "m")
    q = check_probability(q, "q", low_open=True, high_open=True)
    if eps < 0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    _check_cap(m, cap)
    log_p = np.log(noise_pmf(q))
    log_r01 = np.log(increment_pmf("01", q))
    log_r10 = np.log(increment_pmf("10", q))
    forward = backward = 0.0
    for y in _outcome_blocks(m + 1):
        shifted = _shifted_logs(y, m, log_p)
        a = _log_output(shifted, log_r01)
        b = _log_output(shifted, log_r10)
        forward += _hockey_stick_logs(a, b, eps)
        backward += _hockey_stick_logs(b, a, eps)
    return forward, backward


def audit_b(m: int, q: float, eps: float, cap: int = DEFAULT_CAP) -> float:
    """Worst-direction tight ``delta`` of ``B_{m,q}`` at ``eps``."""
    return max(audit_b_directions(m, q, eps, cap))


def bmq_hypothesis(m: int, q: float, eps: float, delta: float) -> bool:
    """Whether ``m q(1-q) >= 33/5 r^2 ln(4/delta)`` holds."""
    return m * q * (1 - q) >= PRIVACY_CONSTANT * privacy_ratio(eps) ** 2 * math.log(4.0 / delta)


@dataclass(frozen=True)
class ConcentrationSet:
    """The set ``F`` of noise vectors whose cells 2 and 3 both lie in ``[L, U]``."""

    L: float
    U: float
    Delta: float
    m: int
    q: float
    delta: float

    @classmethod
    def build(cls, m: int, q: float, delta: float) -> "ConcentrationSet":
        b = q * (1 - q)
        mu = m * b
        log4 = math.log(4.0 / delta)
        Delta = math.sqrt(3.0 * mu * log4) * b / (1.0 - b)
        spread = math.sqrt(3.0 * (mu + Delta) * log4)
        return cls(L=mu - Delta - spread, U=mu + Delta + spread, Delta=Delta, m=m, q=q, delta=delta)

    @property
    def hypothesis_holds(self) -> bool:
        """``m q(1-q) > 9/2 ln(4/delta)``."""
        return self.m * self.q * (1 - self.q) > 4.5 * math.log(4.0 / self.delta)

    def _inside(self, v):
        return (v >= self.L) & (v <= self.U)

    def __contains__(self, f) -> bool:
        return bool(self._inside(f[1]) and self._inside(f[2]))

    def contains(self, f: np.ndarray) -> np.ndarray:
        """Vectorised membership for rows of a ``(K, 4)`` array."""
        f = np.asarray(f)
        return self._inside(f[:, 1]) & self._inside(f[:, 2])


def check_noise_concentration(
    m: int, q: float, delta: float, cap: int = DEFAULT_CAP
) -> tuple[ConcentrationSet, float]:
    """Build ``F`` and compute exactly the noise mass falling outside it.

    Cells 2 and 3 of the noise jointly follow a trinomial law with
    probabilities ``(q(1-q), q(1-q), 1 - 2q(1-q))``; the mass outside is
    summed over every ``(f2, f3)`` pair not inside ``[L, U]^2``.
    """
    m = check_nonneg_int(m, "m")
    q = check_probability(q, "q")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    _check_cap(m, cap)
    F = ConcentrationSet.build(m, q, delta)
    b = q * (1 - q)
    f2, f3 = _triangle(m)
    rest = m - f2 - f3
    if b == 0.0:
        outside = 0.0 if (F.L <= 0.0 <= F.U) else 1.0
        return F, outside
    log_pmf = (
        gammaln(m + 1) - gammaln(f2 + 1) - gammaln(f3 + 1) - gammaln(rest + 1)
        + (f2 + f3) * math.log(b) + rest * math.log1p(-2.0 * b)
    )
    out_mask = ~(F._inside(f2) & F._inside(f3))
    return F, float(np.sum(np.exp(log_pmf[out_mask])))


@dataclass(frozen=True)
class GoodNoiseReport:
    """Outcome of the pointwise domination check.

    Attributes:
        passed: Every checked outcome satisfied both inequalities.
        max_ratio: Largest observed ``LHS / RHS`` over outcomes with in-``F``
            mass on the left (``nan`` if there were none).
        ratio_bound: ``(U + 1) / (L - 1)``, or ``inf`` when ``L <= 1``.
        e_eps: ``exp(eps)``, the ratio every outcome must respect.
        n_outcomes: Number of outcomes ``y`` enumerated.
        n_violations: Outcomes failing either inequality.
        hypothesis_holds: ``m q(1-q) >= 33/5 r^2 ln(4/delta)``.
    """

    passed: bool
    max_ratio: float
    ratio_bound: float
    e_eps: float
    n_outcomes: int
    n_violations: int
    hypothesis_holds: bool
    concentration: ConcentrationSet


def check_good_noise(
    m: int, q: float, eps: float, delta: float, cap: int = DEFAULT_CAP
) -> GoodNoiseReport:
    """Check, for every ``y`` summing to ``m + 1``,

    ``P[f = y - e2, f in F] <= e^eps P[f = y - e3]`` and the same with
    cells 2 and 3 exchanged, where ``f`` is the noise histogram.
    """
    m = check_nonneg_int(m, "m")
    q = check_probability(q, "q", low_open=True, high_open=True)
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    _check_cap(m, cap)
    F = ConcentrationSet.build(m, q, delta)
    log_p = np.log(noise_pmf(q))
    worst = -np.inf
    violations = 0
    count = 0
    for y in _outcome_blocks(m + 1):
        count += y.shape[0]
        shifted = _shifted_logs(y, m, log_p)
        # Column j - 1 holds log M(y - e_j); cells 2 and 3 are columns 1 and 2.
        for lhs, rhs in ((1, 2), (2, 1)):
            f_lhs = y.copy()
            f_lhs[:, lhs] -= 1
            log_lhs = shifted[:, lhs]
            active = np.isfinite(log_lhs) & F.contains(f_lhs)
            if not np.any(active):
                continue
            ratio = log_lhs[active] - shifted[active, rhs]  # +inf where the right side has no mass
            violations += int(np.sum(ratio > eps + SLACK))
            worst = max(worst, float(ratio.max()))
    ratio_bound = (F.U + 1.0) / (F.L - 1.0) if F.L > 1.0 else math.inf
    return GoodNoiseReport(
        passed=violations == 0,
        max_ratio=math.exp(worst) if np.isfinite(worst) else (math.inf if worst > 0 else math.nan),
        ratio_bound=ratio_bound,
        e_eps=math.exp(eps),
        n_outcomes=count,
        n_violations=violations,
        hypothesis_holds=bmq_hypothesis(m, q, eps, delta),
        concentration=F,
    )
