"""Parameter solving and closed-form bounds for the flip protocol.

The privacy condition ties the flip probability to the number of
fabricated messages per user:

    q(1-q) >= 33 / (5 n k) * r^2 * ln(4/delta),   r = (e^eps + 1) / (e^eps - 1)

Its smaller root is ``q_hat``. Accuracy needs ``q`` to be at least a
concentration floor ``q_tilde``, and the protocol runs at
``q = max(q_hat, q_tilde)``.

Two accuracy modes exist. ``per_bin`` bounds a single bin with failure
probability ``beta`` (default 1/10). ``max`` bounds all ``d`` bins at once
with per-bin failure ``beta = 1/(10 d)``, so that ``ln(2/beta) = ln(20 d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from shufflehist._validation import (
    check_nonneg_int,
    check_positive,
    check_positive_int,
    check_probability,
    normalize_mode,
)
from shufflehist.exceptions import DomainError, InfeasibleParametersError, OutOfRegimeError

__all__ = [
    "AmplificationSolution",
    "ParamSolution",
    "PRIVACY_CONSTANT",
    "THRESHOLD_CONSTANT",
    "advanced_composition",
    "alpha_constant_bound",
    "amplification_params",
    "amplified_eps",
    "confidence_width",
    "error_bound_max",
    "error_bound_per_bin",
    "min_k",
    "privacy_ratio",
    "robustness_bound",
    "solve_q",
]

#: Constant in front of ``r^2 ln(4/delta) / (n k)`` in the privacy condition.
PRIVACY_CONSTANT = 33.0 / 5.0
#: Constant of the strict lower bound on ``k`` (four times the privacy constant).
THRESHOLD_CONSTANT = 132.0 / 5.0
#: Largest delta for which the analysis is claimed.
MAX_DELTA = 0.01


def privacy_ratio(eps: float) -> float:
    """``r = (e^eps + 1) / (e^eps - 1)``, evaluated stably for small eps."""
    return 1.0 / math.tanh(eps / 2.0)


def _check_budget(eps: float, delta: float) -> tuple[float, float]:
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    if delta > MAX_DELTA:
        raise OutOfRegimeError(f"the guarantees assume delta <= {MAX_DELTA}, got {delta}")
    return eps, delta


def _default_beta(mode: str, d: int | None) -> float:
    return 0.1 if mode == "per_bin" else 1.0 / (10.0 * d)


def _check_d(mode: str, d) -> int | None:
    if mode == "max":
        if d is None:
            raise DomainError("maximum mode needs the dimension d")
        return check_positive_int(d, "d")
    return None if d is None else check_positive_int(d, "d")


@dataclass(frozen=True)
class ParamSolution:
    """Solved flip probability and its derived quantities.

    Attributes:
        q: Flip probability, ``max(q_hat, q_tilde)``.
        k: Fabricated messages per user.
        mode: ``"per_bin"`` or ``"max"``.
        q_hat: Smallest ``q`` meeting the privacy condition.
        q_tilde: Concentration floor ``ln(2/beta) / (n(k+1))``.
        scale: ``1 / (1 - 2q)``.
        bound: The 90%-confidence error bound of the mode.
        beta: Per-bin failure probability used for the floor.
        n, d, eps, delta: Inputs of the solve.
    """

    q: float
    k: int
    mode: str
    q_hat: float
    q_tilde: float
    scale: float
    bound: float
    beta: float
    n: int
    d: int | None
    eps: float
    delta: float

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def min_k(
    eps: float,
    delta: float,
    n: int,
    mode: str = "per_bin",
    d: int | None = None,
    *,
    const: float = THRESHOLD_CONSTANT,
) -> int:
    """Smallest ``k`` strictly above the privacy threshold.

    The per-bin threshold is ``const/n * r^2 * ln(4/delta)`` with
    ``const = 132/5``. Maximum mode also needs ``k > (2/n) ln(20 d) - 1``
    so that the floor ``q_tilde`` stays below 1/2.

    Raises:
        OutOfRegimeError: If ``delta > 1/100``.
    """
    eps, delta = _check_budget(eps, delta)
    n = check_positive_int(n, "n")
    mode = normalize_mode(mode)
    d = _check_d(mode, d)
    threshold = const / n * privacy_ratio(eps) ** 2 * math.log(4.0 / delta)
    if mode == "max":
        threshold = max(threshold, 2.0 / n * math.log(20.0 * d) - 1.0)
    return max(1, math.floor(threshold) + 1)


def _privacy_rhs(eps: float, delta: float, n: int, k: int) -> float:
    return PRIVACY_CONSTANT / (n * k) * privacy_ratio(eps) ** 2 * math.log(4.0 / delta)


def solve_q(
    eps: float,
    delta: float,
    n: int,
    k: int,
    mode: str = "per_bin",
    d: int | None = None,
    beta: float | None = None,
) -> ParamSolution:
    """Solve the flip probability for a given ``k``.

    Args:
        eps: Privacy parameter.
        delta: Privacy parameter, at most 1/100.
        n: Number of users.
        k: Fabricated messages per user, at least 1.
        mode: ``"per_bin"`` or ``"max"``.
        d: Dimension. Required in maximum mode.
        beta: Per-bin failure probability for the floor. Defaults to
            1/10 (per-bin) or 1/(10 d) (maximum).

    Returns:
        The solution. ``bound`` is the mode's printed error bound.

    Raises:
        InfeasibleParametersError: If ``k`` is too small for a root in
            ``(0, 1/2)`` to exist or the floor reaches 1/2.
    """
    eps, delta = _check_budget(eps, delta)
    n = check_positive_int(n, "n")
    k = check_nonneg_int(k, "k")
    mode = normalize_mode(mode)
    d = _check_d(mode, d)
    if beta is None:
        beta = _default_beta(mode, d)
    beta = check_probability(beta, "beta", low_open=True, high_open=True)
    if k == 0:
        raise InfeasibleParametersError("the privacy condition needs at least one fabricated message")
    c = _privacy_rhs(eps, delta, n, k)
    if 4.0 * c >= 1.0:
        raise InfeasibleParametersError(
            f"k={k} is too small: q(1-q) >= {c:.6g} has no root below 1/2 "
            f"(need k >= {min_k(eps, delta, n, 'per_bin')})"
        )
    # Smaller root of q^2 - q + c = 0, written to avoid cancellation.
    q_hat = 2.0 * c / (1.0 + math.sqrt(1.0 - 4.0 * c))
    q_tilde = math.log(2.0 / beta) / (n * (k + 1))
    q = max(q_hat, q_tilde)
    if q >= 0.5:
        raise InfeasibleParametersError(
            f"the concentration floor {q_tilde:.6g} is not below 1/2; increase k or n"
        )
    scale = 1.0 / (1.0 - 2.0 * q)
    if mode == "per_bin":
        bound = _per_bin_factor(eps, delta, n) * scale
    else:
        bound = _max_factor(eps, delta, n, d) * scale
    return ParamSolution(
        q=q, k=k, mode=mode, q_hat=q_hat, q_tilde=q_tilde, scale=scale, bound=bound,
        beta=beta, n=n, d=d, eps=eps, delta=delta,
    )


def _per_bin_factor(eps: float, delta: float, n: int) -> float:
    return privacy_ratio(eps) / n * math.sqrt(264.0 / 5.0 * math.log(4.0 / delta) * math.log(20.0))


def _max_factor(eps: float, delta: float, n: int, d: int) -> float:
    log20d = math.log(20.0 * d)
    first = privacy_ratio(eps) / n * math.sqrt(264.0 / 5.0 * math.log(4.0 / delta) * log20d)
    return max(first, 2.0 / n * log20d)


def confidence_width(n: int, k: int, q: float, beta: float) -> float:
    """Width ``2 sqrt((k+1)/n q(1-q) ln(2/beta)) / (1-2q)`` of the per-bin band.

    Raises:
        DomainError: If ``q`` is below ``ln(2/beta)/(n(k+1))`` or not below 1/2.
    """
    n = check_positive_int(n, "n")
    k = check_nonneg_int(k, "k")
    q = check_probability(q, "q", high=0.5, high_open=True)
    beta = check_probability(beta, "beta", low_open=True, high_open=True)
    floor = math.log(2.0 / beta) / (n * (k + 1))
    if q < floor:
        raise DomainError(f"q={q} is below the concentration floor {floor:.6g}")
    return 2.0 * math.sqrt((k + 1) / n * q * (1.0 - q) * math.log(2.0 / beta)) / (1.0 - 2.0 * q)


def error_bound_per_bin(eps: float, delta: float, n: int, k: int, *, tight: bool = False) -> float:
    """Per-bin error bound at 90% confidence.

    By default this returns the closed form
    ``r/n * sqrt(264/5 ln(4/delta) ln 20) * g(k)`` with ``g(k)`` the
    per-bin scale. That form bounds ``(k+1)/k`` by 2. With
    ``tight=True`` the width is evaluated at the solved ``q`` instead.
    """
    sol = solve_q(eps, delta, n, k, "per_bin")
    if tight:
        return confidence_width(n, k, sol.q, sol.beta)
    return sol.bound


def error_bound_max(
    eps: float, delta: float, n: int, k: int, d: int, *, tight: bool = False
) -> float:
    """Bound on the maximum error over all ``d`` bins at 90% confidence.

    The closed form is
    ``max(r/n sqrt(264/5 ln(4/delta) ln 20d), 2/n ln 20d) * f(k)`` with
    ``f(k)`` the maximum-mode scale. ``tight=True`` evaluates the width at
    the solved ``q`` with per-bin failure ``1/(10d)``.
    """
    sol = solve_q(eps, delta, n, k, "max", d=d)
    if tight:
        return confidence_width(n, k, sol.q, sol.beta)
    return sol.bound


def alpha_constant_bound(eps: float, delta: float, n: int, k: int, d: int) -> float:
    """The heavy-hitter gap in closed form, ``max(r/n sqrt(1056/5 ln(4/delta) ln 20d), 4/n ln 20d) * f(k)``."""
    sol = solve_q(eps, delta, n, k, "max", d=d)
    log20d = math.log(20.0 * d)
    first = privacy_ratio(eps) / n * math.sqrt(1056.0 / 5.0 * math.log(4.0 / delta) * log20d)
    return max(first, 4.0 / n * log20d) * sol.scale


def robustness_bound(n: int, k: int, q: float, m: int) -> float:
    """Largest shift ``(m/n)(k+1)/(1-2q)`` that ``m`` corrupt users can cause on one bin."""
    n = check_positive_int(n, "n")
    k = check_nonneg_int(k, "k")
    m = check_nonneg_int(m, "m")
    if m > n:
        raise DomainError(f"coalition size m={m} exceeds n={n}")
    q = check_probability(q, "q", high=0.5, high_open=True)
    return m / n * (k + 1) / (1.0 - 2.0 * q)


def amplified_eps(eps_L: float, n: int, delta: float) -> float:
    """Central epsilon after shuffling ``n`` reports that are each ``eps_L``-locally private.

    ``eps_S = 8 (e^L - 1)/(e^L + 1) (sqrt(e^L ln(4/delta) / n) + e^L / n)``

    Raises:
        OutOfRegimeError: If ``eps_L > ln(n / (16 ln(2/delta)))``.
    """
    n = check_positive_int(n, "n")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    if eps_L < 0 or not math.isfinite(eps_L):
        raise DomainError(f"eps_L must be finite and >= 0, got {eps_L}")
    limit = math.log(n / (16.0 * math.log(2.0 / delta)))
    if eps_L > limit:
        raise OutOfRegimeError(f"eps_L={eps_L:.6g} exceeds the amplification limit {limit:.6g}")
    e = math.exp(eps_L)
    return 8.0 * math.tanh(eps_L / 2.0) * (math.sqrt(e * math.log(4.0 / delta) / n) + e / n)


@dataclass(frozen=True)
class AmplificationSolution:
    """Parameters of the single-message variant that relies on amplification.

    Attributes:
        eps_L: Local privacy of each report.
        q: Flip probability, ``max(1/(e^{eps_L/2}+1), ln(20d)/n)``.
        eps_S: Central epsilon implied by ``eps_L``.
        bound: Bound on the maximum error at 90% confidence.
    """

    eps_L: float
    q: float
    eps_S: float
    bound: float
    n: int
    d: int
    eps: float
    delta: float

    @property
    def k(self) -> int:
        return 0

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - 2.0 * self.q)

    def as_dict(self) -> dict:
        out = {f: getattr(self, f) for f in self.__dataclass_fields__}
        out["k"] = 0
        return out


def amplification_params(eps: float, delta: float, n: int, d: int) -> AmplificationSolution:
    """Solve the no-fabrication variant for a central (eps, delta) target.

    Raises:
        OutOfRegimeError: If ``eps > 4`` or
            ``n <= max(1024/eps^2 ln(4/delta), 6 ln 20d)``.
    """
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    n = check_positive_int(n, "n")
    d = check_positive_int(d, "d")
    if eps > 4.0:
        raise OutOfRegimeError(f"the amplification variant needs eps <= 4, got {eps}")
    log4 = math.log(4.0 / delta)
    log20d = math.log(20.0 * d)
    need = max(1024.0 / eps**2 * log4, 6.0 * log20d)
    if n <= need:
        raise OutOfRegimeError(f"the amplification variant needs n > {need:.6g}, got {n}")
    eps_L = math.log(eps**2 * n / (256.0 * log4))
    q = max(1.0 / (math.exp(eps_L / 2.0) + 1.0), log20d / n)
    eps_S = amplified_eps(eps_L, n, delta)
    bound = max(24.0 / (n**0.75 * math.sqrt(eps)) * log4**0.25 * math.sqrt(log20d), 6.0 / n * log20d)
    return AmplificationSolution(
        eps_L=eps_L, q=q, eps_S=eps_S, bound=bound, n=n, d=d, eps=eps, delta=delta
    )


def advanced_composition(eps: float, delta: float, reps: int) -> tuple[float, float]:
    """Privacy of ``reps`` adaptive runs of an (eps, delta) mechanism.

    Returns ``(eps (e^eps - 1) reps + eps sqrt(2 reps ln(1/(reps delta))), 2 reps delta)``.
    """
    eps = check_positive(eps, "eps")
    delta = check_probability(delta, "delta", low_open=True, high_open=True)
    reps = check_positive_int(reps, "reps")
    if reps * delta >= 1.0:
        raise DomainError("advanced composition needs reps * delta < 1")
    eps_total = eps * math.expm1(eps) * reps + eps * math.sqrt(2.0 * reps * math.log(1.0 / (reps * delta)))
    return eps_total, 2.0 * reps * delta
