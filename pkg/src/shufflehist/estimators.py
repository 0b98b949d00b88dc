"""Scikit-learn style estimators wrapping the protocol simulations.

Every estimator takes the users' items at ``fit`` time (a 1-D array of
1-based bins, or a single-column 2-D array), simulates one protocol run
and stores the private frequency estimates in ``frequencies_``.
``transform`` then maps items to their estimated frequency.

>>> est = FlipHistogram(n_bins=3, eps=1.0, delta=1e-6, random_state=0)
>>> est.fit([1, 1, 2, 3] * 500).frequencies_.shape
(3,)
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from shufflehist import compact
from shufflehist._validation import check_items, check_positive_int
from shufflehist.adversary import had_params, HadParams, run_had_protocol
from shufflehist.params import amplification_params, solve_q, min_k
from shufflehist.protocol import Dataset, ProtocolParams, run_protocol
from shufflehist.topk import CandidateSet, top_t

__all__ = [
    "AmplifiedFlipHistogram",
    "CountMinFlipHistogram",
    "FlipHistogram",
    "HadamardHistogram",
]


def _seed(random_state) -> int:
    if random_state is None:
        return int(np.random.SeedSequence().entropy % (2**63))
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(0, 2**63))
    return int(random_state)


class _HistogramBase(TransformerMixin, BaseEstimator):
    """Shared ``transform`` and top-t helpers; subclasses implement ``_simulate``."""

    def _dataset(self, X) -> Dataset:
        n_bins = check_positive_int(self.n_bins, "n_bins")
        return Dataset(check_items(X, n_bins, "X"), n_bins)

    def fit(self, X, y=None):
        data = self._dataset(X)
        self.n_users_ = data.n
        self.frequencies_ = self._simulate(data, _seed(self.random_state))
        return self

    def transform(self, X) -> np.ndarray:
        """Estimated frequency of each item in ``X``, as a column vector."""
        check_is_fitted(self, "frequencies_")
        items = check_items(X, self.n_bins, "X")
        return self.frequencies_[items - 1][:, None]

    def top_t(self, t: int) -> CandidateSet:
        """The ``t`` bins with the largest estimates."""
        check_is_fitted(self, "frequencies_")
        return top_t(self.frequencies_, t)

    def max_error(self, X) -> float:
        """Largest absolute error against the exact histogram of ``X``."""
        check_is_fitted(self, "frequencies_")
        return float(np.max(np.abs(self.frequencies_ - self._dataset(X).histogram())))


class FlipHistogram(_HistogramBase):
    """The flip protocol with fabricated messages.

    Args:
        n_bins: Number of bins ``d``.
        eps, delta: Privacy target.
        k: Fabricated messages per user. ``None`` picks the smallest
            admissible value for ``mode``.
        mode: ``"max"`` or ``"per_bin"``, the accuracy mode used to solve ``q``.
        q: Explicit flip probability. Setting it skips the solver and
            drops the privacy guarantee; ``k`` must then be given too.
        encoding: ``"sparse"`` (index lists) or ``"dense"`` (packed bits).
        simulation: ``"messages"`` or ``"counts"`` (see
            :func:`~shufflehist.protocol.run_protocol`).
        random_state: Seed or Generator.

    Attributes:
        frequencies_: Estimate of every bin.
        params_: The :class:`~shufflehist.protocol.ProtocolParams` used.
        bound_: Error bound of ``mode`` at 90% confidence (``nan`` when
            ``q`` was set by hand).
    """

    def __init__(
        self,
        n_bins: int,
        eps: float = 1.0,
        delta: float = 1e-6,
        k: int | None = None,
        mode: str = "max",
        q: float | None = None,
        encoding: str = "sparse",
        simulation: str = "messages",
        random_state=None,
    ):
        self.n_bins = n_bins
        self.eps = eps
        self.delta = delta
        self.k = k
        self.mode = mode
        self.q = q
        self.encoding = encoding
        self.simulation = simulation
        self.random_state = random_state

    def _simulate(self, data: Dataset, seed: int) -> np.ndarray:
        if self.q is not None:
            if self.k is None:
                raise ValueError("an explicit q needs an explicit k")
            self.params_ = ProtocolParams(n=data.n, d=data.d, k=self.k, q=self.q)
            self.bound_ = math.nan
        else:
            k = self.k if self.k is not None else min_k(self.eps, self.delta, data.n, self.mode, d=data.d)
            sol = solve_q(self.eps, self.delta, data.n, k, self.mode, d=data.d)
            self.params_ = ProtocolParams(n=data.n, d=data.d, k=sol.k, q=sol.q, eps=self.eps, delta=self.delta)
            self.bound_ = sol.bound
        self.k_, self.q_ = self.params_.k, self.params_.q
        est = run_protocol(data, self.params_, seed, layout=self.encoding, simulation=self.simulation)
        return est.z


class CountMinFlipHistogram(_HistogramBase):
    """The count-min variant: ``V`` hashed repetitions of the sparse protocol.

    Args:
        n_bins: Number of bins ``d``.
        eps, delta: Target budget after composing the repetitions.
        V: Repetitions; defaults to ``ceil(log2 d)``.
        k: Fabricated messages per user and repetition.
        d_hat: Override of the hashed dimension.
        hash_seed: Public randomness of the hash family.
        simulation: ``"messages"`` or ``"counts"``.
        random_state: Seed or Generator.

    Attributes:
        frequencies_: Estimate of every bin.
        solution_: The :class:`~shufflehist.compact.CMSolution`.
        bound_: Maximum-error bound of the solution.
    """

    def __init__(
        self,
        n_bins: int,
        eps: float = 1.0,
        delta: float = 1e-6,
        V: int | None = None,
        k: int | None = None,
        d_hat: int | None = None,
        hash_seed: int = 0,
        simulation: str = "messages",
        random_state=None,
    ):
        self.n_bins = n_bins
        self.eps = eps
        self.delta = delta
        self.V = V
        self.k = k
        self.d_hat = d_hat
        self.hash_seed = hash_seed
        self.simulation = simulation
        self.random_state = random_state

    def _simulate(self, data: Dataset, seed: int) -> np.ndarray:
        sol = compact.solve_cm(self.eps, self.delta, data.n, data.d, V=self.V, k=self.k, d_hat=self.d_hat)
        self.solution_ = sol
        self.bound_ = sol.bound
        self.k_, self.q_ = sol.k, sol.q
        self.hash_family_ = sol.hash_family(self.hash_seed)
        est = compact.run_cm_protocol(
            data, sol.protocol_params(), self.hash_family_, seed, simulation=self.simulation
        )
        return est.z


class HadamardHistogram(_HistogramBase):
    """Hadamard response with ``k`` blanket messages of ``tau`` indices.

    ``k`` and ``tau`` default to :func:`~shufflehist.adversary.had_params`.
    """

    def __init__(
        self,
        n_bins: int,
        eps: float = 1.0,
        delta: float = 1e-6,
        k: int | None = None,
        tau: int | None = None,
        random_state=None,
    ):
        self.n_bins = n_bins
        self.eps = eps
        self.delta = delta
        self.k = k
        self.tau = tau
        self.random_state = random_state

    def _simulate(self, data: Dataset, seed: int) -> np.ndarray:
        base = had_params(self.eps, self.delta, data.n, data.d)
        self.params_ = HadParams(
            d=base.d, D=base.D, n=base.n,
            k=base.k if self.k is None else self.k,
            tau=base.tau if self.tau is None else self.tau,
        )
        self.k_ = self.params_.k
        self.bound_ = math.nan
        return run_had_protocol(data, self.params_, seed).z


class AmplifiedFlipHistogram(_HistogramBase):
    """Single-message randomized response whose central privacy comes from shuffling.

    Attributes:
        frequencies_: Estimate of every bin.
        solution_: The :class:`~shufflehist.params.AmplificationSolution`.
        bound_: Maximum-error bound at 90% confidence.
    """

    def __init__(self, n_bins: int, eps: float = 1.0, delta: float = 1e-6, simulation: str = "messages", random_state=None):
        self.n_bins = n_bins
        self.eps = eps
        self.delta = delta
        self.simulation = simulation
        self.random_state = random_state

    def _simulate(self, data: Dataset, seed: int) -> np.ndarray:
        sol = amplification_params(self.eps, self.delta, data.n, data.d)
        self.solution_ = sol
        self.bound_ = sol.bound
        self.k_, self.q_ = 0, sol.q
        params = ProtocolParams(n=data.n, d=data.d, k=0, q=sol.q, eps=self.eps, delta=self.delta)
        return run_protocol(data, params, seed, simulation=self.simulation).z
