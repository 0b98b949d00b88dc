import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shufflehist.exceptions import DomainError
from shufflehist.params import error_bound_max, solve_q
from shufflehist.protocol import Dataset, Estimate, ProtocolParams, run_protocol
from shufflehist.topk import CandidateSet, alpha_bound, alpha_gap, f1_score, rank_value, top_t

HIST = np.array([0.5, 0.3, 0.2])
TABLE_N, TABLE_D, TABLE_DELTA = 3_700_000, 470_000, 1e-7

frequencies = hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1))


@pytest.fixture
def fixture_hist():
    return HIST.copy()


# --- selection ---------------------------------------------------------------------------------


def test_top_t_examples():
    assert top_t(HIST, 2).as_set() == {1, 2}
    assert top_t(np.full(5, 0.2), 2).items == (1, 2)
    assert top_t([0.1, 0.4, 0.4, 0.1], 1).items == (2,)
    assert top_t([0.1, 0.4, 0.4, 0.1], 3).items == (2, 3, 1)


def test_top_t_accepts_estimates_and_datasets():
    assert top_t(Estimate(np.array([0.0, 2.0, 1.0])), 1).items == (2,)
    assert top_t(Dataset(np.array([3, 3, 1]), 3), 1).items == (3,)


def test_top_t_range():
    with pytest.raises(DomainError):
        top_t(HIST, 0)
    with pytest.raises(DomainError):
        top_t(HIST, 4)
    with pytest.raises(DomainError):
        top_t([], 1)


def test_candidate_set_validation():
    assert 3 in CandidateSet((3, 1), 2)
    with pytest.raises(DomainError):
        CandidateSet((1, 1), 2)
    with pytest.raises(DomainError):
        CandidateSet((1,), 2)
    with pytest.raises(DomainError):
        CandidateSet((0, 2), 2)


@given(frequencies, st.data())
def test_top_t_matches_sorted_order(values, data):
    t = data.draw(st.integers(1, values.size))
    chosen = top_t(values, t).as_array() - 1
    rest = np.setdiff1d(np.arange(values.size), chosen)
    assert len(set(chosen.tolist())) == t
    if rest.size:
        assert values[chosen].min() >= values[rest].max()
    assert rank_value(values, t) == pytest.approx(np.sort(values)[::-1][t - 1])


# --- alpha gap and F1 --------------------------------------------------------------------------


def test_alpha_gap_examples(fixture_hist):
    assert alpha_gap(CandidateSet((1, 3), 2), fixture_hist, 2) == pytest.approx(0.1)
    assert alpha_gap(top_t(fixture_hist, 2), fixture_hist, 2) == 0.0
    assert alpha_gap(CandidateSet((2, 1), 2), fixture_hist, 2) == 0.0


def test_zero_frequency_candidate_gives_worst_case():
    hist = np.array([0.4, 0.35, 0.25, 0.0])
    assert alpha_gap(CandidateSet((1, 4), 2), hist, 2) == pytest.approx(rank_value(hist, 2))


def test_alpha_gap_size_mismatch(fixture_hist):
    with pytest.raises(DomainError):
        alpha_gap(CandidateSet((1,), 1), fixture_hist, 2)
    with pytest.raises(DomainError):
        alpha_gap(CandidateSet((1, 9), 2), fixture_hist, 2)


def test_f1_examples():
    hist = np.array([0.3, 0.25, 0.2, 0.15, 0.1, 0.0])
    assert f1_score(CandidateSet((1, 2, 3, 4), 4), hist, 4) == 1.0
    assert f1_score(CandidateSet((1, 2, 3, 6), 4), hist, 4) == 0.75
    assert f1_score(CandidateSet((5, 6), 2), hist, 2) == 0.0
    # Ties among true frequencies resolve toward the smaller index.
    assert f1_score(CandidateSet((2,), 1), np.array([0.5, 0.5]), 1) == 0.0


@given(frequencies, st.data())
def test_f1_range_and_identity(values, data):
    t = data.draw(st.integers(1, values.size))
    perm = data.draw(st.permutations(range(values.size)))
    cands = CandidateSet(tuple(i + 1 for i in perm[:t]), t)
    f1 = f1_score(cands, values, t)
    assert 0.0 <= f1 <= 1.0
    assert (f1 == 1.0) == (cands.as_set() == top_t(values, t).as_set())
    assert alpha_gap(top_t(values, t), values, t) == 0.0


@given(frequencies, st.floats(0, 0.3), st.integers(0, 2**32 - 1), st.data())
def test_displacement_gap_at_most_twice_max_error(values, scale, seed, data):
    t = data.draw(st.integers(1, values.size))
    z = values + np.random.default_rng(seed).uniform(-scale, scale, size=values.size)
    gap = alpha_gap(top_t(z, t), values, t)
    assert gap <= 2 * np.max(np.abs(z - values)) + 1e-12


def test_displacement_gap_on_protocol_output(rng):
    n, d = 3000, 50
    data = Dataset(np.minimum(rng.zipf(1.3, size=n), d), d)
    params = ProtocolParams(n=n, d=d, k=2, q=0.1)
    hist = data.histogram()
    for seed in range(20):
        z = run_protocol(data, params, seed).z
        for t in (1, 5, 10):
            assert alpha_gap(top_t(z, t), data, t) <= 2 * np.max(np.abs(z - hist)) + 1e-12


# --- alpha bound -------------------------------------------------------------------------------


def _table_bound(k):
    return alpha_bound(solve_q(1, TABLE_DELTA, TABLE_N, k, "max", d=TABLE_D), TABLE_D, 10)


def test_alpha_bound_table():
    values = [_table_bound(k) for k in (1, 2, 3, 4)]
    for got, want in zip(values, (1.43e-4, 1.24e-4, 1.17e-4, 1.13e-4)):
        assert got == pytest.approx(want, rel=0.01)
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_alpha_bound_doubles_max_error_width():
    sol = solve_q(1, TABLE_DELTA, TABLE_N, 1, "max", d=TABLE_D)
    half = 2 * math.sqrt(2 / TABLE_N * sol.q * (1 - sol.q) * math.log(20 * TABLE_D)) / (1 - 2 * sol.q)
    assert alpha_bound(sol, TABLE_D, 3) == pytest.approx(2 * half, rel=1e-12)
    assert alpha_bound(sol, TABLE_D, 3) <= 2 * error_bound_max(1, TABLE_DELTA, TABLE_N, 1, TABLE_D) * (1 + 1e-12)


def test_alpha_bound_rejects_q_outside_hypothesis():
    with pytest.raises(DomainError):
        alpha_bound(ProtocolParams(n=100, d=10, k=0, q=0.0), 10, 1)
    with pytest.raises(DomainError):
        alpha_bound(ProtocolParams(n=100, d=10, k=0, q=0.5), 10, 1)
    with pytest.raises(DomainError):
        alpha_bound(ProtocolParams(n=100, d=10, k=0, q=0.2), 10, 11)
