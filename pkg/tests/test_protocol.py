import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import multinomial_se, within_sigma
from shufflehist import _streams
from shufflehist._batch import (
    DenseBatch,
    SparseBatch,
    bernoulli_positions,
    flip_batch,
    flip_column_sums,
)
from shufflehist.exceptions import DomainError, ResourceLimitError
from shufflehist.params import solve_q
from shufflehist.protocol import (
    Dataset,
    ProtocolParams,
    analyze_flip,
    debias,
    encode_one_hot,
    randomize_bit_rows,
    randomize_bits,
    randomize_flip,
    randomize_flip_batch,
    run_protocol,
    shuffle,
)


def bits(text):
    return np.array([int(c) for c in text], dtype=np.uint8)


# --- encoding -----------------------------------------------------------------


@pytest.mark.parametrize("item,d,expected", [(1, 3, "100"), (3, 3, "001"), (2, 2, "01")])
def test_encode_one_hot_examples(item, d, expected):
    assert encode_one_hot(item, d).tolist() == bits(expected).tolist()


@pytest.mark.parametrize("item", [0, 4, -1])
def test_encode_one_hot_out_of_range(item):
    with pytest.raises(DomainError):
        encode_one_hot(item, 3)


@given(st.integers(1, 300).flatmap(lambda d: st.tuples(st.integers(1, d), st.just(d))))
def test_encode_one_hot_single_one(args):
    item, d = args
    x = encode_one_hot(item, d)
    assert x.size == d and x.sum() == 1 and x[item - 1] == 1


# --- randomized response ----------------------------------------------------------


def test_randomize_bits_extremes(rng):
    assert randomize_bits("101", 0.0, rng).tolist() == [1, 0, 1]
    assert randomize_bits("10", 1.0, rng).tolist() == [0, 1]


def test_randomize_bits_two_bit_law(rng):
    q, draws = 0.25, 10**6
    out = randomize_bit_rows(np.zeros((draws, 2), dtype=np.uint8), q, rng)
    codes = out[:, 0] * 2 + out[:, 1]
    freq = np.bincount(codes, minlength=4) / draws
    expected = [(1 - q) ** 2, q * (1 - q), q * (1 - q), q**2]
    assert np.allclose(expected, [0.5625, 0.1875, 0.1875, 0.0625])
    assert within_sigma(freq, expected, multinomial_se(expected, draws))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=40), st.integers(0, 2**32 - 1))
def test_randomize_bits_is_xor_with_flip_mask(x, seed):
    # With q = 0 or q = 1 the output is a deterministic function of x.
    rng = np.random.default_rng(seed)
    assert randomize_bits(x, 0.0, rng).tolist() == x
    assert randomize_bits(x, 1.0, rng).tolist() == [1 - b for b in x]


def test_randomize_bits_rejects_non_binary(rng):
    with pytest.raises(DomainError):
        randomize_bits([0, 2, 1], 0.1, rng)
    with pytest.raises(DomainError):
        randomize_bits("01", 1.5, rng)


def test_randomize_flip_noiseless_examples(rng):
    assert [m.tolist() for m in randomize_flip(2, 2, 0, 0.0, rng)] == [[0, 1]]
    assert [m.tolist() for m in randomize_flip(1, 2, 2, 0.0, rng)] == [[1, 0], [0, 0], [0, 0]]


def test_randomize_flip_marginals(rng):
    # item 1, d = 1, k = 1: first bit ~ Ber(0.7), second ~ Ber(0.3).
    draws, q = 40_000, 0.3
    batch = randomize_flip_batch(np.ones(draws, dtype=np.int64), 1, 1, q, rng)
    rows = batch.to_dense().to_bit_rows().reshape(draws, 2)
    se = math.sqrt(0.21 / draws)
    assert within_sigma(rows[:, 0].mean(), 0.7, se)
    assert within_sigma(rows[:, 1].mean(), 0.3, se)


@given(
    st.integers(1, 40), st.integers(0, 5), st.floats(0.0, 0.49), st.integers(1, 30),
    st.integers(0, 2**32 - 1),
)
def test_randomize_flip_shape(d, k, q, n, seed):
    rng = np.random.default_rng(seed)
    items = rng.integers(1, d + 1, size=n)
    batch = randomize_flip_batch(items, d, k, q, rng)
    assert batch.n_messages == n * (k + 1)
    assert batch.d == d
    rows = batch.to_bit_rows()
    assert set(np.unique(rows)) <= {0, 1}


def test_single_user_path_matches_batch_path():
    a = randomize_flip(3, 10, 4, 0.2, _streams.stream(7, 0))
    b = flip_batch(np.array([3]), 10, 4, 0.2, _streams.stream(7, 0)).to_bit_rows()
    assert np.array_equal(np.vstack(a), b)


# --- shuffle -------------------------------------------------------------------------


def test_shuffle_preserves_small_multiset(rng):
    out = shuffle([[bits("10")], [bits("01")]], rng)
    assert sorted(tuple(m) for m in out) == [(0, 1), (1, 0)]
    assert out.n == 2


def test_shuffle_empty_input(rng):
    out = shuffle([], rng)
    assert len(out) == 0 and list(out) == []


def test_shuffle_dimension_mismatch(rng):
    with pytest.raises(DomainError):
        shuffle([[bits("10")], [bits("011")]], rng)


def test_shuffle_orderings_are_uniform(rng):
    users = [[bits("100")], [bits("010")], [bits("001")]]
    draws = 60_000
    seen = Counter(tuple(shuffle(users, rng).order.tolist()) for _ in range(draws))
    assert set(seen) == set(itertools.permutations(range(3)))
    freq = np.array([seen[p] for p in itertools.permutations(range(3))]) / draws
    assert within_sigma(freq, 1 / 6, math.sqrt((1 / 6) * (5 / 6) / draws))


@given(
    st.lists(st.lists(st.integers(0, 1), min_size=5, max_size=5), min_size=1, max_size=30),
    st.integers(0, 2**32 - 1),
)
def test_shuffle_multiset_property(messages, seed):
    out = shuffle([[m] for m in messages], np.random.default_rng(seed))
    assert Counter(tuple(m.tolist()) for m in out) == Counter(tuple(m) for m in messages)
    assert sorted(out.order.tolist()) == list(range(len(messages)))


# --- analyzer -----------------------------------------------------------------------------


def test_analyze_flip_examples():
    z = analyze_flip([bits("10"), bits("10")], ProtocolParams(n=2, d=2, k=0, q=0.0)).z
    assert z.tolist() == [1.0, 0.0]
    z = analyze_flip([bits("1"), bits("0")], ProtocolParams(n=1, d=1, k=1, q=0.25)).z
    assert z == pytest.approx([1.0], abs=1e-15)
    msgs = [bits(s) for s in ("100", "100", "010", "001")]
    assert analyze_flip(msgs, ProtocolParams(n=4, d=3, k=0, q=0.0)).z.tolist() == [0.5, 0.25, 0.25]


def test_analyze_flip_size_mismatch():
    with pytest.raises(DomainError):
        analyze_flip([bits("10")], ProtocolParams(n=2, d=2, k=0, q=0.1))
    # The lenient mode exists for attack experiments.
    est = analyze_flip([bits("10")], ProtocolParams(n=2, d=2, k=0, q=0.0), lenient=True)
    assert est.z.tolist() == [0.5, 0.0]


def test_analyze_flip_matches_formula(rng):
    n, k, d, q = 7, 2, 5, 0.3
    rows = rng.integers(0, 2, size=(n * (k + 1), d)).astype(np.uint8)
    expected = ((rows - q) / (1 - 2 * q)).sum(axis=0) / n
    z = analyze_flip(list(rows), ProtocolParams(n=n, d=d, k=k, q=q)).z
    assert np.allclose(z, expected, rtol=0, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 20))
def test_analyze_flip_permutation_invariant(seed, d, n):
    rng = np.random.default_rng(seed)
    params = ProtocolParams(n=n, d=d, k=1, q=0.2)
    batch = randomize_flip_batch(rng.integers(1, d + 1, size=n), d, 1, 0.2, rng)
    perm = rng.permutation(batch.n_messages)
    assert np.array_equal(analyze_flip(batch, params).z, analyze_flip(batch.take(perm), params).z)


# --- types ----------------------------------------------------------------------------------


def test_dataset_validation():
    data = Dataset(np.array([2, 2, 1]), 3)
    assert data.n == 3
    assert data.histogram().tolist() == pytest.approx([1 / 3, 2 / 3, 0.0])
    with pytest.raises(DomainError):
        Dataset(np.array([0, 1]), 3)
    with pytest.raises(DomainError):
        Dataset(np.array([], dtype=np.int64), 3)


def test_protocol_params_validation():
    assert ProtocolParams(n=10, d=2, k=0, q=0.25).scale == 2.0
    with pytest.raises(DomainError):
        ProtocolParams(n=10, d=2, k=0, q=0.5)
    with pytest.raises(DomainError):
        ProtocolParams(n=10, d=2, k=-1, q=0.1)


def test_solve_matches_params_module():
    p = ProtocolParams.solve(1000, 100, 1.0, 0.01, k=1, mode="max")
    sol = solve_q(1.0, 0.01, 1000, 1, "max", d=100)
    assert (p.k, p.q) == (sol.k, sol.q)


# --- end to end -----------------------------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 50))
def test_noiseless_run_is_exact(seed, d, n):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.integers(1, d + 1, size=n), d)
    est = run_protocol(data, ProtocolParams(n=n, d=d, k=0, q=0.0), seed)
    assert np.array_equal(est.z, data.histogram())


def test_unbiased_and_variance_single_item():
    n, k = 1000, 1
    sol = solve_q(1.0, 0.01, n, k, "per_bin")
    params = ProtocolParams(n=n, d=2, k=k, q=sol.q)
    data = Dataset(np.ones(n, dtype=np.int64), 2)
    var = (k + 1) / n * sol.q * (1 - sol.q) / (1 - 2 * sol.q) ** 2
    z1 = np.array([run_protocol(data, params, 99, stream_key=(t,)).z[0] for t in range(200)])
    assert within_sigma(z1.mean(), 1.0, math.sqrt(var / 200))
    # The variance check uses 2000 trials so that 15% is several standard errors.
    z1 = np.array([run_protocol(data, params, 100, stream_key=(t,)).z[0] for t in range(2000)])
    assert abs(z1.var(ddof=1) / var - 1) < 0.15


def test_run_protocol_deterministic_and_keyed():
    data = Dataset(np.arange(1, 51) % 7 + 1, 7)
    params = ProtocolParams(n=50, d=7, k=3, q=0.2)
    a = run_protocol(data, params, 5)
    assert np.array_equal(a.z, run_protocol(data, params, 5).z)
    assert not np.array_equal(a.z, run_protocol(data, params, 5, stream_key=(1,)).z)
    assert not np.array_equal(a.z, run_protocol(data, params, 6).z)


@given(st.integers(0, 2**32 - 1), st.integers(1, 70), st.floats(0.0, 0.45))
def test_dense_and_sparse_layouts_agree(seed, d, q):
    data = Dataset(np.random.default_rng(seed).integers(1, d + 1, size=25), d)
    params = ProtocolParams(n=25, d=d, k=2, q=q)
    dense = run_protocol(data, params, seed, layout="dense")
    sparse = run_protocol(data, params, seed, layout="sparse")
    assert np.array_equal(dense.z, sparse.z)


def test_dense_budget_is_enforced():
    data = Dataset(np.ones(100, dtype=np.int64), 1000)
    params = ProtocolParams(n=100, d=1000, k=1, q=0.1)
    with pytest.raises(ResourceLimitError):
        run_protocol(data, params, 0, layout="dense", dense_budget=1000)


def test_counts_simulation_matches_messages_in_law():
    # Both simulation paths draw colsum_j from the same law; compare moments.
    n, d, k, q, trials = 400, 3, 2, 0.2, 3000
    items = np.array([1] * 300 + [2] * 100)
    data = Dataset(items, d)
    params = ProtocolParams(n=n, d=d, k=k, q=q)
    msgs = np.array([run_protocol(data, params, 1, stream_key=(t,)).z for t in range(trials)])
    cnts = np.array(
        [run_protocol(data, params, 2, stream_key=(t,), simulation="counts").z for t in range(trials)]
    )
    var = (k + 1) / n * q * (1 - q) / (1 - 2 * q) ** 2
    se_diff = math.sqrt(2 * var / trials)
    assert within_sigma(msgs.mean(axis=0) - cnts.mean(axis=0), 0.0, se_diff)
    assert np.all(np.abs(cnts.var(axis=0) / var - 1) < 0.1)
    assert within_sigma(cnts.mean(axis=0), data.histogram(), math.sqrt(var / trials))


def test_flip_column_sums_have_exact_binomial_mean(rng):
    items = np.array([1, 1, 2])
    sums = np.array([flip_column_sums(items, 2, 3, 0.1, rng) for _ in range(20_000)])
    # Encoded bit of bin 1 appears twice among 12 messages.
    mean = [2 * 0.9 + 10 * 0.1, 1 * 0.9 + 11 * 0.1]
    sd = [math.sqrt(12 * 0.09)] * 2
    assert within_sigma(sums.mean(axis=0), mean, np.array(sd) / math.sqrt(20_000))


@pytest.mark.parametrize("q", [5e-324, 1e-300, 1e-18])
def test_tiny_flip_probability_terminates(q, rng):
    # Geometric gaps saturate at the int64 maximum for such q.
    assert bernoulli_positions(10**6, q, rng).size == 0


def test_bernoulli_positions_rate(rng):
    for q in (0.01, 0.3):
        pos = bernoulli_positions(10**6, q, rng)
        assert np.all(np.diff(pos) > 0) and pos.min() >= 0 and pos.max() < 10**6
        assert within_sigma(pos.size, 10**6 * q, math.sqrt(10**6 * q * (1 - q)))


def test_debias_inverts_expectation():
    n, k, q = 50, 3, 0.2
    hist = np.array([0.2, 0.8])
    expected_sums = n * hist * (1 - q) + (n * (k + 1) - n * hist) * q
    assert np.allclose(debias(expected_sums, n * (k + 1), n, q), hist)


def test_batch_containers_round_trip(rng):
    rows = rng.integers(0, 2, size=(37, 19)).astype(np.uint8)
    sparse = SparseBatch.from_bit_rows(rows)
    dense = DenseBatch.from_bit_rows(rows)
    assert np.array_equal(sparse.to_bit_rows(), rows)
    assert np.array_equal(dense.to_bit_rows(), rows)
    assert np.array_equal(sparse.to_dense().packed, dense.packed)
    assert np.array_equal(sparse.column_sums(), rows.sum(axis=0))
    assert np.array_equal(dense.column_sums(), rows.sum(axis=0))
