import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from helpers import within_sigma
from shufflehist.compact import (
    CM_THRESHOLD_CONSTANT,
    HashFamily,
    LabeledBatch,
    LabeledMessage,
    SparseMessage,
    analyze_cm,
    cm_dimensions,
    cm_privacy_budget,
    default_repetitions,
    expected_sparse_bits,
    parse_message,
    randomize_cm,
    randomize_cm_batch,
    repetition_estimates,
    run_cm_protocol,
    solve_cm,
    to_dense,
    to_sparse,
)
from shufflehist.exceptions import DomainError, InfeasibleParametersError
from shufflehist.params import advanced_composition, min_k
from shufflehist.protocol import Dataset, ProtocolParams, randomize_flip, randomize_flip_batch


# --- sparse messages ---------------------------------------------------------------------------


def test_sparse_examples():
    assert to_sparse("0101").ones == (2, 4)
    assert to_sparse("0000").ones == ()
    assert to_dense(SparseMessage((2, 4), 4)).tolist() == [0, 1, 0, 1]
    assert str(to_sparse("0101")) == "2,4"


def test_sparse_message_validation():
    with pytest.raises(DomainError):
        SparseMessage((3, 2), 4)
    with pytest.raises(DomainError):
        SparseMessage((2, 2), 4)
    with pytest.raises(DomainError):
        SparseMessage((5,), 4)
    with pytest.raises(DomainError):
        SparseMessage((0,), 4)
    with pytest.raises(DomainError):
        to_dense([1, 0])


def test_sparse_roundtrip_on_random_messages(rng):
    rows = (rng.random((10**4, 37)) < 0.2).astype(np.uint8)
    for row in rows:
        s = to_sparse(row)
        assert np.array_equal(to_dense(s), row)
        assert list(s.ones) == sorted(set(s.ones))


@given(st.lists(st.booleans(), min_size=1, max_size=200))
def test_sparse_bijection(bits):
    x = np.array(bits, dtype=np.uint8)
    assert np.array_equal(to_dense(to_sparse(x)), x)
    assert len(to_sparse(x)) == int(x.sum())


def test_flip_messages_in_sparse_form_match_dense(rng):
    batch = randomize_flip_batch(rng.integers(1, 65, size=300), 64, 3, 0.1, rng)
    dense = batch.to_bit_rows()
    for r in range(batch.n_messages):
        assert np.array_equal(to_dense(SparseMessage(tuple(batch.row(r) + 1), 64)), dense[r])


def test_text_form():
    assert parse_message("2,4", 5) == SparseMessage((2, 4), 5)
    assert parse_message("", 5) == SparseMessage((), 5)
    msg = parse_message("3:1,5", 5)
    assert msg == LabeledMessage(3, SparseMessage((1, 5), 5))
    assert str(msg) == "3:1,5"
    assert str(LabeledMessage(1, SparseMessage((), 5))) == "1:"
    with pytest.raises(DomainError):
        parse_message("1:a,2", 5)
    with pytest.raises(DomainError):
        parse_message("0:1", 5)
    with pytest.raises(DomainError):
        parse_message("4,2", 5)


# --- message length ----------------------------------------------------------------------------


def test_expected_sparse_bits_formula():
    assert expected_sparse_bits(1024, 0.0) == 10.0
    assert expected_sparse_bits(1000, 0.01) == pytest.approx(math.log2(1000) * 11)


def test_index_count_of_zero_messages(rng):
    d, q, users = 500, 0.02, 4000
    # Every message after a user's first is a randomized zero string.
    batch = randomize_flip_batch(np.ones(users, dtype=int), d, 4, q, rng)
    lengths = batch.row_lengths().reshape(users, 5)[:, 1:].ravel()
    se = math.sqrt(d * q * (1 - q) / lengths.size)
    assert within_sigma(lengths.mean(), d * q, se)


def test_index_count_of_one_hot_messages(rng):
    d, q, users = 500, 0.02, 20_000
    batch = randomize_flip_batch(rng.integers(1, d + 1, size=users), d, 0, q, rng)
    lengths = batch.row_lengths()
    mean = 1 - q + (d - 1) * q
    se = math.sqrt((q * (1 - q) + (d - 1) * q * (1 - q)) / users)
    assert within_sigma(lengths.mean(), mean, se)
    assert lengths.mean() * math.log2(d) <= expected_sparse_bits(d, q) * 1.01


def test_noiseless_one_hot_costs_log_d():
    batch = randomize_flip_batch(np.array([7]), 256, 0, 0.0, np.random.default_rng(0))
    assert batch.row_lengths().tolist() == [1]
    assert expected_sparse_bits(256, 0.0) == 8.0


# --- dimensions and budget ---------------------------------------------------------------------


def test_cm_dimensions_examples():
    assert cm_dimensions(100, 10**4, 2) == 100_000
    assert cm_dimensions(7, 13, 1) == 100 * 7 * 13
    assert cm_dimensions(1, 10, 3) == math.ceil(1000 ** (1 / 3))


@given(st.integers(1, 10**5), st.integers(1, 10**6), st.integers(2, 30))
def test_cm_dimensions_collision_mass(n, d, V):
    d_hat = cm_dimensions(n, d, V)
    # d_hat is the smallest integer reaching n (100 d)^(1/V), so the collision
    # mass (n / d_hat)^V is at most 1 / (100 d).
    assert (n / d_hat) ** V <= 1 / (100 * d) * (1 + 1e-9)
    assert (d_hat - 1) < n * (100 * d) ** (1 / V) * (1 + 1e-9)


def test_default_repetitions():
    assert default_repetitions(1) == 1
    assert default_repetitions(1024) == 10
    assert default_repetitions(1025) == 11


def test_cm_privacy_budget_single_repetition():
    eps, delta = 1.0, 1e-6
    assert cm_privacy_budget(eps, delta, 1) == pytest.approx((eps / (4 * math.sqrt(math.log(1 / delta))), delta / 2))


@pytest.mark.parametrize("eps", [0.5, 1.0])
@pytest.mark.parametrize("delta", [1e-6, 1e-8])
@pytest.mark.parametrize("V", [4, 8, 16])
def test_cm_budget_composes_within_target(eps, delta, V):
    eps_bar, delta_bar = cm_privacy_budget(eps, delta, V)
    assert delta_bar * 2 * V == pytest.approx(delta, rel=1e-15)
    total_eps, total_delta = advanced_composition(eps_bar, delta_bar, V)
    assert total_eps <= eps
    assert total_delta <= delta * (1 + 1e-12)


# --- hashing -----------------------------------------------------------------------------------


def test_hash_family_is_deterministic():
    a = HashFamily(4, 5000, 97, seed=11)
    b = HashFamily(4, 5000, 97, seed=11)
    c = HashFamily(4, 5000, 97, seed=12)
    for v in range(1, 5):
        assert np.array_equal(a.table(v), b.table(v))
    assert not np.array_equal(a.table(1), c.table(1))
    assert not np.array_equal(a.table(1), a.table(2))
    assert a(2, [5, 1]).tolist() == [a.table(2)[4], a.table(2)[0]]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hash_marginals_are_uniform(seed):
    d_hat = 200
    family = HashFamily(3, 200_000, d_hat, seed=seed)
    for v in range(1, 4):
        counts = np.bincount(family.table(v) - 1, minlength=d_hat)
        assert stats.chisquare(counts).pvalue > 0.01


def test_hash_family_validation():
    family = HashFamily(2, 10, 5)
    with pytest.raises(DomainError):
        family(3, [1])
    with pytest.raises(DomainError):
        family(1, [11])
    with pytest.raises(DomainError):
        HashFamily.from_tables([[1, 6]], 5)
    with pytest.raises(DomainError):
        HashFamily(2, 3, 5, tables=[[1, 2, 3]])


# --- randomizer and analyzer -------------------------------------------------------------------


def test_identity_hash_reduces_to_flip():
    d, k, q = 12, 3, 0.2
    family = HashFamily.identity(d)
    for item in (1, 5, 12):
        cm = randomize_cm(item, family, k, q, np.random.default_rng(item))
        flip = randomize_flip(item, d, k, q, np.random.default_rng(item))
        assert [m.label for m in cm] == [1] * (k + 1)
        assert [to_dense(m.payload).tolist() for m in cm] == [x.tolist() for x in flip]


def test_noiseless_messages_are_hashed_items():
    family = HashFamily(2, 50, 7, seed=3)
    msgs = randomize_cm(17, family, 0, 0.0, np.random.default_rng(0))
    assert msgs == [
        LabeledMessage(1, SparseMessage((int(family(1, 17)[0]),), 7)),
        LabeledMessage(2, SparseMessage((int(family(2, 17)[0]),), 7)),
    ]


@given(st.integers(1, 5), st.integers(0, 4), st.floats(0, 0.49), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_message_count(V, k, q, n, seed):
    rng = np.random.default_rng(seed)
    family = HashFamily(V, 30, 11, seed=seed)
    lb = randomize_cm_batch(rng.integers(1, 31, size=n), family, k, q, rng)
    assert lb.n_messages == n * V * (k + 1)
    assert np.array_equal(np.bincount(lb.labels, minlength=V + 1)[1:], np.full(V, n * (k + 1)))


def _collision_fixture():
    # h1 sends both items to cell 1; h2 keeps them apart.
    family = HashFamily.from_tables([[1, 1], [1, 2]], d_hat=2)
    data = Dataset(np.array([1, 1, 1, 2]), 2)
    params = ProtocolParams(n=4, d=2, k=0, q=0.0)
    return family, data, params


def test_engineered_collision_is_removed_by_min():
    family, data, params = _collision_fixture()
    lb = randomize_cm_batch(data.items, family, 0, 0.0, np.random.default_rng(0))
    hashed = repetition_estimates(lb, family, params)
    # By hand: repetition 1 sees all four users in cell 1, repetition 2 sees (3, 1).
    assert hashed.tolist() == [[1.0, 0.0], [0.75, 0.25]]
    z = analyze_cm(lb, family, params).z
    assert z.tolist() == [0.75, 0.25]


def test_noiseless_recovery_without_collisions(rng):
    d, n = 300, 2000
    family = HashFamily(3, d, 50_000, seed=5)
    items = rng.integers(1, 41, size=n)
    # Items 1..40 occupy distinct cells in at least one repetition.
    support = np.arange(1, 41)
    assert all(
        any(
            np.count_nonzero(family.table(v)[support - 1] == family(v, j)[0]) == 1
            for v in range(1, 4)
        )
        for j in support
    )
    data = Dataset(items, d)
    params = ProtocolParams(n=n, d=d, k=0, q=0.0)
    z = run_cm_protocol(data, params, family, seed=1).z
    assert np.allclose(z[support - 1], data.histogram()[support - 1], atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.floats(0, 0.45))
def test_min_semantics(seed, V, q):
    rng = np.random.default_rng(seed)
    family = HashFamily(V, 40, 9, seed=seed)
    params = ProtocolParams(n=25, d=40, k=2, q=q)
    lb = randomize_cm_batch(rng.integers(1, 41, size=25), family, 2, q, rng)
    hashed = repetition_estimates(lb, family, params)
    z = analyze_cm(lb, family, params).z
    stacked = np.stack([hashed[v - 1, family.table(v) - 1] for v in range(1, V + 1)])
    assert np.all(z[None, :] <= stacked)
    assert np.array_equal(z, stacked.min(axis=0))


def test_analyzer_permutation_invariance(rng):
    family = HashFamily(3, 60, 13, seed=2)
    params = ProtocolParams(n=40, d=60, k=2, q=0.2)
    lb = randomize_cm_batch(rng.integers(1, 61, size=40), family, 2, 0.2, rng)
    base = analyze_cm(lb, family, params).z
    for _ in range(5):
        shuffled = lb.take(rng.permutation(lb.n_messages))
        assert np.array_equal(analyze_cm(shuffled, family, params).z, base)
    assert np.array_equal(analyze_cm(lb.messages(), family, params).z, base)


def test_analyzer_rejects_malformed_input(rng):
    family = HashFamily(2, 10, 5, seed=0)
    params = ProtocolParams(n=3, d=10, k=1, q=0.1)
    lb = randomize_cm_batch(np.array([1, 2, 3]), family, 1, 0.1, rng)
    with pytest.raises(DomainError):
        analyze_cm(lb.take(np.arange(lb.n_messages - 1)), family, params)
    bad = [LabeledMessage(3, SparseMessage((1,), 5))] + lb.messages()
    with pytest.raises(DomainError):
        analyze_cm(bad, family, params)
    with pytest.raises(DomainError):
        analyze_cm(lb, family, ProtocolParams(n=3, d=11, k=1, q=0.1))
    # The lenient mode accepts uneven label counts.
    analyze_cm(lb.take(np.arange(lb.n_messages - 1)), family, params, lenient=True)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 3), st.floats(0, 0.45))
def test_concentrated_coalition_shift_is_bounded(seed, m, k, q):
    rng = np.random.default_rng(seed)
    n, d, V = 30, 20, 3
    family = HashFamily(V, d, 7, seed=seed)
    params = ProtocolParams(n=n, d=d, k=k, q=q)
    lb = randomize_cm_batch(rng.integers(1, d + 1, size=n), family, k, q, rng)
    honest = repetition_estimates(lb, family, params)
    # Messages are ordered by repetition then user; the coalition is users 0..m-1.
    user = (np.arange(lb.n_messages) // (k + 1)) % n
    kept = lb.take(np.flatnonzero(user >= m))
    target = int(rng.integers(1, 8))
    forged = [LabeledMessage(1, SparseMessage((target,), 7))] * (m * V * (k + 1))
    attacked = repetition_estimates(
        LabeledBatch.concatenate([kept, LabeledBatch.from_messages(forged, V, 7)]),
        family, params, lenient=True,
    )
    bound = m / n * V * (k + 1) / (1 - 2 * q)
    assert np.max(np.abs(attacked[0] - honest[0])) <= bound + 1e-12


# --- solver and end to end ---------------------------------------------------------------------


def test_solve_cm_structure():
    sol = solve_cm(1.0, 1e-6, 10**4, 1000, V=4)
    assert sol.d_hat == cm_dimensions(10**4, 1000, 4)
    assert (sol.eps_bar, sol.delta_bar) == cm_privacy_budget(1.0, 1e-6, 4)
    assert sol.const == CM_THRESHOLD_CONSTANT == pytest.approx(26.8)
    assert sol.q == max(sol.q_hat, sol.q_tilde)
    assert sol.confidence == pytest.approx(0.9 - 1e-8)
    with pytest.raises(InfeasibleParametersError):
        solve_cm(1.0, 1e-6, 10**4, 1000, V=4, k=sol.k - 1)


def test_solve_cm_base_constant_matches_min_k():
    sol = solve_cm(1.0, 1e-6, 10**4, 1000, V=4, const=132 / 5)
    assert sol.k == min_k(sol.eps_bar, sol.delta_bar, 10**4)
    assert solve_cm(1.0, 1e-6, 10**4, 1000, V=4).k >= sol.k


def test_counts_simulation_matches_messages_in_mean():
    d, n = 30, 400
    rng = np.random.default_rng(8)
    data = Dataset(rng.integers(1, d + 1, size=n), d)
    family = HashFamily(2, d, 500, seed=1)
    params = ProtocolParams(n=n, d=d, k=2, q=0.1)
    trials = 200
    by_mode = {
        mode: np.stack([run_cm_protocol(data, params, family, t, simulation=mode).z for t in range(trials)])
        for mode in ("messages", "counts")
    }
    a, b = by_mode["messages"], by_mode["counts"]
    se = np.sqrt(a.var(axis=0) / trials + b.var(axis=0) / trials)
    assert within_sigma(a.mean(axis=0) - b.mean(axis=0), np.zeros(d), se, k=4)


def test_run_cm_protocol_is_deterministic(rng):
    data = Dataset(rng.integers(1, 21, size=50), 20)
    family = HashFamily(2, 20, 40, seed=0)
    params = ProtocolParams(n=50, d=20, k=1, q=0.1)
    a = run_cm_protocol(data, params, family, seed=4, stream_key=(1, 2))
    b = run_cm_protocol(data, params, family, seed=4, stream_key=(1, 2))
    assert np.array_equal(a.z, b.z)
    with pytest.raises(DomainError):
        run_cm_protocol(data, params, family, seed=4, simulation="bogus")
