import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coderec import itemrep
from coderec.errors import ConfigError


# -- table initialization -----------------------------------------------------

def test_init_table_deterministic_and_shaped():
    a = itemrep.init_table(2, 3, 4, seed=42)
    b = itemrep.init_table(2, 3, 4, seed=42)
    assert a.shape == (2, 3, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, itemrep.init_table(2, 3, 4, seed=43))


def test_init_table_moments():
    table = itemrep.init_table(10, 100, 100, seed=0)  # 1e5 entries
    n = table.size
    assert abs(table.mean()) < 4 * itemrep.INIT_STD / np.sqrt(n)


def test_init_table_rejects_bad_dims():
    with pytest.raises(ConfigError):
        itemrep.init_table(0, 3, 4, seed=0)


# -- lookup and pooling -------------------------------------------------------

def test_item_rep_single_subspace_returns_row():
    table = itemrep.init_table(1, 5, 3, seed=1)
    rep = itemrep.item_rep(table, np.asarray([2]))
    assert np.array_equal(rep, table[0, 2])


def test_item_rep_identical_rows_mean_is_row():
    table = np.zeros((3, 4, 2))
    u = np.asarray([1.5, -0.5])
    table[0, 1] = table[1, 0] = table[2, 3] = u
    assert np.allclose(itemrep.item_rep(table, np.asarray([1, 0, 3])), u)


def test_item_rep_hand_computed_mean():
    rng = np.random.default_rng(5)
    table = rng.standard_normal((3, 4, 6))
    code = np.asarray([0, 2, 1])
    expected = (table[0, 0] + table[1, 2] + table[2, 1]) / 3.0
    assert np.allclose(itemrep.item_rep(table, code), expected, atol=1e-15)


def test_item_rep_out_of_range():
    table = itemrep.init_table(2, 3, 4, seed=0)
    with pytest.raises(IndexError):
        itemrep.item_rep(table, np.asarray([0, 3]))
    with pytest.raises(IndexError):
        itemrep.item_rep(table, np.asarray([-1, 0]))


def test_item_reps_matches_loop():
    rng = np.random.default_rng(2)
    table = rng.standard_normal((4, 5, 8))
    codes = rng.integers(0, 5, size=(20, 4))
    batch = itemrep.item_reps(table, codes)
    for i in range(20):
        assert np.allclose(batch[i], itemrep.item_rep(table, codes[i]),
                           atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-2, 2), beta=st.floats(-2, 2))
def test_item_rep_linear_in_table(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 3, 4))
    code = rng.integers(0, 3, size=2)
    lhs = itemrep.item_rep(alpha * a + beta * b, code)
    rhs = (alpha * itemrep.item_rep(a, code)
           + beta * itemrep.item_rep(b, code))
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_scatter_rep_grad_inverts_lookup():
    # d(sum(w * reps))/d(table) accumulated by scatter must match a dense
    # computation through one-hot selection matrices.
    rng = np.random.default_rng(3)
    table = rng.standard_normal((3, 4, 5))
    codes = rng.integers(0, 4, size=(10, 3))
    w = rng.standard_normal((10, 5))
    grad = np.zeros_like(table)
    itemrep.scatter_rep_grad(grad, codes, w)
    dense = np.zeros_like(table)
    for i in range(10):
        for k in range(3):
            dense[k, codes[i, k]] += w[i] / 3
    assert np.allclose(grad, dense, atol=1e-14)


# -- semi-synthetic negatives -------------------------------------------------

def test_semi_synthetic_rho_zero_identity():
    rng = np.random.default_rng(0)
    code = np.asarray([1, 2, 3])
    assert np.array_equal(itemrep.semi_synthetic(code, 0.0, 8, rng), code)


def test_semi_synthetic_single_symbol_identity():
    rng = np.random.default_rng(0)
    code = np.zeros(6, dtype=np.int64)
    for rho in (0.3, 1.0):
        assert np.array_equal(itemrep.semi_synthetic(code, rho, 1, rng), code)


def test_semi_synthetic_rho_out_of_range():
    with pytest.raises(ConfigError):
        itemrep.semi_synthetic(np.asarray([0]), 1.2, 4, np.random.default_rng(0))


def test_semi_synthetic_replacement_rate():
    # changed fraction concentrates at rho * (1 - 1/M)
    rho, m, d, draws = 0.75, 16, 8, 10_000
    rng = np.random.default_rng(123)
    code = rng.integers(0, m, size=d)
    changed = 0
    for _ in range(draws):
        out = itemrep.semi_synthetic(code, rho, m, rng)
        changed += int((out != code).sum())
    p = rho * (1 - 1 / m)
    total = draws * d
    sigma = np.sqrt(p * (1 - p) / total)
    assert abs(changed / total - p) < 3 * sigma


def test_semi_synthetic_marginal_distribution():
    # P(out = j | in = j) = 1 - rho + rho/M, off-index mass is rho/M each
    rho, m, draws = 0.6, 4, 40_000
    rng = np.random.default_rng(7)
    code = np.asarray([2])
    counts = np.zeros(m)
    for _ in range(draws):
        counts[itemrep.semi_synthetic(code, rho, m, rng)[0]] += 1
    probs = counts / draws
    expected = np.full(m, rho / m)
    expected[2] = 1 - rho + rho / m
    sigma = np.sqrt(expected * (1 - expected) / draws)
    assert np.all(np.abs(probs - expected) < 4 * sigma)


def test_semi_synthetic_rep_rho_zero_matches_item_rep():
    rng = np.random.default_rng(4)
    table = rng.standard_normal((2, 3, 4))
    code = np.asarray([1, 2])
    rep = itemrep.semi_synthetic_rep(table, code, 0.0, rng)
    assert np.array_equal(rep, itemrep.item_rep(table, code))


def test_semi_synthetic_rep_support_rho_one():
    rng = np.random.default_rng(5)
    table = rng.standard_normal((1, 2, 3))
    code = np.asarray([0])
    for _ in range(20):
        rep = itemrep.semi_synthetic_rep(table, code, 1.0, rng)
        assert any(np.array_equal(rep, table[0, j]) for j in range(2))


def test_semi_synthetic_rep_distribution_matches_enumeration():
    # D=2, M=2: enumerate all four outcome codes with their probabilities
    # and compare the empirical mean representation over many draws.
    rho, m, d = 0.5, 2, 2
    rng = np.random.default_rng(11)
    table = rng.standard_normal((d, m, 3))
    code = np.asarray([0, 1])

    def marginal(k, j):
        keep = 1 - rho + rho / m
        return keep if j == code[k] else rho / m

    expected = np.zeros(3)
    for out in itertools.product(range(m), repeat=d):
        p = marginal(0, out[0]) * marginal(1, out[1])
        expected += p * itemrep.item_rep(table, np.asarray(out))

    draws = 20_000
    acc = np.zeros(3)
    for _ in range(draws):
        acc += itemrep.semi_synthetic_rep(table, code, rho, rng)
    spread = np.abs(table).max() / np.sqrt(draws)
    assert np.all(np.abs(acc / draws - expected) < 5 * spread)


# -- alignment-aware lookup ---------------------------------------------------

def test_aligned_item_rep_identity_matches_plain():
    rng = np.random.default_rng(6)
    table = rng.standard_normal((3, 4, 5))
    pi = np.stack([np.eye(4)] * 3)
    code = np.asarray([1, 3, 0])
    assert np.allclose(itemrep.aligned_item_rep(table, pi, code),
                       itemrep.item_rep(table, code), atol=1e-15)


def test_aligned_item_rep_hard_swap():
    rng = np.random.default_rng(7)
    table = rng.standard_normal((1, 3, 4))
    pi = np.eye(3)[None, :, :].copy()
    pi[0, [0, 1]] = pi[0, [1, 0]]
    rep = itemrep.aligned_item_rep(table, pi, np.asarray([0]))
    assert np.allclose(rep, table[0, 1], atol=1e-15)


def test_aligned_item_rep_matches_dense_oracle():
    rng = np.random.default_rng(8)
    table = rng.standard_normal((2, 5, 6))
    raw = rng.random((2, 5, 5))
    pi = raw / raw.sum(axis=2, keepdims=True)
    code = np.asarray([3, 1])
    dense = np.einsum("kij,kjd->kid", pi, table)
    expected = (dense[0, 3] + dense[1, 1]) / 2
    assert np.allclose(itemrep.aligned_item_rep(table, pi, code), expected,
                       atol=1e-14)
    assert np.allclose(itemrep.materialize_aligned_table(table, pi), dense,
                       atol=1e-15)


def test_aligned_item_rep_hard_permutation_equals_permuted_table():
    rng = np.random.default_rng(9)
    table = rng.standard_normal((2, 4, 3))
    perms = [rng.permutation(4), rng.permutation(4)]
    pi = np.stack([np.eye(4)[p] for p in perms])
    for _ in range(10):
        code = rng.integers(0, 4, size=2)
        permuted = np.stack([table[k][perms[k]] for k in range(2)])
        assert np.allclose(itemrep.aligned_item_rep(table, pi, code),
                           itemrep.item_rep(permuted, code), atol=1e-15)


def test_aligned_item_rep_shape_mismatch():
    table = itemrep.init_table(2, 3, 4, seed=0)
    with pytest.raises(ValueError):
        itemrep.aligned_item_rep(table, np.eye(3)[None], np.asarray([0, 0]))
