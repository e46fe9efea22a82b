import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flash_pdssm.numerics import InvalidInputError, rdot
from flash_pdssm.pd import (
    PdMatrix,
    op_counter,
    pd_apply,
    pd_apply_transpose,
    pd_compose,
    sparsify_column_argmax,
    to_dense,
)


def random_pd(rng, n, complex_=True):
    diag = rng.normal(size=n) + (1j * rng.normal(size=n) if complex_ else 0)
    return PdMatrix(rng.integers(0, n, n), diag)


def random_vec(rng, n):
    return rng.normal(size=n) + 1j * rng.normal(size=n)


def test_identity_apply():
    x = np.array([1.0, -2.0, 3.5j])
    np.testing.assert_array_equal(pd_apply(PdMatrix.identity(3), x), x)


def test_collapsing_map_scatter():
    a = PdMatrix([0, 0], [1.0, 1.0])
    np.testing.assert_array_equal(pd_apply(a, np.array([2.0, 5.0])), [7.0, 0.0])


def test_apply_matches_dense():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = random_pd(rng, 8)
        x = random_vec(rng, 8)
        np.testing.assert_allclose(pd_apply(a, x), to_dense(a) @ x, atol=1e-12)


def test_apply_dimension_mismatch():
    with pytest.raises(ValueError):
        pd_apply(PdMatrix.identity(3), np.zeros(4))


def test_compose_identity_laws():
    rng = np.random.default_rng(1)
    a = random_pd(rng, 6)
    eye = PdMatrix.identity(6)
    assert pd_compose(eye, a) == a
    assert pd_compose(a, eye) == a


def test_swap_involution():
    s = PdMatrix([1, 0], [1.0, 1.0])
    assert pd_compose(s, s) == PdMatrix.identity(2)


def test_compose_matches_dense_product():
    rng = np.random.default_rng(2)
    a1, a2 = random_pd(rng, 8), random_pd(rng, 8)
    np.testing.assert_allclose(to_dense(pd_compose(a2, a1)), to_dense(a2) @ to_dense(a1), atol=1e-12)


def test_compose_dimension_mismatch():
    with pytest.raises(ValueError):
        pd_compose(PdMatrix.identity(2), PdMatrix.identity(3))


def test_compose_exact_for_integer_diagonals():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a1 = PdMatrix(rng.integers(0, 5, 5), rng.integers(-3, 4, 5).astype(float))
        a2 = PdMatrix(rng.integers(0, 5, 5), rng.integers(-3, 4, 5).astype(float))
        np.testing.assert_array_equal(to_dense(pd_compose(a2, a1)), to_dense(a2) @ to_dense(a1))


def test_transpose_identity_and_collapse():
    g = np.array([3.0, -1.0])
    np.testing.assert_array_equal(pd_apply_transpose(PdMatrix.identity(2), g), g)
    np.testing.assert_array_equal(pd_apply_transpose(PdMatrix([0, 0], [1.0, 1.0]), np.array([4.0, 9.0])), [4.0, 4.0])


def test_transpose_matches_dense_for_real_diag():
    rng = np.random.default_rng(4)
    a = random_pd(rng, 8, complex_=False)
    g = random_vec(rng, 8)
    np.testing.assert_allclose(pd_apply_transpose(a, g), to_dense(a).T @ g, atol=1e-12)


def test_transpose_is_real_adjoint_for_complex_diag():
    # as a real-linear map on (re, im) pairs the adjoint of A is conj(A)^T
    rng = np.random.default_rng(5)
    a = random_pd(rng, 8)
    g = random_vec(rng, 8)
    np.testing.assert_allclose(pd_apply_transpose(a, g), to_dense(a).conj().T @ g, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_adjoint_identity(n, seed):
    rng = np.random.default_rng(seed)
    a = random_pd(rng, n)
    x, g = random_vec(rng, n), random_vec(rng, n)
    lhs = rdot(pd_apply(a, x), g)
    rhs = rdot(x, pd_apply_transpose(a, g))
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_associativity(n, seed):
    rng = np.random.default_rng(seed)
    a1, a2, a3 = (random_pd(rng, n) for _ in range(3))
    left = pd_compose(a3, pd_compose(a2, a1))
    right = pd_compose(pd_compose(a3, a2), a1)
    np.testing.assert_array_equal(left.idx, right.idx)
    np.testing.assert_allclose(left.diag, right.diag, atol=1e-6)


def test_to_dense_examples():
    np.testing.assert_array_equal(to_dense(PdMatrix.identity(3)), np.eye(3))
    np.testing.assert_array_equal(to_dense(PdMatrix([1, 0], [2.0, 3.0])), [[0, 3], [2, 0]])


def test_sparsify_diagonal_maxima():
    m = np.array([[5.0, 0, 0], [1, 6, 2], [0, 1, 7]])
    np.testing.assert_array_equal(sparsify_column_argmax(m), [0, 1, 2])


def test_sparsify_tie_goes_to_smallest_row():
    m = np.ones((4, 4))
    np.testing.assert_array_equal(sparsify_column_argmax(m), [0, 0, 0, 0])


def test_sparsify_matches_bruteforce():
    rng = np.random.default_rng(6)
    m = rng.normal(size=(8, 8))
    expected = []
    for j in range(8):
        best = 0
        for i in range(1, 8):
            if m[i, j] > m[best, j]:
                best = i
        expected.append(best)
    np.testing.assert_array_equal(sparsify_column_argmax(m), expected)


def test_sparsify_nan():
    m = np.eye(3)
    m[1, 2] = np.nan
    with pytest.raises(InvalidInputError):
        sparsify_column_argmax(m)


def test_index_width():
    assert PdMatrix.identity(8).idx.dtype == np.int16
    assert PdMatrix.identity(1024).idx.dtype == np.int32


def test_invalid_index_rejected():
    with pytest.raises(ValueError):
        PdMatrix([0, 2], [1.0, 1.0])


def test_linear_cost():
    rng = np.random.default_rng(7)
    for n in (16, 32, 64):
        a, b = random_pd(rng, n), random_pd(rng, n)
        x = random_vec(rng, n)
        op_counter.clear()
        pd_apply(a, x)
        pd_apply_transpose(a, x)
        pd_compose(a, b)
        assert op_counter["pd_apply"] == n
        assert op_counter["pd_apply_transpose"] == n
        assert op_counter["pd_compose"] == n
