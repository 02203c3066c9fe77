import numpy as np
import pytest
from numpy.testing import assert_allclose

from numerics import (Rng, frobenius, kron, kron_chain, matmul, random_orthonormal, solve_linear,
                      spectral_radius, sym_eig)
from utils.errors import ContractError, NumericError, ShapeError, SingularMatrixError


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert_allclose(matmul(np.eye(2), a), a)
    assert_allclose(matmul(a, np.zeros((2, 3))), np.zeros((2, 3)))
    assert_allclose(matmul(a, [[1.0], [1.0]]), [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        matmul([[np.nan]], [[1.0]])


@pytest.mark.parametrize("method", ["eigh", "jacobi"])
def test_sym_eig_examples(method):
    values, _ = sym_eig(np.eye(3), method=method)
    assert_allclose(values, [1.0, 1.0, 1.0])
    values, _ = sym_eig(np.diag([2.0, 5.0, 0.0]), method=method)
    assert_allclose(values, [5.0, 2.0, 0.0], atol=1e-14)
    values, vectors = sym_eig([[2.0, 1.0], [1.0, 2.0]], method=method)
    assert_allclose(values, [3.0, 1.0], atol=1e-12)
    assert_allclose(vectors.T @ vectors, np.eye(2), atol=1e-12)


def test_jacobi_matches_eigh_on_random_matrix(rng):
    a = rng.normal((6, 6))
    m = a @ a.T
    v1, vec1 = sym_eig(m, "jacobi")
    v2, _ = sym_eig(m, "eigh")
    assert_allclose(v1, v2, rtol=1e-10, atol=1e-10)
    assert_allclose(m @ vec1, vec1 * v1, atol=1e-9)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ContractError):
        sym_eig([[1.0, 2.0], [0.0, 1.0]])


def test_kron_examples():
    assert_allclose(kron(np.eye(2), np.eye(2)), np.eye(4))
    assert_allclose(kron([2.0], np.eye(2)), np.diag([2.0, 2.0]))
    assert_allclose(kron([[0, 1], [1, 0]], [[1, 2]]), [[0, 0, 1, 2], [1, 2, 0, 0]])
    assert kron_chain(np.eye(2), np.eye(2), np.eye(2)).shape == (8, 8)


def test_solve_linear_examples():
    v = np.array([1.0, -2.0, 3.0])
    assert_allclose(solve_linear(np.eye(3), v), v)
    assert_allclose(solve_linear(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])
    assert_allclose(solve_linear([[1.0, 1.0], [0.0, 1.0]], [3.0, 1.0]), [2.0, 1.0])


def test_solve_linear_singular():
    with pytest.raises(SingularMatrixError):
        solve_linear([[1.0, 2.0], [2.0, 4.0]], [1.0, 2.0])


def test_spectral_radius_and_frobenius():
    assert spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9)
    assert frobenius(np.array([[3.0, 4.0]])) == pytest.approx(5.0)


def test_random_orthonormal(rng):
    rows = random_orthonormal(3, 7, rng.generator)
    assert_allclose(rows @ rows.T, np.eye(3), atol=1e-12)
    cols = random_orthonormal(7, 3, rng.generator)
    assert_allclose(cols.T @ cols, np.eye(3), atol=1e-12)


def test_rng_streams_are_reproducible_and_independent():
    a = Rng(7, (0, 3)).random_raw(5)
    b = Rng(7, (0, 3)).random_raw(5)
    c = Rng(7, (0, 4)).random_raw(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(Rng(7, (0,)).child(3).random_raw(5), a)
