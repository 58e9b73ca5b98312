"""Backend kernels checked against a brute-force python oracle."""

import numpy as np
import pytest

from enar import kernels
from enar.errors import ConfigError, ShapeError


def brute_cross(X, Y, alpha):
    n, m = len(X), len(Y)
    row = np.zeros(n)
    col = np.zeros(m)
    for i in range(n):
        for j in range(m):
            d = np.linalg.norm(X[i] - Y[j]) ** alpha
            row[i] += d
            col[j] += d
    return row, col


def backends():
    names = ["numpy"]
    if kernels.numba_impl is not None:
        names.append("numba")
    return names


@pytest.fixture(autouse=True)
def restore_backend():
    prev = kernels.active_backend()
    yield
    kernels.use_backend(prev)


@pytest.mark.parametrize("backend", backends())
@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.37, 2.0])
def test_cross_matches_bruteforce(backend, alpha):
    kernels.use_backend(backend)
    rng = np.random.default_rng(7)
    X = rng.normal(size=(9, 3))
    Y = rng.normal(size=(5, 3))
    row, col = kernels.cross_alpha_sums(X, Y, alpha)
    brow, bcol = brute_cross(X, Y, alpha)
    np.testing.assert_allclose(row, brow, rtol=1e-10)
    np.testing.assert_allclose(col, bcol, rtol=1e-10)
    assert abs(row.sum() - col.sum()) < 1e-9 * max(1.0, row.sum())


@pytest.mark.parametrize("backend", backends())
def test_within_excludes_self(backend):
    kernels.use_backend(backend)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(7, 2))
    row = kernels.within_alpha_sums(X, 1.0)
    want = np.array([
        sum(np.linalg.norm(X[i] - X[j]) for j in range(7) if j != i)
        for i in range(7)
    ])
    np.testing.assert_allclose(row, want, rtol=1e-10)


@pytest.mark.parametrize("backend", backends())
def test_run_to_run_bitwise(backend):
    kernels.use_backend(backend)
    rng = np.random.default_rng(9)
    X = rng.normal(size=(64, 4))
    Y = rng.normal(size=(48, 4))
    r1, c1 = kernels.cross_alpha_sums(X, Y, 1.2)
    r2, c2 = kernels.cross_alpha_sums(X, Y, 1.2)
    assert np.array_equal(r1, r2) and np.array_equal(c1, c2)
    w1 = kernels.within_alpha_sums(X, 1.2)
    w2 = kernels.within_alpha_sums(X, 1.2)
    assert np.array_equal(w1, w2)


def test_backends_agree():
    if kernels.numba_impl is None:
        pytest.skip("numba not importable")
    rng = np.random.default_rng(10)
    X = rng.normal(size=(33, 4))
    Y = rng.normal(size=(21, 4))
    kernels.use_backend("numpy")
    r_np, c_np = kernels.cross_alpha_sums(X, Y, 1.5)
    kernels.use_backend("numba")
    r_nb, c_nb = kernels.cross_alpha_sums(X, Y, 1.5)
    np.testing.assert_allclose(r_np, r_nb, rtol=1e-12)
    np.testing.assert_allclose(c_np, c_nb, rtol=1e-12)


def test_backend_selection_errors():
    with pytest.raises(ConfigError):
        kernels.select_backend("cuda")
    assert kernels.select_backend("auto")[0] in ("numba", "numpy")


def test_shape_validation():
    with pytest.raises(ShapeError):
        kernels.cross_alpha_sums(np.zeros((3, 2)), np.zeros((3, 5)), 1.0)
    with pytest.raises(ShapeError):
        kernels.within_alpha_sums(np.zeros((2, 2, 2)), 1.0)
    with pytest.raises(ConfigError):
        kernels.cross_alpha_sums(np.zeros((2, 2)), np.zeros((2, 2)), 2.5)
