"""The numba and numpy flavours of every kernel must agree."""

import math

import numpy as np
import pytest

from pktseer import kernels
from pktseer._accel import HAVE_NUMBA, USE_NUMBA, backend_name

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")

NP, NB = kernels.NUMPY, kernels.NUMBA


def both(name, *args):
    return NP[name](*args), NB[name](*args)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_softmax_rows(rng, dtype, tol):
    x = (rng.normal(size=(17, 9)) * 5).astype(dtype)
    x[3, :4] = -np.inf
    x[5, :] = -np.inf  # fully masked row gives zeros
    a, b = both("softmax_rows", x)
    np.testing.assert_allclose(a, b, atol=tol)
    assert np.all(a[5] == 0)
    np.testing.assert_allclose(a[[0, 1, 3]].sum(1), 1, atol=tol * 10)
    gy = rng.normal(size=x.shape).astype(dtype)
    np.testing.assert_allclose(*both("softmax_rows_backward", a, gy), atol=tol * 10)


def test_layer_norm(rng):
    x = rng.normal(size=(11, 16)) * 3 + 1
    gamma, beta = rng.normal(size=16), rng.normal(size=16)
    (y1, xh1, r1), (y2, xh2, r2) = both("layer_norm", x, gamma, beta, 1e-5)
    np.testing.assert_allclose(y1, y2, atol=1e-12)
    np.testing.assert_allclose(r1, r2, rtol=1e-12)
    # oracle: textbook formula
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    np.testing.assert_allclose(y1, (x - mu) / np.sqrt(var + 1e-5) * gamma + beta, atol=1e-12)
    gy = rng.normal(size=x.shape)
    for u, v in zip(*both("layer_norm_backward", gy, xh1, r1, gamma)):
        np.testing.assert_allclose(u, v, atol=1e-11)


def test_gelu(rng):
    x = rng.normal(size=(8, 33)) * 4
    a, b = both("gelu", x)
    np.testing.assert_allclose(a, b, atol=1e-13)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(a, ref, atol=1e-13)
    gy = rng.normal(size=x.shape)
    np.testing.assert_allclose(*both("gelu_backward", x, gy), atol=1e-12)


def test_nll_rows(rng):
    z = rng.normal(size=(20, 7)) * 10
    t = rng.integers(0, 7, 20)
    (n1, p1), (n2, p2) = both("nll_rows", z, t)
    np.testing.assert_allclose(n1, n2, atol=1e-12)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    ref = -(z[np.arange(20), t] - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) - z.max(1))
    np.testing.assert_allclose(n1, ref, atol=1e-10)


def test_scatter_add_rows(rng):
    ids = rng.integers(0, 5, 40)
    g = rng.normal(size=(40, 3))
    a, b = both("scatter_add_rows", ids, g, 5)
    np.testing.assert_allclose(a, b, atol=1e-12)
    ref = np.zeros((5, 3))
    for i, row in zip(ids, g):
        ref[i] += row
    np.testing.assert_allclose(a, ref, atol=1e-12)


def test_adam_update(rng):
    arrays = [rng.normal(size=(6, 4)) for _ in range(4)]
    arrays[3] = np.abs(arrays[3])
    a = [x.copy() for x in arrays]
    b = [x.copy() for x in arrays]
    NP["adam_update"](*a, 1e-2, 0.9, 0.999, 1e-8, 0.1, 0.001)
    NB["adam_update"](*b, 1e-2, 0.9, 0.999, 1e-8, 0.1, 0.001)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, atol=1e-12)


def test_pair_counts(rng):
    ids = rng.integers(-1, 9, 500).astype(np.int64)
    a, b = both("pair_counts", ids, 9)
    np.testing.assert_array_equal(a, b)
    ref = np.zeros(81, dtype=np.int64)
    for x, y in zip(ids, ids[1:]):
        if x >= 0 and y >= 0:
            ref[x * 9 + y] += 1
    np.testing.assert_array_equal(a, ref)


@pytest.mark.parametrize("left,right", [(1, 1), (1, 2), (2, 1), (0, 0)])
def test_merge_pair(rng, left, right):
    for _ in range(50):
        ids = rng.integers(-1, 3, int(rng.integers(0, 30))).astype(np.int64)
        a, b = both("merge_pair", ids, left, right, 99)
        np.testing.assert_array_equal(a, b)


def test_merge_pair_runs():
    ids = np.array([1, 1, 1, 1, 1, -1, 1, 1], dtype=np.int64)
    np.testing.assert_array_equal(NP["merge_pair"](ids, 1, 1, 7), [7, 7, 1, -1, 7])


def test_apply_merges(rng):
    merges = np.array([[1, 1], [2, 3], [4, 1], [1, 4]], dtype=np.int64)
    for _ in range(100):
        ids = rng.integers(1, 5, int(rng.integers(0, 25))).astype(np.int64)
        np.testing.assert_array_equal(*both("apply_merges", ids, merges, 10))


def test_dispatch_respects_backend():
    for name in kernels.KERNEL_NAMES:
        fn = getattr(kernels, name)
        expect = NB[name] if (USE_NUMBA and name in kernels.NUMBA_WINS) else NP[name]
        assert fn is expect
    assert backend_name() in {"numba", "numpy"}
