import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import central_diff, rel_err
from splitproj.errors import InvalidArgument
from splitproj.wcc import WccConfig, class_centroids, total_loss, wcc_grad, wcc_loss


def _loop_loss(z, y):
    total = 0.0
    for c in set(y):
        rows = [z[i] for i in range(len(y)) if y[i] == c]
        mu = sum(rows) / len(rows)
        total += sum(float(np.dot(r - mu, r - mu)) for r in rows) / len(rows)
    return total


def test_centroids_simple():
    z = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
    cents = class_centroids(z, [1, 1, 7])
    np.testing.assert_array_equal(cents[1], [1.0, 0.0])
    np.testing.assert_array_equal(cents[7], [5.0, 5.0])


def test_centroids_oracle():
    gen = np.random.default_rng(0)
    z = gen.standard_normal((20, 4))
    y = gen.integers(0, 3, 20)
    for c, mu in class_centroids(z, y).items():
        assert np.array_equal(mu, z[y == c].sum(axis=0) / np.sum(y == c))
    c32 = class_centroids(z.astype(np.float32), y)
    for c, mu in c32.items():
        np.testing.assert_allclose(mu, z[y == c].mean(axis=0), atol=1e-6)


def test_loss_cases():
    assert wcc_loss(np.eye(3), [0, 1, 2]) == 0.0
    assert wcc_loss(np.array([[0.0, 0.0], [2.0, 0.0]]), [0, 0]) == pytest.approx(1.0)


def test_loss_loop_oracle():
    gen = np.random.default_rng(1)
    for _ in range(10):
        z = gen.standard_normal((15, 5))
        y = list(gen.integers(0, 3, 15))
        assert wcc_loss(z, y) == pytest.approx(_loop_loss(z, y), rel=1e-5)


def test_grad_two_point():
    g = wcc_grad(np.array([[0.0, 0.0], [2.0, 0.0]]), [0, 0])
    np.testing.assert_allclose(g, [[-1, 0], [1, 0]])
    z = np.array([[0.0, 0.0], [2.0, 0.0]])
    fd = central_diff(lambda: wcc_loss(z, [0, 0]), z, 1e-4)
    np.testing.assert_allclose(fd, g, atol=1e-4)


def test_grad_singletons_zero():
    assert not np.any(wcc_grad(np.random.default_rng(0).standard_normal((3, 2)), [0, 1, 2]))


def test_grad_fd_random():
    gen = np.random.default_rng(2)
    for _ in range(50):
        b = int(gen.integers(2, 12))
        z = gen.standard_normal((b, 4))
        y = gen.integers(0, 3, b)
        g = wcc_grad(z, y)
        fd = central_diff(lambda: wcc_loss(z, y), z, 1e-3)
        assert rel_err(g, fd) <= 1e-3
        for c in np.unique(y):
            assert np.max(np.abs(g[y == c].sum(axis=0))) <= 1e-5


@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_translation_and_scale(seed, s):
    gen = np.random.default_rng(seed)
    z = gen.standard_normal((10, 3))
    y = gen.integers(0, 2, 10)
    base = wcc_loss(z, y)
    shifted = z.copy()
    shifted[y == 0] += gen.standard_normal(3) * 5
    assert abs(wcc_loss(shifted, y) - base) <= 1e-5 * max(1.0, base)
    assert wcc_loss(z * s, y) == pytest.approx(base * s * s, rel=1e-4)


def test_grad_dtype_follows_input():
    z = np.ones((2, 2), dtype=np.float32)
    assert wcc_grad(z, [0, 0]).dtype == np.float32


def test_empty_and_misaligned():
    with pytest.raises(InvalidArgument):
        wcc_loss(np.zeros((0, 3)), [])
    with pytest.raises(InvalidArgument):
        wcc_grad(np.zeros((2, 3)), [0])
    with pytest.raises(InvalidArgument):
        class_centroids(np.zeros((0, 2)), [])


def test_total_loss():
    assert total_loss(1.2345, 99.0, WccConfig(0.0)) is 1.2345
    assert total_loss(2.0, 1.0, WccConfig(0.1)) == pytest.approx(2.1)
    gen = np.random.default_rng(3)
    ce, w = gen.uniform(0, 3, 2)
    vals = [total_loss(ce, w, WccConfig(lam)) for lam in (0.5, 1.0, 1.5)]
    assert vals[1] - vals[0] == pytest.approx(vals[2] - vals[1])


def test_negative_lambda():
    with pytest.raises(InvalidArgument):
        WccConfig(-0.1)
