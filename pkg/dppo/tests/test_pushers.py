import numpy as np
import pytest

from dppo.pushers import COUNT_SUCCESS, COUNT_T, _success_rates, factory_pushers


def empty(n):
    return np.zeros((n, 2), dtype=np.int64), np.full(n, -1, dtype=np.int64)


def test_push_scalar():
    counts, epochs = empty(2)
    push = factory_pushers(vec=False)
    for success in (True, False, True):
        push(counts, epochs, 1, 0, success)
    np.testing.assert_array_equal(counts, [[0, 0], [3, 2]])
    np.testing.assert_array_equal(epochs, [-1, 0])


def test_push_vec_matches_scalar():
    rng = np.random.default_rng(0)
    rows = rng.integers(0, 5, size=200)
    successes = rng.random(200) < 0.4

    a, ea = empty(5)
    factory_pushers(vec=True)(a, ea, rows, 2, successes)

    b, eb = empty(5)
    for r, s in zip(rows, successes):
        factory_pushers(vec=False)(b, eb, r, 2, s)

    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[:, COUNT_T], np.bincount(rows, minlength=5))
    np.testing.assert_array_equal(
        a[:, COUNT_SUCCESS], np.bincount(rows, weights=successes, minlength=5)
    )


@pytest.mark.parametrize("epoch, expected", [(0, [5, 3]), (1, [1, 1]), (-1, [4, 2])])
def test_push_epoch(epoch, expected):
    counts, epochs = empty(1)
    push = factory_pushers(vec=False)
    for success in (True, True, False, False):
        push(counts, epochs, 0, 0, success)
    # newer epoch restarts the row, older epoch is ignored
    push(counts, epochs, 0, epoch, True)
    np.testing.assert_array_equal(counts[0], expected)
    assert epochs[0] == max(epoch, 0)


def test_success_rates():
    counts = np.array([[4, 1], [0, 0], [2, 2]], dtype=np.int64)
    out = np.empty(3)
    _success_rates(counts, out)
    np.testing.assert_allclose(out, [0.25, -1.0, 1.0])
