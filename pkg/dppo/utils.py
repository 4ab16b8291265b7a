from __future__ import absolute_import

import logging

import numpy as np
from numba import njit

from .options import OPTIONS

logger = logging.getLogger(__name__)


def myjit(func):
    """
    "my" jit function
    uses option inline='always', fastmath from OPTIONS
    """
    return njit(inline="always", fastmath=OPTIONS["fastmath"], cache=OPTIONS["cache"])(
        func
    )


###############################################################################
# softmax / sigmoid
###############################################################################
def logsumexp(x, axis=-1):
    """max-shifted log(sum(exp(x))) along axis"""
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    # all -inf rows
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    return x - np.expand_dims(logsumexp(x, axis=axis), axis)


def softmax(x, axis=-1):
    """
    softmax along axis

    Normalised by explicit division so rows sum to one to rounding error.
    """
    x = np.asarray(x, dtype=float)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-np.logaddexp(0.0, -z))


def log_sigmoid(z):
    """log(sigmoid(z)), stable for large |z|"""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


###############################################################################
# random streams
###############################################################################
def seed_sequence(seed, *keys):
    """
    SeedSequence derived from `seed` and a tuple of integer keys.

    Identical (seed, keys) always give the same stream, and streams with
    different keys are statistically independent.
    """
    return np.random.SeedSequence(
        entropy=int(seed) % 2 ** 64, spawn_key=tuple(int(k) for k in keys)
    )


def rng_stream(seed, *keys):
    """numpy Generator for :func:`seed_sequence` ``(seed, *keys)``"""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def stream_seed(seed, *keys):
    """64 bit integer identifying a derived stream (stored in rollout records)"""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])


###############################################################################
# checks
###############################################################################
def all_finite(x):
    return bool(np.all(np.isfinite(x)))


def finite_difference(func, x0, eps=1e-6):
    """
    Centered finite-difference gradient of scalar `func` at `x0`.

    Parameters
    ----------
    func : callable
        ``func(x) -> float`` with `x` of the same shape as `x0`.
    x0 : array-like
    eps : float
        perturbation applied to each entry in turn.

    Returns
    -------
    grad : ndarray
        same shape as `x0`
    """
    x0 = np.array(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    logger.debug("finite difference over %d entries, eps=%g", x0.size, eps)

    x = x0.copy()
    xf = x.reshape(-1)
    for j in range(x0.size):
        orig = xf[j]
        xf[j] = orig + eps
        fplus = func(x)
        xf[j] = orig - eps
        fminus = func(x)
        xf[j] = orig
        flat[j] = (fplus - fminus) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-8):
    """
    norm-wise relative error ``||a - b|| / max(||a||, ||b||, floor)``

    `floor` keeps round-off on an exactly vanishing gradient from reading as
    a relative error of 1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
