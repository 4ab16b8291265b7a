"""
Linear-softmax policy
=====================

The policy factorises a response into an answer slot and a format flag::

    pi(a, f | x) = softmax(phi(x) . theta[:, :K])[a] * Bernoulli(f; sigmoid(phi(x) . theta[:, K]))

Scalar operations (one sample, one response) are thin wrappers around the
array routines used by the trainers, so both paths compute the same sums.
"""
from __future__ import absolute_import

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, DivergenceError
from .options import OPTIONS, STD_GUARD
from .response import StructuredResponse, answer_index
from .rewards import success_mask
from .utils import all_finite, log_sigmoid, log_softmax, sigmoid, softmax

logger = logging.getLogger(__name__)

__all__ = [
    "PolicyParams",
    "GradientVector",
    "StructuredResponse",
    "RolloutGroup",
    "init_params",
    "answer_distribution",
    "answer_distributions",
    "format_probability",
    "format_probabilities",
    "sample_response",
    "sample_responses",
    "log_prob",
    "log_probs",
    "grad_log_prob",
    "batch_nll",
    "grad_batch_nll",
    "sft_update",
    "sft_step",
    "group_weights",
    "grpo_direction",
    "grpo_update",
    "grpo_step",
    "snapshot_reference",
    "expected_success",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True, eq=False)
class PolicyParams(object):
    """
    Parameters of the policy.

    Parameters
    ----------
    theta : array-like
        shape ``(F, K + 1)``.  Columns ``0..K-1`` score the answer slots,
        column ``K`` is the format logit.  Stored as a read-only copy.
    step_count : int
        number of updates applied so far
    """

    theta: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[1] < 3:
            raise ContractError(f"theta must have shape (F, K + 1) with K >= 2, got {theta.shape}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "step_count", int(self.step_count))

    @property
    def n_features(self):
        return self.theta.shape[0]

    @property
    def n_answers(self):
        return self.theta.shape[1] - 1

    @property
    def shape(self):
        return self.theta.shape

    @property
    def answer_weights(self):
        return self.theta[:, :-1]

    @property
    def format_weights(self):
        return self.theta[:, -1]

    def is_finite(self):
        return all_finite(self.theta)

    def __repr__(self):
        return "<PolicyParams(F={}, K={}, step_count={})>".format(
            self.n_features, self.n_answers, self.step_count
        )


@dataclass(frozen=True, eq=False)
class GradientVector(object):
    """gradient with respect to ``theta`` (same shape)"""

    entries: np.ndarray

    @property
    def shape(self):
        return self.entries.shape

    def __array__(self, dtype=None):
        return np.asarray(self.entries, dtype=dtype)


@dataclass(frozen=True)
class RolloutGroup(object):
    """rollouts of one sample with their composite rewards"""

    sample: object
    responses: tuple
    rewards: tuple

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(
            self,
            "rewards",
            tuple(float(getattr(r, "composite", r)) for r in self.rewards),
        )
        if len(self.responses) != len(self.rewards):
            raise ContractError("responses and rewards differ in length")

    def __len__(self):
        return len(self.responses)


def init_params(n_features, n_answers):
    return PolicyParams(np.zeros((n_features, n_answers + 1)))


def _check_features(params, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.n_features:
        raise ContractError(
            f"feature length {x.shape[-1]} does not match policy with F={params.n_features}"
        )
    return x


def _check_sample(params, sample):
    if len(sample.answers) != params.n_answers:
        raise ContractError(
            f"sample {sample.id} has K={len(sample.answers)}, policy has K={params.n_answers}"
        )
    return _check_features(params, sample.features)


def _to_response(sample, slot, fmt):
    if sample.is_numeric:
        answer = float(sample.answers[slot])
    else:
        answer = int(slot)
    return StructuredResponse(format=bool(fmt), answer=answer)


###############################################################################
# distributions
###############################################################################
def answer_distributions(params, features):
    """softmax answer probabilities, shape ``(n, K)``"""
    x = _check_features(params, features)
    return softmax(np.atleast_2d(x) @ params.answer_weights, axis=-1)


def format_probabilities(params, features):
    x = _check_features(params, features)
    return sigmoid(np.atleast_2d(x) @ params.format_weights)


def answer_distribution(params, sample):
    return answer_distributions(params, _check_sample(params, sample))[0]


def format_probability(params, sample):
    return float(format_probabilities(params, _check_sample(params, sample))[0])


###############################################################################
# sampling
###############################################################################
def _draw(probs, p_format, rng):
    n = probs.shape[0]
    u = rng.random(n)
    cdf = np.cumsum(probs, axis=-1)
    slots = np.minimum((u[:, None] >= cdf).sum(axis=-1), probs.shape[1] - 1)
    formats = rng.random(n) < p_format
    # never land on a zero-probability slot through rounding in the cdf
    bad = probs[np.arange(n), slots] == 0.0
    if bad.any():
        slots[bad] = np.argmax(probs[bad], axis=-1)
    return slots, formats


def sample_responses(params, features, rng, size=1):
    """
    Draw `size` responses for each row of `features`.

    Returns
    -------
    slots : ndarray of int, shape ``(n, size)``
    formats : ndarray of bool, shape ``(n, size)``
    """
    probs = answer_distributions(params, features)
    p_format = format_probabilities(params, features)
    n = probs.shape[0]
    slots, formats = _draw(
        np.repeat(probs, size, axis=0), np.repeat(p_format, size), rng
    )
    return slots.reshape(n, size), formats.reshape(n, size)


def sample_response(params, sample, rng):
    slots, formats = sample_responses(params, _check_sample(params, sample), rng)
    return _to_response(sample, slots[0, 0], formats[0, 0])


###############################################################################
# log-probabilities and gradients
###############################################################################
def log_probs(params, features, slots, formats):
    """vector of ``log pi(slot, format | x)``"""
    x = np.atleast_2d(_check_features(params, features))
    slots = np.asarray(slots, dtype=np.int64)
    formats = np.asarray(formats, dtype=bool)
    lp_answer = log_softmax(x @ params.answer_weights, axis=-1)[np.arange(len(x)), slots]
    z = x @ params.format_weights
    lp_format = np.where(formats, log_sigmoid(z), log_sigmoid(-z))
    return lp_answer + lp_format


def log_prob(params, sample, response):
    """
    ``log pi(response | sample)``.

    Returns ``-inf`` (with a warning) when the response has zero probability
    under degenerate parameters.
    """
    x = _check_sample(params, sample)
    slot = answer_index(sample, response)
    lp = float(log_probs(params, x, [slot], [response.format])[0])
    if not np.isfinite(lp):
        logger.warning(
            "zero-probability response on sample %s (step %d)", sample.id, params.step_count
        )
        return -np.inf
    return lp


def _score_terms(params, x, slots, formats):
    """per-row coefficients ``(e_a - p, f - sigma)``"""
    probs = answer_distributions(params, x)
    coef = -probs
    coef[np.arange(len(x)), slots] += 1.0
    fcoef = np.asarray(formats, dtype=float) - format_probabilities(params, x)
    return coef, fcoef


def grad_log_prob(params, sample, response):
    """
    Analytic gradient of :func:`log_prob` with respect to ``theta``.

    Raises
    ------
    ContractError
        if the log-probability is not finite.
    """
    if not np.isfinite(log_prob(params, sample, response)):
        raise ContractError(f"log_prob of response on sample {sample.id} is not finite")
    x = np.atleast_2d(_check_sample(params, sample))
    slot = answer_index(sample, response)
    coef, fcoef = _score_terms(params, x, [slot], [response.format])
    g = np.empty(params.shape)
    g[:, :-1] = np.outer(x[0], coef[0])
    g[:, -1] = x[0] * fcoef[0]
    return GradientVector(g)


def batch_nll(params, features, slots, formats):
    """mean negative log-likelihood of target responses"""
    return float(-np.mean(log_probs(params, features, slots, formats)))


def grad_batch_nll(params, features, slots, formats):
    x = np.atleast_2d(_check_features(params, features))
    n = len(x)
    if n == 0:
        raise ContractError("empty batch")
    coef, fcoef = _score_terms(params, x, np.asarray(slots, dtype=np.int64), formats)
    g = np.empty(params.shape)
    g[:, :-1] = -(x.T @ coef) / n
    g[:, -1] = -(x.T @ fcoef) / n
    return g


def _batch_arrays(params, batch):
    batch = list(batch)
    if not batch:
        raise ContractError("empty batch")
    x = np.stack([_check_sample(params, s) for s, _ in batch])
    slots = np.array([answer_index(s, r) for s, r in batch], dtype=np.int64)
    formats = np.array([bool(r.format) for _, r in batch])
    return x, slots, formats


###############################################################################
# updates
###############################################################################
def sft_update(params, features, slots, formats, lr):
    """one gradient-descent step on the mean NLL of ``(slots, formats)``"""
    g = grad_batch_nll(params, features, slots, formats)
    if not all_finite(g):
        raise DivergenceError(
            f"non-finite SFT gradient at step {params.step_count} "
            f"(batch of {len(np.atleast_2d(features))})"
        )
    return PolicyParams(params.theta - lr * g, params.step_count + 1)


def sft_step(params, batch, lr):
    """
    SFT step on a batch of ``(sample, target_response)`` pairs.

    Returns ``params - lr * grad(mean NLL)``.
    """
    x, slots, formats = _batch_arrays(params, batch)
    return sft_update(params, x, slots, formats, lr)


def group_weights(rewards, guard=None):
    """
    Group-standardised weights ``(R - mean) / (std + guard)``.

    `rewards` has shape ``(G,)`` or ``(n_groups, G)``.  Groups whose rewards
    are all equal get exactly zero weights.
    """
    r = np.asarray(rewards, dtype=float)
    if r.shape[-1] < 2:
        raise ContractError(f"GRPO group needs at least 2 rollouts, got {r.shape[-1]}")
    if guard is None:
        guard = OPTIONS[STD_GUARD]
    w = (r - r.mean(axis=-1, keepdims=True)) / (r.std(axis=-1, keepdims=True) + guard)
    flat = np.all(r == r[..., :1], axis=-1)
    return np.where(flat[..., None], 0.0, w)


def grpo_direction(params, features, slots, formats, rewards):
    """
    Mean over groups of ``sum_i w_i grad log pi(y_i | x)``.

    Parameters
    ----------
    features : array, shape ``(n_groups, F)``
    slots, formats, rewards : arrays, shape ``(n_groups, G)``
    """
    x = np.atleast_2d(_check_features(params, features))
    slots = np.atleast_2d(np.asarray(slots, dtype=np.int64))
    formats = np.atleast_2d(np.asarray(formats, dtype=float))
    w = np.atleast_2d(group_weights(rewards))
    n, K = len(x), params.n_answers

    probs = answer_distributions(params, x)
    p_format = format_probabilities(params, x)

    onehot = slots[..., None] == np.arange(K)
    coef = np.einsum("ng,ngk->nk", w, onehot) - w.sum(axis=-1)[:, None] * probs
    fcoef = (w * (formats - p_format[:, None])).sum(axis=-1)

    d = np.empty(params.shape)
    d[:, :-1] = (x.T @ coef) / n
    d[:, -1] = (x.T @ fcoef) / n
    return d


def grpo_update(params, features, slots, formats, rewards, lr):
    d = grpo_direction(params, features, slots, formats, rewards)
    if not all_finite(d):
        raise DivergenceError(f"non-finite GRPO direction at step {params.step_count}")
    return PolicyParams(params.theta + lr * d, params.step_count + 1)


def grpo_step(params, ref_params, groups, lr):
    """
    GRPO ascent step over a list of :class:`RolloutGroup`.

    Rollouts are taken to come from the current policy.  `ref_params` is
    validated but enters no KL term.
    """
    groups = list(groups)
    if not groups:
        raise ContractError("no rollout groups")
    if ref_params.shape != params.shape:
        raise ContractError("reference policy shape differs from policy shape")
    total = np.zeros(params.shape)
    for group in groups:
        if len(group) < 2:
            raise ContractError(
                f"GRPO group for sample {group.sample.id} has {len(group)} rollouts"
            )
        x = _check_sample(params, group.sample)
        slots = [answer_index(group.sample, r) for r in group.responses]
        formats = [bool(r.format) for r in group.responses]
        total += grpo_direction(params, x, [slots], [formats], [group.rewards])
    d = total / len(groups)
    if not all_finite(d):
        raise DivergenceError(f"non-finite GRPO direction at step {params.step_count}")
    return PolicyParams(params.theta + lr * d, params.step_count + 1)


def snapshot_reference(params):
    return PolicyParams(params.theta.copy(), params.step_count)


###############################################################################
# evaluation / persistence
###############################################################################
def expected_success(params, suite, spec):
    """exact ``E[is_success]`` per sample of `suite`"""
    if len(suite) == 0:
        return np.zeros(0)
    probs = answer_distributions(params, suite.features)
    p_format = format_probabilities(params, suite.features)
    return p_format * (probs * success_mask(spec, suite)).sum(axis=-1)


def save_checkpoint(params, path):
    """text matrix dump with header ``F K step_count``"""
    np.savetxt(
        path,
        params.theta,
        fmt="%.17g",
        header="{} {} {}".format(params.n_features, params.n_answers, params.step_count),
    )


def load_checkpoint(path):
    with open(path) as f:
        header = f.readline().lstrip("#").split()
    try:
        F, K, step_count = (int(v) for v in header)
    except ValueError:
        raise ContractError(f"{path}: bad checkpoint header {header!r}")
    theta = np.loadtxt(path, ndmin=2)
    if theta.shape != (F, K + 1):
        raise ContractError(f"{path}: header says ({F}, {K + 1}), data is {theta.shape}")
    params = PolicyParams(theta, step_count)
    if not params.is_finite():
        raise ContractError(f"{path}: non-finite parameters")
    return params
