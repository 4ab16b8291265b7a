"""
Preference-learning checks
==========================

Plackett-Luce ranking likelihoods over implicit rewards
``r = beta * log(pi / pi_ref)``, the universal preference objective and its
reduction to supervised negative log-likelihood on expert trajectories.
"""
from __future__ import absolute_import

import enum
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .exceptions import ConfigError, ContractError
from .options import MAX_PL_ITEMS, OPTIONS
from .policy import (
    PolicyParams,
    _batch_arrays,
    grad_batch_nll,
    grad_log_prob,
    group_weights,
    grpo_direction,
    log_prob,
    sample_response,
)
from .taskgen import SuiteConfig, generate_suite, teacher_solve
from .utils import finite_difference, myjit, relative_error, rng_stream

logger = logging.getLogger(__name__)

__all__ = [
    "PreferenceKind",
    "PreferenceSample",
    "ImplicitRewardConfig",
    "implicit_reward",
    "pl_log_prob",
    "pl_ranking_prob",
    "pl_permutation_probs",
    "pl_normalization_check",
    "upl_objective",
    "grad_upl_objective",
    "sft_pl_equivalence_check",
    "run_checks",
]


class PreferenceKind(enum.Enum):
    EXPERT_TRAJECTORY = "expert"
    RANKED_LIST = "ranked"


@dataclass(frozen=True)
class PreferenceSample(object):
    """
    A preference datum.

    Either a single expert ``(sample, response)`` pair or a ranking
    ``((sample, y_1), (sample, y_2), ...)`` with ``y_1`` preferred most.
    Use :meth:`expert_trajectory` and :meth:`ranked_list` to build one.
    """

    kind: PreferenceKind
    expert: tuple = None
    ranking: tuple = None

    def __post_init__(self):
        if self.kind is PreferenceKind.EXPERT_TRAJECTORY:
            if self.expert is None or len(self.expert) != 2:
                raise ContractError("expert trajectory needs a (sample, response) pair")
        elif self.kind is PreferenceKind.RANKED_LIST:
            ranking = tuple(tuple(item) for item in (self.ranking or ()))
            if len(ranking) < 2:
                raise ContractError(f"ranked list needs k >= 2 entries, got {len(ranking)}")
            if len({s.id for s, _ in ranking}) != 1:
                raise ContractError("ranked list entries must share one sample")
            object.__setattr__(self, "ranking", ranking)
        else:
            raise ContractError(f"unknown preference kind {self.kind!r}")

    @classmethod
    def expert_trajectory(cls, sample, response):
        return cls(PreferenceKind.EXPERT_TRAJECTORY, expert=(sample, response))

    @classmethod
    def ranked_list(cls, sample, responses):
        return cls(PreferenceKind.RANKED_LIST, ranking=tuple((sample, r) for r in responses))


@dataclass(frozen=True)
class ImplicitRewardConfig(object):
    beta: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ConfigError(
                f"beta must be finite and positive, got {self.beta}", "prefcheck.beta"
            )


def implicit_reward(params, ref_params, sample, response, beta=1.0):
    """``beta * (log pi(response) - log pi_ref(response))``"""
    lp = log_prob(params, sample, response)
    lp_ref = log_prob(ref_params, sample, response)
    if not (np.isfinite(lp) and np.isfinite(lp_ref)):
        raise ContractError(f"infinite log-probability on sample {sample.id}")
    return beta * (lp - lp_ref)


###############################################################################
# Plackett-Luce
###############################################################################
@myjit
def _pl_log_prob(rewards):
    k = rewards.shape[0]
    total = 0.0
    for i in range(k - 1):
        m = rewards[i]
        for j in range(i + 1, k):
            if rewards[j] > m:
                m = rewards[j]
        s = 0.0
        for j in range(i, k):
            s += math.exp(rewards[j] - m)
        total += rewards[i] - m - math.log(s)
    return total


@myjit
def _pl_reward_grad(rewards, out):
    # d log P / d r_i = [i < k - 1] - sum_{j <= i, j < k - 1} softmax(r_j, ..., r_k)_i
    k = rewards.shape[0]
    for i in range(k - 1):
        out[i] = 1.0
    out[k - 1] = 0.0
    for j in range(k - 1):
        m = rewards[j]
        for i in range(j + 1, k):
            if rewards[i] > m:
                m = rewards[i]
        s = 0.0
        for i in range(j, k):
            s += math.exp(rewards[i] - m)
        for i in range(j, k):
            out[i] -= math.exp(rewards[i] - m) / s


def _check_rewards(rewards):
    r = np.ascontiguousarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ContractError(f"ranking needs k >= 2 rewards, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ContractError("non-finite rewards")
    return r


def pl_log_prob(rewards):
    """log-probability of the ranking ``r_1 > r_2 > ... > r_k``"""
    return float(_pl_log_prob(_check_rewards(rewards)))


def pl_ranking_prob(rewards):
    """
    Plackett-Luce probability of the listed order,
    ``prod_i exp(r_i) / sum_{j >= i} exp(r_j)``.

    Examples
    --------
    >>> round(pl_ranking_prob([np.log(2.0), 0.0]), 12)
    0.666666666667
    """
    return math.exp(pl_log_prob(rewards))


def pl_permutation_probs(rewards_by_item):
    """
    Probabilities of every ordering of the items.

    Returns
    -------
    orders : ndarray of int, shape ``(k!, k)``
        item indices, most preferred first
    probs : ndarray of float, shape ``(k!,)``
    """
    r = _check_rewards(rewards_by_item)
    k = len(r)
    if k > OPTIONS[MAX_PL_ITEMS]:
        raise ContractError(
            f"refusing to enumerate {k}! orderings (max_pl_items={OPTIONS[MAX_PL_ITEMS]})"
        )
    orders = np.array(list(itertools.permutations(range(k))), dtype=np.int64)
    probs = np.array([math.exp(_pl_log_prob(np.ascontiguousarray(r[o]))) for o in orders])
    return orders, probs


def pl_normalization_check(rewards_by_item, k=None):
    """total Plackett-Luce probability over all orderings of the first `k` items"""
    r = np.asarray(rewards_by_item, dtype=float)
    if k is not None:
        r = r[:k]
    _, probs = pl_permutation_probs(r)
    return float(probs.sum())


###############################################################################
# universal objective
###############################################################################
def _check_dataset(dataset):
    dataset = list(dataset)
    if not dataset:
        raise ContractError("empty preference dataset")
    return dataset


def _ranked_rewards(params, ref_params, datum, beta):
    return np.array(
        [implicit_reward(params, ref_params, s, y, beta) for s, y in datum.ranking]
    )


def upl_objective(params, ref_params, dataset, beta=1.0):
    """
    Mean ``log P(c | pi)`` over a preference dataset.

    Expert trajectories contribute their log-likelihood; ranked lists the
    Plackett-Luce log-probability of their implicit rewards.
    """
    values = []
    for datum in _check_dataset(dataset):
        if datum.kind is PreferenceKind.EXPERT_TRAJECTORY:
            values.append(log_prob(params, *datum.expert))
        else:
            values.append(pl_log_prob(_ranked_rewards(params, ref_params, datum, beta)))
    return float(np.mean(values))


def grad_upl_objective(params, ref_params, dataset, beta=1.0, reduce="mean"):
    """
    Gradient of :func:`upl_objective` with respect to ``params.theta``.

    Parameters
    ----------
    reduce : {"mean", "sum"}
        ``"sum"`` returns the gradient of the summed log-probabilities.
    """
    dataset = _check_dataset(dataset)
    total = np.zeros(params.shape)
    for datum in dataset:
        if datum.kind is PreferenceKind.EXPERT_TRAJECTORY:
            total += grad_log_prob(params, *datum.expert).entries
        else:
            r = _ranked_rewards(params, ref_params, datum, beta)
            dr = np.empty_like(r)
            _pl_reward_grad(r, dr)
            for coef, (s, y) in zip(dr, datum.ranking):
                if coef != 0.0:
                    total += beta * coef * grad_log_prob(params, s, y).entries
    if reduce == "mean":
        return total / len(dataset)
    elif reduce == "sum":
        return total
    raise ValueError(f"unknown reduce {reduce!r}")


def sft_pl_equivalence_check(params, expert_batch, tol=1e-10):
    """
    Compare the expert branch of the universal objective with supervised NLL.

    Returns
    -------
    report : dict
        ``max_abs_gradient_diff`` between ``grad upl`` and ``-grad NLL``,
        and whether it is below `tol`.
    """
    expert_batch = list(expert_batch)
    dataset = [PreferenceSample.expert_trajectory(s, y) for s, y in expert_batch]
    g_upl = grad_upl_objective(params, params, dataset)
    g_sft = grad_batch_nll(params, *_batch_arrays(params, expert_batch))
    diff = float(np.max(np.abs(g_upl + g_sft)))
    return {"max_abs_gradient_diff": diff, "threshold": tol, "passed": diff < tol}


###############################################################################
# check suite
###############################################################################
def _check_row(check, statistic, threshold, strict=True):
    passed = statistic < threshold if strict else statistic <= threshold
    return {
        "check": check,
        "statistic": float(statistic),
        "threshold": threshold,
        "passed": bool(passed),
    }


def _random_params(rng, n_features, n_answers, scale=0.5):
    return PolicyParams(scale * rng.standard_normal((n_features, n_answers + 1)))


def run_checks(seed=0, n_trials=20, beta=1.0):
    """
    Run the preference-learning and gradient checks.

    `beta` scales the implicit rewards of the ranked-list gradient check.

    Returns
    -------
    report : pandas.DataFrame
        columns ``check, statistic, threshold, passed``
    """
    rng = rng_stream(seed, 7)
    suite = generate_suite(SuiteConfig(count_per_skill=10), seed)
    F, K = suite.n_features, suite.n_answers
    rows = []

    for k in range(2, 6):
        err = max(
            abs(pl_normalization_check(rng.normal(scale=2.0, size=k)) - 1.0)
            for _ in range(n_trials)
        )
        rows.append(_check_row(f"pl_normalization_k{k}", err, 1e-9))

    err = 0.0
    for _ in range(n_trials):
        r = rng.normal(size=int(rng.integers(2, 7)))
        c = rng.normal(scale=10.0)
        err = max(err, abs(pl_ranking_prob(r) - pl_ranking_prob(r + c)))
    rows.append(_check_row("pl_shift_invariance", err, 1e-12))

    err = 0.0
    for _ in range(n_trials):
        params = _random_params(rng, F, K)
        picks = rng.integers(0, len(suite), size=int(rng.integers(1, 16)))
        batch = [(suite[i], teacher_solve(suite[i]).response) for i in picks]
        err = max(err, sft_pl_equivalence_check(params, batch)["max_abs_gradient_diff"])
    rows.append(_check_row("sft_pl_gradient_equivalence", err, 1e-10))

    err = 0.0
    for _ in range(n_trials):
        params = _random_params(rng, F, K)
        sample = suite[int(rng.integers(len(suite)))]
        for _ in range(4):
            y = sample_response(params, sample, rng)
            r = implicit_reward(params, params, sample, y, beta=rng.uniform(0.1, 5.0))
            err = max(err, abs(r))
    rows.append(_check_row("implicit_reward_identity", err, 0.0, strict=False))

    err = 0.0
    for _ in range(n_trials):
        params = _random_params(rng, F, K)
        sample = suite[int(rng.integers(len(suite)))]
        y = sample_response(params, sample, rng)
        fd = finite_difference(
            lambda t: log_prob(PolicyParams(t), sample, y), params.theta, eps=1e-6
        )
        err = max(err, relative_error(grad_log_prob(params, sample, y).entries, fd))
    rows.append(_check_row("grad_log_prob_finite_difference", err, 1e-5))

    err = 0.0
    for _ in range(n_trials // 4 or 1):
        params = _random_params(rng, F, K)
        ref = _random_params(rng, F, K)
        sample = suite[int(rng.integers(len(suite)))]
        ys = [sample_response(params, sample, rng) for _ in range(3)]
        data = [PreferenceSample.ranked_list(sample, ys)]
        fd = finite_difference(
            lambda t: upl_objective(PolicyParams(t), ref, data, beta), params.theta, eps=1e-6
        )
        err = max(err, relative_error(grad_upl_objective(params, ref, data, beta), fd))
    rows.append(_check_row("ranked_list_gradient_finite_difference", err, 1e-5))

    rewards = rng.integers(0, 3, size=(n_trials * 10, 8)).astype(float)
    w = group_weights(rewards)
    rows.append(_check_row("grpo_weights_mean_zero", np.max(np.abs(w.sum(axis=-1))), 1e-9))

    params = _random_params(rng, F, K)
    x = suite.features[:4]
    flat = np.full((4, 8), 0.55)
    d = grpo_direction(
        params, x, rng.integers(0, K, size=(4, 8)), rng.random((4, 8)) < 0.5, flat
    )
    rows.append(_check_row("grpo_flat_group_zero", np.max(np.abs(d)), 0.0, strict=False))

    report = pd.DataFrame(rows, columns=["check", "statistic", "threshold", "passed"])
    for r in report.itertuples():
        log = logger.info if r.passed else logger.warning
        log(
            "%-32s %.3e (threshold %.0e) %s",
            r.check,
            r.statistic,
            r.threshold,
            "ok" if r.passed else "FAILED",
        )
    return report
