"""
Rule-based multi-task rewards
=============================

Composite reward ``R = lambda_f * R_f + lambda_t * R_t`` and the binary
success predicate used for success rates.
"""
from __future__ import absolute_import

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ContractError
from .response import answer_index

__all__ = [
    "RewardSpec",
    "RewardBreakdown",
    "format_reward",
    "task_reward",
    "composite_reward",
    "is_success",
    "batch_rewards",
    "success_mask",
]


@dataclass(frozen=True)
class RewardSpec(object):
    """
    Reward weights and success threshold.

    Parameters
    ----------
    lambda_f : float
        weight of the format term
    lambda_t : float
        weight of the task term
    numeric_success_threshold : float
        minimum task reward counted as a success on numeric samples
    """

    lambda_f: float = 0.1
    lambda_t: float = 0.9
    numeric_success_threshold: float = 0.75

    def __post_init__(self):
        for name in ("lambda_f", "lambda_t"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"must be finite and >= 0, got {v}", f"reward.{name}")
        if not self.lambda_f + self.lambda_t > 0:
            raise ConfigError("lambda_f + lambda_t must be positive", "reward")
        if not 0 < self.numeric_success_threshold <= 1:
            raise ConfigError(
                f"must be in (0, 1], got {self.numeric_success_threshold}",
                "reward.numeric_success_threshold",
            )

    @property
    def max_reward(self):
        return self.lambda_f + self.lambda_t


@dataclass(frozen=True)
class RewardBreakdown(object):
    r_format: float
    r_task: float
    composite: float


def format_reward(response):
    return 1.0 if (response.format and response.has_answer) else 0.0


def _numeric_task_reward(predicted, target, tolerance):
    return max(0.0, 1.0 - abs(predicted - target) / tolerance)


def task_reward(sample, response):
    """
    Task reward of `response` on `sample`, in [0, 1].

    Choice skills score exact matches with the gold index.  The numeric skill
    scores ``max(0, 1 - |predicted - target| / tolerance)``.

    Raises
    ------
    ContractError
        if the response kind does not match the sample's skill, or the
        response carries no answer.
    """
    idx = answer_index(sample, response)
    if sample.is_numeric:
        return _numeric_task_reward(
            float(response.answer), float(sample.target), float(sample.tolerance)
        )
    return 1.0 if idx == sample.gold else 0.0


def composite_reward(spec, sample, response):
    r_format = format_reward(response)
    r_task = task_reward(sample, response)
    return RewardBreakdown(
        r_format=r_format,
        r_task=r_task,
        composite=spec.lambda_f * r_format + spec.lambda_t * r_task,
    )


def is_success(sample, response, spec):
    """format flag set and task solved (numeric: reward above threshold)"""
    if not response.format or not response.has_answer:
        return False
    try:
        r_task = task_reward(sample, response)
    except ContractError:
        return False
    if sample.is_numeric:
        return r_task >= spec.numeric_success_threshold
    return r_task == 1.0


###############################################################################
# array versions
###############################################################################
def _task_rewards(suite, rows, answer_idx):
    rows = np.asarray(rows, dtype=np.int64)
    answer_idx = np.asarray(answer_idx, dtype=np.int64)
    numeric = suite.numeric[rows]

    r_task = (answer_idx == suite.gold[rows]).astype(float)
    if numeric.any():
        nrows = rows[numeric]
        predicted = suite.answers[nrows, answer_idx[numeric]]
        err = np.abs(predicted - suite.targets[nrows]) / suite.tolerance[nrows]
        r_task[numeric] = np.maximum(0.0, 1.0 - err)
    return r_task, numeric


def batch_rewards(spec, suite, rows, answer_idx, formats):
    """
    Rewards for policy responses given as answer slots.

    Parameters
    ----------
    spec : RewardSpec
    suite : SampleSet
    rows : array-like of int
        row of each response's sample in `suite`
    answer_idx : array-like of int
        chosen answer slot.  For the numeric skill the predicted value is
        ``suite.answers[row, slot]``.
    formats : array-like of bool

    Returns
    -------
    r_format, r_task, composite : ndarray of float
    success : ndarray of bool
    """
    formats = np.asarray(formats, dtype=bool)
    r_task, numeric = _task_rewards(suite, rows, answer_idx)
    r_format = formats.astype(float)
    composite = spec.lambda_f * r_format + spec.lambda_t * r_task
    success = np.where(
        numeric, r_task >= spec.numeric_success_threshold, r_task == 1.0
    ) & formats
    return r_format, r_task, composite, success


def success_mask(spec, suite):
    """
    Boolean array ``(len(suite), K)``: answer slot a solves sample i
    (assuming the format flag is set).
    """
    n, k = len(suite), suite.n_answers
    rows = np.repeat(np.arange(n), k)
    slots = np.tile(np.arange(k), n)
    _, _, _, success = batch_rewards(spec, suite, rows, slots, np.ones(n * k, dtype=bool))
    return success.reshape(n, k)
