"""
Difficulty-aware rollout curation
=================================

Per-sample success bookkeeping, the rebalancing rules applied before RL,
stagnation scores and the collection of complete-failure samples for SFT.
"""
from __future__ import absolute_import

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .cached_decorators import cached_clear, gcached
from .exceptions import ConfigError, ContractError, UndefinedStatError
from .pushers import COUNT_SUCCESS, COUNT_T, _success_rates, factory_pushers
from .response import StructuredResponse
from .rewards import RewardBreakdown, batch_rewards, composite_reward, is_success
from .taskgen import SkillDimension, teacher_solve
from .utils import myjit

logger = logging.getLogger(__name__)

__all__ = [
    "RolloutRecord",
    "RolloutBatch",
    "SampleStats",
    "DifficultyBuffer",
    "DatasetPartition",
    "RolloutLog",
    "make_record",
    "make_batch",
    "log_rollout",
    "log_rollouts",
    "success_rate",
    "rebalance",
    "delta",
    "deltas",
    "sample_stagnation",
    "stagnations",
    "task_stagnation",
    "task_stagnation_by_skill",
    "should_stop",
    "collect_weak",
    "reset",
    "stats_frame",
    "read_rollout_log",
    "recompute_success_rates",
]

EPSILON_RANGE = (0.05, 0.2)


def _check_epsilon(epsilon):
    lo, hi = EPSILON_RANGE
    if not lo < epsilon < hi:
        raise ConfigError(f"epsilon must lie in ({lo}, {hi}), got {epsilon}", "stagnation.epsilon")


###############################################################################
# formulas
###############################################################################
@myjit
def _delta(s_r, s_r_prev, epsilon):
    # absent previous rate is stored as nan
    if s_r_prev != s_r_prev:
        return 1.0
    return min(1.0, abs(s_r - s_r_prev) / epsilon)


@myjit
def _stagnation(s_r, d):
    return 1.0 - 4.0 * s_r * (1.0 - s_r) * d


@myjit
def _deltas(s_r, s_r_prev, epsilon, out):
    for i in range(s_r.shape[0]):
        out[i] = _delta(s_r[i], s_r_prev[i], epsilon)


@myjit
def _stagnations(s_r, d, out):
    for i in range(s_r.shape[0]):
        out[i] = _stagnation(s_r[i], d[i])


def delta(s_r, s_r_prev, epsilon):
    """
    Normalised change ``min(1, |S_R - S_R_prev| / epsilon)``.

    A missing previous rate (``None``) counts as maximal change.
    """
    _check_epsilon(epsilon)
    prev = np.nan if s_r_prev is None else float(s_r_prev)
    return float(_delta(float(s_r), prev, float(epsilon)))


def deltas(s_r, s_r_prev, epsilon):
    """vector :func:`delta`, with ``nan`` marking absent previous rates"""
    _check_epsilon(epsilon)
    s_r = np.ascontiguousarray(s_r, dtype=float)
    out = np.empty_like(s_r)
    _deltas(s_r, np.ascontiguousarray(s_r_prev, dtype=float), float(epsilon), out)
    return out


def sample_stagnation(s_r, delta):
    """``S_S = 1 - 4 S_R (1 - S_R) delta``"""
    return float(_stagnation(float(s_r), float(delta)))


def stagnations(s_r, d):
    s_r = np.ascontiguousarray(s_r, dtype=float)
    out = np.empty_like(s_r)
    _stagnations(s_r, np.ascontiguousarray(d, dtype=float), out)
    return out


def should_stop(task_s_s, threshold):
    return task_s_s >= threshold


###############################################################################
# records
###############################################################################
@dataclass(frozen=True)
class RolloutRecord(object):
    """
    One scored rollout.

    `timestamp` is assigned by the buffer the record is logged into.
    """

    sample_id: int
    loop: int
    response: StructuredResponse
    reward: object
    success: bool
    rng_seed: int = 0
    timestamp: int = None
    epoch: int = 0


def make_record(sample, response, spec, loop, epoch=0, rng_seed=0):
    """score `response` and wrap it in a :class:`RolloutRecord`"""
    return RolloutRecord(
        sample_id=sample.id,
        loop=loop,
        response=response,
        reward=composite_reward(spec, sample, response),
        success=is_success(sample, response, spec),
        rng_seed=rng_seed,
        epoch=epoch,
    )


@dataclass(frozen=True, eq=False)
class RolloutBatch(object):
    """
    Column form of many rollouts.

    All array fields have the same length.  `counter` is filled in when the
    batch is logged.
    """

    sample_ids: np.ndarray
    slots: np.ndarray
    formats: np.ndarray
    answers: np.ndarray
    r_format: np.ndarray
    r_task: np.ndarray
    composite: np.ndarray
    success: np.ndarray
    loop: int
    epoch: int
    rng_seed: int = 0
    counter: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.sample_ids)

    def to_frame(self):
        return pd.DataFrame(
            {
                "sample_id": self.sample_ids,
                "loop": np.full(len(self), self.loop, dtype=np.int64),
                "epoch": np.full(len(self), self.epoch, dtype=np.int64),
                "format": self.formats.astype(np.int64),
                "slot": self.slots,
                "answer": self.answers,
                "r_format": self.r_format,
                "r_task": self.r_task,
                "composite": self.composite,
                "success": self.success.astype(np.int64),
                "seed": np.full(len(self), self.rng_seed, dtype=np.uint64),
                "counter": self.counter,
            }
        )

    def records(self, suite):
        for i in range(len(self)):
            sample = suite.get(self.sample_ids[i])
            answer = float(self.answers[i]) if sample.is_numeric else int(self.slots[i])
            yield RolloutRecord(
                sample_id=int(self.sample_ids[i]),
                loop=self.loop,
                response=StructuredResponse(format=bool(self.formats[i]), answer=answer),
                reward=RewardBreakdown(
                    float(self.r_format[i]), float(self.r_task[i]), float(self.composite[i])
                ),
                success=bool(self.success[i]),
                rng_seed=self.rng_seed,
                timestamp=None if self.counter is None else int(self.counter[i]),
                epoch=self.epoch,
            )


def make_batch(suite, spec, rows, slots, formats, loop, epoch, rng_seed=0):
    """
    Score policy draws.

    Parameters
    ----------
    suite : SampleSet
    spec : RewardSpec
    rows : array of int
        rows of `suite`, one per rollout
    slots, formats : arrays
        policy draws, one per rollout
    """
    rows = np.asarray(rows, dtype=np.int64)
    slots = np.asarray(slots, dtype=np.int64)
    formats = np.asarray(formats, dtype=bool)
    r_format, r_task, composite, success = batch_rewards(spec, suite, rows, slots, formats)
    answers = np.where(suite.numeric[rows], suite.answers[rows, slots], slots.astype(float))
    return RolloutBatch(
        sample_ids=suite.ids[rows],
        slots=slots,
        formats=formats,
        answers=answers,
        r_format=r_format,
        r_task=r_task,
        composite=composite,
        success=success,
        loop=int(loop),
        epoch=int(epoch),
        rng_seed=int(rng_seed),
    )


###############################################################################
# buffer
###############################################################################
@dataclass(frozen=True)
class SampleStats(object):
    sample_id: int
    skill: SkillDimension
    rollouts_this_round: int
    successes: int
    s_r: float
    s_r_prev: float
    delta: float
    s_s: float

    @property
    def T(self):
        return self.rollouts_this_round


class DifficultyBuffer(object):
    """
    Rollout statistics for the samples of a suite.

    Parameters
    ----------
    suite : SampleSet
        every sample that may be logged
    epsilon : float
        change scale for the stagnation delta, in ``(0.05, 0.2)``
    threshold : float
        task stagnation level at which RL stops on a task
    log : RolloutLog, optional
        persistent append-only log receiving every logged rollout
    """

    def __init__(self, suite, epsilon=0.1, threshold=0.7, log=None):
        _check_epsilon(epsilon)
        self.suite = suite
        self.epsilon = float(epsilon)
        self.threshold = float(threshold)
        self.log = log

        n = len(suite)
        self._counts = np.zeros((n, 2), dtype=np.int64)
        self._epochs = np.full(n, -1, dtype=np.int64)
        self._prev = np.full(n, np.nan)
        self._batches = []
        self._counter = 0

        max_id = int(suite.ids.max()) if n else -1
        self._id_rows = np.full(max_id + 1, -1, dtype=np.int64)
        self._id_rows[suite.ids] = np.arange(n)
        self._cache = {}

    def __repr__(self):
        return "<DifficultyBuffer(samples={}, observed={}, records={})>".format(
            len(self.suite), int(self.observed.sum()), self.n_records
        )

    def rows_of(self, sample_ids):
        ids = np.asarray(sample_ids, dtype=np.int64)
        bad = (ids < 0) | (ids >= len(self._id_rows))
        rows = np.where(bad, -1, self._id_rows[np.where(bad, 0, ids)])
        if (rows < 0).any():
            raise ContractError(f"unknown sample id(s) {ids[rows < 0][:5].tolist()}")
        return rows

    @property
    def counts(self):
        out = self._counts.view()
        out.setflags(write=False)
        return out

    @property
    def n_records(self):
        return sum(len(b) for b in self._batches)

    @property
    def batches(self):
        return tuple(self._batches)

    @property
    def records(self):
        """current-round records, oldest first"""
        out = []
        for b in self._batches:
            out.extend(b.records(self.suite))
        return out

    def _check_epoch(self, rows, epoch):
        current = self._epochs[rows]
        if (current > int(epoch)).any():
            raise ContractError(
                f"epoch {epoch} outcome for a sample already at epoch {int(current.max())}"
            )

    def _stamp(self, n):
        counter = np.arange(self._counter, self._counter + n, dtype=np.int64)
        self._counter += n
        return counter

    @cached_clear()
    def push_record(self, record):
        row = self.rows_of([record.sample_id])[0]
        self._check_epoch([row], record.epoch)
        record = replace(record, timestamp=int(self._stamp(1)[0]))
        factory_pushers(vec=False)(
            self._counts, self._epochs, row, int(record.epoch), bool(record.success)
        )
        sample = self.suite[row]
        slot = np.argmin(np.abs(np.asarray(sample.answers) - float(record.response.answer)))
        batch = RolloutBatch(
            sample_ids=np.array([record.sample_id], dtype=np.int64),
            slots=np.array([slot], dtype=np.int64),
            formats=np.array([bool(record.response.format)]),
            answers=np.array([float(record.response.answer)]),
            r_format=np.array([record.reward.r_format]),
            r_task=np.array([record.reward.r_task]),
            composite=np.array([record.reward.composite]),
            success=np.array([bool(record.success)]),
            loop=record.loop,
            epoch=record.epoch,
            rng_seed=record.rng_seed,
            counter=np.array([record.timestamp], dtype=np.int64),
        )
        self._append(batch)
        return record

    @cached_clear()
    def push_batch(self, batch):
        rows = self.rows_of(batch.sample_ids)
        self._check_epoch(rows, batch.epoch)
        batch = replace(batch, counter=self._stamp(len(batch)))
        factory_pushers(vec=True)(
            self._counts, self._epochs, rows, int(batch.epoch), batch.success.astype(np.bool_)
        )
        self._append(batch)
        return batch

    def _append(self, batch):
        self._batches.append(batch)
        if self.log is not None:
            self.log.append(batch)

    @gcached()
    def observed(self):
        """rows with at least one rollout this round"""
        return self._counts[:, COUNT_T] > 0

    @gcached()
    def success_rates(self):
        """S_R per row, ``nan`` for unobserved rows"""
        out = np.empty(len(self.suite))
        _success_rates(self._counts, out)
        out[~self.observed] = np.nan
        return out

    @property
    def prev_success_rates(self):
        return self._prev.copy()

    @gcached()
    def deltas(self):
        return deltas(self.success_rates, self._prev, self.epsilon)

    @gcached()
    def stagnation(self):
        return stagnations(self.success_rates, self.deltas)

    def _stats_row(self, row):
        prev = self._prev[row]
        return SampleStats(
            sample_id=int(self.suite.ids[row]),
            skill=SkillDimension(int(self.suite.skills[row])),
            rollouts_this_round=int(self._counts[row, COUNT_T]),
            successes=int(self._counts[row, COUNT_SUCCESS]),
            s_r=float(self.success_rates[row]),
            s_r_prev=None if np.isnan(prev) else float(prev),
            delta=float(self.deltas[row]),
            s_s=float(self.stagnation[row]),
        )

    @gcached()
    def stats(self):
        """mapping sample id -> :class:`SampleStats` for observed samples"""
        return {
            int(self.suite.ids[row]): self._stats_row(row)
            for row in np.flatnonzero(self.observed)
        }

    def stats_for(self, sample_ids):
        stats = self.stats
        try:
            return [stats[int(i)] for i in sample_ids]
        except KeyError as e:
            raise UndefinedStatError(f"no rollouts this round for sample {e.args[0]}")

    @cached_clear()
    def reset(self):
        observed = self._counts[:, COUNT_T] > 0
        rates = np.empty(len(self.suite))
        _success_rates(self._counts, rates)
        self._prev[observed] = rates[observed]
        self._counts[...] = 0
        self._epochs[...] = -1
        self._batches = []
        logger.debug("buffer reset, carried %d previous rates", int(observed.sum()))
        return self


###############################################################################
# operations on a buffer
###############################################################################
def log_rollout(buffer, record):
    """
    Append `record` and count it toward its sample's statistics.

    A record from a newer epoch restarts the sample's counters; one from an
    older epoch than the sample's current one raises :class:`ContractError`.
    """
    buffer.push_record(record)
    return buffer


def log_rollouts(buffer, batch):
    return buffer.push_batch(batch)


def success_rate(stats):
    """``S_R = successes / T``"""
    if stats.rollouts_this_round <= 0:
        raise UndefinedStatError(f"sample {stats.sample_id} has no rollouts this round")
    return stats.successes / stats.rollouts_this_round


def _rebalance_rows(rates, ids):
    partial = (rates > 0.0) & (rates < 1.0)
    zero_rows = np.flatnonzero(rates == 0.0)
    zero_rows = zero_rows[np.argsort(ids[zero_rows], kind="stable")]
    keep = partial.copy()
    keep[zero_rows[: int(partial.sum())]] = True
    return keep


def rebalance(buffer, sample_ids=None):
    """
    Sample ids retained for RL.

    Drops every sample with ``S_R = 1`` and keeps at most as many ``S_R = 0``
    samples as there are partial-success samples, lowest ids first.

    Parameters
    ----------
    buffer : DifficultyBuffer
    sample_ids : array-like, optional
        restrict to these samples (default: every observed sample)

    Returns
    -------
    d_rl : ndarray of int
        ascending sample ids
    """
    if sample_ids is None:
        rows = np.flatnonzero(buffer.observed)
    else:
        rows = buffer.rows_of(sample_ids)
        if not buffer.observed[rows].all():
            raise UndefinedStatError("rebalance needs at least one rollout per sample")
    rates = buffer.success_rates[rows]
    ids = buffer.suite.ids[rows]
    keep = _rebalance_rows(rates, ids)
    out = np.sort(ids[keep])
    logger.debug(
        "rebalance: %d candidates -> %d (dropped %d mastered, %d capped failures)",
        len(rows),
        len(out),
        int((rates == 1.0).sum()),
        int((rates == 0.0).sum() - (keep & (rates == 0.0)).sum()),
    )
    return out


def task_stagnation(stats_list):
    """mean per-sample stagnation"""
    stats_list = list(stats_list)
    if not stats_list:
        raise UndefinedStatError("task stagnation of an empty sample list")
    return float(np.mean([s.s_s for s in stats_list]))


def task_stagnation_by_skill(buffer, sample_ids):
    """mapping skill -> task stagnation over `sample_ids` of that skill"""
    rows = buffer.rows_of(sample_ids)
    skills = buffer.suite.skills[rows]
    out = {}
    for skill in np.unique(skills):
        sel = rows[skills == skill]
        if not buffer.observed[sel].all():
            raise UndefinedStatError("task stagnation needs rollouts for every sample")
        out[SkillDimension(int(skill))] = float(np.mean(buffer.stagnation[sel]))
    return out


def collect_weak(buffer):
    """
    Samples with ``S_R = 0`` at round end, paired with teacher targets.

    Returns
    -------
    d_weak : dict
        sample id -> target :class:`StructuredResponse`, ascending ids
    """
    rows = np.flatnonzero(buffer.observed & (buffer.success_rates == 0.0))
    ids = np.sort(buffer.suite.ids[rows])
    return {int(i): teacher_solve(buffer.suite.get(i)).response for i in ids}


def reset(buffer):
    return buffer.reset()


def stats_frame(buffer):
    """tabular export of :attr:`DifficultyBuffer.stats`"""
    rows = [
        {
            "sample_id": s.sample_id,
            "skill": s.skill.name,
            "T": s.rollouts_this_round,
            "successes": s.successes,
            "S_R": s.s_r,
            "S_R_prev": np.nan if s.s_r_prev is None else s.s_r_prev,
            "delta": s.delta,
            "S_S": s.s_s,
        }
        for s in buffer.stats.values()
    ]
    return pd.DataFrame(
        rows,
        columns=["sample_id", "skill", "T", "successes", "S_R", "S_R_prev", "delta", "S_S"],
    )


###############################################################################
# datasets
###############################################################################
@dataclass(frozen=True)
class DatasetPartition(object):
    """
    Named datasets of one loop.

    `d_rl` is a tuple of sample ids; the SFT parts map sample id to a target
    response.
    """

    d_rl: tuple = ()
    d_weak: dict = field(default_factory=dict)
    d_rel: dict = field(default_factory=dict)
    d_gen: dict = field(default_factory=dict)

    @property
    def d_sft(self):
        out = dict(self.d_weak)
        out.update(self.d_rel)
        out.update(self.d_gen)
        return out

    def sizes(self):
        return {
            "n_rl": len(self.d_rl),
            "n_weak": len(self.d_weak),
            "n_rel": len(self.d_rel),
            "n_gen": len(self.d_gen),
            "n_sft": len(self.d_sft),
        }


###############################################################################
# persistent log
###############################################################################
LOG_COLUMNS = [
    "sample_id",
    "loop",
    "epoch",
    "format",
    "slot",
    "answer",
    "r_format",
    "r_task",
    "composite",
    "success",
    "seed",
    "counter",
]


class RolloutLog(object):
    """
    Append-only CSV rollout log.

    Each :meth:`append` writes complete lines, so any prefix of the file
    ending at a line break parses.
    """

    def __init__(self, path, overwrite=False):
        self.path = path
        if overwrite and os.path.exists(path):
            os.remove(path)

    def append(self, batch):
        frame = batch.to_frame()[LOG_COLUMNS]
        header = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        frame.to_csv(self.path, mode="a", header=header, index=False)

    def read(self):
        return read_rollout_log(self.path)


def read_rollout_log(path):
    if not os.path.exists(path):
        return pd.DataFrame(columns=LOG_COLUMNS)
    return pd.read_csv(path)


def recompute_success_rates(frame, loop=None):
    """
    Success rates recomputed from a rollout log.

    For every (loop, sample) only the rollouts of the latest epoch count,
    which matches the in-memory buffer at round end.

    Returns
    -------
    rates : pandas.Series
        indexed by ``(loop, sample_id)``, or by ``sample_id`` when `loop`
        is given
    """
    if loop is not None:
        frame = frame[frame["loop"] == loop]
    last = frame.groupby(["loop", "sample_id"])["epoch"].transform("max")
    latest = frame[frame["epoch"] == last]
    g = latest.groupby(["loop", "sample_id"])["success"]
    rates = g.sum() / g.count()
    rates.name = "S_R"
    if loop is not None:
        rates = rates.droplevel("loop")
    return rates
