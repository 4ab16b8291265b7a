"""
Alternating RL / SFT metaloop
=============================

Each loop runs one RL phase (diagnosis rollouts, rebalancing and GRPO epochs
until every task stagnates) followed by one SFT phase on the weaknesses it
exposed, plus related and general replay data.  The baselines spend the same
update budget on RL alone or on SFT alone.
"""
from __future__ import absolute_import

import enum
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd

from .curation import (
    DatasetPartition,
    DifficultyBuffer,
    collect_weak,
    make_batch,
    rebalance,
    should_stop,
    stats_frame,
    task_stagnation_by_skill,
)
from .exceptions import ConfigError, ContractError, DivergenceError
from .options import DIVERGENCE_RATIO, OPTIONS
from .policy import (
    batch_nll,
    expected_success,
    grpo_update,
    init_params,
    sample_responses,
    sft_update,
)
from .response import answer_index
from .rewards import RewardSpec
from .taskgen import SkillDimension, related_samples, split_holdout, teacher_solve
from .utils import rng_stream, stream_seed

logger = logging.getLogger(__name__)

__all__ = [
    "Phase",
    "PhaseSelector",
    "StagnationConfig",
    "LoopConfig",
    "LoopHistory",
    "Budget",
    "RunContext",
    "phase_sequence",
    "pretrain_base",
    "evaluate",
    "rl_phase",
    "build_sft_dataset",
    "sft_phase",
    "run_metaloop",
    "run_baseline",
]

# stream purposes
_STREAM_DIAGNOSE = 1
_STREAM_RL = 2
_STREAM_GEN = 3
_STREAM_SFT = 4
_STREAM_BASE = 5
_STREAM_REDIAGNOSE = 6
_STREAM_SFT_ONLY = 7


class Phase(enum.Enum):
    RL = "RL"
    SFT = "SFT"


@dataclass(frozen=True)
class PhaseSelector(object):
    """active objective ``sigma_k`` of loop ``k``"""

    sigma: Phase
    loop: int

    def __post_init__(self):
        if self.loop < 1:
            raise ContractError(f"loop index must be >= 1, got {self.loop}")


def phase_sequence(n_loops, final_rl=False):
    """``(RL, SFT) * n_loops``, optionally followed by a trailing RL phase"""
    seq = []
    for k in range(1, n_loops + 1):
        seq.append(PhaseSelector(Phase.RL, k))
        seq.append(PhaseSelector(Phase.SFT, k))
    if final_rl:
        seq.append(PhaseSelector(Phase.RL, n_loops + 1))
    return seq


###############################################################################
# configuration
###############################################################################
@dataclass(frozen=True)
class StagnationConfig(object):
    epsilon: float = 0.1
    threshold: float = 0.7

    def __post_init__(self):
        if not 0.05 < self.epsilon < 0.2:
            raise ConfigError(
                f"must lie in (0.05, 0.2), got {self.epsilon}", "stagnation.epsilon"
            )
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.threshold}", "stagnation.threshold")


@dataclass(frozen=True)
class LoopConfig(object):
    """
    Metaloop settings.

    Parameters
    ----------
    n_loops : int
        number of RL -> SFT loops K
    rollouts_per_sample : int
        rollouts T per sample per diagnosis/epoch
    rl_epoch_cap : int
        maximum GRPO epochs per RL phase
    rl_batch_size : int
        samples per GRPO update
    sft_epochs : int
        passes over the SFT dataset per SFT phase
    sft_batch_size : int
    lr_rl, lr_sft : float
    gen_replay_fraction : float
        size of the general replay set relative to ``|d_weak U d_rel|``
    gen_replay_start : int
        first loop whose SFT set includes general replay
    base_epochs : int
        SFT epochs on the general pool used to build the base policy
    holdout_fraction : float
        fraction of each (skill, pool) stratum held out for evaluation
    rediagnose_rollouts : int
        if positive, rollouts per candidate after the GRPO epochs, used to
        refresh success rates before collecting weak samples
    difficulty_schedule : tuple of float, optional
        per-loop difficulty ceiling for RL candidates (last value repeats)
    final_rl : bool
        run one more RL phase after the last loop
    reward : RewardSpec
    stagnation : StagnationConfig
    """

    n_loops: int = 3
    rollouts_per_sample: int = 8
    rl_epoch_cap: int = 50
    rl_batch_size: int = 64
    sft_epochs: int = 2
    sft_batch_size: int = 32
    lr_rl: float = 0.05
    lr_sft: float = 0.05
    gen_replay_fraction: float = 0.5
    gen_replay_start: int = 1
    base_epochs: int = 10
    holdout_fraction: float = 0.2
    rediagnose_rollouts: int = 0
    difficulty_schedule: tuple = None
    final_rl: bool = False
    reward: RewardSpec = field(default_factory=RewardSpec)
    stagnation: StagnationConfig = field(default_factory=StagnationConfig)

    def __post_init__(self):
        positive = ("n_loops", "rollouts_per_sample", "rl_batch_size", "sft_batch_size")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", f"loop.{name}")
        if self.rollouts_per_sample < 2:
            raise ConfigError("GRPO groups need at least 2 rollouts", "loop.rollouts_per_sample")
        for name in ("rl_epoch_cap", "sft_epochs", "base_epochs", "rediagnose_rollouts"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", f"loop.{name}")
        for name in ("lr_rl", "lr_sft"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"must be finite and >= 0, got {v}", f"loop.{name}")
        if not 0.0 <= self.gen_replay_fraction <= 1.0:
            raise ConfigError("must lie in [0, 1]", "loop.gen_replay_fraction")
        if self.gen_replay_start < 1:
            raise ConfigError("must be >= 1", "loop.gen_replay_start")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("must lie in [0, 1)", "loop.holdout_fraction")
        if self.difficulty_schedule is not None:
            sched = tuple(float(v) for v in self.difficulty_schedule)
            if not sched or any(not 0.0 < v <= 1.0 for v in sched):
                raise ConfigError("ceilings must lie in (0, 1]", "loop.difficulty_schedule")
            object.__setattr__(self, "difficulty_schedule", sched)

    def difficulty_ceiling(self, loop):
        if not self.difficulty_schedule:
            return 1.0
        return self.difficulty_schedule[min(loop, len(self.difficulty_schedule)) - 1]

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


###############################################################################
# run bookkeeping
###############################################################################
@dataclass
class Budget(object):
    """
    Update budget.

    ``rollouts`` counts sampled responses, ``grad_evals`` per-example
    gradient terms and ``updates`` parameter updates.  The matched budget of
    two runs compares ``rollouts + grad_evals``.
    """

    rollouts: int = 0
    grad_evals: int = 0
    updates: int = 0

    @property
    def total(self):
        return self.rollouts + self.grad_evals

    def as_dict(self):
        return {"rollouts": self.rollouts, "grad_evals": self.grad_evals, "updates": self.updates}


class RunContext(object):
    """
    Per-run state shared by the phases.

    Parameters
    ----------
    seed : int
    limit : int, optional
        maximum ``Budget.total``; phases truncate their work to fit
    log : RolloutLog, optional
        receives every rollout
    stats_dir : str, optional
        directory receiving ``stats_k<k>.csv``, the buffer statistics at the
        end of each RL phase
    """

    def __init__(self, seed, limit=None, log=None, stats_dir=None):
        self.seed = int(seed)
        self.limit = limit
        self.log = log
        self.stats_dir = stats_dir
        self.budget = Budget()
        self.updates = []

    def stream(self, *keys):
        return rng_stream(self.seed, *keys)

    def stream_seed(self, *keys):
        return stream_seed(self.seed, *keys)

    @property
    def remaining(self):
        if self.limit is None:
            return None
        return max(0, self.limit - self.budget.total)

    def fit(self, n, unit_cost):
        """largest count <= n whose cost fits the remaining budget"""
        if self.limit is None:
            return n
        return min(n, self.remaining // unit_cost)

    def add_rollouts(self, n):
        self.budget.rollouts += int(n)

    def add_update(self, phase, loop, n_terms):
        self.budget.grad_evals += int(n_terms)
        self.budget.updates += 1
        self.updates.append((int(loop), phase.value, int(n_terms)))

    def end_round(self, buffer, loop):
        if self.stats_dir is None:
            return
        path = os.path.join(self.stats_dir, f"stats_k{loop}.csv")
        stats_frame(buffer).to_csv(path, index=False)
        logger.debug("wrote %s", path)


HISTORY_COLUMNS = (
    ["k", "phase", "heldout", "general"]
    + [f"heldout_{s.label}" for s in SkillDimension]
    + [
        "sr_mean",
        "stagnation",
        "n_rl",
        "n_weak",
        "n_rel",
        "n_gen",
        "n_sft",
        "epochs",
        "rollouts",
        "grad_evals",
        "updates",
    ]
)


class LoopHistory(object):
    """
    One metrics row per executed phase.

    Attributes
    ----------
    base : dict
        evaluation of the starting policy
    """

    def __init__(self, base=None):
        self.base = dict(base or {})
        self._rows = []

    def __len__(self):
        return len(self._rows)

    def append(self, row):
        if self._rows and row["k"] < self._rows[-1]["k"]:
            raise ContractError("loop indices must be monotone")
        self._rows.append({c: row.get(c, np.nan) for c in HISTORY_COLUMNS})

    @property
    def rows(self):
        return list(self._rows)

    @property
    def phases(self):
        return [(r["k"], r["phase"]) for r in self._rows]

    @property
    def frame(self):
        return pd.DataFrame(self._rows, columns=HISTORY_COLUMNS)

    def to_csv(self, path):
        self.frame.to_csv(path, index=False)

    def equals(self, other):
        return self.base == other.base and self.frame.equals(other.frame)


###############################################################################
# evaluation / base policy
###############################################################################
def evaluate(params, heldout, spec):
    """
    Expected success on the held-out split.

    Returns
    -------
    metrics : dict
        ``heldout`` (embodied), ``general`` and ``heldout_<skill>``
    """
    succ = expected_success(params, heldout, spec)
    general = heldout.is_general
    out = {
        "heldout": float(succ[~general].mean()) if (~general).any() else np.nan,
        "general": float(succ[general].mean()) if general.any() else np.nan,
    }
    for skill in SkillDimension:
        sel = (~general) & (heldout.skills == int(skill))
        out[f"heldout_{skill.label}"] = float(succ[sel].mean()) if sel.any() else np.nan
    return out


def _teacher_arrays(pool):
    slots = np.array(
        [answer_index(s, teacher_solve(s).response) for s in pool], dtype=np.int64
    )
    return pool.features, slots, np.ones(len(pool), dtype=bool)


def _sft_epochs(params, x, slots, formats, n_epochs, batch_size, lr, ctx, loop, stream_key):
    n = len(x)
    for epoch in range(n_epochs):
        order = ctx.stream(stream_key, loop, epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            idx = idx[: ctx.fit(len(idx), 1)]
            if len(idx) == 0:
                return params, epoch
            params = sft_update(params, x[idx], slots[idx], formats[idx], lr)
            ctx.add_update(Phase.SFT, loop, len(idx))
    return params, n_epochs


def pretrain_base(train, config, seed, params=None):
    """
    Base policy: ``base_epochs`` of SFT on the general training pool.
    """
    general = train.general()
    if params is None:
        params = init_params(train.n_features, train.n_answers)
    if len(general) == 0 or config.base_epochs == 0:
        return params
    ctx = RunContext(seed)
    x, slots, formats = _teacher_arrays(general)
    params, _ = _sft_epochs(
        params,
        x,
        slots,
        formats,
        config.base_epochs,
        config.sft_batch_size,
        config.lr_sft,
        ctx,
        0,
        _STREAM_BASE,
    )
    logger.info(
        "base policy: %d SFT updates on %d general samples",
        ctx.budget.updates,
        len(general),
    )
    return params


###############################################################################
# RL phase
###############################################################################
def _rollout(params, train, rows, config, ctx, buffer, loop, epoch, stream_key, T=None, part=0):
    """T rollouts for each of `rows`; logs them and returns the scored batch"""
    T = config.rollouts_per_sample if T is None else T
    keys = (stream_key, loop, epoch, part)
    rng = ctx.stream(*keys)
    slots, formats = sample_responses(params, train.features[rows], rng, size=T)
    batch = make_batch(
        train,
        config.reward,
        np.repeat(rows, T),
        slots.reshape(-1),
        formats.reshape(-1),
        loop=loop,
        epoch=epoch,
        rng_seed=ctx.stream_seed(*keys),
    )
    buffer.push_batch(batch)
    ctx.add_rollouts(len(batch))
    return batch, slots, formats


def _rl_candidates(train, config, loop):
    embodied = ~train.is_general
    ceiling = config.difficulty_ceiling(loop)
    return np.flatnonzero(embodied & (train.difficulty <= ceiling))


def rl_phase(config, train, params, buffer, ctx=None, loop=1):
    """
    RL phase of one loop.

    Parameters
    ----------
    config : LoopConfig
    train : SampleSet
        training pool; candidates are its embodied samples
    params : PolicyParams
    buffer : DifficultyBuffer
        empty or reset buffer over `train`
    ctx : RunContext, optional
    loop : int

    Returns
    -------
    params : PolicyParams
    buffer : DifficultyBuffer
        holds the round's statistics, ready for :func:`collect_weak`
    metrics : dict
    """
    if buffer.n_records:
        raise ContractError("rl_phase needs an empty or reset buffer")
    ctx = RunContext(0) if ctx is None else ctx
    T = config.rollouts_per_sample
    metrics = {"n_rl": 0, "epochs": 0, "stagnation": np.nan, "stopped": {}}

    rows = _rl_candidates(train, config, loop)
    rows = rows[: ctx.fit(len(rows), T)]
    if len(rows) == 0:
        logger.warning("loop %d: no RL candidates (budget or difficulty ceiling)", loop)
        metrics["sr_mean"] = np.nan
        return params, buffer, metrics

    # diagnosis
    _rollout(params, train, rows, config, ctx, buffer, loop, 0, _STREAM_DIAGNOSE)
    d_rl = rebalance(buffer, train.ids[rows])
    metrics["n_rl"] = len(d_rl)
    metrics["d_rl"] = tuple(int(i) for i in d_rl)
    logger.info(
        "loop %d RL: %d candidates, mean S_R %.3f, |d_rl| = %d",
        loop,
        len(rows),
        float(np.mean(buffer.success_rates[rows])),
        len(d_rl),
    )

    if len(d_rl) == 0:
        logger.warning("loop %d: d_rl empty after rebalance, skipping GRPO", loop)
    else:
        rl_rows = buffer.rows_of(d_rl)
        skills = train.skills[rl_rows]
        active = {SkillDimension(int(s)) for s in np.unique(skills)}
        task_s_s = {}
        epoch = 0
        while active and epoch < config.rl_epoch_cap:
            epoch += 1
            sel = rl_rows[np.isin(skills, [int(s) for s in active])]
            order = ctx.stream(_STREAM_RL, loop, epoch).permutation(sel)
            exhausted = False
            for part, start in enumerate(range(0, len(order), config.rl_batch_size)):
                batch_rows = order[start : start + config.rl_batch_size]
                batch_rows = batch_rows[: ctx.fit(len(batch_rows), 2 * T)]
                if len(batch_rows) == 0:
                    exhausted = True
                    break
                batch, slots, formats = _rollout(
                    params,
                    train,
                    batch_rows,
                    config,
                    ctx,
                    buffer,
                    loop,
                    epoch,
                    _STREAM_RL,
                    part=part,
                )
                params = grpo_update(
                    params,
                    train.features[batch_rows],
                    slots,
                    formats,
                    batch.composite.reshape(len(batch_rows), T),
                    config.lr_rl,
                )
                ctx.add_update(Phase.RL, loop, len(batch))
                if not params.is_finite():
                    raise DivergenceError(
                        "non-finite parameters after GRPO update", Phase.RL.value, loop
                    )

            if exhausted:
                break
            task_s_s.update(task_stagnation_by_skill(buffer, train.ids[sel]))
            for skill in sorted(active):
                logger.debug(
                    "loop %d epoch %d %s S_S(task) = %.4f",
                    loop,
                    epoch,
                    skill.name,
                    task_s_s[skill],
                )
                if should_stop(task_s_s[skill], config.stagnation.threshold):
                    active.discard(skill)
                    metrics["stopped"][skill.name] = epoch
                    logger.info(
                        "loop %d: %s stagnated (S_S = %.3f) after %d epochs",
                        loop,
                        skill.name,
                        task_s_s[skill],
                        epoch,
                    )
        metrics["epochs"] = epoch
        if task_s_s:
            metrics["stagnation"] = float(np.mean(list(task_s_s.values())))
        metrics["task_stagnation"] = {s.name: v for s, v in task_s_s.items()}

    if config.rediagnose_rollouts > 0:
        n = ctx.fit(len(rows), config.rediagnose_rollouts)
        if n:
            _rollout(
                params,
                train,
                rows[:n],
                config,
                ctx,
                buffer,
                loop,
                metrics["epochs"] + 1,
                _STREAM_REDIAGNOSE,
                T=config.rediagnose_rollouts,
            )

    metrics["sr_mean"] = float(np.mean(buffer.success_rates[rows]))
    return params, buffer, metrics


###############################################################################
# SFT phase
###############################################################################
def build_sft_dataset(buffer, train, config, ctx=None, loop=1, d_rl=()):
    """
    ``d_sft = d_weak U d_rel U d_gen`` with teacher targets.

    `d_weak` are the round's complete failures, `d_rel` the other embodied
    training samples of the weak skills and `d_gen` a uniform draw from the
    general training pool sized ``gen_replay_fraction * |d_weak U d_rel|``.
    """
    ctx = RunContext(0) if ctx is None else ctx
    d_weak = collect_weak(buffer)
    weak_skills = {train.get(i).skill for i in d_weak}
    rel = related_samples(train.exclude(d_weak), weak_skills)
    d_rel = {int(s.id): teacher_solve(s).response for s in rel}

    d_gen = {}
    n_targeted = len(d_weak) + len(d_rel)
    if n_targeted and loop >= config.gen_replay_start:
        general = train.general()
        n_gen = min(len(general), int(math.floor(config.gen_replay_fraction * n_targeted + 1e-9)))
        rng = ctx.stream(_STREAM_GEN, loop)
        pick = np.sort(rng.choice(len(general), size=n_gen, replace=False))
        d_gen = {int(general[i].id): teacher_solve(general[i]).response for i in pick}

    part = DatasetPartition(d_rl=tuple(d_rl), d_weak=d_weak, d_rel=d_rel, d_gen=d_gen)
    logger.info("loop %d SFT data: %s", loop, part.sizes())
    return part


def sft_phase(params, d_sft, config, train, ctx=None, loop=1):
    """
    ``sft_epochs`` passes of minibatch SFT over `d_sft`.

    Parameters
    ----------
    d_sft : dict
        sample id -> target response
    train : SampleSet
        pool containing the ids of `d_sft`

    Raises
    ------
    DivergenceError
        if the final NLL exceeds ``divergence_ratio`` times the initial one.
    """
    ctx = RunContext(0) if ctx is None else ctx
    metrics = {"epochs": 0, "nll_initial": np.nan, "nll_final": np.nan}
    if not d_sft or config.sft_epochs == 0:
        return params, metrics

    ids = sorted(d_sft)
    pool = train.subset(ids)
    slots = np.array([answer_index(s, d_sft[s.id]) for s in pool], dtype=np.int64)
    formats = np.array([bool(d_sft[s.id].format) for s in pool])
    x = pool.features

    initial = batch_nll(params, x, slots, formats)
    try:
        params, epochs = _sft_epochs(
            params,
            x,
            slots,
            formats,
            config.sft_epochs,
            config.sft_batch_size,
            config.lr_sft,
            ctx,
            loop,
            _STREAM_SFT,
        )
    except DivergenceError as e:
        raise DivergenceError(str(e), Phase.SFT.value, loop) from e
    final = batch_nll(params, x, slots, formats)
    if not np.isfinite(final) or final > OPTIONS[DIVERGENCE_RATIO] * initial:
        raise DivergenceError(
            f"SFT loss went from {initial:.6g} to {final:.6g} on {len(pool)} samples",
            Phase.SFT.value,
            loop,
        )
    metrics.update(epochs=epochs, nll_initial=initial, nll_final=final)
    logger.info("loop %d SFT: %d samples, NLL %.4f -> %.4f", loop, len(pool), initial, final)
    return params, metrics


###############################################################################
# drivers
###############################################################################
def _check_inputs(suite, params):
    if params.shape != (suite.n_features, suite.n_answers + 1):
        raise ContractError(
            f"params shape {params.shape} does not match suite "
            f"(F={suite.n_features}, K={suite.n_answers})"
        )
    if suite.is_general.all() or not suite.is_general.any():
        raise ContractError("suite needs both embodied and general samples")


def _row(selector, evaluation, ctx, **extra):
    row = {"k": selector.loop, "phase": selector.sigma.value}
    row.update(evaluation)
    row.update(ctx.budget.as_dict())
    row.update(extra)
    return row


def _rl_row(selector, evaluation, ctx, metrics):
    return _row(
        selector,
        evaluation,
        ctx,
        sr_mean=metrics.get("sr_mean", np.nan),
        stagnation=metrics.get("stagnation", np.nan),
        n_rl=metrics.get("n_rl", 0),
        epochs=metrics.get("epochs", 0),
    )


def run_metaloop(config, suite, params, seed, ctx=None, on_phase=None):
    """
    Run ``config.n_loops`` loops of RL -> SFT.

    Parameters
    ----------
    config : LoopConfig
    suite : SampleSet
        full suite; split into training and held-out parts with
        :func:`split_holdout` ``(suite, config.holdout_fraction, seed)``
    params : PolicyParams
        starting policy
    seed : int
    ctx : RunContext, optional
    on_phase : callable, optional
        ``on_phase(params, selector, row)`` after each phase

    Returns
    -------
    params : PolicyParams
    history : LoopHistory
        ``2 * n_loops`` rows (one more with ``final_rl``)
    """
    _check_inputs(suite, params)
    ctx = RunContext(seed) if ctx is None else ctx
    train, heldout = split_holdout(suite, config.holdout_fraction, seed)
    spec = config.reward
    history = LoopHistory(base=evaluate(params, heldout, spec))
    buffer = DifficultyBuffer(
        train, config.stagnation.epsilon, config.stagnation.threshold, log=ctx.log
    )

    def finish(selector, row):
        if not params.is_finite():
            raise DivergenceError("non-finite parameters", selector.sigma.value, selector.loop)
        history.append(row)
        if on_phase is not None:
            on_phase(params, selector, row)

    for selector in phase_sequence(config.n_loops, config.final_rl):
        k = selector.loop
        n_updates = len(ctx.updates)
        if selector.sigma is Phase.RL:
            try:
                params, buffer, rl_metrics = rl_phase(config, train, params, buffer, ctx, k)
            except DivergenceError as e:
                if e.phase is None:
                    raise DivergenceError(str(e), Phase.RL.value, k) from e
                raise
            ctx.end_round(buffer, k)
            finish(selector, _rl_row(selector, evaluate(params, heldout, spec), ctx, rl_metrics))
        else:
            part = build_sft_dataset(buffer, train, config, ctx, k, rl_metrics.get("d_rl", ()))
            params, sft_metrics = sft_phase(params, part.d_sft, config, train, ctx, k)
            finish(
                selector,
                _row(
                    selector,
                    evaluate(params, heldout, spec),
                    ctx,
                    epochs=sft_metrics["epochs"],
                    **part.sizes(),
                ),
            )
            buffer.reset()
        if {p for _, p, _ in ctx.updates[n_updates:]} - {selector.sigma.value}:
            raise ContractError(
                f"loop {k}: {selector.sigma.value} phase updated another objective"
            )

    logger.info("metaloop done: %s", ctx.budget.as_dict())
    return params, history


def _check_budget(mode, used, target):
    if target <= 0:
        return
    mismatch = abs(used - target) / target
    if mismatch > 0.01:
        raise ConfigError(
            f"{mode} used budget {used}, matched run used {target} ({100 * mismatch:.2f}% apart)",
            "mode",
        )
    if used < target:
        logger.warning("%s budget short by %d of %d", mode, target - used, target)


def run_baseline(mode, config, suite, params, seed, budget=None, ctx=None, on_phase=None):
    """
    RL-only or SFT-only run with the budget of a matched metaloop run.

    Parameters
    ----------
    mode : {"rl_only", "sft_only"}
    budget : int or Budget, optional
        matched ``rollouts + grad_evals``; if None the matched metaloop is
        run first with the same arguments
    """
    if mode not in ("rl_only", "sft_only"):
        raise ConfigError(f"unknown baseline {mode!r}", "mode")
    _check_inputs(suite, params)
    if budget is None:
        _, matched = run_metaloop(config, suite, params, seed)
        last = matched.rows[-1]
        budget = int(last["rollouts"] + last["grad_evals"])
    target = int(getattr(budget, "total", budget))

    ctx = RunContext(seed) if ctx is None else ctx
    ctx.limit = target
    train, heldout = split_holdout(suite, config.holdout_fraction, seed)
    spec = config.reward
    history = LoopHistory(base=evaluate(params, heldout, spec))

    def finish(selector, row):
        history.append(row)
        if on_phase is not None:
            on_phase(params, selector, row)

    if mode == "rl_only":
        buffer = DifficultyBuffer(
            train, config.stagnation.epsilon, config.stagnation.threshold, log=ctx.log
        )
        k = 0
        while ctx.remaining >= 2 * config.rollouts_per_sample:
            k += 1
            selector = PhaseSelector(Phase.RL, k)
            before = ctx.budget.total
            params, buffer, metrics = rl_phase(config, train, params, buffer, ctx, k)
            ctx.end_round(buffer, k)
            finish(selector, _rl_row(selector, evaluate(params, heldout, spec), ctx, metrics))
            buffer.reset()
            if ctx.budget.total == before:
                break
    else:
        embodied = train.embodied()
        x, slots, formats = _teacher_arrays(embodied)
        initial = batch_nll(params, x, slots, formats)
        k = 0
        while ctx.remaining > 0:
            k += 1
            selector = PhaseSelector(Phase.SFT, k)
            before = ctx.budget.total
            params, _ = _sft_epochs(
                params,
                x,
                slots,
                formats,
                1,
                config.sft_batch_size,
                config.lr_sft,
                ctx,
                k,
                _STREAM_SFT_ONLY,
            )
            evaluation = evaluate(params, heldout, spec)
            finish(selector, _row(selector, evaluation, ctx, epochs=1, n_sft=len(embodied)))
            if ctx.budget.total == before:
                break
        final = batch_nll(params, x, slots, formats)
        if not np.isfinite(final) or final > OPTIONS[DIVERGENCE_RATIO] * initial:
            raise DivergenceError(
                f"SFT loss went from {initial:.6g} to {final:.6g}", Phase.SFT.value, k
            )

    _check_budget(mode, ctx.budget.total, target)
    logger.info("%s done: %s (target %d)", mode, ctx.budget.as_dict(), target)
    return params, history
