"""
Synthetic multi-skill task suite and ground-truth teacher
"""
from __future__ import absolute_import

import enum
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cached_decorators import gcached
from .exceptions import ConfigError, ContractError
from .response import StructuredResponse
from .utils import rng_stream

logger = logging.getLogger(__name__)

__all__ = [
    "SkillDimension",
    "SuiteConfig",
    "SampleInstance",
    "SampleSet",
    "TeacherResponse",
    "FeatureLayout",
    "generate_suite",
    "teacher_solve",
    "related_samples",
    "split_holdout",
    "write_suite",
    "read_suite",
]

SUITE_FORMAT = "dppo-suite"
SUITE_VERSION = 1

# stream keys for rng_stream
_KEY_GENERATE = 1
_KEY_HOLDOUT = 2


class SkillDimension(enum.IntEnum):
    """The six embodied skill dimensions, one per reward objective"""

    AFFORDANCE_REASONING = 0
    COUNTING_DISTANCE = 1
    CAUSAL_TEMPORAL = 2
    TASK_SUCCESS_EVAL = 3
    TASK_PLANNING = 4
    TASK_PREDICTION = 5

    @property
    def is_numeric(self):
        return self is SkillDimension.COUNTING_DISTANCE

    @property
    def label(self):
        """short lower case label used in column names"""
        return self.name.lower()

    @classmethod
    def from_name(cls, name):
        """
        lookup by member name, label, or CamelCase name

        >>> SkillDimension.from_name("TaskPlanning") is SkillDimension.TASK_PLANNING
        True
        """
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "_")
        if key.upper() in cls.__members__:
            return cls[key.upper()]
        camel = {m.name.replace("_", "").upper(): m for m in cls}
        if key.replace("_", "").upper() in camel:
            return camel[key.replace("_", "").upper()]
        raise ConfigError(f"unknown skill dimension {name!r}")


N_SKILLS = len(SkillDimension)

DEFAULT_SKILL_SIGNAL = {
    SkillDimension.AFFORDANCE_REASONING: 2.5,
    SkillDimension.COUNTING_DISTANCE: 1.5,
    SkillDimension.CAUSAL_TEMPORAL: 2.0,
    SkillDimension.TASK_SUCCESS_EVAL: 4.0,
    SkillDimension.TASK_PLANNING: 1.25,
    SkillDimension.TASK_PREDICTION: 2.0,
}


class FeatureLayout(object):
    """
    Column layout of the feature vector.

    ``[one-hot skill (6) | difficulty (1) | skill cue blocks (6 * K) |
    general cue block (K) | noise (G)]``
    """

    def __init__(self, n_answers, n_noise):
        self.n_answers = n_answers
        self.n_noise = n_noise

    @classmethod
    def min_features(cls, n_answers):
        return N_SKILLS + 1 + (N_SKILLS + 1) * n_answers

    @property
    def n_features(self):
        return self.min_features(self.n_answers) + self.n_noise

    @property
    def difficulty(self):
        return N_SKILLS

    def skill_block(self, skill):
        start = N_SKILLS + 1 + int(skill) * self.n_answers
        return slice(start, start + self.n_answers)

    @property
    def general_block(self):
        start = N_SKILLS + 1 + N_SKILLS * self.n_answers
        return slice(start, start + self.n_answers)

    @property
    def noise(self):
        start = self.min_features(self.n_answers)
        return slice(start, start + self.n_noise)


@dataclass(frozen=True)
class SuiteConfig(object):
    """
    Parameters of the synthetic suite.

    Parameters
    ----------
    n_features : int
        feature dimension F.  Must be at least ``7 + 7 * n_answers``; the
        remainder are pure noise coordinates.
    n_answers : int
        candidate answers K per sample.
    count_per_skill : int
        samples generated per skill (ignored for skills listed in `counts`).
    counts : dict, optional
        per-skill override ``{skill name: count}``.
    general_fraction : float
        fraction of all samples flagged as general-pool samples.
    skill_signal : dict, optional
        per-skill signal scale of the gold cue.
    signal_floor : float
        fraction of the signal that survives at difficulty 1.
    general_overlap : float
        weight of the rotated cue copied into a general sample's skill block.
    numeric_spacing : float
        spacing of the candidate values of the numeric skill.
    tolerance_range : tuple of float
        range (in units of spacing) of the numeric tolerance band.
    """

    n_features: int = 36
    n_answers: int = 3
    count_per_skill: int = 200
    counts: dict = None
    general_fraction: float = 0.25
    skill_signal: dict = None
    signal_floor: float = 0.15
    general_overlap: float = 1.0
    numeric_spacing: float = 1.0
    tolerance_range: tuple = (1.5, 4.5)

    def __post_init__(self):
        if self.n_answers < 2:
            raise ConfigError(
                f"need at least 2 answers, got {self.n_answers}", "suite.n_answers"
            )
        if self.n_features < 2:
            raise ConfigError(
                f"need at least 2 features, got {self.n_features}", "suite.n_features"
            )
        need = FeatureLayout.min_features(self.n_answers)
        if self.n_features < need:
            raise ConfigError(
                f"layout with K={self.n_answers} needs at least {need} features, "
                f"got {self.n_features}",
                "suite.n_features",
            )
        for skill, n in self.skill_counts.items():
            if int(n) <= 0:
                raise ConfigError(
                    f"count for {skill.name} must be positive, got {n}", "suite.counts"
                )
        if not 0.0 <= self.general_fraction < 1.0:
            raise ConfigError(
                f"must be in [0, 1), got {self.general_fraction}", "suite.general_fraction"
            )
        for skill, s in self.signals.items():
            if not s > 0:
                raise ConfigError(
                    f"signal for {skill.name} must be positive", "suite.skill_signal"
                )
        if not 0.0 <= self.signal_floor <= 1.0:
            raise ConfigError("must be in [0, 1]", "suite.signal_floor")
        if self.general_overlap < 0:
            raise ConfigError("must be non-negative", "suite.general_overlap")
        if not self.numeric_spacing > 0:
            raise ConfigError("must be positive", "suite.numeric_spacing")
        lo, hi = self.tolerance_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad range {self.tolerance_range}", "suite.tolerance_range")

    @property
    def skill_counts(self):
        out = {skill: self.count_per_skill for skill in SkillDimension}
        if self.counts:
            for name, n in self.counts.items():
                out[SkillDimension.from_name(name)] = n
        return out

    @property
    def signals(self):
        out = dict(DEFAULT_SKILL_SIGNAL)
        if self.skill_signal:
            for name, s in self.skill_signal.items():
                out[SkillDimension.from_name(name)] = float(s)
        return out

    @property
    def n_samples(self):
        return int(sum(self.skill_counts.values()))

    @property
    def n_general(self):
        return int(np.floor(self.general_fraction * self.n_samples + 1e-9))

    @property
    def layout(self):
        return FeatureLayout(
            self.n_answers, self.n_features - FeatureLayout.min_features(self.n_answers)
        )

    def to_dict(self):
        d = asdict(self)
        d["tolerance_range"] = list(self.tolerance_range)
        return d


@dataclass(frozen=True, eq=False)
class SampleInstance(object):
    """
    One synthetic task item.

    Parameters
    ----------
    id : int
    skill : SkillDimension
    features : ndarray
        read-only feature vector of length F
    answers : tuple of float
        K candidate answers.  Choice skills use the labels ``0..K-1``;
        the numeric skill uses candidate count values.
    gold : int
        index of the correct answer
    difficulty : float
        latent difficulty in [0, 1]
    is_general : bool
        member of the general pool rather than the embodied pool
    target : float, optional
        real target (numeric skill only)
    tolerance : float, optional
        tolerance band (numeric skill only)
    """

    id: int
    skill: SkillDimension
    features: np.ndarray = field(repr=False)
    answers: tuple
    gold: int
    difficulty: float
    is_general: bool = False
    target: float = None
    tolerance: float = None

    def __post_init__(self):
        k = len(self.answers)
        if k < 2:
            raise ContractError(f"sample {self.id}: need K >= 2 answers")
        if not 0 <= self.gold < k:
            raise ContractError(f"sample {self.id}: gold {self.gold} outside [0, {k})")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ContractError(f"sample {self.id}: difficulty {self.difficulty} outside [0, 1]")
        if not np.all(np.isfinite(self.features)):
            raise ContractError(f"sample {self.id}: non-finite features")
        if self.skill.is_numeric and (self.target is None or self.tolerance is None):
            raise ContractError(f"numeric sample {self.id} needs target and tolerance")

    @property
    def n_answers(self):
        return len(self.answers)

    @property
    def is_numeric(self):
        return self.skill.is_numeric


class SampleSet(object):
    """
    Immutable, ordered collection of :class:`SampleInstance`.

    Column arrays (``features``, ``skills``, ...) are built once on first
    access and cached.
    """

    __slots__ = ("_samples", "_n_features", "_n_answers", "_cache")

    def __init__(self, samples, n_features=None, n_answers=None):
        self._samples = tuple(samples)
        if self._samples:
            first = self._samples[0]
            n_features = len(first.features)
            n_answers = first.n_answers
            for s in self._samples:
                if len(s.features) != n_features or s.n_answers != n_answers:
                    raise ContractError(f"sample {s.id} has inconsistent shape")
        self._n_features = n_features
        self._n_answers = n_answers
        self._cache = {}

    def __len__(self):
        return len(self._samples)

    def __iter__(self):
        return iter(self._samples)

    def __getitem__(self, i):
        return self._samples[i]

    def __repr__(self):
        return "<SampleSet(n={}, embodied={}, general={})>".format(
            len(self), int((~self.is_general).sum()), int(self.is_general.sum())
        )

    @property
    def samples(self):
        return self._samples

    @property
    def n_features(self):
        return self._n_features

    @property
    def n_answers(self):
        return self._n_answers

    @gcached()
    def ids(self):
        return np.array([s.id for s in self._samples], dtype=np.int64)

    @gcached()
    def index(self):
        """mapping sample id -> row"""
        return {int(i): r for r, i in enumerate(self.ids)}

    @gcached()
    def features(self):
        if not self._samples:
            return np.zeros((0, self._n_features or 0))
        return np.stack([s.features for s in self._samples])

    @gcached()
    def skills(self):
        return np.array([int(s.skill) for s in self._samples], dtype=np.int64)

    @gcached()
    def gold(self):
        return np.array([s.gold for s in self._samples], dtype=np.int64)

    @gcached()
    def answers(self):
        if not self._samples:
            return np.zeros((0, self._n_answers or 0))
        return np.array([s.answers for s in self._samples], dtype=float)

    @gcached()
    def targets(self):
        return np.array(
            [np.nan if s.target is None else s.target for s in self._samples], dtype=float
        )

    @gcached()
    def tolerance(self):
        return np.array(
            [np.nan if s.tolerance is None else s.tolerance for s in self._samples],
            dtype=float,
        )

    @gcached()
    def numeric(self):
        return np.array([s.is_numeric for s in self._samples], dtype=bool)

    @gcached()
    def difficulty(self):
        return np.array([s.difficulty for s in self._samples], dtype=float)

    @gcached()
    def is_general(self):
        return np.array([s.is_general for s in self._samples], dtype=bool)

    def row_of(self, sample_id):
        try:
            return self.index[int(sample_id)]
        except KeyError:
            raise ContractError(f"unknown sample id {sample_id}")

    def __contains__(self, sample_id):
        return int(sample_id) in self.index

    def get(self, sample_id):
        return self._samples[self.row_of(sample_id)]

    def _new(self, samples):
        return type(self)(samples, n_features=self._n_features, n_answers=self._n_answers)

    def take(self, rows):
        return self._new(self._samples[int(r)] for r in rows)

    def subset(self, ids):
        """samples whose id is in `ids`, in this set's order"""
        ids = {int(i) for i in ids}
        return self._new(s for s in self._samples if s.id in ids)

    def exclude(self, ids):
        ids = {int(i) for i in ids}
        return self._new(s for s in self._samples if s.id not in ids)

    def where(self, mask):
        return self._new(s for s, m in zip(self._samples, mask) if m)

    def embodied(self):
        return self.where(~self.is_general)

    def general(self):
        return self.where(self.is_general)

    def by_skill(self, skills):
        skills = {int(s) for s in skills}
        return self._new(s for s in self._samples if int(s.skill) in skills)

    def equals(self, other):
        """bitwise equality of every field of every sample"""
        if len(self) != len(other):
            return False
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.skills, other.skills)
            and np.array_equal(self.gold, other.gold)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.answers, other.answers)
            and np.array_equal(self.difficulty, other.difficulty)
            and np.array_equal(self.is_general, other.is_general)
            and np.array_equal(self.targets, other.targets, equal_nan=True)
            and np.array_equal(self.tolerance, other.tolerance, equal_nan=True)
        )


@dataclass(frozen=True)
class TeacherResponse(object):
    sample_id: int
    response: StructuredResponse


###############################################################################
# generation
###############################################################################
def _stratified_difficulty(rng, n):
    """one draw per stratum [i/n, (i+1)/n), in random order"""
    return (rng.permutation(n) + rng.random(n)) / n


def generate_suite(config, seed):
    """
    Generate the synthetic suite.

    Parameters
    ----------
    config : SuiteConfig
    seed : int
        any 64 bit value

    Returns
    -------
    suite : SampleSet
        deterministic in ``(config, seed)``.  Ids run ``0..N-1`` grouped by
        skill in :class:`SkillDimension` order.
    """
    if not isinstance(config, SuiteConfig):
        raise ConfigError(f"expected SuiteConfig, got {type(config).__name__}")

    rng = rng_stream(seed, _KEY_GENERATE)
    layout = config.layout
    K = config.n_answers
    signals = config.signals

    # raw draws, skill by skill
    raw = []
    for skill, n in config.skill_counts.items():
        n = int(n)
        draw = dict(
            skill=np.full(n, int(skill)),
            difficulty=_stratified_difficulty(rng, n),
            gold=rng.integers(0, K, size=n),
            cue_noise=rng.standard_normal((n, K)),
            noise=rng.standard_normal((n, layout.n_noise)),
        )
        if skill.is_numeric:
            draw["offset"] = rng.integers(0, 10, size=n).astype(float)
            lo, hi = config.tolerance_range
            draw["tolerance"] = rng.uniform(lo, hi, size=n) * config.numeric_spacing
        raw.append((skill, draw))

    N = config.n_samples
    is_general = np.zeros(N, dtype=bool)
    is_general[rng.permutation(N)[: config.n_general]] = True

    samples = []
    sample_id = 0
    for skill, draw in raw:
        n = len(draw["gold"])
        for i in range(n):
            gold = int(draw["gold"][i])
            difficulty = float(draw["difficulty"][i])
            general = bool(is_general[sample_id])

            snr = signals[skill] * (1.0 - (1.0 - config.signal_floor) * difficulty)
            cue = draw["cue_noise"][i].copy()
            cue[gold] += snr

            x = np.zeros(layout.n_features)
            x[int(skill)] = 1.0
            x[layout.difficulty] = difficulty
            if general:
                x[layout.general_block] = cue
                x[layout.skill_block(skill)] = config.general_overlap * np.roll(cue, 1)
            else:
                x[layout.skill_block(skill)] = cue
            x[layout.noise] = draw["noise"][i]
            x.setflags(write=False)

            if skill.is_numeric:
                answers = tuple(
                    float(v)
                    for v in draw["offset"][i] + np.arange(K) * config.numeric_spacing
                )
                target = answers[gold]
                tolerance = float(draw["tolerance"][i])
            else:
                answers = tuple(float(v) for v in range(K))
                target = tolerance = None

            samples.append(
                SampleInstance(
                    id=sample_id,
                    skill=skill,
                    features=x,
                    answers=answers,
                    gold=gold,
                    difficulty=difficulty,
                    is_general=general,
                    target=target,
                    tolerance=tolerance,
                )
            )
            sample_id += 1

    suite = SampleSet(samples, n_features=layout.n_features, n_answers=K)
    logger.info("generated %r (seed=%s)", suite, seed)
    return suite


def teacher_solve(sample):
    """
    Ground-truth oracle: formatted response carrying the gold answer.

    The numeric skill answers with the real target value.
    """
    if sample.is_numeric:
        answer = float(sample.target)
    else:
        answer = int(sample.gold)
    return TeacherResponse(sample.id, StructuredResponse(format=True, answer=answer))


def related_samples(pool, weak_skills):
    """
    Embodied samples of `pool` whose skill is in `weak_skills`.

    Callers exclude ids already in D_weak by filtering `pool` first
    (``pool.exclude(d_weak)``).  An empty `weak_skills` gives an empty set.
    """
    weak = {int(s) for s in weak_skills}
    if not weak:
        return pool.where(np.zeros(len(pool), dtype=bool))
    mask = (~pool.is_general) & np.isin(pool.skills, list(weak))
    return pool.where(mask)


def split_holdout(suite, fraction=0.2, seed=0):
    """
    Split `suite` into (train, heldout).

    Each pool (embodied, general) holds out ``floor(fraction * n_pool)``
    samples, at least one when the pool has two or more and `fraction` is
    positive.  The pool's count is spread over skills by largest remainder
    of ``fraction * n_skill``.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in [0, 1), got {fraction}")
    rng = rng_stream(seed, _KEY_HOLDOUT)
    held = np.zeros(len(suite), dtype=bool)
    for general in (False, True):
        strata = [
            np.flatnonzero((suite.skills == int(skill)) & (suite.is_general == general))
            for skill in SkillDimension
        ]
        for rows, n_hold in zip(strata, _holdout_counts([len(r) for r in strata], fraction)):
            held[rng.permutation(rows)[:n_hold]] = True
    return suite.where(~held), suite.where(held)


def _holdout_counts(sizes, fraction):
    sizes = np.asarray(sizes, dtype=np.int64)
    n_pool = int(sizes.sum())
    target = int(np.floor(fraction * n_pool + 1e-9))
    if fraction > 0 and n_pool >= 2:
        target = max(target, 1)
    quota = fraction * sizes
    counts = np.minimum(np.floor(quota + 1e-9).astype(np.int64), sizes)
    order = np.argsort(-(quota - counts), kind="stable")
    for i in order:
        if counts.sum() >= target:
            break
        if counts[i] < sizes[i]:
            counts[i] += 1
    return counts


###############################################################################
# serialization
###############################################################################
def _sample_record(s):
    return {
        "id": int(s.id),
        "skill": s.skill.name,
        "difficulty": float(s.difficulty),
        "is_general": bool(s.is_general),
        "gold": int(s.gold),
        "features": [float(v) for v in s.features],
        "answers": [float(v) for v in s.answers],
        "target": None if s.target is None else float(s.target),
        "tolerance": None if s.tolerance is None else float(s.tolerance),
    }


def write_suite(suite, path, config=None, seed=None):
    """
    Write `suite` as a header line followed by one JSON record per sample.

    Floats are written with their shortest round-trip repr, so
    :func:`read_suite` reproduces the suite bit for bit.
    """
    header = {
        "kind": SUITE_FORMAT,
        "version": SUITE_VERSION,
        "n_features": suite.n_features,
        "n_answers": suite.n_answers,
        "n_samples": len(suite),
        "seed": seed,
        "config": None if config is None else config.to_dict(),
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for s in suite:
            f.write(json.dumps(_sample_record(s)) + "\n")
    logger.info("wrote %d samples to %s", len(suite), path)


def read_suite(path):
    """inverse of :func:`write_suite`"""
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("kind") != SUITE_FORMAT:
            raise ContractError(f"{path} is not a suite file")
        samples = []
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            x = np.array(r["features"], dtype=float)
            x.setflags(write=False)
            samples.append(
                SampleInstance(
                    id=r["id"],
                    skill=SkillDimension[r["skill"]],
                    features=x,
                    answers=tuple(r["answers"]),
                    gold=r["gold"],
                    difficulty=r["difficulty"],
                    is_general=r["is_general"],
                    target=r["target"],
                    tolerance=r["tolerance"],
                )
            )
    if len(samples) != header["n_samples"]:
        raise ContractError(
            f"{path}: header announces {header['n_samples']} samples, found {len(samples)}"
        )
    return SampleSet(samples, n_features=header["n_features"], n_answers=header["n_answers"])
