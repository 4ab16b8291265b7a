import math

import numpy as np
import pandas as pd
import pytest

import dppo.metaloop as metaloop
from dppo.curation import DifficultyBuffer, make_batch, rebalance
from dppo.exceptions import ConfigError, ContractError, DivergenceError
from dppo.metaloop import LoopConfig, Phase, RunContext
from dppo.policy import PolicyParams, expected_success, init_params
from dppo.rewards import RewardSpec, is_success
from dppo.taskgen import (
    SampleInstance,
    SampleSet,
    SkillDimension,
    SuiteConfig,
    generate_suite,
    teacher_solve,
)


def mastered_suite(n=12, K=3):
    """embodied samples with features ``e_gold + e_K`` and a policy solving all of them"""
    samples = []
    for i in range(n):
        gold = i % K
        x = np.zeros(K + 1)
        x[gold] = 1.0
        x[K] = 1.0
        x.setflags(write=False)
        samples.append(
            SampleInstance(
                id=i,
                skill=SkillDimension.TASK_PLANNING,
                features=x,
                answers=tuple(float(a) for a in range(K)),
                gold=gold,
                difficulty=i / n,
            )
        )
    theta = np.zeros((K + 1, K + 1))
    theta[np.arange(K), np.arange(K)] = 1000.0
    theta[K, K] = 1000.0
    return SampleSet(samples), PolicyParams(theta)


# configuration
def test_phase_sequence():
    seq = metaloop.phase_sequence(3)
    assert [(s.loop, s.sigma) for s in seq] == [
        (k, p) for k in (1, 2, 3) for p in (Phase.RL, Phase.SFT)
    ]
    seq = metaloop.phase_sequence(2, final_rl=True)
    assert len(seq) == 5
    assert (seq[-1].loop, seq[-1].sigma) == (3, Phase.RL)
    with pytest.raises(ContractError):
        metaloop.PhaseSelector(Phase.RL, 0)


@pytest.mark.parametrize(
    "kws, key",
    [
        (dict(n_loops=0), "loop.n_loops"),
        (dict(rollouts_per_sample=1), "loop.rollouts_per_sample"),
        (dict(rl_epoch_cap=-1), "loop.rl_epoch_cap"),
        (dict(lr_rl=float("nan")), "loop.lr_rl"),
        (dict(gen_replay_fraction=1.5), "loop.gen_replay_fraction"),
        (dict(holdout_fraction=1.0), "loop.holdout_fraction"),
        (dict(difficulty_schedule=[0.5, 0.0]), "loop.difficulty_schedule"),
    ],
)
def test_bad_loop_config(kws, key):
    with pytest.raises(ConfigError) as e:
        LoopConfig(**kws)
    assert e.value.key == key


def test_stagnation_config():
    with pytest.raises(ConfigError) as e:
        metaloop.StagnationConfig(epsilon=0.25)
    assert e.value.key == "stagnation.epsilon"
    with pytest.raises(ConfigError) as e:
        metaloop.StagnationConfig(threshold=1.5)
    assert e.value.key == "stagnation.threshold"


def test_difficulty_ceiling():
    config = LoopConfig(difficulty_schedule=[0.5, 0.75])
    assert config.difficulty_schedule == (0.5, 0.75)
    assert [config.difficulty_ceiling(k) for k in (1, 2, 3)] == [0.5, 0.75, 0.75]
    assert LoopConfig().difficulty_ceiling(2) == 1.0


def test_run_context_budget():
    ctx = RunContext(0, limit=100)
    assert ctx.fit(30, 2) == 30
    ctx.add_rollouts(80)
    assert ctx.remaining == 20
    assert ctx.fit(30, 8) == 2
    ctx.add_update(Phase.SFT, 1, 20)
    assert ctx.remaining == 0
    assert ctx.budget.as_dict() == dict(rollouts=80, grad_evals=20, updates=1)
    assert ctx.updates == [(1, "SFT", 20)]
    assert RunContext(0).fit(30, 8) == 30


def test_history_monotone():
    history = metaloop.LoopHistory()
    history.append({"k": 2, "phase": "RL"})
    with pytest.raises(ContractError):
        history.append({"k": 1, "phase": "SFT"})
    assert list(history.frame.columns) == metaloop.HISTORY_COLUMNS


# metaloop
def test_noop_loop(small):
    config = LoopConfig(n_loops=1, rl_epoch_cap=0, sft_epochs=0)
    params, history = metaloop.run_metaloop(config, small.suite, small.params, 3)
    np.testing.assert_array_equal(params.theta, small.params.theta)
    assert len(history) == 2
    assert history.phases == [(1, "RL"), (1, "SFT")]


def test_metaloop_history(other):
    config = other.loop_config
    ctx = RunContext(other.seed)
    seen = []
    params, history = metaloop.run_metaloop(
        config,
        other.suite,
        other.params,
        other.seed,
        ctx=ctx,
        on_phase=lambda p, sel, row: seen.append((sel.loop, sel.sigma.value)),
    )
    assert params.is_finite()
    assert history.phases == [(1, "RL"), (1, "SFT"), (2, "RL"), (2, "SFT")]
    assert seen == history.phases

    frame = history.frame
    for col in ["heldout", "general"]:
        assert ((frame[col] >= 0) & (frame[col] <= 1)).all()
    # budget columns are cumulative
    assert (np.diff(frame["rollouts"]) >= 0).all()
    assert (np.diff(frame["grad_evals"]) >= 0).all()
    assert frame["rollouts"].iloc[-1] == ctx.budget.rollouts

    # every update belongs to the phase that was running
    order = {(k, p): i for i, (k, p) in enumerate(history.phases)}
    positions = [order[(k, p)] for k, p, _ in ctx.updates]
    assert positions == sorted(positions)


def test_metaloop_final_rl(small):
    config = LoopConfig(
        n_loops=1, rl_epoch_cap=2, sft_epochs=1, base_epochs=0, final_rl=True, rl_batch_size=16
    )
    _, history = metaloop.run_metaloop(config, small.suite, small.params, 0)
    assert history.phases == [(1, "RL"), (1, "SFT"), (2, "RL")]


def test_metaloop_stats_export(small, tmp_path):
    ctx = RunContext(0, stats_dir=str(tmp_path))
    metaloop.run_metaloop(small.loop_config, small.suite, small.params, 0, ctx=ctx)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["stats_k1.csv", "stats_k2.csv"]
    frame = pd.read_csv(tmp_path / "stats_k2.csv")
    assert (frame["T"] > 0).all()
    # loop 2 samples seen in loop 1 carry their previous rate
    first = pd.read_csv(tmp_path / "stats_k1.csv").set_index("sample_id")
    carried = frame[frame["sample_id"].isin(first.index)]
    assert len(carried) > 0
    assert carried["S_R_prev"].notna().all()


def test_metaloop_deterministic(small):
    a_params, a = metaloop.run_metaloop(small.loop_config, small.suite, small.params, 11)
    b_params, b = metaloop.run_metaloop(small.loop_config, small.suite, small.params, 11)
    assert a.equals(b)
    np.testing.assert_array_equal(a_params.theta, b_params.theta)


def test_metaloop_bad_inputs(small):
    with pytest.raises(ContractError):
        metaloop.run_metaloop(
            small.loop_config, small.suite, init_params(small.F + 1, small.K), 0
        )
    embodied = small.suite.embodied()
    with pytest.raises(ContractError):
        metaloop.run_metaloop(small.loop_config, embodied, small.params, 0)


# RL phase
def test_rl_phase_mastered():
    suite, params = mastered_suite()
    buffer = DifficultyBuffer(suite)
    config = LoopConfig(rl_epoch_cap=5)
    out, buffer, metrics = metaloop.rl_phase(config, suite, params, buffer)
    assert metrics["n_rl"] == 0
    assert metrics["epochs"] == 0
    assert out is params
    assert (buffer.success_rates == 1.0).all()


def test_rl_phase_selection(other):
    config = LoopConfig(rl_epoch_cap=0)
    train = other.train
    buffer = DifficultyBuffer(train)
    ctx = RunContext(other.seed)
    params, buffer, metrics = metaloop.rl_phase(config, train, other.params, buffer, ctx)
    assert params is other.params
    d_rl = np.array(metrics["d_rl"], dtype=np.int64)
    np.testing.assert_array_equal(d_rl, rebalance(buffer))
    rates = buffer.success_rates[buffer.rows_of(d_rl)]
    assert ((rates >= 0) & (rates < 1)).all()
    # diagnosis only: T rollouts per embodied training sample
    n_embodied = int((~train.is_general).sum())
    assert ctx.budget.rollouts == config.rollouts_per_sample * n_embodied
    assert ctx.budget.updates == 0


def test_rl_phase_updates(other):
    config = LoopConfig(rl_epoch_cap=2, rl_batch_size=8)
    train = other.train
    ctx = RunContext(other.seed)
    params, buffer, metrics = metaloop.rl_phase(
        config, train, other.params, DifficultyBuffer(train), ctx
    )
    assert 0 <= metrics["epochs"] <= 2
    if metrics["n_rl"] and metrics["epochs"]:
        assert ctx.budget.updates > 0
        assert {p for _, p, _ in ctx.updates} == {"RL"}
    assert 0 <= metrics["sr_mean"] <= 1
    with pytest.raises(ContractError):
        metaloop.rl_phase(config, train, params, buffer, ctx)


def test_rl_phase_difficulty_ceiling(other):
    config = LoopConfig(rl_epoch_cap=0, difficulty_schedule=[0.5])
    train = other.train
    buffer = DifficultyBuffer(train)
    metaloop.rl_phase(config, train, other.params, buffer)
    observed = buffer.observed
    assert (train.difficulty[observed] <= 0.5).all()
    assert not train.is_general[observed].any()


def test_rl_phase_rediagnose(other):
    config = LoopConfig(rl_epoch_cap=0, rediagnose_rollouts=4)
    train = other.train
    buffer = DifficultyBuffer(train)
    ctx = RunContext(other.seed)
    metaloop.rl_phase(config, train, other.params, buffer, ctx)
    n_embodied = int((~train.is_general).sum())
    assert ctx.budget.rollouts == (config.rollouts_per_sample + 4) * n_embodied
    # the re-rollout epoch restarts each sample's counters
    observed = buffer.observed
    assert (buffer.counts[observed, 0] == 4).all()


# SFT data
def test_build_sft_dataset():
    suite = generate_suite(SuiteConfig(count_per_skill=40), 5)
    config = LoopConfig(gen_replay_fraction=0.5)
    buffer = DifficultyBuffer(suite)

    planning = suite.embodied().by_skill([SkillDimension.TASK_PLANNING])
    weak_ids = planning.ids[:10]
    rows = np.repeat([suite.row_of(i) for i in weak_ids], 8)
    buffer.push_batch(
        make_batch(suite, config.reward, rows, np.zeros(len(rows)), np.zeros(len(rows)), 1, 0)
    )
    part = metaloop.build_sft_dataset(buffer, suite, config)

    assert sorted(part.d_weak) == sorted(int(i) for i in weak_ids)
    assert sorted(part.d_rel) == sorted(int(i) for i in planning.ids[10:])
    n_targeted = len(part.d_weak) + len(part.d_rel)
    assert len(part.d_gen) == math.floor(0.5 * n_targeted)
    assert all(suite.get(i).is_general for i in part.d_gen)
    assert len(part.d_sft) == len(part.d_weak) + len(part.d_rel) + len(part.d_gen)

    spec = RewardSpec()
    for sample_id, target in part.d_sft.items():
        assert is_success(suite.get(sample_id), target, spec)


def test_build_sft_dataset_empty(small):
    buffer = DifficultyBuffer(small.suite)
    part = metaloop.build_sft_dataset(buffer, small.suite, small.loop_config)
    assert part.d_sft == {}
    assert part.sizes() == dict(n_rl=0, n_weak=0, n_rel=0, n_gen=0, n_sft=0)


def test_build_sft_dataset_replay_start(small):
    buffer = DifficultyBuffer(small.suite)
    rows = np.repeat(np.flatnonzero(~small.suite.is_general)[:3], 4)
    buffer.push_batch(
        make_batch(small.suite, RewardSpec(), rows, np.zeros(len(rows)), np.zeros(len(rows)), 1, 0)
    )
    config = LoopConfig(gen_replay_start=2)
    assert metaloop.build_sft_dataset(buffer, small.suite, config, loop=1).d_gen == {}
    assert len(metaloop.build_sft_dataset(buffer, small.suite, config, loop=2).d_gen) > 0


# SFT phase
def test_sft_phase_empty(small):
    params, metrics = metaloop.sft_phase(small.params, {}, small.loop_config, small.suite)
    assert params is small.params
    assert metrics["epochs"] == 0


def test_sft_phase_descent(other):
    config = LoopConfig(sft_epochs=3, sft_batch_size=10000, lr_sft=0.01)
    ids = other.train.embodied().ids[:12]
    d_sft = {int(i): teacher_solve(other.train.get(i)).response for i in ids}
    ctx = RunContext(other.seed)
    params, metrics = metaloop.sft_phase(other.params, d_sft, config, other.train, ctx)
    assert metrics["epochs"] == 3
    assert metrics["nll_final"] < metrics["nll_initial"]
    assert ctx.budget.grad_evals == 3 * len(ids)
    assert ctx.budget.updates == 3
    assert ctx.budget.rollouts == 0


def test_sft_phase_refines_weak(other):
    config = LoopConfig(sft_epochs=3, lr_sft=0.01)
    weak = other.train.embodied().by_skill([SkillDimension.TASK_PLANNING])
    sample = weak[0]
    d_sft = {int(sample.id): teacher_solve(sample).response}
    params, _ = metaloop.sft_phase(other.params, d_sft, config, other.train)
    pool = other.train.subset([sample.id])
    before = expected_success(other.params, pool, config.reward)[0]
    after = expected_success(params, pool, config.reward)[0]
    assert after > before


# baselines
def test_sft_only_zero_lr(small):
    config = LoopConfig(n_loops=1, rl_epoch_cap=1, sft_epochs=1, lr_sft=0.0)
    params, history = metaloop.run_baseline(
        "sft_only", config, small.suite, small.params, 0, budget=500
    )
    np.testing.assert_array_equal(params.theta, small.params.theta)
    assert set(p for _, p in history.phases) == {"SFT"}
    last = history.rows[-1]
    assert last["rollouts"] + last["grad_evals"] == 500


def test_sft_only_divergence_names_loop(small, monkeypatch):
    losses = iter([1.0, 5.0])
    monkeypatch.setattr(metaloop, "batch_nll", lambda *args: next(losses))
    config = LoopConfig(n_loops=1, rl_epoch_cap=1, sft_epochs=1, sft_batch_size=10000)
    with pytest.raises(DivergenceError) as e:
        metaloop.run_baseline("sft_only", config, small.suite, small.params, 0, budget=200)
    assert e.value.phase == "SFT"
    assert e.value.loop is not None and e.value.loop >= 1
    assert f"loop={e.value.loop}" in str(e.value)


@pytest.mark.parametrize("mode", ["rl_only", "sft_only"])
def test_baseline_budget(mode):
    suite = generate_suite(SuiteConfig(count_per_skill=30), 2)
    config = LoopConfig(n_loops=2, rl_epoch_cap=3, rl_batch_size=16, sft_epochs=1, sft_batch_size=16)
    params = init_params(suite.n_features, suite.n_answers)
    ctx = RunContext(2)
    metaloop.run_metaloop(config, suite, params, 2, ctx=ctx)
    target = ctx.budget.total

    base_ctx = RunContext(2)
    _, history = metaloop.run_baseline(
        mode, config, suite, params, 2, budget=ctx.budget, ctx=base_ctx
    )
    assert abs(base_ctx.budget.total - target) <= 0.01 * target
    assert base_ctx.budget.total <= target
    phases = {p for _, p in history.phases}
    assert phases == ({"RL"} if mode == "rl_only" else {"SFT"})
    assert {p for _, p, _ in base_ctx.updates} <= phases


def test_baseline_bad_mode(small):
    with pytest.raises(ConfigError):
        metaloop.run_baseline("dppo", small.loop_config, small.suite, small.params, 0, budget=10)


# directional experiments on the default suite
def _default_runs(n_seeds=5):
    suite_config = SuiteConfig()
    config = LoopConfig()
    out = {"dppo": [], "rl_only": [], "sft_only": []}
    for seed in range(n_seeds):
        suite = generate_suite(suite_config, seed)
        train, _ = metaloop.split_holdout(suite, config.holdout_fraction, seed)
        base = metaloop.pretrain_base(train, config, seed)
        ctx = RunContext(seed)
        _, history = metaloop.run_metaloop(config, suite, base, seed, ctx=ctx)
        out["dppo"].append(history)
        for mode in ("rl_only", "sft_only"):
            _, h = metaloop.run_baseline(mode, config, suite, base, seed, budget=ctx.budget)
            out[mode].append(h)
    return out


@pytest.fixture(scope="module")
def default_runs():
    return _default_runs()


def _final(histories, col):
    return float(np.mean([h.rows[-1][col] for h in histories]))


def _drop(histories):
    return float(np.mean([h.base["general"] - h.rows[-1]["general"] for h in histories]))


@pytest.mark.slow
def test_dppo_beats_baselines(default_runs):
    dppo = _final(default_runs["dppo"], "heldout")
    assert dppo >= _final(default_runs["rl_only"], "heldout") + 0.05
    assert dppo >= _final(default_runs["sft_only"], "heldout") + 0.05


@pytest.mark.slow
def test_dppo_forgets_less(default_runs):
    assert _drop(default_runs["dppo"]) <= _drop(default_runs["rl_only"])


@pytest.mark.slow
def test_dppo_trajectory(default_runs):
    histories = default_runs["dppo"]
    per_loop = []
    for k in (1, 2, 3):
        per_loop.append(
            np.mean([[r["heldout"] for r in h.rows if r["k"] == k][-1] for h in histories])
        )
    assert per_loop[0] <= per_loop[1] <= per_loop[2]


def _loop_end(histories, col, k):
    return float(np.mean([[r[col] for r in h.rows if r["k"] == k][-1] for h in histories]))


@pytest.mark.slow
def test_dppo_per_skill_trajectory(default_runs):
    histories = default_runs["dppo"]
    improved = [
        skill.name
        for skill in SkillDimension
        if _loop_end(histories, f"heldout_{skill.label}", 3)
        > _loop_end(histories, f"heldout_{skill.label}", 1)
    ]
    assert len(improved) >= 4, improved


@pytest.mark.slow
def test_general_replay_limits_forgetting(default_runs):
    suite_config = SuiteConfig()
    config = LoopConfig(gen_replay_fraction=0.0)
    no_replay = []
    for seed in range(len(default_runs["dppo"])):
        suite = generate_suite(suite_config, seed)
        train, _ = metaloop.split_holdout(suite, config.holdout_fraction, seed)
        base = metaloop.pretrain_base(train, config, seed)
        _, history = metaloop.run_metaloop(config, suite, base, seed)
        assert all(r["n_gen"] == 0 for r in history.rows if r["phase"] == Phase.SFT.value)
        no_replay.append(history)
    assert _drop(default_runs["dppo"]) < _drop(no_replay)


@pytest.mark.slow
def test_easy_skill_stagnates():
    config = LoopConfig(n_loops=1)
    suite = generate_suite(SuiteConfig(), 0)
    train, _ = metaloop.split_holdout(suite, config.holdout_fraction, 0)
    base = metaloop.pretrain_base(train, config, 0)
    _, _, metrics = metaloop.rl_phase(config, train, base, DifficultyBuffer(train))
    stopped = metrics["stopped"]
    assert SkillDimension.TASK_SUCCESS_EVAL.name in stopped
    assert stopped[SkillDimension.TASK_SUCCESS_EVAL.name] < config.rl_epoch_cap
