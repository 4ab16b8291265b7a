import numpy as np
import pytest

import dppo.policy as policy
from dppo.exceptions import ContractError, DivergenceError
from dppo.policy import PolicyParams, RolloutGroup, StructuredResponse
from dppo.rewards import RewardSpec, is_success
from dppo.taskgen import SampleInstance, SkillDimension, teacher_solve
from dppo.utils import finite_difference, relative_error


def make_sample(x, K, gold=0, sample_id=0):
    return SampleInstance(
        id=sample_id,
        skill=SkillDimension.TASK_PLANNING,
        features=np.asarray(x, dtype=float),
        answers=tuple(float(i) for i in range(K)),
        gold=gold,
        difficulty=0.0,
    )


def random_response(sample, rng):
    slot = int(rng.integers(0, sample.n_answers))
    if sample.is_numeric:
        return StructuredResponse(bool(rng.random() < 0.5), float(sample.answers[slot]))
    return StructuredResponse(bool(rng.random() < 0.5), slot)


# distributions
def test_uniform():
    params = policy.init_params(5, 4)
    s = make_sample(np.ones(5), 4)
    np.testing.assert_allclose(policy.answer_distribution(params, s), [0.25] * 4)
    assert policy.format_probability(params, s) == 0.5


def test_two_thirds():
    theta = np.zeros((1, 3))
    theta[0, 0] = np.log(2.0)
    s = make_sample([1.0], 2)
    np.testing.assert_allclose(
        policy.answer_distribution(PolicyParams(theta), s), [2.0 / 3.0, 1.0 / 3.0]
    )


def test_shift_invariance(other):
    theta = other.params.theta.copy()
    shifted = theta.copy()
    # same score added to every answer slot
    c = other.rng(3).standard_normal(other.F)
    shifted[:, :-1] += c[:, None]
    np.testing.assert_allclose(
        policy.answer_distributions(other.params, other.suite.features),
        policy.answer_distributions(PolicyParams(shifted), other.suite.features),
        rtol=1e-10,
        atol=1e-12,
    )


def test_distributions_normalized(other):
    probs = policy.answer_distributions(other.params, other.suite.features)
    assert probs.shape == (len(other.suite), other.K)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
    p = policy.format_probabilities(other.params, other.suite.features)
    assert ((p > 0) & (p < 1)).all()


def test_shape_mismatch(other):
    params = policy.init_params(other.F + 1, other.K)
    with pytest.raises(ContractError):
        policy.answer_distribution(params, other.suite[0])
    params = policy.init_params(other.F, other.K + 1)
    with pytest.raises(ContractError):
        policy.answer_distribution(params, other.suite[0])
    with pytest.raises(ContractError):
        PolicyParams(np.zeros((3, 2)))


# sampling
def test_point_mass():
    theta = np.zeros((1, 5))
    theta[0, 0] = 1000.0
    theta[0, -1] = 1000.0
    params = PolicyParams(theta)
    s = make_sample([1.0], 4)
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = policy.sample_response(params, s, rng)
        assert r.answer == 0
        assert r.format


def test_sampling_deterministic(other):
    def draws(seed):
        rng = np.random.default_rng(seed)
        return [policy.sample_response(other.params, s, rng) for s in other.suite]

    assert draws(4) == draws(4)
    slots_a, fmt_a = policy.sample_responses(
        other.params, other.suite.features, np.random.default_rng(9), 8
    )
    slots_b, fmt_b = policy.sample_responses(
        other.params, other.suite.features, np.random.default_rng(9), 8
    )
    assert slots_a.shape == (len(other.suite), 8)
    np.testing.assert_array_equal(slots_a, slots_b)
    np.testing.assert_array_equal(fmt_a, fmt_b)


@pytest.mark.parametrize("K", [2, 4])
def test_uniform_frequencies(K):
    n = 10000
    params = policy.init_params(3, K)
    slots, formats = policy.sample_responses(
        params, np.ones((1, 3)), np.random.default_rng(123), n
    )
    freq = np.bincount(slots[0], minlength=K) / n
    sigma = np.sqrt((1.0 / K) * (1 - 1.0 / K) / n)
    # 4 sigma per bin keeps the family-wise false alarm rate below 1e-3
    assert (np.abs(freq - 1.0 / K) < 4 * sigma).all()
    assert abs(formats.mean() - 0.5) < 4 * np.sqrt(0.25 / n)


# log-probabilities
def test_log_prob_uniform():
    params = policy.init_params(5, 4)
    s = make_sample(np.ones(5), 4)
    for a in range(4):
        for fmt in (True, False):
            np.testing.assert_allclose(
                policy.log_prob(params, s, StructuredResponse(fmt, a)), np.log(0.125)
            )


def test_log_prob_point_mass():
    theta = np.zeros((1, 4))
    theta[0, 1] = 1000.0
    theta[0, -1] = 1000.0
    params = PolicyParams(theta)
    s = make_sample([1.0], 3)
    assert policy.log_prob(params, s, StructuredResponse(True, 1)) == 0.0
    # zero-probability response
    theta[0, 1] = np.inf
    params = PolicyParams(theta)
    assert policy.log_prob(params, s, StructuredResponse(True, 0)) == -np.inf
    with pytest.raises(ContractError):
        policy.grad_log_prob(params, s, StructuredResponse(True, 0))


def test_log_prob_normalized(other):
    for s in other.suite.samples[:10]:
        total = 0.0
        for a in range(other.K):
            for fmt in (True, False):
                if s.is_numeric:
                    r = StructuredResponse(fmt, float(s.answers[a]))
                else:
                    r = StructuredResponse(fmt, a)
                lp = policy.log_prob(other.params, s, r)
                assert lp <= 0.0
                total += np.exp(lp)
        np.testing.assert_allclose(total, 1.0, rtol=1e-12)


def test_grad_log_prob_finite_difference(other):
    rng = other.rng(7)
    for _ in range(10):
        theta = 0.5 * rng.standard_normal((other.F, other.K + 1))
        s = other.suite[int(rng.integers(len(other.suite)))]
        r = random_response(s, rng)

        def func(t):
            return policy.log_prob(PolicyParams(t), s, r)

        g = np.asarray(policy.grad_log_prob(PolicyParams(theta), s, r))
        assert relative_error(g, finite_difference(func, theta)) < 1e-5


def test_grad_log_prob_many():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        F, K = 4, int(rng.integers(2, 5))
        theta = rng.standard_normal((F, K + 1))
        s = make_sample(rng.standard_normal(F), K)
        r = random_response(s, rng)
        g = np.asarray(policy.grad_log_prob(PolicyParams(theta), s, r))
        fd = finite_difference(lambda t: policy.log_prob(PolicyParams(t), s, r), theta)
        assert relative_error(g, fd) < 1e-5


def test_grad_log_prob_k2():
    phi = np.array([1.0, -2.0, 0.5])
    s = make_sample(phi, 2)
    params = policy.init_params(3, 2)
    g = np.asarray(policy.grad_log_prob(params, s, StructuredResponse(True, 0)))
    np.testing.assert_allclose(g[:, 0], 0.5 * phi)
    np.testing.assert_allclose(g[:, 1], -0.5 * phi)
    np.testing.assert_allclose(g[:, 2], 0.5 * phi)


def test_score_function_mean_zero():
    rng = np.random.default_rng(8)
    F, K = 3, 3
    params = PolicyParams(rng.standard_normal((F, K + 1)))
    s = make_sample(rng.standard_normal(F), K)
    # exact expectation over the K * 2 responses
    total = np.zeros(params.shape)
    for a in range(K):
        for fmt in (True, False):
            r = StructuredResponse(fmt, a)
            total += np.exp(policy.log_prob(params, s, r)) * np.asarray(
                policy.grad_log_prob(params, s, r)
            )
    np.testing.assert_allclose(total, 0.0, atol=1e-12)

    # Monte-Carlo version
    n = 4000
    slots, formats = policy.sample_responses(params, s.features, rng, n)
    g = np.zeros(params.shape)
    for a, fmt in zip(slots[0], formats[0]):
        g += np.asarray(policy.grad_log_prob(params, s, StructuredResponse(bool(fmt), int(a))))
    g /= n
    assert np.abs(g).max() < 5 * np.abs(s.features).max() / np.sqrt(n)


# SFT
def test_sft_descent():
    rng = np.random.default_rng(50)
    for _ in range(50):
        F, K = 4, 3
        params = PolicyParams(rng.standard_normal((F, K + 1)))
        batch = []
        for i in range(5):
            s = make_sample(rng.standard_normal(F), K, int(rng.integers(K)), i)
            batch.append((s, teacher_solve(s).response))
        x, slots, formats = policy._batch_arrays(params, batch)
        before = policy.batch_nll(params, x, slots, formats)
        after = policy.batch_nll(policy.sft_step(params, batch, 1e-3), x, slots, formats)
        assert after < before


def test_sft_monotone():
    s = make_sample([0.3, -0.2, 0.1], 3, gold=2)
    target = teacher_solve(s).response
    params = policy.init_params(3, 3)
    last = policy.log_prob(params, s, target)
    for _ in range(100):
        params = policy.sft_step(params, [(s, target)], 0.1)
        lp = policy.log_prob(params, s, target)
        assert lp > last
        last = lp
    assert params.step_count == 100


def test_sft_zero_lr(other):
    batch = [(s, teacher_solve(s).response) for s in other.suite.samples[:8]]
    out = policy.sft_step(other.params, batch, 0.0)
    np.testing.assert_array_equal(out.theta, other.params.theta)


def test_sft_matches_batch_gradient(other):
    batch = [(s, teacher_solve(s).response) for s in other.suite.samples[:6]]
    expected = np.zeros(other.params.shape)
    for s, r in batch:
        expected -= np.asarray(policy.grad_log_prob(other.params, s, r))
    expected /= len(batch)
    x, slots, formats = policy._batch_arrays(other.params, batch)
    np.testing.assert_allclose(
        policy.grad_batch_nll(other.params, x, slots, formats), expected, atol=1e-12
    )


def test_sft_divergence():
    params = PolicyParams(np.zeros((2, 3)))
    x = np.array([[np.inf, 0.0]])
    with pytest.raises(DivergenceError):
        policy.sft_update(params, x, [0], [True], 0.1)
    with pytest.raises(ContractError):
        policy.sft_step(params, [], 0.1)


# GRPO
def test_group_weights():
    np.testing.assert_allclose(policy.group_weights([1.0, 0.0]), [1.0, -1.0], rtol=1e-7)
    np.testing.assert_array_equal(policy.group_weights([0.3, 0.3, 0.3]), 0.0)
    with pytest.raises(ContractError):
        policy.group_weights([1.0])

    rng = np.random.default_rng(1000)
    r = rng.random((1000, 8))
    r[::7] = 0.5
    w = policy.group_weights(r)
    assert np.abs(w.mean(axis=-1)).max() < 1e-9


def test_grpo_direction(other):
    rng = other.rng(11)
    samples = other.suite.samples[:5]
    groups = []
    expected = np.zeros(other.params.shape)
    for s in samples:
        responses = [random_response(s, rng) for _ in range(4)]
        rewards = rng.random(4)
        groups.append(RolloutGroup(s, responses, rewards))
        w = policy.group_weights(rewards)
        for wi, r in zip(w, responses):
            expected += wi * np.asarray(policy.grad_log_prob(other.params, s, r))
    expected /= len(samples)

    out = policy.grpo_step(other.params, other.params, groups, 1.0)
    np.testing.assert_allclose(out.theta - other.params.theta, expected, atol=1e-10)


def test_grpo_flat_group(other):
    s = other.suite[0]
    rng = other.rng(12)
    group = RolloutGroup(s, [random_response(s, rng) for _ in range(4)], [0.4] * 4)
    out = policy.grpo_step(other.params, other.params, [group], 0.5)
    np.testing.assert_array_equal(out.theta, other.params.theta)


def test_grpo_small_group(other):
    s = other.suite[0]
    group = RolloutGroup(s, [teacher_solve(s).response], [1.0])
    with pytest.raises(ContractError):
        policy.grpo_step(other.params, other.params, [group], 0.1)
    with pytest.raises(ContractError):
        policy.grpo_step(other.params, other.params, [], 0.1)


def test_grpo_raises_good_response():
    s = make_sample([1.0, 0.5], 3, gold=1)
    params = policy.init_params(2, 3)
    good = StructuredResponse(True, 1)
    bad = StructuredResponse(True, 0)
    group = RolloutGroup(s, [good, bad], [1.0, 0.1])
    out = policy.grpo_step(params, params, [group], 0.5)
    assert policy.log_prob(out, s, good) > policy.log_prob(params, s, good)


# reference / persistence
def test_snapshot(other):
    ref = policy.snapshot_reference(other.params)
    before = ref.theta.copy()
    params = other.params
    rng = other.rng(13)
    s = other.suite[0]
    for _ in range(10):
        responses = [random_response(s, rng) for _ in range(4)]
        params = policy.grpo_step(params, ref, [RolloutGroup(s, responses, rng.random(4))], 0.3)
    np.testing.assert_array_equal(ref.theta, before)
    np.testing.assert_array_equal(policy.snapshot_reference(ref).theta, ref.theta)
    assert ref.theta is not other.params.theta
    with pytest.raises(ValueError):
        ref.theta[0, 0] = 1.0


def test_expected_success(other):
    spec = RewardSpec()
    p = policy.expected_success(other.params, other.suite, spec)
    assert ((p >= 0) & (p <= 1)).all()

    # explicit enumeration on a few samples
    for row in range(5):
        s = other.suite[row]
        total = 0.0
        for a in range(other.K):
            answer = float(s.answers[a]) if s.is_numeric else a
            r = StructuredResponse(True, answer)
            if is_success(s, r, spec):
                total += np.exp(policy.log_prob(other.params, s, r))
        np.testing.assert_allclose(p[row], total, rtol=1e-10)


def test_checkpoint(other, tmp_path):
    path = tmp_path / "theta.txt"
    params = PolicyParams(other.params.theta, 17)
    policy.save_checkpoint(params, path)
    back = policy.load_checkpoint(path)
    np.testing.assert_array_equal(back.theta, params.theta)
    assert back.step_count == 17

    path.write_text("# 3 3 0\n1 2\n")
    with pytest.raises(ContractError):
        policy.load_checkpoint(path)
