import numpy as np
import pytest

import dppo.policy as policy
from dppo.cached_decorators import gcached
from dppo.curation import DifficultyBuffer
from dppo.metaloop import LoopConfig
from dppo.rewards import RewardSpec
from dppo.taskgen import SuiteConfig, generate_suite, split_holdout


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="run slow experiments"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed experiments, needs --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


class Data(object):
    """wrapper around a suite, a policy and a buffer for generic testing"""

    def __init__(self, count_per_skill, n_answers, seed, n_noise=4):
        print(
            f"count_per_skill:{count_per_skill}, K:{n_answers}, seed:{seed}", end=" "
        )
        self.count_per_skill = count_per_skill
        self.n_answers = n_answers
        self.seed = seed
        self.n_noise = n_noise

    @gcached()
    def config(self):
        return SuiteConfig(
            n_features=7 + 7 * self.n_answers + self.n_noise,
            n_answers=self.n_answers,
            count_per_skill=self.count_per_skill,
        )

    @gcached()
    def suite(self):
        return generate_suite(self.config, self.seed)

    @gcached()
    def split(self):
        return split_holdout(self.suite, 0.2, self.seed)

    @property
    def train(self):
        return self.split[0]

    @property
    def heldout(self):
        return self.split[1]

    @property
    def spec(self):
        return RewardSpec()

    @gcached()
    def loop_config(self):
        return LoopConfig(
            n_loops=2,
            rl_epoch_cap=3,
            rl_batch_size=16,
            sft_epochs=1,
            sft_batch_size=16,
            base_epochs=1,
        )

    def rng(self, *keys):
        return np.random.default_rng([self.seed, *keys])

    @gcached()
    def params(self):
        theta = 0.3 * self.rng(1).standard_normal(
            (self.config.n_features, self.n_answers + 1)
        )
        return policy.PolicyParams(theta)

    @property
    def F(self):
        return self.config.n_features

    @property
    def K(self):
        return self.n_answers

    def buffer(self, **kws):
        return DifficultyBuffer(self.suite, **kws)

    def unpack(self, *args):
        out = tuple(getattr(self, x) for x in args)
        if len(out) == 1:
            out = out[0]
        return out


def get_params():
    for count_per_skill in [10, 25]:
        for n_answers in [2, 4]:
            for seed in [0, 7]:
                yield count_per_skill, n_answers, seed


@pytest.fixture(params=get_params(), scope="module")
def other(request):
    return Data(*request.param)


@pytest.fixture(scope="module")
def small():
    return Data(10, 3, 11)
