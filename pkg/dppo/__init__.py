import pkg_resources

from .curation import DifficultyBuffer, rebalance
from .metaloop import LoopConfig, run_baseline, run_metaloop
from .policy import PolicyParams, grpo_step, sft_step
from .rewards import RewardSpec, composite_reward
from .taskgen import SampleSet, SkillDimension, SuiteConfig, generate_suite

try:
    __version__ = pkg_resources.get_distribution("dppo").version
except Exception:
    # Local copy or not installed with setuptools.
    __version__ = "999"

__all__ = [
    "DifficultyBuffer",
    "rebalance",
    "LoopConfig",
    "run_metaloop",
    "run_baseline",
    "PolicyParams",
    "grpo_step",
    "sft_step",
    "RewardSpec",
    "composite_reward",
    "SampleSet",
    "SkillDimension",
    "SuiteConfig",
    "generate_suite",
    "__version__",
]
