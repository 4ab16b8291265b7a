"""
Command line driver
===================

``dppo generate | run | report | prefcheck``
"""
from __future__ import absolute_import

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import pandas as pd
import xarray as xr
import yaml

from .cached_decorators import gcached
from .curation import RolloutLog
from .exceptions import ConfigError, DPPOError
from .metaloop import (
    HISTORY_COLUMNS,
    LoopConfig,
    RunContext,
    StagnationConfig,
    pretrain_base,
    run_baseline,
    run_metaloop,
)
from .policy import save_checkpoint
from .prefcheck import ImplicitRewardConfig, run_checks
from .rewards import RewardSpec
from .taskgen import SuiteConfig, generate_suite, read_suite, split_holdout, write_suite

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "load_config",
    "config_from_dict",
    "cmd_generate",
    "cmd_run",
    "cmd_report",
    "cmd_prefcheck",
    "main",
]

MODES = ("dppo", "rl_only", "sft_only", "prefcheck")
COMPARED_MODES = ("dppo", "rl_only", "sft_only")

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_CONFIG = 2


###############################################################################
# configuration
###############################################################################
@dataclasses.dataclass(frozen=True)
class ExperimentConfig(object):
    """
    Everything needed to reproduce a run.

    Parameters
    ----------
    suite : SuiteConfig
    loop : LoopConfig
        carries the reward spec and stagnation settings
    prefcheck : ImplicitRewardConfig
    seeds : tuple of int
    mode : str
        one of ``dppo, rl_only, sft_only, prefcheck``
    out : str
        output directory
    suite_seed : int, optional
        seed of ``dppo generate``; runs without `suite_path` generate one
        suite per run seed
    suite_path : str, optional
        suite file shared by every seed
    """

    suite: SuiteConfig = dataclasses.field(default_factory=SuiteConfig)
    loop: LoopConfig = dataclasses.field(default_factory=LoopConfig)
    prefcheck: ImplicitRewardConfig = dataclasses.field(default_factory=ImplicitRewardConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    mode: str = "dppo"
    out: str = "runs"
    suite_seed: int = 0
    suite_path: str = None

    def __post_init__(self):
        seeds = tuple(self.seeds)
        if not seeds:
            raise ConfigError("at least one seed is required", "seeds")
        if any(not _is_int(s) for s in seeds):
            raise ConfigError(f"seeds must be integers, got {list(seeds)}", "seeds")
        object.__setattr__(self, "seeds", seeds)
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}, got {self.mode!r}", "mode")

    @property
    def reward(self):
        return self.loop.reward


def _is_int(x):
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def _coerce(value, ftype, key):
    if ftype is bool:
        ok = isinstance(value, bool)
    elif ftype is int:
        ok = _is_int(value)
    elif ftype is float:
        if isinstance(value, str):
            # yaml 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif ftype is tuple:
        ok = value is None or isinstance(value, (list, tuple))
        value = tuple(value) if isinstance(value, list) else value
    elif ftype is dict:
        ok = value is None or isinstance(value, dict)
    elif ftype is str:
        ok = value is None or isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {ftype.__name__}, got {value!r}", key)
    return value


def _build(cls, data, prefix, nested=None):
    """instantiate dataclass `cls` from mapping `data`, naming bad keys"""
    nested = nested or {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", prefix)
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kws = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else str(key)
        if key not in types or key in nested:
            raise ConfigError("unknown configuration key", dotted)
        kws[key] = _coerce(value, types[key], dotted)
    kws.update(nested)
    try:
        return cls(**kws)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), prefix or cls.__name__)


_NESTED_KEYS = ("suite", "loop", "reward", "stagnation", "prefcheck")
_TOP_KEYS = set(_NESTED_KEYS) | {"seeds", "mode", "out", "suite_seed", "suite_path"}


def config_from_dict(data):
    """
    Build an :class:`ExperimentConfig` from a nested mapping.

    Top level keys are ``suite, loop, reward, stagnation, prefcheck, seeds,
    mode, out, suite_seed, suite_path``.
    """
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", "config")
    data = dict(data or {})
    for key in data:
        if key not in _TOP_KEYS:
            raise ConfigError("unknown configuration key", str(key))
    reward = _build(RewardSpec, data.get("reward"), "reward")
    stagnation = _build(StagnationConfig, data.get("stagnation"), "stagnation")
    loop = _build(
        LoopConfig, data.get("loop"), "loop", nested={"reward": reward, "stagnation": stagnation}
    )
    top = {k: v for k, v in data.items() if k not in _NESTED_KEYS}
    return _build(
        ExperimentConfig,
        top,
        "",
        nested={
            "suite": _build(SuiteConfig, data.get("suite"), "suite"),
            "loop": loop,
            "prefcheck": _build(ImplicitRewardConfig, data.get("prefcheck"), "prefcheck"),
        },
    )


def load_config(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", "config")
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}", "config")
    return config_from_dict(data)


def _override(config, mode=None, seeds=None, loops=None, out=None):
    changes = {}
    if mode is not None:
        changes["mode"] = mode
    if seeds is not None:
        changes["seeds"] = tuple(seeds)
    if out is not None:
        changes["out"] = out
    if loops is not None:
        changes["loop"] = dataclasses.replace(config.loop, n_loops=int(loops))
    return dataclasses.replace(config, **changes) if changes else config


def parse_seeds(text):
    try:
        return tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {text!r}", "seeds")


###############################################################################
# report
###############################################################################
class MetricsReport(object):
    """
    Cross-seed aggregation of loop histories.

    Parameters
    ----------
    histories : dict
        seed -> history DataFrame (columns of :class:`LoopHistory`)
    summaries : dict, optional
        seed -> run summary (base metrics, budget)
    """

    def __init__(self, histories, summaries=None, mode=None):
        if not histories:
            raise ConfigError("no histories to aggregate", "seeds")
        self.histories = dict(sorted(histories.items()))
        self.summaries = dict(summaries or {})
        self.mode = mode

    @property
    def seeds(self):
        return list(self.histories)

    @property
    def metrics(self):
        return [c for c in HISTORY_COLUMNS if c not in ("k", "phase")]

    @gcached()
    def data(self):
        """DataArray with dims ``(seed, row, metric)``"""
        arrays = [
            xr.DataArray(
                frame[self.metrics].to_numpy(dtype=float),
                dims=("row", "metric"),
                coords={"row": np.arange(len(frame)), "metric": self.metrics},
            )
            for frame in self.histories.values()
        ]
        return xr.concat(arrays, dim=pd.Index(self.seeds, name="seed"), join="outer")

    @gcached()
    def labels(self):
        longest = max(self.histories.values(), key=len)
        return longest[["k", "phase"]].reset_index(drop=True)

    @property
    def mean(self):
        return self.data.mean("seed", skipna=True)

    @property
    def std(self):
        return self.data.std("seed", ddof=0, skipna=True)

    @property
    def count(self):
        return self.data.isel(metric=0).count("seed")

    def to_frame(self):
        out = self.labels.copy()
        out.insert(2, "n_seeds", self.count.values.astype(np.int64))
        mean = self.mean.transpose("row", "metric").values
        std = self.std.transpose("row", "metric").values
        for j, m in enumerate(self.metrics):
            out[f"{m}_mean"] = mean[:, j]
            out[f"{m}_std"] = std[:, j]
        return out

    def final(self):
        """per-seed final held-out, general and retention values"""
        rows = []
        for seed, frame in self.histories.items():
            last = frame.iloc[-1]
            base = self.summaries.get(seed, {}).get("base", {})
            general_base = base.get("general", np.nan)
            rows.append(
                {
                    "seed": seed,
                    "heldout": last["heldout"],
                    "general": last["general"],
                    "heldout_base": base.get("heldout", np.nan),
                    "general_base": general_base,
                    "retention": last["general"] - general_base,
                    "budget": last["rollouts"] + last["grad_evals"],
                }
            )
        return pd.DataFrame(rows)

    @classmethod
    def from_dir(cls, mode_dir, mode=None):
        histories, summaries = {}, {}
        for name in sorted(os.listdir(mode_dir)):
            path = os.path.join(mode_dir, name)
            summary = os.path.join(path, "summary.json")
            if not name.startswith("seed_") or not os.path.exists(summary):
                continue
            seed = int(name[len("seed_") :])
            histories[seed] = pd.read_csv(os.path.join(path, "history.csv"))
            with open(summary) as f:
                summaries[seed] = json.load(f)
        if not histories:
            return None
        return cls(histories, summaries, mode=mode)


###############################################################################
# commands
###############################################################################
def cmd_generate(config_path, out_path, seed=None):
    config = load_config(config_path)
    seed = config.suite_seed if seed is None else seed
    suite = generate_suite(config.suite, seed)
    write_suite(suite, out_path, config=config.suite, seed=seed)
    return suite


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    raise TypeError(f"not serializable: {type(x).__name__}")


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _matched_budget(out, seed):
    path = os.path.join(out, "dppo", f"seed_{seed}", "summary.json")
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return int(json.load(f)["budget"]["total"])


def _run_seed(config, seed, seed_dir, suite=None):
    os.makedirs(seed_dir, exist_ok=True)
    if suite is None:
        suite = generate_suite(config.suite, seed)
    loop = config.loop
    train, _ = split_holdout(suite, loop.holdout_fraction, seed)
    base = pretrain_base(train, loop, seed)
    save_checkpoint(base, os.path.join(seed_dir, "checkpoint_k0_base.txt"))

    log = RolloutLog(os.path.join(seed_dir, "rollouts.csv"), overwrite=True)
    ctx = RunContext(seed, log=log, stats_dir=seed_dir)

    def on_phase(params, selector, row):
        name = f"checkpoint_k{selector.loop}_{selector.sigma.value}.txt"
        save_checkpoint(params, os.path.join(seed_dir, name))

    if config.mode == "dppo":
        params, history = run_metaloop(loop, suite, base, seed, ctx=ctx, on_phase=on_phase)
    else:
        budget = _matched_budget(config.out, seed)
        if budget is None:
            logger.info("seed %d: no stored dppo run, running matched metaloop first", seed)
        params, history = run_baseline(
            config.mode, loop, suite, base, seed, budget=budget, ctx=ctx, on_phase=on_phase
        )

    history.to_csv(os.path.join(seed_dir, "history.csv"))
    summary = {
        "mode": config.mode,
        "seed": seed,
        "base": history.base,
        "final": {k: v for k, v in history.rows[-1].items() if k not in ("k", "phase")},
        "budget": dict(ctx.budget.as_dict(), total=ctx.budget.total),
        "n_phases": len(history),
    }
    _write_json(summary, os.path.join(seed_dir, "summary.json"))
    return params, history


def cmd_run(config_path, mode=None, seeds=None, loops=None, out=None):
    """
    Run the configured mode for every seed.

    Returns
    -------
    report : MetricsReport or pandas.DataFrame
        the prefcheck table in ``prefcheck`` mode
    """
    config = _override(load_config(config_path), mode=mode, seeds=seeds, loops=loops, out=out)
    if config.mode == "prefcheck":
        return cmd_prefcheck(
            out=os.path.join(config.out, "prefcheck"),
            seeds=config.seeds,
            beta=config.prefcheck.beta,
        )

    mode_dir = os.path.join(config.out, config.mode)
    os.makedirs(mode_dir, exist_ok=True)
    shared = read_suite(config.suite_path) if config.suite_path else None

    histories, summaries = {}, {}
    for seed in config.seeds:
        seed_dir = os.path.join(mode_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        marker = os.path.join(seed_dir, "RUNNING")
        with open(marker, "w") as f:
            f.write(f"{config.mode} seed {seed}\n")
        logger.info("%s seed %d -> %s", config.mode, seed, seed_dir)
        try:
            _, history = _run_seed(config, seed, seed_dir, suite=shared)
        except BaseException as e:
            with open(marker, "a") as f:
                f.write(f"{type(e).__name__}: {e}\n")
            os.replace(marker, os.path.join(seed_dir, "ABORTED"))
            raise
        os.remove(marker)
        histories[seed] = history.frame
        with open(os.path.join(seed_dir, "summary.json")) as f:
            summaries[seed] = json.load(f)

    report = MetricsReport(histories, summaries, mode=config.mode)
    report.to_frame().to_csv(os.path.join(mode_dir, "report.csv"), index=False)
    logger.info("wrote %s", os.path.join(mode_dir, "report.csv"))
    return report


def cmd_report(run_dir):
    """
    Compare the modes stored under `run_dir`.

    Writes ``comparison.csv`` (one row per mode, absent modes marked) and
    ``curves.csv`` (every history row with its mode and seed).
    """
    comparison, curves = [], []
    for mode in COMPARED_MODES:
        mode_dir = os.path.join(run_dir, mode)
        report = MetricsReport.from_dir(mode_dir, mode) if os.path.isdir(mode_dir) else None
        if report is None:
            logger.warning("mode %s absent from %s", mode, run_dir)
            comparison.append({"mode": mode, "present": False, "n_seeds": 0})
            continue
        final = report.final()
        row = {"mode": mode, "present": True, "n_seeds": len(final)}
        for col in ("heldout", "heldout_base", "general", "general_base", "retention", "budget"):
            row[f"{col}_mean"] = float(final[col].mean())
            row[f"{col}_std"] = float(final[col].std(ddof=0))
        comparison.append(row)
        for seed, frame in report.histories.items():
            curves.append(frame.assign(mode=mode, seed=seed))

    comparison = pd.DataFrame(comparison)
    comparison.to_csv(os.path.join(run_dir, "comparison.csv"), index=False)
    if curves:
        curves = pd.concat(curves, ignore_index=True)
        rest = [c for c in curves.columns if c not in ("mode", "seed")]
        curves = curves[["mode", "seed"] + rest]
    else:
        curves = pd.DataFrame(columns=["mode", "seed"] + HISTORY_COLUMNS)
    curves.to_csv(os.path.join(run_dir, "curves.csv"), index=False)
    logger.info("wrote comparison and curves to %s", run_dir)
    return comparison, curves


def cmd_prefcheck(out=None, seeds=(0,), beta=1.0):
    """run the preference-learning checks; returns the report table"""
    ImplicitRewardConfig(beta)
    frames = []
    for seed in seeds:
        frames.append(run_checks(seed, beta=beta).assign(seed=seed))
    report = pd.concat(frames, ignore_index=True)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        report.to_csv(os.path.join(out, "prefcheck.csv"), index=False)
    return report


###############################################################################
# entry point
###############################################################################
def _parser():
    p = argparse.ArgumentParser(
        prog="dppo", description="alternating RL/SFT metaloop experiments"
    )
    p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic suite")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="suite file")
    g.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("run", help="run a mode for every seed")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=MODES, default=None)
    r.add_argument("--seeds", default=None, help="comma separated seeds")
    r.add_argument("--loops", type=int, default=None)
    r.add_argument("--out", default=None, help="output directory")

    c = sub.add_parser("report", help="compare modes of a run directory")
    c.add_argument("run_dir")

    pc = sub.add_parser("prefcheck", help="run preference-learning checks")
    pc.add_argument("--config", default=None)
    pc.add_argument("--seeds", default=None)
    pc.add_argument("--out", default=None)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "generate":
            cmd_generate(args.config, args.out, seed=args.seed)
        elif args.command == "run":
            seeds = parse_seeds(args.seeds) if args.seeds else None
            result = cmd_run(
                args.config, mode=args.mode, seeds=seeds, loops=args.loops, out=args.out
            )
            if isinstance(result, pd.DataFrame) and not result["passed"].all():
                logger.error("prefcheck failures:\n%s", result[~result["passed"]])
                return EXIT_ABORT
        elif args.command == "report":
            comparison, _ = cmd_report(args.run_dir)
            print(comparison.to_string(index=False))
        elif args.command == "prefcheck":
            config = load_config(args.config) if args.config else ExperimentConfig()
            seeds = parse_seeds(args.seeds) if args.seeds else (0,)
            report = cmd_prefcheck(out=args.out, seeds=seeds, beta=config.prefcheck.beta)
            print(report.to_string(index=False))
            if not report["passed"].all():
                return EXIT_ABORT
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (DPPOError, OSError) as e:
        logger.error("aborted: %s", e)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
