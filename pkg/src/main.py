"""
Command-line entry point for REBEL experiments

    python -m src.main train --config configs/canonical_rebel.json
    python -m src.main compare --config a.json --config b.json --out runs/compare
    python -m src.main sweep --config a.json --param eta --values 0.3 0.7 1.0 2.0
    python -m src.main verify --verbose

Every run writes metrics.jsonl, policy.json, summary.json, curve.csv and
run.log into its output directory and adds a row to the results database.
"""

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from src.baselines import run_baseline
from src.database import get_database_path, init_database, record_run_summary
from src.environments import ContextualBandit
from src.formats import (
    EnvironmentFile,
    FormatError,
    MetricsWriter,
    load_environment,
    read_json,
    save_policy,
    write_curve,
    write_json,
)
from src.logging_config import get_default_level, get_logger, setup_logging
from src.models import (
    Algorithm,
    BaselineConfig,
    ComparisonRow,
    ExperimentConfig,
    FeedbackKind,
    PolicyKind,
    RebelConfig,
    RunResult,
    RunSummary,
    SamplerSpec,
    SelfPlayConfig,
    SolverKind,
)
from src.numerics import make_rng
from src.policies import (
    LinearSoftmaxPolicy,
    SoftmaxPolicy,
    TabularSoftmaxPolicy,
    expected_kl,
    expected_reward,
)
from src.rebel import RecordSink, RegressionDivergenceError, optimal_value, run_rebel
from src.sample_data import BUILTIN_ENVIRONMENTS, builtin_environment
from src.selfplay import SelfPlayResult, run_spo_rebel
from src.theory_checks import run_battery

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGED = 3

CONFIG_KEYS = {"env", "algo", "params", "seed", "T", "batch_size", "eta", "gamma", "policy", "out"}
SWEEP_PARAMETERS = {"eta": float, "gamma": float, "seed": int, "batch_size": int, "T": int}

REBEL_PARAMS = {
    "base_dist",
    "response_dist",
    "solver",
    "gd_steps",
    "gd_step_size",
    "population",
}
SELFPLAY_PARAMS = {
    "base_dist",
    "solver",
    "feedback",
    "opponent_samples",
    "gd_steps",
    "gd_step_size",
}
BASELINE_PARAMS = {"k", "epsilon", "beta", "inner_steps", "dpo_steps", "population"}


class ConfigError(ValueError):
    """Raised for an invalid experiment, comparison or sweep setup"""

    pass


def load_experiment_config(path: str | Path, **overrides: Any) -> ExperimentConfig:
    """
    Read an experiment config file and apply CLI overrides

    A relative env path is resolved against the config file's directory;
    built-in names (canonical, rps) are kept as they are.
    """
    path = Path(path)
    document = read_json(path)
    unknown = set(document) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    for key, value in overrides.items():
        if value is not None:
            document[key] = value
    if "env" not in document or "algo" not in document:
        raise ConfigError(f"{path}: 'env' and 'algo' are required")

    env = str(document["env"])
    if env not in BUILTIN_ENVIRONMENTS and not Path(env).is_absolute():
        env = str(path.parent / env)
    params = document.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"{path}: 'params' must be an object")

    try:
        return ExperimentConfig(
            env=env,
            algo=Algorithm.parse(str(document["algo"])),
            seed=int(document.get("seed", 0)),
            T=int(document.get("T", 100)),
            batch_size=int(document.get("batch_size", 64)),
            eta=float(document.get("eta", 1.0)),
            gamma=float(document.get("gamma", 0.0)),
            policy=PolicyKind(document.get("policy", "tabular")),
            out=str(document.get("out", "runs/default")),
            params=params,
        )
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_environment_for(config: ExperimentConfig) -> EnvironmentFile:
    if config.env in BUILTIN_ENVIRONMENTS:
        return EnvironmentFile(env=builtin_environment(config.env))
    if not Path(config.env).exists():
        raise ConfigError(f"Environment file not found: {config.env}")
    return load_environment(config.env)


def initial_policy(config: ExperimentConfig, env_file: EnvironmentFile) -> SoftmaxPolicy:
    """pi_0: uniform tabular logits or zero linear weights"""
    env = env_file.env
    if config.policy is PolicyKind.TABULAR:
        return TabularSoftmaxPolicy.uniform(env.num_contexts, env.num_actions)
    if env_file.features is None:
        raise ConfigError(f"Linear policy needs features in the environment file {config.env}")
    return LinearSoftmaxPolicy(
        feature_table=env_file.features, theta=np.zeros(env_file.features.shape[2])
    )


def _check_params(config: ExperimentConfig, allowed: set[str]) -> dict[str, Any]:
    unknown = set(config.params) - allowed
    if unknown:
        raise ConfigError(f"Unknown params for {config.algo.value}: {sorted(unknown)}")
    return config.params


def _default_solver(config: ExperimentConfig) -> str:
    if config.policy is PolicyKind.TABULAR:
        return SolverKind.EXACT_TABULAR.value
    return SolverKind.GAUSS_NEWTON.value


def rebel_config(config: ExperimentConfig) -> RebelConfig:
    params = _check_params(config, REBEL_PARAMS)
    return RebelConfig(
        eta=config.eta,
        T=config.T,
        batch_size=config.batch_size,
        base_dist=SamplerSpec.parse(params.get("base_dist", "on_policy")),
        response_dist=SamplerSpec.parse(params.get("response_dist", "on_policy")),
        solver=SolverKind(params.get("solver", _default_solver(config))),
        gd_steps=int(params.get("gd_steps", 200)),
        gd_step_size=float(params.get("gd_step_size", 0.1)),
        gamma=config.gamma,
        population=bool(params.get("population", False)),
    )


def selfplay_config(config: ExperimentConfig) -> SelfPlayConfig:
    params = _check_params(config, SELFPLAY_PARAMS)
    return SelfPlayConfig(
        eta=config.eta,
        T=config.T,
        batch_size=config.batch_size,
        base_dist=SamplerSpec.parse(params.get("base_dist", "on_policy")),
        solver=SolverKind(params.get("solver", _default_solver(config))),
        feedback=FeedbackKind(params.get("feedback", "exact")),
        opponent_samples=int(params.get("opponent_samples", 1)),
        gd_steps=int(params.get("gd_steps", 200)),
        gd_step_size=float(params.get("gd_step_size", 0.1)),
    )


def baseline_config(config: ExperimentConfig) -> BaselineConfig:
    params = _check_params(config, BASELINE_PARAMS)
    return BaselineConfig(
        algo=config.algo,
        eta=config.eta,
        T=config.T,
        batch_size=config.batch_size,
        gamma=config.gamma,
        k=int(params.get("k", 2)),
        epsilon=float(params.get("epsilon", 0.2)),
        beta=float(params.get("beta", 1.0)),
        inner_steps=int(params.get("inner_steps", 4)),
        dpo_steps=int(params.get("dpo_steps", 50)),
        population=bool(params.get("population", False)),
    )


AlgorithmSettings = RebelConfig | SelfPlayConfig | BaselineConfig


def algorithm_settings(config: ExperimentConfig) -> AlgorithmSettings:
    """Typed settings of the configured algorithm from the experiment and its params"""
    try:
        if config.algo is Algorithm.SPO_REBEL:
            return selfplay_config(config)
        if config.algo is Algorithm.REBEL:
            return rebel_config(config)
        return baseline_config(config)
    except TypeError as e:
        raise ConfigError(f"Invalid params for {config.algo.value}: {e}") from None


def responses_per_iteration(config: ExperimentConfig) -> int:
    """Actions an algorithm samples per iteration; 0 for exact-expectation updates"""
    settings = algorithm_settings(dataclasses.replace(config, T=max(config.T, 1)))
    return settings.responses_per_iteration


def run_experiment(
    config: ExperimentConfig, env_file: EnvironmentFile, sink: RecordSink | None = None
) -> RunResult:
    """Dispatch to the configured algorithm; T = 0 evaluates pi_0 only"""
    env = env_file.env
    policy = initial_policy(config, env_file)
    rng = make_rng(config.seed)
    if config.algo is Algorithm.SPO_REBEL and env.preferences is None:
        raise ConfigError(f"spo_rebel needs preferences in the environment {env.name}")
    settings = algorithm_settings(config) if config.T > 0 else None

    if settings is None:
        return RunResult(algo=config.algo.value, records=[], policies=[policy])
    if isinstance(settings, SelfPlayConfig):
        return run_spo_rebel(
            env.preferences, settings, rng, rho=env.rho, initial_policy=policy, sink=sink
        )
    if isinstance(settings, RebelConfig):
        return run_rebel(env, settings, rng, initial_policy=policy, sink=sink)
    return run_baseline(env, settings, rng, initial_policy=policy, sink=sink)


def summarize_run(
    config: ExperimentConfig, env: ContextualBandit, result: RunResult, wall_time: float
) -> RunSummary:
    """Final reward, KL to pi_0, suboptimality, and the mean reward over pi_0 .. pi_T"""
    rewards = [expected_reward(env.rho, p.probs_table(), env.rewards) for p in result.policies]
    best = optimal_value(env)
    final = result.final_policy.probs_table()
    gap = None
    if isinstance(result, SelfPlayResult) and result.gap is not None:
        gap = result.gap.gap
    return RunSummary(
        algo=result.algo,
        env=env.name,
        seed=config.seed,
        T=config.T,
        batch_size=config.batch_size,
        eta=config.eta,
        gamma=config.gamma,
        final_reward=rewards[-1],
        final_kl_ref=expected_kl(final, result.policies[0].probs_table(), env.rho),
        suboptimality=best - rewards[-1],
        best_suboptimality=best - max(rewards),
        auc=float(np.mean(rewards)),
        wall_time=wall_time,
        duality_gap=gap,
    )


def execute_run(
    config: ExperimentConfig, command: str = "train", db_path: str | None = None
) -> RunSummary:
    """
    Run one experiment into config.out

    Metrics are flushed record by record, so a diverging run leaves the
    records written before the failure in metrics.jsonl.
    """
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    env_file = load_environment_for(config)
    started = time.perf_counter()
    with MetricsWriter(out_dir / "metrics.jsonl") as writer:
        result = run_experiment(config, env_file, sink=writer)
    wall_time = time.perf_counter() - started

    summary = summarize_run(config, env_file.env, result, wall_time)
    save_policy(result.final_policy, out_dir / "policy.json")
    write_json(dataclasses.asdict(summary), out_dir / "summary.json")
    write_curve(result.records, out_dir / "curve.csv")
    record_run_summary(summary, command, str(out_dir), db_path or get_database_path(str(out_dir)))
    logger.info(
        f"{config.label} on {summary.env}: final reward {summary.final_reward:.6f}, "
        f"suboptimality {summary.suboptimality:.6f}, KL to pi_0 {summary.final_kl_ref:.6f} "
        f"({writer.count} records in {out_dir})"
    )
    return summary


def cmd_train(config: ExperimentConfig) -> RunSummary:
    return execute_run(config, "train")


def _run_all(
    configs: list[ExperimentConfig], command: str, workers: int, out: Path
) -> list[RunSummary]:
    """Runs are independent (own RNG, own directory); results keep submission order"""
    db_path = init_database(get_database_path(str(out)))
    if workers <= 1:
        return [execute_run(config, command, db_path) for config in configs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda config: execute_run(config, command, db_path), configs))


def write_comparison(rows: list[ComparisonRow], out_dir: str | Path) -> None:
    """comparison.json and comparison.csv with one row per configured algorithm"""
    out_dir = Path(out_dir)
    records = [dataclasses.asdict(row) for row in rows]
    write_json({"rows": records}, out_dir / "comparison.json")
    with open(out_dir / "comparison.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(records[0]))
        writer.writeheader()
        writer.writerows(records)


def format_table(rows: list[ComparisonRow]) -> str:
    header = f"{'algo':<16}{'reward':>12}{'kl_ref':>12}{'subopt':>12}{'auc':>12}{'time_s':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.algo:<16}{row.final_reward:>12.6f}{row.final_kl_ref:>12.6f}"
            f"{row.suboptimality:>12.6f}{row.auc:>12.6f}{row.wall_time:>10.3f}"
        )
    return "\n".join(lines)


def cmd_compare(
    configs: list[ExperimentConfig], out: str | Path, workers: int = 1
) -> list[ComparisonRow]:
    """Run every config on the same environment and sample budget"""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    runs = {(c.env, c.T) for c in configs}
    if len(runs) != 1:
        raise ConfigError(
            f"compare needs a matched environment and iteration budget, got {sorted(runs)}"
        )
    # exact updates sample nothing and sit outside the response budget
    responses = {responses_per_iteration(c) for c in configs} - {0}
    if len(responses) > 1:
        raise ConfigError(
            f"compare needs a matched sample budget, got {sorted(responses)} responses"
            " per iteration"
        )
    out = Path(out)
    members = [
        dataclasses.replace(config, out=str(out / f"{index}_{config.label}"))
        for index, config in enumerate(configs)
    ]
    summaries = _run_all(members, "compare", workers, out)
    rows = [
        ComparisonRow.from_summary(config.label, summary)
        for config, summary in zip(members, summaries, strict=True)
    ]
    write_comparison(rows, out)
    print(format_table(rows))
    return rows


def parse_sweep_value(param: str, text: str) -> Any:
    """Typed value for a sweep parameter; params.* values are JSON or plain strings"""
    if param in SWEEP_PARAMETERS:
        try:
            return SWEEP_PARAMETERS[param](text)
        except ValueError:
            raise ConfigError(f"Invalid value '{text}' for {param}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _with_value(config: ExperimentConfig, param: str, value: Any, out: Path) -> ExperimentConfig:
    target = str(out / f"{param}={value}")
    if param.startswith("params."):
        params = {**config.params, param.removeprefix("params."): value}
        return dataclasses.replace(config, params=params, out=target)
    return dataclasses.replace(config, **{param: value}, out=target)


def cmd_sweep(
    config: ExperimentConfig, param: str, values: list[str], out: str | Path, workers: int = 1
) -> dict[str, Any]:
    """
    One run per value of param, aggregated into sweep.json and sweep.csv

    A seed sweep adds the mean and standard deviation across seeds; a gamma
    sweep adds the final reward against KL to pi_0 per value.
    """
    if param not in SWEEP_PARAMETERS and not (param.startswith("params.") and len(param) > 7):
        valid = ", ".join([*SWEEP_PARAMETERS, "params.<name>"])
        raise ConfigError(f"Unknown sweep parameter '{param}' (expected one of: {valid})")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out)
    parsed = [parse_sweep_value(param, text) for text in values]
    members = [_with_value(config, param, value, out) for value in parsed]
    summaries = _run_all(members, "sweep", workers, out)

    rows = [
        {"value": value, **dataclasses.asdict(summary)}
        for value, summary in zip(parsed, summaries, strict=True)
    ]
    report: dict[str, Any] = {"param": param, "rows": rows}
    if param == "seed":
        report["aggregate"] = {
            key: {
                "mean": float(np.mean([row[key] for row in rows])),
                "std": float(np.std([row[key] for row in rows])),
            }
            for key in ("final_reward", "final_kl_ref", "suboptimality", "auc")
        }
    if param == "gamma":
        report["frontier"] = [
            {"gamma": row["value"], "reward": row["final_reward"], "kl_ref": row["final_kl_ref"]}
            for row in rows
        ]

    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "sweep.json")
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(
            f"{param}={row['value']}: reward {row['final_reward']:.6f}, "
            f"kl_ref {row['final_kl_ref']:.6f}, subopt {row['suboptimality']:.6f}"
        )
    return report


def cmd_verify(seed: int = 0, instances: int = 100, verbose: bool = False) -> int:
    """Run the theory battery; exit status 1 iff any non-informational check fails"""
    results = run_battery(seed=seed, instances=instances)
    if verbose:
        for result in results:
            status = "INFO" if result.informational else ("PASS" if result.passed else "FAIL")
            measured = ", ".join(f"{k}={v:.6g}" for k, v in result.measured.items())
            print(f"{status} {result.name} [{result.instance}] bound={result.bound:.6g} {measured}")
            for warning in result.warnings:
                print(f"    warning: {warning}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rebel", description="REBEL contextual-bandit toolkit")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_overrides(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--seed", type=int)
        sub.add_argument("--out")
        sub.add_argument("--algo")
        sub.add_argument("--T", type=int)
        sub.add_argument("--eta", type=float)
        sub.add_argument("--batch-size", type=int, dest="batch_size")

    train = commands.add_parser("train", help="Run one experiment")
    train.add_argument("--config", required=True)
    add_overrides(train)

    compare = commands.add_parser("compare", help="Run several algorithms at a matched budget")
    compare.add_argument("--config", action="append", required=True)
    compare.add_argument("--out", default="runs/compare")
    compare.add_argument("--workers", type=int, default=1)

    sweep = commands.add_parser("sweep", help="Run one experiment per parameter value")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--param", required=True)
    sweep.add_argument("--values", nargs="*", default=[])
    sweep.add_argument("--workers", type=int, default=1)
    add_overrides(sweep)

    verify = commands.add_parser("verify", help="Run the numerical theory checks")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--instances", type=int, default=100)
    verify.add_argument("--verbose", action="store_true")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    keys = ("seed", "out", "algo", "T", "eta", "batch_size")
    return {key: getattr(args, key) for key in keys}


def _log_level(name: str | None) -> int:
    if name is None:
        return get_default_level()
    level = logging.getLevelName(name.upper())
    if not isinstance(level, int):
        raise ConfigError(f"Unknown log level '{name}'")
    return level


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        level = _log_level(args.log_level)
        if args.command == "verify":
            setup_logging(level)
            return cmd_verify(args.seed, args.instances, args.verbose)

        if args.command == "compare":
            configs = [load_experiment_config(path) for path in args.config]
            out = Path(args.out)
        else:
            config = load_experiment_config(args.config, **_overrides(args))
            out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        setup_logging(level, log_file=str(out / "run.log"))

        if args.command == "train":
            cmd_train(config)
        elif args.command == "compare":
            cmd_compare(configs, out, args.workers)
        else:
            cmd_sweep(config, args.param, args.values, out, args.workers)
        return EXIT_OK
    except RegressionDivergenceError as e:
        logger.error(f"Run diverged at iteration {e.iteration}: {e}")
        return EXIT_DIVERGED
    except (FormatError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
