"""
File formats

Environment and policy files are JSON documents. Floats are written with
Python's shortest round-trip repr, so save followed by load reproduces every
value bit for bit.

Environment file:
    {
      "name": "canonical",
      "contexts": [0],                 # ids or labels; only the count matters
      "rho": [1.0],
      "actions": 3,
      "rewards": [1.0, 0.5, 0.0],      # row-major, contexts x actions
      "preferences": [...],            # optional, contexts x actions x actions
      "preference_format": "payoff",   # or "win_probability"
      "feature_dim": 2,                # optional linear features
      "features": [...]                # contexts x actions x feature_dim
    }

Policy checkpoint:
    {"kind": "tabular", "contexts": X, "actions": Y, "params": [...]}
    {"kind": "linear", "contexts": X, "actions": Y, "feature_dim": d,
     "params": [...], "features": [...]}

Metrics stream: one JSON object per line with the RunRecord fields in fixed
order (algo, iteration, expected_reward, kl_step, max_kl_step, kl_ref,
regression_loss, suboptimality, duality_gap); absent values are null.

Learning curve: CSV with header iteration,reward,kl_step,kl_ref,loss.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from src.environments import (
    ContextualBandit,
    PreferenceModel,
    preference_from_win_probabilities,
)
from src.logging_config import get_logger
from src.models import RunRecord
from src.policies import LinearSoftmaxPolicy, SoftmaxPolicy, TabularSoftmaxPolicy

logger = get_logger(__name__)

CURVE_COLUMNS = ("iteration", "reward", "kl_step", "kl_ref", "loss")


class FormatError(Exception):
    """Raised when an environment, checkpoint or metrics file is malformed"""

    pass


@dataclass(frozen=True)
class EnvironmentFile:
    """Parsed environment file: the bandit plus optional linear features"""

    env: ContextualBandit
    features: np.ndarray | None = None


def _read_json(path: str | Path) -> dict[str, Any]:
    try:
        with open(path) as f:
            document = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"File not found: {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(document, dict):
        raise FormatError(f"{path}: top level must be an object")
    return document


def _write_json(document: dict[str, Any], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=2)
        f.write("\n")


def _require(document: dict[str, Any], key: str, path: str | Path) -> Any:
    if key not in document:
        raise FormatError(f"{path}: missing required key '{key}'")
    return document[key]


def _float_array(values: Any, shape: tuple[int, ...], key: str, path: str | Path) -> np.ndarray:
    try:
        array = np.array(values, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{path}: '{key}' must be a list of numbers") from None
    if array.size != math.prod(shape):
        raise FormatError(f"{path}: '{key}' has {array.size} entries, expected {math.prod(shape)}")
    return array.reshape(shape)


def environment_to_dict(env: ContextualBandit, features: np.ndarray | None = None) -> dict:
    document: dict[str, Any] = {
        "name": env.name,
        "contexts": env.contexts,
        "rho": env.rho.tolist(),
        "actions": env.num_actions,
        "rewards": env.rewards.reshape(-1).tolist(),
    }
    if env.preferences is not None:
        document["preferences"] = env.preferences.payoff.reshape(-1).tolist()
        document["preference_format"] = "payoff"
    if features is not None:
        document["feature_dim"] = int(features.shape[2])
        document["features"] = np.asarray(features).reshape(-1).tolist()
    return document


def environment_from_dict(document: dict[str, Any], path: str | Path = "<env>") -> EnvironmentFile:
    """Build a bandit from a parsed environment document"""
    contexts = _require(document, "contexts", path)
    num_contexts = contexts if isinstance(contexts, int) else len(contexts)
    num_actions = _require(document, "actions", path)
    if not isinstance(num_actions, int) or isinstance(num_actions, bool):
        raise FormatError(f"{path}: 'actions' must be an integer count")
    rho = _float_array(_require(document, "rho", path), (num_contexts,), "rho", path)

    preferences = None
    if "preferences" in document:
        table = _float_array(
            document["preferences"],
            (num_contexts, num_actions, num_actions),
            "preferences",
            path,
        )
        fmt = document.get("preference_format", "payoff")
        try:
            if fmt == "payoff":
                preferences = PreferenceModel(payoff=table)
            elif fmt == "win_probability":
                preferences = preference_from_win_probabilities(table)
            else:
                raise FormatError(f"{path}: unknown preference_format '{fmt}'")
        except ValueError as e:
            raise FormatError(f"{path}: invalid preferences ({e})") from None

    if "rewards" in document:
        rewards = _float_array(document["rewards"], (num_contexts, num_actions), "rewards", path)
    elif preferences is not None:
        rewards = np.zeros((num_contexts, num_actions))
    else:
        raise FormatError(f"{path}: missing required key 'rewards'")

    features = None
    if "features" in document:
        dim = _require(document, "feature_dim", path)
        features = _float_array(
            document["features"], (num_contexts, num_actions, dim), "features", path
        )

    try:
        env = ContextualBandit(
            rho=rho,
            rewards=rewards,
            name=str(document.get("name", Path(str(path)).stem)),
            preferences=preferences,
        )
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    return EnvironmentFile(env=env, features=features)


def load_environment(path: str | Path) -> EnvironmentFile:
    env_file = environment_from_dict(_read_json(path), path)
    logger.debug(
        f"Loaded environment {env_file.env.name} from {path}: "
        f"{env_file.env.num_contexts} contexts, {env_file.env.num_actions} actions"
    )
    return env_file


def save_environment(
    env: ContextualBandit, path: str | Path, features: np.ndarray | None = None
) -> None:
    _write_json(environment_to_dict(env, features), path)


def policy_to_dict(policy: SoftmaxPolicy) -> dict[str, Any]:
    document: dict[str, Any] = {
        "kind": "tabular" if isinstance(policy, TabularSoftmaxPolicy) else "linear",
        "contexts": policy.num_contexts,
        "actions": policy.num_actions,
    }
    if isinstance(policy, LinearSoftmaxPolicy):
        document["feature_dim"] = policy.num_params
        document["features"] = policy.feature_table.reshape(-1).tolist()
    document["params"] = policy.params.tolist()
    return document


def policy_from_dict(document: dict[str, Any], path: str | Path = "<policy>") -> SoftmaxPolicy:
    kind = _require(document, "kind", path)
    contexts = _require(document, "contexts", path)
    actions = _require(document, "actions", path)
    try:
        if kind == "tabular":
            params = _float_array(
                _require(document, "params", path), (contexts, actions), "params", path
            )
            return TabularSoftmaxPolicy(logits_table=params)
        if kind == "linear":
            dim = _require(document, "feature_dim", path)
            features = _float_array(
                _require(document, "features", path), (contexts, actions, dim), "features", path
            )
            theta = _float_array(_require(document, "params", path), (dim,), "params", path)
            return LinearSoftmaxPolicy(feature_table=features, theta=theta)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    raise FormatError(f"{path}: unknown policy kind '{kind}'")


def save_policy(policy: SoftmaxPolicy, path: str | Path) -> None:
    _write_json(policy_to_dict(policy), path)


def load_policy(path: str | Path) -> SoftmaxPolicy:
    return policy_from_dict(_read_json(path), path)


def format_record(record: RunRecord) -> str:
    """One metrics line, without the trailing newline"""
    return json.dumps(record.to_dict())


class MetricsWriter:
    """Streams run records to a JSON-lines file, flushing after every record"""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file: TextIO | None = None
        self.count = 0

    def __enter__(self) -> MetricsWriter:
        self._file = open(self.path, "w")
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __call__(self, record: RunRecord) -> None:
        self.write(record)

    def write(self, record: RunRecord) -> None:
        if self._file is None:
            raise RuntimeError("MetricsWriter must be used as a context manager")
        self._file.write(format_record(record) + "\n")
        self._file.flush()
        self.count += 1


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{number}: invalid metrics line ({e})") from None
    return records


def write_curve(records: list[RunRecord], path: str | Path) -> None:
    """Learning curve CSV; the loss column is empty where an algorithm has none"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_COLUMNS)
        for record in records:
            loss = "" if record.regression_loss is None else repr(record.regression_loss)
            writer.writerow(
                [
                    record.iteration,
                    repr(record.expected_reward),
                    repr(record.kl_step),
                    repr(record.kl_ref),
                    loss,
                ]
            )


def write_json(document: dict[str, Any], path: str | Path) -> None:
    """Write a JSON report (summaries, comparisons, check results)"""
    _write_json(document, path)


def read_json(path: str | Path) -> dict[str, Any]:
    return _read_json(path)
