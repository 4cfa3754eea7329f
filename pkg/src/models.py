"""
Data models for REBEL experiments

Configurations, per-iteration records, run summaries and check results shared
by the algorithm modules and the command-line harness. Every model validates
itself on construction and raises ValueError with a readable message.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from src.policies import SoftmaxPolicy


class SamplerKind(Enum):
    """Distributions a response or base action can be drawn from"""

    ON_POLICY = "on_policy"
    OFFLINE_FIXED = "offline_fixed"
    BEST_OF_N = "best_of_n"
    WORST_OF_N = "worst_of_n"


class SolverKind(Enum):
    """Ways of solving the per-iteration regression"""

    EXACT_TABULAR = "exact_tabular"
    GRAD_DESCENT = "grad_descent"
    GAUSS_NEWTON = "gauss_newton"


class Algorithm(Enum):
    """Algorithms runnable from an experiment config"""

    REBEL = "rebel"
    MD_ORACLE = "md_oracle"
    NPG = "npg"
    REINFORCE = "reinforce"
    RLOO = "rloo"
    PPO_CLIP = "ppo_clip"
    ITERATIVE_DPO = "iterative_dpo"
    SPO_REBEL = "spo_rebel"

    @classmethod
    def parse(cls, name: str) -> Algorithm:
        """Accept canonical names and the short aliases md / iter_dpo"""
        aliases = {"md": cls.MD_ORACLE, "iter_dpo": cls.ITERATIVE_DPO}
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(a.value for a in cls)
            raise ValueError(f"Unknown algorithm '{name}' (expected one of: {valid})") from None


class PolicyKind(Enum):
    """Policy parameterizations"""

    TABULAR = "tabular"
    LINEAR = "linear"


class FeedbackKind(Enum):
    """Self-play regression targets"""

    EXACT = "exact"
    BINARY = "binary"


_SAMPLER_PATTERN = re.compile(r"^\s*(best_of_n|worst_of_n)\s*\(\s*(\d+)\s*\)\s*$")


@dataclass(frozen=True)
class SamplerSpec:
    """Action distribution with its selection size N (N is 1 unless best/worst-of-N)"""

    kind: SamplerKind = SamplerKind.ON_POLICY
    n: int = 1

    def __post_init__(self) -> None:
        """Validate sampler data"""
        if self.n < 1:
            raise ValueError("N must be at least 1")
        if self.kind in (SamplerKind.ON_POLICY, SamplerKind.OFFLINE_FIXED) and self.n != 1:
            raise ValueError(f"{self.kind.value} does not take N")

    @classmethod
    def parse(cls, text: str) -> SamplerSpec:
        """Parse on_policy, offline_fixed, best_of_n(N) or worst_of_n(N)"""
        match = _SAMPLER_PATTERN.match(text)
        if match:
            return cls(kind=SamplerKind(match.group(1)), n=int(match.group(2)))
        try:
            return cls(kind=SamplerKind(text.strip()))
        except ValueError:
            raise ValueError(f"Unknown sampler '{text}'") from None

    @property
    def label(self) -> str:
        if self.kind in (SamplerKind.BEST_OF_N, SamplerKind.WORST_OF_N):
            return f"{self.kind.value}({self.n})"
        return self.kind.value


@dataclass(frozen=True)
class RebelConfig:
    """Settings of the REBEL outer loop"""

    eta: float = 1.0
    T: int = 100
    batch_size: int = 64
    base_dist: SamplerSpec = field(default_factory=SamplerSpec)
    response_dist: SamplerSpec = field(default_factory=SamplerSpec)
    solver: SolverKind = SolverKind.EXACT_TABULAR
    gd_steps: int = 200
    gd_step_size: float = 0.1
    gamma: float = 0.0
    population: bool = False

    def __post_init__(self) -> None:
        """Validate REBEL config"""
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be positive and finite")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.batch_size < 1:
            raise ValueError("Batch size must be at least 1")
        if self.gd_steps < 0:
            raise ValueError("Gradient-descent steps must be non-negative")
        if self.gd_step_size <= 0:
            raise ValueError("Gradient-descent step size must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @property
    def responses_per_iteration(self) -> int:
        """Actions drawn per iteration: N for each best/worst-of-N pick, 1 otherwise"""
        if self.population:
            return 0
        return self.batch_size * (self.response_dist.n + self.base_dist.n)


@dataclass(frozen=True)
class BaselineConfig:
    """Settings shared by the comparison algorithms; eta doubles as the learning rate"""

    algo: Algorithm
    eta: float = 1.0
    T: int = 100
    batch_size: int = 64
    gamma: float = 0.0
    k: int = 2
    epsilon: float = 0.2
    beta: float = 1.0
    inner_steps: int = 4
    dpo_steps: int = 50
    population: bool = False

    def __post_init__(self) -> None:
        """Validate baseline config"""
        if self.algo in (Algorithm.REBEL, Algorithm.SPO_REBEL):
            raise ValueError(f"{self.algo.value} is not a baseline algorithm")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be positive and finite")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.batch_size < 1:
            raise ValueError("Batch size must be at least 1")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.inner_steps < 1 or self.dpo_steps < 0:
            raise ValueError("Inner step counts must be positive")
        if self.algo in (Algorithm.RLOO, Algorithm.PPO_CLIP) and (
            self.responses_per_iteration < self.k or self.responses_per_iteration % self.k
        ):
            raise ValueError("2 x batch size must be a multiple of k for grouped algorithms")

    @property
    def responses_per_iteration(self) -> int:
        """
        Actions drawn per iteration, two per batch slot as in a REBEL pair

        The oracle and population NPG use exact expectations and draw nothing.
        """
        if self.algo is Algorithm.MD_ORACLE or (self.algo is Algorithm.NPG and self.population):
            return 0
        return 2 * self.batch_size


@dataclass(frozen=True)
class SelfPlayConfig:
    """Settings of self-play REBEL on a preference model"""

    eta: float = 1.0
    T: int = 100
    batch_size: int = 64
    base_dist: SamplerSpec = field(default_factory=SamplerSpec)
    solver: SolverKind = SolverKind.EXACT_TABULAR
    feedback: FeedbackKind = FeedbackKind.EXACT
    opponent_samples: int = 1
    gd_steps: int = 200
    gd_step_size: float = 0.1

    def __post_init__(self) -> None:
        """Validate self-play config"""
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be positive and finite")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.batch_size < 1:
            raise ValueError("Batch size must be at least 1")
        if self.opponent_samples < 1:
            raise ValueError("Opponent samples must be at least 1")
        if self.gd_steps < 0 or self.gd_step_size <= 0:
            raise ValueError("Gradient-descent settings must be non-negative steps, positive size")
        if self.base_dist.kind in (SamplerKind.BEST_OF_N, SamplerKind.WORST_OF_N):
            raise ValueError("Self-play has no fixed reward to rank best/worst-of-N draws")

    @property
    def responses_per_iteration(self) -> int:
        """y, y' and the opponents y'' of every record"""
        return self.batch_size * (2 + self.opponent_samples)


@dataclass(frozen=True)
class RegressionTriple:
    """One (x, y, y') record with its two rewards"""

    x: int
    y: int
    y_prime: int
    r_y: float
    r_y_prime: float

    def __post_init__(self) -> None:
        """Validate triple data"""
        if min(self.x, self.y, self.y_prime) < 0:
            raise ValueError("Context and action ids must be non-negative")
        if not (math.isfinite(self.r_y) and math.isfinite(self.r_y_prime)):
            raise ValueError("Triple rewards must be finite")


# Metrics stream field order
RECORD_FIELDS = (
    "algo",
    "iteration",
    "expected_reward",
    "kl_step",
    "max_kl_step",
    "kl_ref",
    "regression_loss",
    "suboptimality",
    "duality_gap",
)


@dataclass(frozen=True)
class RunRecord:
    """Metrics of iterate pi_t and the step to pi_{t+1}"""

    algo: str
    iteration: int
    expected_reward: float
    kl_step: float
    max_kl_step: float
    kl_ref: float
    regression_loss: float | None = None
    suboptimality: float | None = None
    duality_gap: float | None = None

    def __post_init__(self) -> None:
        """Validate record data"""
        if self.iteration < 0:
            raise ValueError("Iteration must be non-negative")
        # NaN fails both comparisons, +inf (support collapse) is allowed
        if not (self.kl_step >= 0 and self.max_kl_step >= 0 and self.kl_ref >= 0):
            raise ValueError("KL values must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in RECORD_FIELDS}


@dataclass
class RunResult:
    """Records of a run plus every iterate pi_0 .. pi_T"""

    algo: str
    records: list[RunRecord]
    policies: list[SoftmaxPolicy]

    @property
    def final_policy(self) -> SoftmaxPolicy:
        return self.policies[-1]


@dataclass(frozen=True)
class RunSummary:
    """End-of-run evaluation written to summary.json and the results store"""

    algo: str
    env: str
    seed: int
    T: int
    batch_size: int
    eta: float
    gamma: float
    final_reward: float
    final_kl_ref: float
    suboptimality: float
    best_suboptimality: float
    auc: float
    wall_time: float
    duality_gap: float | None = None

    def __post_init__(self) -> None:
        """Validate summary data"""
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if self.wall_time < 0:
            raise ValueError("Wall time must be non-negative")


@dataclass
class CheckResult:
    """Outcome of one named verification"""

    name: str
    passed: bool
    measured: dict[str, float]
    bound: float
    instance: str = ""
    warnings: list[str] = field(default_factory=list)
    informational: bool = False

    def __post_init__(self) -> None:
        """Validate check data"""
        if not self.name:
            raise ValueError("Check name is required")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "measured": self.measured,
            "bound": self.bound,
            "instance": self.instance,
            "warnings": self.warnings,
            "informational": self.informational,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment as read from a config file, after CLI overrides"""

    env: str
    algo: Algorithm
    seed: int = 0
    T: int = 100
    batch_size: int = 64
    eta: float = 1.0
    gamma: float = 0.0
    policy: PolicyKind = PolicyKind.TABULAR
    out: str = "runs/default"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate experiment config"""
        if not self.env:
            raise ValueError("Environment is required")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("Seed must be an unsigned 64-bit integer")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if self.batch_size < 1:
            raise ValueError("Batch size must be at least 1")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be positive and finite")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.out:
            raise ValueError("Output directory is required")

    @property
    def label(self) -> str:
        return self.algo.value


@dataclass(frozen=True)
class ComparisonRow:
    """One algorithm's line in a comparison table"""

    algo: str
    final_reward: float
    final_kl_ref: float
    suboptimality: float
    auc: float
    wall_time: float

    @classmethod
    def from_summary(cls, label: str, summary: RunSummary) -> ComparisonRow:
        return cls(
            algo=label,
            final_reward=summary.final_reward,
            final_kl_ref=summary.final_kl_ref,
            suboptimality=summary.suboptimality,
            auc=summary.auc,
            wall_time=summary.wall_time,
        )
