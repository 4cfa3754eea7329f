"""
Self-play REBEL for general preferences

At iteration t the reward is the win-rate against the current policy,
r_t(x, y) = E_{y'' ~ pi_t} l(x, y, y''), and the REBEL regression runs on
targets l(x, y, y'') - l(x, y', y''), exactly or from binary comparisons.
The returned candidate is the uniform mixture of the iterates whose rewards
drove the updates, evaluated by its exact duality gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.environments import PreferenceModel, sample_binary_preference
from src.logging_config import get_logger
from src.models import (
    FeedbackKind,
    RunRecord,
    RunResult,
    SelfPlayConfig,
    SolverKind,
)
from src.policies import (
    SoftmaxPolicy,
    TabularSoftmaxPolicy,
    expected_kl,
    kl_rows,
    sample_action,
)
from src.rebel import (
    RecordSink,
    RegressionDivergenceError,
    TripleDataset,
    draw_action,
    gauss_newton_step,
    mean_rebel_loss,
    solve_regression_exact_tabular,
    solve_regression_gd,
)

logger = get_logger(__name__)


@dataclass(frozen=True)
class PreferenceTripleBatch:
    """Records (x, y, y', y''): y and y'' from pi_t, y' from mu, with regression targets"""

    x: np.ndarray
    y: np.ndarray
    y_prime: np.ndarray
    opponents: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        """Validate batch data"""
        targets = np.asarray(self.targets, dtype=np.float64)
        if np.any(np.abs(targets) > 2.0):
            raise ValueError("Preference targets must lie in [-2, 2]")
        object.__setattr__(self, "targets", targets)

    def as_dataset(self) -> TripleDataset:
        """Regression triples with r(x, y) - r(x, y') equal to the target"""
        return TripleDataset(
            x=self.x,
            y=self.y,
            y_prime=self.y_prime,
            r_y=self.targets,
            r_y_prime=np.zeros_like(self.targets),
            weights=np.ones_like(self.targets),
        )


@dataclass(frozen=True)
class DualityGapReport:
    """max_pi l(pi, pi_hat) - min_pi l(pi_hat, pi) with the pure best responses"""

    gap: float
    max_value: float
    min_value: float
    best_response: np.ndarray
    worst_response: np.ndarray

    def __post_init__(self) -> None:
        """Validate gap data"""
        if self.gap < -1e-12:
            raise ValueError("Duality gap must be non-negative")


@dataclass
class SelfPlayResult(RunResult):
    """Self-play run with the iterate mixture and its duality gap"""

    mixture: np.ndarray | None = None
    gap: DualityGapReport | None = None


def winrate_table(preferences: PreferenceModel, probs: np.ndarray) -> np.ndarray:
    """r(x, y) = sum_{y''} l(x, y, y'') pi(y''|x) for every (x, y)"""
    return np.einsum("xab,xb->xa", preferences.payoff, probs)


def winrate_reward(preferences: PreferenceModel, policy: SoftmaxPolicy, x: int, y: int) -> float:
    """l(x, y, pi) by enumeration"""
    return float(preferences.payoff[x, y] @ policy.probs_table()[x])


def mixture_policy(policies: list[SoftmaxPolicy]) -> np.ndarray:
    """Probability table of the uniform mixture over the given iterates"""
    if not policies:
        raise ValueError("Mixture needs at least one policy")
    return np.mean([policy.probs_table() for policy in policies], axis=0)


def duality_gap(
    preferences: PreferenceModel, mixture: np.ndarray, rho: np.ndarray | None = None
) -> DualityGapReport:
    """Exact gap of a mixed policy; best responses to a fixed opponent are pure"""
    rho = _uniform_rho(preferences) if rho is None else np.asarray(rho, dtype=np.float64)
    # l(x, y, pi_hat) for the max side, l(x, pi_hat, y') for the min side
    against = np.einsum("xab,xb->xa", preferences.payoff, mixture)
    facing = np.einsum("xa,xab->xb", mixture, preferences.payoff)
    best = np.argmax(against, axis=1)
    worst = np.argmin(facing, axis=1)
    max_value = float(np.dot(rho, against.max(axis=1)))
    min_value = float(np.dot(rho, facing.min(axis=1)))
    return DualityGapReport(
        gap=max(0.0, max_value - min_value),
        max_value=max_value,
        min_value=min_value,
        best_response=best,
        worst_response=worst,
    )


def _uniform_rho(preferences: PreferenceModel) -> np.ndarray:
    return np.full(preferences.num_contexts, 1.0 / preferences.num_contexts)


def collect_preference_batch(
    preferences: PreferenceModel,
    rho: np.ndarray,
    policy_t: SoftmaxPolicy,
    reference: SoftmaxPolicy,
    config: SelfPlayConfig,
    rng: np.random.Generator,
) -> PreferenceTripleBatch:
    """
    Sample (x, y, y', y'') records and their targets

    Exact feedback uses l(x, y, y'') - l(x, y', y''). Binary feedback averages
    o(y, y'') - o(y', y'') over opponent_samples independent opponents.
    """
    no_rewards = np.zeros((len(rho), preferences.num_actions))
    size = config.batch_size
    m = config.opponent_samples
    x = np.empty(size, dtype=np.int64)
    y = np.empty(size, dtype=np.int64)
    y_prime = np.empty(size, dtype=np.int64)
    opponents = np.empty((size, m), dtype=np.int64)
    targets = np.empty(size, dtype=np.float64)
    for n in range(size):
        x[n] = int(rng.choice(len(rho), p=rho))
        y[n] = sample_action(policy_t, x[n], rng)
        y_prime[n] = draw_action(config.base_dist, policy_t, reference, no_rewards, x[n], rng)
        total = 0.0
        for j in range(m):
            opponents[n, j] = sample_action(policy_t, x[n], rng)
            if config.feedback is FeedbackKind.EXACT:
                total += (
                    preferences.payoff[x[n], y[n], opponents[n, j]]
                    - preferences.payoff[x[n], y_prime[n], opponents[n, j]]
                )
            else:
                total += sample_binary_preference(
                    preferences, x[n], y[n], opponents[n, j], rng
                ) - sample_binary_preference(preferences, x[n], y_prime[n], opponents[n, j], rng)
        targets[n] = total / m
    return PreferenceTripleBatch(x=x, y=y, y_prime=y_prime, opponents=opponents, targets=targets)


def run_spo_rebel(
    preferences: PreferenceModel,
    config: SelfPlayConfig,
    rng: np.random.Generator,
    rho: np.ndarray | None = None,
    initial_policy: SoftmaxPolicy | None = None,
    sink: RecordSink | None = None,
) -> SelfPlayResult:
    """
    REBEL with the iteration-dependent win-rate reward

    The exact solver moves to logits + eta r_t. Record t reports the duality
    gap of Unif(pi_0 .. pi_t); the final mixture is Unif(pi_0 .. pi_{T-1}).
    """
    rho = _uniform_rho(preferences) if rho is None else np.asarray(rho, dtype=np.float64)
    policy = initial_policy or TabularSoftmaxPolicy.uniform(
        preferences.num_contexts, preferences.num_actions
    )
    if config.solver is SolverKind.EXACT_TABULAR and not isinstance(policy, TabularSoftmaxPolicy):
        raise ValueError("The exact_tabular solver requires a tabular policy")
    reference = policy
    records: list[RunRecord] = []
    policies: list[SoftmaxPolicy] = [policy]
    running_sum = np.zeros((preferences.num_contexts, preferences.num_actions))
    logger.info(
        f"Self-play REBEL: T={config.T}, eta={config.eta}, feedback={config.feedback.value}, "
        f"solver={config.solver.value}"
    )

    for t in range(config.T):
        probs = policy.probs_table()
        rewards = winrate_table(preferences, probs)
        dataset = collect_preference_batch(
            preferences, rho, policy, reference, config, rng
        ).as_dataset()
        try:
            if config.solver is SolverKind.EXACT_TABULAR:
                policy_next = solve_regression_exact_tabular(policy, rewards, config.eta)
            elif config.solver is SolverKind.GRAD_DESCENT:
                policy_next, _ = solve_regression_gd(
                    policy, dataset, config.eta, config.gd_steps, config.gd_step_size
                )
            else:
                delta = gauss_newton_step(policy, dataset, config.eta)
                policy_next = policy.with_params(policy.params + delta)
        except RegressionDivergenceError as e:
            e.iteration = t
            logger.error(f"Self-play regression diverged at iteration {t}: {e}")
            raise

        running_sum += probs
        gap = duality_gap(preferences, running_sum / (t + 1), rho)
        step_rows = kl_rows(policy_next.probs_table(), probs)[rho > 0]
        record = RunRecord(
            algo="spo_rebel",
            iteration=t,
            expected_reward=float(np.dot(rho, np.sum(probs * rewards, axis=1))),
            kl_step=expected_kl(policy_next.probs_table(), probs, rho),
            max_kl_step=float(np.max(step_rows)),
            kl_ref=expected_kl(probs, reference.probs_table(), rho),
            regression_loss=mean_rebel_loss(policy_next, policy, dataset, config.eta),
            duality_gap=gap.gap,
        )
        records.append(record)
        if sink is not None:
            sink(record)
        logger.debug(f"t={t} duality_gap={gap.gap:.6f}")
        policy = policy_next
        policies.append(policy)

    mixture = running_sum / config.T
    return SelfPlayResult(
        algo="spo_rebel",
        records=records,
        policies=policies,
        mixture=mixture,
        gap=duality_gap(preferences, mixture, rho),
    )

