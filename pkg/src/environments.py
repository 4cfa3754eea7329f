"""
Finite contextual-bandit environments and preference models

Contexts and actions are dense integer ids. A bandit holds the context
distribution rho and a dense reward table; a preference model holds a
skew-symmetric payoff table l(x, y, y') in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from src.logging_config import get_logger

if TYPE_CHECKING:
    from src.policies import SoftmaxPolicy

logger = get_logger(__name__)

RHO_TOLERANCE = 1e-12
SKEW_TOLERANCE = 1e-12


class ZeroProbabilityError(ValueError):
    """Raised when a log-probability of a zero-probability action is required"""

    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    copy = np.array(array, dtype=np.float64, copy=True)
    copy.setflags(write=False)
    return copy


@dataclass(frozen=True)
class PreferenceModel:
    """Skew-symmetric payoff l(x, y, y') = 2 P(y > y' | x) - 1, shape (contexts, Y, Y)"""

    payoff: np.ndarray

    def __post_init__(self) -> None:
        """Validate skew-symmetry and range"""
        payoff = np.asarray(self.payoff, dtype=np.float64)
        if payoff.ndim != 3 or payoff.shape[1] != payoff.shape[2]:
            raise ValueError("Payoff must have shape (contexts, actions, actions)")
        if not np.all(np.isfinite(payoff)):
            raise ValueError("Payoff entries must be finite")
        if np.any(np.abs(payoff) > 1.0):
            raise ValueError("Payoff entries must lie in [-1, 1]")
        if np.any(payoff + np.transpose(payoff, (0, 2, 1)) != 0.0):
            raise ValueError("Payoff must be exactly skew-symmetric")
        object.__setattr__(self, "payoff", _frozen(payoff))

    @property
    def num_contexts(self) -> int:
        return self.payoff.shape[0]

    @property
    def num_actions(self) -> int:
        return self.payoff.shape[1]


def skew_symmetrize(payoff: np.ndarray, tolerance: float = SKEW_TOLERANCE) -> np.ndarray:
    """
    Canonicalize a nearly skew-symmetric table to an exactly skew-symmetric one

    The strict upper triangle is kept and mirrored with a sign flip; the
    diagonal is set to zero. Tables further than tolerance from skew-symmetry
    are rejected.
    """
    payoff = np.asarray(payoff, dtype=np.float64)
    if np.max(np.abs(payoff + np.transpose(payoff, (0, 2, 1))), initial=0.0) > tolerance:
        raise ValueError("Payoff is not skew-symmetric within tolerance")
    upper = np.triu(payoff, k=1)
    return upper - np.transpose(upper, (0, 2, 1))


def preference_from_win_probabilities(win_probability: np.ndarray) -> PreferenceModel:
    """Build l = 2 P - 1 from a table of P(y > y' | x)"""
    win_probability = np.asarray(win_probability, dtype=np.float64)
    if np.any(win_probability < 0.0) or np.any(win_probability > 1.0):
        raise ValueError("Win probabilities must lie in [0, 1]")
    return PreferenceModel(payoff=skew_symmetrize(2.0 * win_probability - 1.0))


def preference_from_utility(utility: np.ndarray) -> PreferenceModel:
    """Transitive preference l(x, y, y') = u(x, y) - u(x, y') for utilities with span at most 1"""
    utility = np.asarray(utility, dtype=np.float64)
    payoff = utility[:, :, None] - utility[:, None, :]
    return PreferenceModel(payoff=skew_symmetrize(payoff))


@dataclass(frozen=True)
class ContextualBandit:
    """Finite contextual bandit: context distribution rho and reward table r(x, y)"""

    rho: np.ndarray
    rewards: np.ndarray
    name: str = "bandit"
    preferences: PreferenceModel | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        """Validate bandit data"""
        rho = np.asarray(self.rho, dtype=np.float64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if rho.ndim != 1 or rho.size == 0:
            raise ValueError("rho must be a non-empty probability vector")
        if np.any(rho < 0.0) or abs(float(rho.sum()) - 1.0) > RHO_TOLERANCE:
            raise ValueError("rho must be non-negative and sum to 1")
        if rewards.ndim != 2 or rewards.shape[0] != rho.shape[0]:
            raise ValueError("Rewards must have shape (contexts, actions)")
        if rewards.shape[1] < 2:
            raise ValueError("At least two actions are required")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("Rewards must be finite")
        if self.preferences is not None and (
            self.preferences.num_contexts != rho.shape[0]
            or self.preferences.num_actions != rewards.shape[1]
        ):
            raise ValueError("Preference table does not match the bandit dimensions")
        object.__setattr__(self, "rho", _frozen(rho))
        object.__setattr__(self, "rewards", _frozen(rewards))

    @property
    def num_contexts(self) -> int:
        return self.rho.shape[0]

    @property
    def num_actions(self) -> int:
        return self.rewards.shape[1]

    @property
    def contexts(self) -> list[int]:
        return list(range(self.num_contexts))

    @property
    def actions(self) -> list[int]:
        return list(range(self.num_actions))

    def reward(self, x: int, y: int) -> float:
        """Reward r(x, y)"""
        return float(self.rewards[x, y])

    def reward_bound(self) -> float:
        """max |r(x, y)|"""
        return float(np.max(np.abs(self.rewards)))

    def with_rewards(self, rewards: np.ndarray) -> ContextualBandit:
        """Same contexts and preferences with a different reward table"""
        return ContextualBandit(
            rho=self.rho, rewards=rewards, name=self.name, preferences=self.preferences
        )


@dataclass(frozen=True)
class ShapedReward:
    """KL-penalised reward RM(x, y) - gamma (ln pi_t(y|x) - ln pi_0(y|x))"""

    base: ContextualBandit
    gamma: float
    reference: SoftmaxPolicy
    current: SoftmaxPolicy

    def __post_init__(self) -> None:
        """Validate shaping coefficient"""
        if self.gamma < 0:
            raise ValueError("KL-penalty coefficient gamma must be non-negative")


def sample_context(env: ContextualBandit, rng: np.random.Generator) -> int:
    """Draw x ~ rho"""
    return int(rng.choice(env.num_contexts, p=env.rho))


def shaped_reward_table(shaping: ShapedReward) -> np.ndarray:
    """Shaped reward for every (x, y); gamma = 0 returns the base table unchanged"""
    if shaping.gamma == 0:
        return np.array(shaping.base.rewards)
    current = shaping.current.probs_table()
    reference = shaping.reference.probs_table()
    zero = (current <= 0.0) | (reference <= 0.0)
    if np.any(zero):
        x, y = np.argwhere(zero)[0]
        raise ZeroProbabilityError(f"Zero probability at context {x}, action {y}")
    log_ratio = shaping.current.log_prob_table() - shaping.reference.log_prob_table()
    return shaping.base.rewards - shaping.gamma * log_ratio


def shaped_reward(shaping: ShapedReward, x: int, y: int) -> float:
    """RM(x, y) - gamma (ln pi_t(y|x) - ln pi_0(y|x))"""
    p_current = float(shaping.current.probs_table()[x, y])
    p_reference = float(shaping.reference.probs_table()[x, y])
    if p_current <= 0.0 or p_reference <= 0.0:
        raise ZeroProbabilityError(f"Zero probability at context {x}, action {y}")
    if shaping.gamma == 0:
        return shaping.base.reward(x, y)
    log_ratio = float(
        shaping.current.log_prob_table()[x, y] - shaping.reference.log_prob_table()[x, y]
    )
    return shaping.base.reward(x, y) - shaping.gamma * log_ratio


def pairwise_payoff(preferences: PreferenceModel, x: int, y: int, y_prime: int) -> float:
    """Stored payoff l(x, y, y')"""
    return float(preferences.payoff[x, y, y_prime])


def sample_binary_preference(
    preferences: PreferenceModel, x: int, y: int, y_prime: int, rng: np.random.Generator
) -> int:
    """Bernoulli draw o in {0, 1} with mean P(y > y' | x) = (l + 1) / 2"""
    probability = 0.5 * (preferences.payoff[x, y, y_prime] + 1.0)
    return int(rng.random() < probability)


def concentrability(pi: np.ndarray, mu: np.ndarray) -> float:
    """
    Density-ratio coverage max_{x,y} pi(y|x) / mu(y|x)

    Entries with pi > 0 and mu = 0 make the coefficient +inf; 0/0 counts as 0.
    """
    pi = np.asarray(pi, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if pi.shape != mu.shape:
        raise ValueError("Policies must share a shape")
    support = pi > 0.0
    if np.any(support & (mu <= 0.0)):
        return float("inf")
    if not np.any(support):
        return 0.0
    return float(np.max(pi[support] / mu[support]))


def unilateral_concentrability(mu: np.ndarray) -> float:
    """max over all policies pi of C_{mu -> pi}, i.e. max_{x,y} 1 / mu(y|x)"""
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu <= 0.0):
        return float("inf")
    return float(np.max(1.0 / mu))
