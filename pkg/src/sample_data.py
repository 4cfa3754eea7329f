"""
Built-in and randomly generated problem instances
"""

import numpy as np

from src.environments import (
    ContextualBandit,
    PreferenceModel,
    preference_from_win_probabilities,
)
from src.logging_config import get_logger
from src.policies import LinearSoftmaxPolicy, TabularSoftmaxPolicy

logger = get_logger(__name__)

CANONICAL_REWARDS = (1.0, 0.5, 0.0)


def canonical_bandit() -> ContextualBandit:
    """One context, three actions, r = (1, 0.5, 0)"""
    return ContextualBandit(
        rho=np.array([1.0]), rewards=np.array([CANONICAL_REWARDS]), name="canonical"
    )


def rock_paper_scissors() -> ContextualBandit:
    """Actions (rock, paper, scissors) with the cyclic +/-1 payoff and no fixed reward"""
    payoff = np.array(
        [
            [0.0, -1.0, 1.0],
            [1.0, 0.0, -1.0],
            [-1.0, 1.0, 0.0],
        ]
    )
    return ContextualBandit(
        rho=np.array([1.0]),
        rewards=np.zeros((1, 3)),
        name="rps",
        preferences=PreferenceModel(payoff=payoff[None, :, :]),
    )


BUILTIN_ENVIRONMENTS = {
    "canonical": canonical_bandit,
    "rps": rock_paper_scissors,
}


def builtin_environment(name: str) -> ContextualBandit:
    try:
        return BUILTIN_ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"Unknown built-in environment '{name}'") from None


def random_rho(rng: np.random.Generator, num_contexts: int) -> np.ndarray:
    """Dirichlet(1) context weights, renormalized so they sum to 1 within rounding"""
    rho = rng.dirichlet(np.ones(num_contexts))
    return rho / rho.sum()


def random_bandit(
    rng: np.random.Generator,
    max_contexts: int = 4,
    max_actions: int = 6,
    min_actions: int = 2,
) -> ContextualBandit:
    """Random contexts and actions, uniform rewards in [0, 1]"""
    num_contexts = int(rng.integers(1, max_contexts + 1))
    num_actions = int(rng.integers(min_actions, max_actions + 1))
    rho = random_rho(rng, num_contexts)
    rewards = rng.uniform(0.0, 1.0, size=(num_contexts, num_actions))
    return ContextualBandit(rho=rho, rewards=rewards, name="random")


def random_skew_symmetric_game(
    rng: np.random.Generator, num_actions: int = 4, num_contexts: int = 1
) -> ContextualBandit:
    """Random win probabilities P(y > y') = 1 - P(y' > y), stored as l = 2P - 1"""
    upper = np.triu(rng.uniform(0.0, 1.0, size=(num_contexts, num_actions, num_actions)), k=1)
    win = upper + np.transpose(np.triu(1.0 - upper, k=1), (0, 2, 1))
    win[:, np.arange(num_actions), np.arange(num_actions)] = 0.5
    preferences = preference_from_win_probabilities(win)
    return ContextualBandit(
        rho=np.full(num_contexts, 1.0 / num_contexts),
        rewards=np.zeros((num_contexts, num_actions)),
        name="random_game",
        preferences=preferences,
    )


def random_tabular_policy(
    rng: np.random.Generator, num_contexts: int, num_actions: int, scale: float = 1.0
) -> TabularSoftmaxPolicy:
    return TabularSoftmaxPolicy(logits_table=rng.normal(0.0, scale, (num_contexts, num_actions)))


def random_features(
    rng: np.random.Generator, num_contexts: int, num_actions: int, dim: int
) -> np.ndarray:
    return rng.normal(0.0, 1.0, size=(num_contexts, num_actions, dim))


def random_linear_policy(
    rng: np.random.Generator, num_contexts: int, num_actions: int, dim: int = 3
) -> LinearSoftmaxPolicy:
    return LinearSoftmaxPolicy(
        feature_table=random_features(rng, num_contexts, num_actions, dim),
        theta=rng.normal(0.0, 1.0, dim),
    )


def random_distribution_table(
    rng: np.random.Generator, num_contexts: int, num_actions: int
) -> np.ndarray:
    """Per-context Dirichlet(1) rows, usable as a base distribution mu"""
    table = rng.dirichlet(np.ones(num_actions), size=num_contexts)
    return table / table.sum(axis=1, keepdims=True)


def ppo_drift_instance() -> tuple[ContextualBandit, LinearSoftmaxPolicy]:
    """
    Two contexts sharing one weight: phi(1, 0) = 20 phi(0, 0)

    Context 1 has equal rewards, so no data pushes it anywhere; any movement
    there is drift through the shared parameter.
    """
    env = ContextualBandit(
        rho=np.array([0.5, 0.5]),
        rewards=np.array([[1.0, 0.0], [0.0, 0.0]]),
        name="ppo_drift",
    )
    features = np.array([[[1.0], [0.0]], [[20.0], [0.0]]])
    return env, LinearSoftmaxPolicy(feature_table=features, theta=np.zeros(1))
