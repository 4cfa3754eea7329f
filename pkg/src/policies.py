"""
Softmax policy classes

Both classes are linear in their parameters: logits(x, y) = phi(x, y) . theta.
The tabular class is the one-hot special case with theta = flattened logits,
which lets the Gauss-Newton and Fisher code treat them uniformly.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import log_softmax, rel_entr, softmax

from src.logging_config import get_logger

if TYPE_CHECKING:
    from src.environments import ContextualBandit

logger = get_logger(__name__)


class SoftmaxPolicy(ABC):
    """pi_theta(y|x) proportional to exp(logits(x, y)); immutable, updates return new policies"""

    @property
    @abstractmethod
    def params(self) -> np.ndarray: ...

    @property
    @abstractmethod
    def features(self) -> np.ndarray:
        """d logits / d theta, shape (contexts, actions, num_params)"""

    @abstractmethod
    def logits(self, params: np.ndarray | None = None) -> np.ndarray: ...

    @abstractmethod
    def with_params(self, params: np.ndarray) -> SoftmaxPolicy: ...

    @property
    def num_contexts(self) -> int:
        return self.features.shape[0]

    @property
    def num_actions(self) -> int:
        return self.features.shape[1]

    @property
    def num_params(self) -> int:
        return self.features.shape[2]

    def log_prob_table(self, params: np.ndarray | None = None) -> np.ndarray:
        """ln pi(y|x) for every (x, y), normalized per context with max-subtraction"""
        return log_softmax(self.logits(params), axis=1)

    def probs_table(self, params: np.ndarray | None = None) -> np.ndarray:
        return softmax(self.logits(params), axis=1)

    def score_tensor(self, params: np.ndarray | None = None) -> np.ndarray:
        """grad ln pi(y|x) for every (x, y): phi(x, y) - E_{y'~pi} phi(x, y')"""
        probs = self.probs_table(params)
        mean_features = np.einsum("xy,xyd->xd", probs, self.features)
        return self.features - mean_features[:, None, :]


@dataclass(frozen=True)
class TabularSoftmaxPolicy(SoftmaxPolicy):
    """One logit per (context, action)"""

    logits_table: np.ndarray

    def __post_init__(self) -> None:
        """Validate logits"""
        table = np.array(self.logits_table, dtype=np.float64, copy=True)
        if table.ndim != 2 or table.shape[1] < 2:
            raise ValueError("Logits must have shape (contexts, actions) with at least 2 actions")
        if not np.all(np.isfinite(table)):
            raise ValueError("Logits must be finite")
        table.setflags(write=False)
        object.__setattr__(self, "logits_table", table)

    @classmethod
    def uniform(cls, num_contexts: int, num_actions: int) -> TabularSoftmaxPolicy:
        return cls(logits_table=np.zeros((num_contexts, num_actions)))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> TabularSoftmaxPolicy:
        """Logits ln p; zero probabilities are not representable"""
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs <= 0.0):
            raise ValueError("Tabular softmax cannot represent zero probabilities")
        return cls(logits_table=np.log(probs))

    @property
    def params(self) -> np.ndarray:
        return self.logits_table.reshape(-1)

    @cached_property
    def features(self) -> np.ndarray:
        contexts, actions = self.logits_table.shape
        return np.eye(contexts * actions).reshape(contexts, actions, contexts * actions)

    @property
    def num_contexts(self) -> int:
        return self.logits_table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.logits_table.shape[1]

    @property
    def num_params(self) -> int:
        return self.logits_table.size

    def logits(self, params: np.ndarray | None = None) -> np.ndarray:
        if params is None:
            return self.logits_table
        return np.asarray(params, dtype=np.float64).reshape(self.logits_table.shape)

    def with_params(self, params: np.ndarray) -> TabularSoftmaxPolicy:
        return TabularSoftmaxPolicy(logits_table=self.logits(params))


@dataclass(frozen=True)
class LinearSoftmaxPolicy(SoftmaxPolicy):
    """pi(y|x) proportional to exp(theta . phi(x, y))"""

    feature_table: np.ndarray
    theta: np.ndarray

    def __post_init__(self) -> None:
        """Validate features and weights"""
        feature_table = np.array(self.feature_table, dtype=np.float64, copy=True)
        theta = np.array(self.theta, dtype=np.float64, copy=True).reshape(-1)
        if feature_table.ndim != 3 or feature_table.shape[1] < 2:
            raise ValueError("Features must have shape (contexts, actions, dim) with 2+ actions")
        if feature_table.shape[2] != theta.shape[0]:
            raise ValueError("Weight dimension does not match feature dimension")
        if not (np.all(np.isfinite(feature_table)) and np.all(np.isfinite(theta))):
            raise ValueError("Features and weights must be finite")
        feature_table.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "feature_table", feature_table)
        object.__setattr__(self, "theta", theta)

    @property
    def params(self) -> np.ndarray:
        return self.theta

    @property
    def features(self) -> np.ndarray:
        return self.feature_table

    def logits(self, params: np.ndarray | None = None) -> np.ndarray:
        theta = self.theta if params is None else np.asarray(params, dtype=np.float64)
        return self.feature_table @ theta

    def with_params(self, params: np.ndarray) -> LinearSoftmaxPolicy:
        return LinearSoftmaxPolicy(feature_table=self.feature_table, theta=params)


def log_prob(policy: SoftmaxPolicy, x: int, y: int) -> float:
    """ln pi(y|x)"""
    return float(policy.log_prob_table()[x, y])


def grad_log_prob(policy: SoftmaxPolicy, x: int, y: int) -> np.ndarray:
    """
    Score function grad_theta ln pi(y|x)

    Linear softmax: phi(x, y) - E_{y'~pi} phi(x, y'). Tabular: one-hot of (x, y)
    minus pi(.|x) on context x's block, zero elsewhere.
    """
    probs = policy.probs_table()[x]
    features = policy.features[x]
    return features[y] - probs @ features


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-context KL(p(.|x) || q(.|x)); +inf where p has mass outside q's support"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    # summed rel_entr terms can round below zero for nearly equal rows
    return np.maximum(np.sum(rel_entr(p, q), axis=1), 0.0)


def kl(policy_p: SoftmaxPolicy, policy_q: SoftmaxPolicy, x: int) -> float:
    """KL(p(.|x) || q(.|x)) = sum_y p ln(p / q)"""
    p = policy_p.probs_table()[x]
    q = policy_q.probs_table()[x]
    if np.any((p > 0.0) & (q <= 0.0)):
        return float("inf")
    log_p = policy_p.log_prob_table()[x]
    log_q = policy_q.log_prob_table()[x]
    mask = p > 0.0
    return max(0.0, float(np.sum(p[mask] * (log_p[mask] - log_q[mask]))))


def expected_kl(p: np.ndarray, q: np.ndarray, rho: np.ndarray) -> float:
    """E_{x~rho} KL(p(.|x) || q(.|x)) from probability tables"""
    per_context = kl_rows(p, q)
    support = np.asarray(rho) > 0.0
    if np.any(np.isinf(per_context[support])):
        return float("inf")
    return float(np.dot(rho[support], per_context[support]))


def advantage_table(rewards: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """A(x, y) = r(x, y) - E_{y'~pi(.|x)} r(x, y')"""
    baseline = np.sum(probs * rewards, axis=1, keepdims=True)
    return rewards - baseline


def advantage(env: ContextualBandit, policy: SoftmaxPolicy, x: int) -> np.ndarray:
    """Advantage row A(x, .) of the environment reward under pi"""
    return advantage_table(env.rewards, policy.probs_table())[x]


def expected_reward(rho: np.ndarray, probs: np.ndarray, rewards: np.ndarray) -> float:
    """E_{x~rho, y~pi} r(x, y)"""
    return float(np.dot(rho, np.sum(probs * rewards, axis=1)))


def mixture_weights(rho: np.ndarray, pi: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Joint weights rho(x) (pi(y|x) + mu(y|x)) / 2 of the uniform mixture"""
    return rho[:, None] * 0.5 * (pi + mu)


def fisher_matrix(policy: SoftmaxPolicy, weights: np.ndarray) -> np.ndarray:
    """
    E_{(x, y) ~ weights} grad ln pi grad ln pi^T by exact enumeration

    weights is a joint distribution over (x, y) summing to 1. Scalar factors
    such as 2 / eta^2 are left to the caller.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (policy.num_contexts, policy.num_actions):
        raise ValueError("Mixture weights must have shape (contexts, actions)")
    if abs(float(weights.sum()) - 1.0) > 1e-10:
        raise ValueError("Mixture weights must sum to 1")
    scores = policy.score_tensor()
    fisher = np.einsum("xy,xyi,xyj->ij", weights, scores, scores)
    return 0.5 * (fisher + fisher.T)


def policy_gradient(policy: SoftmaxPolicy, rewards: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Population policy gradient E_{x~rho, y~pi} grad ln pi(y|x) r(x, y)"""
    weights = rho[:, None] * policy.probs_table()
    return np.einsum("xy,xyd->d", weights * rewards, policy.score_tensor())


def sample_action(policy: SoftmaxPolicy, x: int, rng: np.random.Generator) -> int:
    """Draw y ~ pi(.|x)"""
    return int(rng.choice(policy.num_actions, p=policy.probs_table()[x]))


def _preference_order(rewards_row: np.ndarray, best: bool) -> np.ndarray:
    """Actions ordered from most to least preferred; ties go to the lowest action id"""
    ids = np.arange(rewards_row.shape[0])
    key = -rewards_row if best else rewards_row
    return np.lexsort((ids, key))


def _order_statistic_probs(probs_row: np.ndarray, order: np.ndarray, n: int) -> np.ndarray:
    # P(selected = order[k]) = (mass at rank >= k)^n - (mass at rank > k)^n
    ranked = probs_row[order]
    tail = np.cumsum(ranked[::-1])[::-1]
    strictly_worse = np.append(tail[1:], 0.0)
    selected = np.clip(tail, 0.0, 1.0) ** n - np.clip(strictly_worse, 0.0, 1.0) ** n
    result = np.zeros_like(probs_row)
    result[order] = selected
    return result


def best_of_n_probs(probs_row: np.ndarray, rewards_row: np.ndarray, n: int) -> np.ndarray:
    """Exact distribution of the best of n i.i.d. draws from probs_row"""
    if n < 1:
        raise ValueError("N must be at least 1")
    return _order_statistic_probs(probs_row, _preference_order(rewards_row, best=True), n)


def worst_of_n_probs(probs_row: np.ndarray, rewards_row: np.ndarray, n: int) -> np.ndarray:
    """Exact distribution of the worst of n i.i.d. draws from probs_row"""
    if n < 1:
        raise ValueError("N must be at least 1")
    return _order_statistic_probs(probs_row, _preference_order(rewards_row, best=False), n)


def _select_of_n(
    policy: SoftmaxPolicy,
    rewards_row: np.ndarray,
    x: int,
    n: int,
    rng: np.random.Generator,
    best: bool,
) -> int:
    if n < 1:
        raise ValueError("N must be at least 1")
    draws = rng.choice(policy.num_actions, size=n, p=policy.probs_table()[x])
    rank = np.empty(policy.num_actions, dtype=np.int64)
    rank[_preference_order(np.asarray(rewards_row), best)] = np.arange(policy.num_actions)
    return int(draws[np.argmin(rank[draws])])


def best_of_n(
    policy: SoftmaxPolicy, rewards_row: np.ndarray, x: int, n: int, rng: np.random.Generator
) -> int:
    """Highest-reward action among n draws from pi(.|x)"""
    return _select_of_n(policy, rewards_row, x, n, rng, best=True)


def worst_of_n(
    policy: SoftmaxPolicy, rewards_row: np.ndarray, x: int, n: int, rng: np.random.Generator
) -> int:
    """Lowest-reward action among n draws from pi(.|x)"""
    return _select_of_n(policy, rewards_row, x, n, rng, best=False)
