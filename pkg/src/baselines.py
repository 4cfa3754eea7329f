"""
Comparison algorithms

Exact mirror descent, natural policy gradient, REINFORCE, RLOO, clipped PPO
(policy-only, batch-mean baseline) and iterative DPO. They report the same
RunRecord stream as REBEL. Sampled baselines draw 2 x batch_size actions per
iteration, the count of a REBEL batch of (y, y') pairs, so runs at equal T and
batch_size see the same number of responses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from src.environments import ContextualBandit, sample_context
from src.logging_config import get_logger
from src.models import Algorithm, BaselineConfig, RebelConfig, RunRecord, RunResult
from src.numerics import pinv_apply
from src.policies import (
    SoftmaxPolicy,
    TabularSoftmaxPolicy,
    fisher_matrix,
    kl_rows,
    policy_gradient,
    sample_action,
)
from src.rebel import (
    RecordSink,
    TripleDataset,
    collect_dataset,
    iteration_record,
    reward_table,
)

logger = get_logger(__name__)


@dataclass(frozen=True)
class GroupBatch:
    """k responses for each of G sampled contexts: x (G,), y and r (G, k)"""

    x: np.ndarray
    y: np.ndarray
    r: np.ndarray

    def __post_init__(self) -> None:
        """Validate batch shapes"""
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64)
        r = np.asarray(self.r, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
            r = r.reshape(-1, 1)
        if y.shape != r.shape or y.shape[0] != x.shape[0]:
            raise ValueError("Group batch shapes do not match")
        if not np.all(np.isfinite(r)):
            raise ValueError("Rewards must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "r", r)

    @property
    def k(self) -> int:
        return int(self.y.shape[1])

    @property
    def contexts(self) -> np.ndarray:
        """Context of every response, shape (G, k)"""
        return np.broadcast_to(self.x[:, None], self.y.shape)


def collect_groups(
    env: ContextualBandit,
    policy: SoftmaxPolicy,
    num_groups: int,
    k: int,
    rng: np.random.Generator,
    rewards: np.ndarray | None = None,
) -> GroupBatch:
    """Sample num_groups contexts from rho and k on-policy responses for each"""
    rewards = env.rewards if rewards is None else rewards
    x = np.empty(num_groups, dtype=np.int64)
    y = np.empty((num_groups, k), dtype=np.int64)
    for g in range(num_groups):
        x[g] = sample_context(env, rng)
        for j in range(k):
            y[g, j] = sample_action(policy, int(x[g]), rng)
    return GroupBatch(x=x, y=y, r=rewards[x[:, None], y])


def md_oracle_step(
    policy_t: TabularSoftmaxPolicy, rewards: ContextualBandit | np.ndarray, eta: float
) -> TabularSoftmaxPolicy:
    """pi_{t+1}(y|x) = pi_t(y|x) exp(eta r(x, y)) / Z(x), as logits ln pi_t + eta r"""
    if not isinstance(policy_t, TabularSoftmaxPolicy):
        raise TypeError("The mirror-descent oracle requires a tabular policy")
    table = rewards.rewards if isinstance(rewards, ContextualBandit) else np.asarray(rewards)
    return TabularSoftmaxPolicy(logits_table=policy_t.log_prob_table() + eta * table)


def policy_gradient_estimate(
    policy: SoftmaxPolicy, batch: GroupBatch, params: np.ndarray | None = None
) -> np.ndarray:
    """Mean of grad ln pi(y|x) r over every response in the batch"""
    scores = policy.score_tensor(params)[batch.contexts, batch.y]
    return np.mean(scores * batch.r[:, :, None], axis=(0, 1))


def npg_step(
    policy_t: SoftmaxPolicy,
    rewards: np.ndarray,
    rho: np.ndarray,
    eta: float,
    batch: GroupBatch | None = None,
) -> SoftmaxPolicy:
    """
    theta_t + eta F_t^+ grad J

    Without a batch, F_t and the gradient are exact expectations under
    rho x pi_t; with a batch they are empirical means over its responses.
    """
    if batch is None:
        fisher = fisher_matrix(policy_t, rho[:, None] * policy_t.probs_table())
        gradient = policy_gradient(policy_t, rewards, rho)
    else:
        scores = policy_t.score_tensor()[batch.contexts, batch.y].reshape(-1, policy_t.num_params)
        fisher = scores.T @ scores / scores.shape[0]
        gradient = policy_gradient_estimate(policy_t, batch)
    return policy_t.with_params(policy_t.params + eta * pinv_apply(fisher, gradient))


def reinforce_step(policy_t: SoftmaxPolicy, batch: GroupBatch, lr: float) -> SoftmaxPolicy:
    """theta_t + lr mean(grad ln pi(y|x) r)"""
    return policy_t.with_params(policy_t.params + lr * policy_gradient_estimate(policy_t, batch))


def rloo_advantages(batch: GroupBatch) -> np.ndarray:
    """r_i minus the mean of the other k - 1 rewards of its group"""
    if batch.k < 2:
        raise ValueError("RLOO needs at least k = 2 responses per context")
    totals = batch.r.sum(axis=1, keepdims=True)
    return batch.r - (totals - batch.r) / (batch.k - 1)


def rloo_step(policy_t: SoftmaxPolicy, batch: GroupBatch, lr: float) -> SoftmaxPolicy:
    """Score-weighted average update with leave-one-out baselines"""
    baselined = GroupBatch(x=batch.x, y=batch.y, r=rloo_advantages(batch))
    return reinforce_step(policy_t, baselined, lr)


def _ppo_terms(
    params: np.ndarray, policy_t: SoftmaxPolicy, batch: GroupBatch
) -> tuple[np.ndarray, np.ndarray]:
    advantages = batch.r - batch.r.mean(axis=1, keepdims=True)
    log_ratio = policy_t.log_prob_table(params) - policy_t.log_prob_table()
    ratio = np.exp(log_ratio[batch.contexts, batch.y])
    return ratio, advantages


def ppo_surrogate(
    params: np.ndarray, policy_t: SoftmaxPolicy, batch: GroupBatch, epsilon: float
) -> float:
    """Mean of min(ratio A, clip(ratio, 1 - eps, 1 + eps) A)"""
    ratio, advantages = _ppo_terms(params, policy_t, batch)
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    return float(np.mean(np.minimum(ratio * advantages, clipped * advantages)))


def ppo_grad(
    params: np.ndarray, policy_t: SoftmaxPolicy, batch: GroupBatch, epsilon: float
) -> np.ndarray:
    """Gradient of ppo_surrogate; zero for samples held by the clamp"""
    ratio, advantages = _ppo_terms(params, policy_t, batch)
    clamped = ((advantages > 0) & (ratio > 1.0 + epsilon)) | (
        (advantages < 0) & (ratio < 1.0 - epsilon)
    )
    coefficients = np.where(clamped, 0.0, ratio * advantages)
    scores = policy_t.score_tensor(params)[batch.contexts, batch.y]
    return np.mean(coefficients[:, :, None] * scores, axis=(0, 1))


def ppo_clip_step(
    policy_t: SoftmaxPolicy, batch: GroupBatch, lr: float, epsilon: float, inner_steps: int
) -> SoftmaxPolicy:
    """inner_steps of gradient ascent on the clipped surrogate from theta_t"""
    theta = np.array(policy_t.params, dtype=np.float64)
    for _ in range(inner_steps):
        theta = theta + lr * ppo_grad(theta, policy_t, batch, epsilon)
    return policy_t.with_params(theta)


def _dpo_margins(
    params: np.ndarray, policy_t: SoftmaxPolicy, dataset: TripleDataset, beta: float
) -> tuple[np.ndarray, np.ndarray]:
    log_ratio = policy_t.log_prob_table(params) - policy_t.log_prob_table()
    signs = np.sign(dataset.reward_differences)
    margins = (log_ratio[dataset.x, dataset.y] - log_ratio[dataset.x, dataset.y_prime]) * beta
    return margins * signs, signs


def dpo_loss(
    params: np.ndarray, policy_t: SoftmaxPolicy, dataset: TripleDataset, beta: float
) -> float:
    """Weighted mean of -ln sigmoid(beta (h(y) - h(y')) sgn(r(y) - r(y'))), sgn(0) = 0"""
    z, _ = _dpo_margins(params, policy_t, dataset, beta)
    return float(np.sum(dataset.weights * -log_expit(z)) / dataset.total_weight)


def dpo_grad(
    params: np.ndarray, policy_t: SoftmaxPolicy, dataset: TripleDataset, beta: float
) -> np.ndarray:
    z, signs = _dpo_margins(params, policy_t, dataset, beta)
    scores = policy_t.score_tensor(params)
    dz = beta * signs[:, None] * (scores[dataset.x, dataset.y] - scores[dataset.x, dataset.y_prime])
    coefficients = dataset.weights * -expit(-z)
    return coefficients @ dz / dataset.total_weight


def iterative_dpo_step(
    policy_t: SoftmaxPolicy, dataset: TripleDataset, beta: float, lr: float, steps: int
) -> tuple[SoftmaxPolicy, float]:
    """Gradient descent on the DPO loss against pi_t; returns the policy and final loss"""
    theta = np.array(policy_t.params, dtype=np.float64)
    for _ in range(steps):
        theta = theta - lr * dpo_grad(theta, policy_t, dataset, beta)
    return policy_t.with_params(theta), dpo_loss(theta, policy_t, dataset, beta)


def run_baseline(
    env: ContextualBandit,
    config: BaselineConfig,
    rng: np.random.Generator,
    initial_policy: SoftmaxPolicy | None = None,
    sink: RecordSink | None = None,
) -> RunResult:
    """Run a baseline for T iterations with the same record stream as run_rebel"""
    policy = initial_policy or TabularSoftmaxPolicy.uniform(env.num_contexts, env.num_actions)
    reference = policy
    algo = config.algo
    records: list[RunRecord] = []
    policies: list[SoftmaxPolicy] = [policy]
    triple_config = RebelConfig(
        eta=config.eta, T=1, batch_size=config.batch_size, gamma=config.gamma
    )
    logger.info(
        f"{algo.value} on {env.name}: T={config.T}, eta={config.eta}, batch={config.batch_size}"
    )

    responses = config.responses_per_iteration
    for t in range(config.T):
        rewards = reward_table(env, policy, reference, config.gamma)
        loss: float | None = None
        if algo is Algorithm.MD_ORACLE:
            policy_next = md_oracle_step(policy, rewards, config.eta)
        elif algo is Algorithm.NPG:
            batch = None
            if not config.population:
                batch = collect_groups(env, policy, responses, 1, rng, rewards)
            policy_next = npg_step(policy, rewards, env.rho, config.eta, batch)
        elif algo is Algorithm.REINFORCE:
            batch = collect_groups(env, policy, responses, 1, rng, rewards)
            policy_next = reinforce_step(policy, batch, config.eta)
        elif algo is Algorithm.RLOO:
            batch = collect_groups(env, policy, responses // config.k, config.k, rng, rewards)
            policy_next = rloo_step(policy, batch, config.eta)
        elif algo is Algorithm.PPO_CLIP:
            batch = collect_groups(env, policy, responses // config.k, config.k, rng, rewards)
            policy_next = ppo_clip_step(
                policy, batch, config.eta, config.epsilon, config.inner_steps
            )
        else:
            dataset = collect_dataset(env, policy, triple_config, rng, reference=reference)
            policy_next, loss = iterative_dpo_step(
                policy, dataset, config.beta, config.eta, config.dpo_steps
            )
        record = iteration_record(algo.value, t, env, policy, policy_next, reference, loss)
        logger.debug(f"{algo.value} t={t} reward={record.expected_reward:.6f}")
        records.append(record)
        if sink is not None:
            sink(record)
        policy = policy_next
        policies.append(policy)

    return RunResult(algo=algo.value, records=records, policies=policies)


def ppo_drift(
    env: ContextualBandit,
    policy_t: SoftmaxPolicy,
    batch: GroupBatch,
    lr: float,
    epsilon: float,
    inner_steps: int,
) -> dict[str, float]:
    """
    Step KL of many-step clipped PPO against an exact MD step of matched size

    The MD step size is chosen so that its mean absolute change of the
    per-context logit gap between actions 0 and 1 equals PPO's.
    """
    ppo_policy = ppo_clip_step(policy_t, batch, lr, epsilon, inner_steps)
    gaps_before = policy_t.logits()[:, 0] - policy_t.logits()[:, 1]
    gaps_ppo = ppo_policy.logits()[:, 0] - ppo_policy.logits()[:, 1]
    reward_gaps = env.rewards[:, 0] - env.rewards[:, 1]
    ppo_change = float(np.mean(np.abs(gaps_ppo - gaps_before)))
    md_unit = float(np.mean(np.abs(reward_gaps)))
    md_eta = ppo_change / md_unit if md_unit > 0 else 0.0
    tabular_t = TabularSoftmaxPolicy(logits_table=policy_t.logits())
    md_policy = md_oracle_step(tabular_t, env.rewards, md_eta)

    ppo_kl = kl_rows(ppo_policy.probs_table(), policy_t.probs_table())
    md_kl = kl_rows(md_policy.probs_table(), policy_t.probs_table())
    return {
        "ppo_kl": float(np.dot(env.rho, ppo_kl)),
        "ppo_max_kl": float(np.max(ppo_kl)),
        "md_kl": float(np.dot(env.rho, md_kl)),
        "md_max_kl": float(np.max(md_kl)),
        "md_eta": md_eta,
        "mean_gap_change": ppo_change,
    }
