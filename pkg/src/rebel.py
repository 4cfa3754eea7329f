"""
REBEL: regression of relative rewards onto log-ratio differences

Each iteration collects (x, y, y') triples, fits the square loss

    sum_n w_n ((1/eta) [ln pi(y)/pi_t(y) - ln pi(y')/pi_t(y')] - [r(x,y) - r(x,y')])^2

and advances to the fitted policy. Three solvers are available: the exact
tabular solution (logits + eta r), full-batch gradient descent warm-started at
pi_t, and one Gauss-Newton step on the linearized loss.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from src.environments import (
    ContextualBandit,
    ShapedReward,
    ZeroProbabilityError,
    sample_context,
    shaped_reward_table,
)
from src.logging_config import get_logger
from src.models import (
    RebelConfig,
    RegressionTriple,
    RunRecord,
    RunResult,
    SamplerKind,
    SamplerSpec,
    SolverKind,
)
from src.numerics import min_norm_lstsq
from src.policies import (
    SoftmaxPolicy,
    TabularSoftmaxPolicy,
    best_of_n,
    best_of_n_probs,
    expected_kl,
    expected_reward,
    kl_rows,
    sample_action,
    worst_of_n,
    worst_of_n_probs,
)

logger = get_logger(__name__)

DIVERGENCE_FACTOR = 10.0

RecordSink = Callable[[RunRecord], None]


class RegressionDivergenceError(RuntimeError):
    """Raised when gradient descent on the regression loss blows up"""

    def __init__(self, message: str, losses: list[float], iteration: int | None = None):
        super().__init__(message)
        self.losses = losses
        self.iteration = iteration


@dataclass(frozen=True)
class TripleDataset:
    """Column-oriented batch of regression triples with per-triple weights"""

    x: np.ndarray
    y: np.ndarray
    y_prime: np.ndarray
    r_y: np.ndarray
    r_y_prime: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        """Validate dataset columns"""
        columns = {}
        for name in ("x", "y", "y_prime"):
            columns[name] = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
        for name in ("r_y", "r_y_prime", "weights"):
            columns[name] = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
        lengths = {column.shape[0] for column in columns.values()}
        if len(lengths) != 1:
            raise ValueError("Dataset columns must have equal length")
        if not (np.all(np.isfinite(columns["r_y"])) and np.all(np.isfinite(columns["r_y_prime"]))):
            raise ValueError("Triple rewards must be finite")
        if np.any(columns["weights"] < 0) or not np.all(np.isfinite(columns["weights"])):
            raise ValueError("Triple weights must be finite and non-negative")
        for name, column in columns.items():
            column.setflags(write=False)
            object.__setattr__(self, name, column)

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def reward_differences(self) -> np.ndarray:
        return self.r_y - self.r_y_prime

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def triples(self) -> list[RegressionTriple]:
        return [
            RegressionTriple(int(x), int(y), int(yp), float(ry), float(ryp))
            for x, y, yp, ry, ryp in zip(
                self.x, self.y, self.y_prime, self.r_y, self.r_y_prime, strict=True
            )
        ]

    @classmethod
    def from_triples(
        cls, triples: list[RegressionTriple], weights: np.ndarray | None = None
    ) -> TripleDataset:
        return cls(
            x=np.array([t.x for t in triples], dtype=np.int64),
            y=np.array([t.y for t in triples], dtype=np.int64),
            y_prime=np.array([t.y_prime for t in triples], dtype=np.int64),
            r_y=np.array([t.r_y for t in triples], dtype=np.float64),
            r_y_prime=np.array([t.r_y_prime for t in triples], dtype=np.float64),
            weights=np.ones(len(triples)) if weights is None else weights,
        )


def reward_table(
    env: ContextualBandit, policy_t: SoftmaxPolicy, reference: SoftmaxPolicy, gamma: float
) -> np.ndarray:
    """Regression rewards for iteration t: the base table, KL-shaped when gamma > 0"""
    return shaped_reward_table(
        ShapedReward(base=env, gamma=gamma, reference=reference, current=policy_t)
    )


def sampler_probs(
    spec: SamplerSpec,
    policy_t: SoftmaxPolicy,
    reference: SoftmaxPolicy,
    rewards: np.ndarray,
) -> np.ndarray:
    """Exact per-context distribution of a sampler, shape (contexts, actions)"""
    if spec.kind is SamplerKind.ON_POLICY:
        return policy_t.probs_table()
    if spec.kind is SamplerKind.OFFLINE_FIXED:
        return reference.probs_table()
    probs = policy_t.probs_table()
    select = best_of_n_probs if spec.kind is SamplerKind.BEST_OF_N else worst_of_n_probs
    return np.stack([select(probs[x], rewards[x], spec.n) for x in range(probs.shape[0])])


def draw_action(
    spec: SamplerSpec,
    policy_t: SoftmaxPolicy,
    reference: SoftmaxPolicy,
    rewards: np.ndarray,
    x: int,
    rng: np.random.Generator,
) -> int:
    """Draw one action for context x from the configured sampler"""
    if spec.kind is SamplerKind.ON_POLICY:
        return sample_action(policy_t, x, rng)
    if spec.kind is SamplerKind.OFFLINE_FIXED:
        return sample_action(reference, x, rng)
    if spec.kind is SamplerKind.BEST_OF_N:
        return best_of_n(policy_t, rewards[x], x, spec.n, rng)
    return worst_of_n(policy_t, rewards[x], x, spec.n, rng)


def collect_dataset(
    env: ContextualBandit,
    policy_t: SoftmaxPolicy,
    config: RebelConfig,
    rng: np.random.Generator,
    reference: SoftmaxPolicy | None = None,
) -> TripleDataset:
    """
    Sample batch_size triples x ~ rho, y ~ response_dist, y' ~ base_dist

    Best/worst-of-N selection ranks draws by the base reward; stored rewards
    are shaped with pi_t and the reference when gamma > 0.
    """
    reference = policy_t if reference is None else reference
    rewards = reward_table(env, policy_t, reference, config.gamma)
    size = config.batch_size
    x = np.empty(size, dtype=np.int64)
    y = np.empty(size, dtype=np.int64)
    y_prime = np.empty(size, dtype=np.int64)
    for n in range(size):
        x[n] = sample_context(env, rng)
        y[n] = draw_action(config.response_dist, policy_t, reference, env.rewards, x[n], rng)
        y_prime[n] = draw_action(config.base_dist, policy_t, reference, env.rewards, x[n], rng)
    return TripleDataset(
        x=x,
        y=y,
        y_prime=y_prime,
        r_y=rewards[x, y],
        r_y_prime=rewards[x, y_prime],
        weights=np.ones(size),
    )


def population_dataset(
    rho: np.ndarray, response_probs: np.ndarray, base_probs: np.ndarray, rewards: np.ndarray
) -> TripleDataset:
    """Every (x, y, y') with weight rho(x) nu(y|x) mu(y'|x); zero-weight triples are dropped"""
    weights = rho[:, None, None] * response_probs[:, :, None] * base_probs[:, None, :]
    x, y, y_prime = np.nonzero(weights > 0.0)
    return TripleDataset(
        x=x,
        y=y,
        y_prime=y_prime,
        r_y=rewards[x, y],
        r_y_prime=rewards[x, y_prime],
        weights=weights[x, y, y_prime],
    )


def _check_support(probs: np.ndarray, dataset: TripleDataset, which: str) -> None:
    zero = (probs[dataset.x, dataset.y] <= 0.0) | (probs[dataset.x, dataset.y_prime] <= 0.0)
    if np.any(zero):
        n = int(np.argmax(zero))
        raise ZeroProbabilityError(
            f"Triple {n} (x={dataset.x[n]}, y={dataset.y[n]}, y'={dataset.y_prime[n]}) "
            f"has zero probability under the {which} policy"
        )


def rebel_predictions(
    params: np.ndarray, policy_t: SoftmaxPolicy, dataset: TripleDataset, eta: float
) -> np.ndarray:
    """(1/eta) (ln pi_theta(y)/pi_t(y) - ln pi_theta(y')/pi_t(y')) per triple"""
    _check_support(policy_t.probs_table(), dataset, "current")
    _check_support(policy_t.probs_table(params), dataset, "candidate")
    log_ratio = policy_t.log_prob_table(params) - policy_t.log_prob_table()
    return (log_ratio[dataset.x, dataset.y] - log_ratio[dataset.x, dataset.y_prime]) / eta


def rebel_loss(
    params: np.ndarray, policy_t: SoftmaxPolicy, dataset: TripleDataset, eta: float
) -> float:
    """Weighted square loss of predicted against observed reward differences"""
    residuals = rebel_predictions(params, policy_t, dataset, eta) - dataset.reward_differences
    return float(np.sum(dataset.weights * residuals**2))


def rebel_grad(
    params: np.ndarray, policy_t: SoftmaxPolicy, dataset: TripleDataset, eta: float
) -> np.ndarray:
    """Analytic gradient of rebel_loss in theta"""
    residuals = rebel_predictions(params, policy_t, dataset, eta) - dataset.reward_differences
    scores = policy_t.score_tensor(params)
    design = (scores[dataset.x, dataset.y] - scores[dataset.x, dataset.y_prime]) / eta
    return 2.0 * design.T @ (dataset.weights * residuals)


def mean_rebel_loss(
    policy_next: SoftmaxPolicy, policy_t: SoftmaxPolicy, dataset: TripleDataset, eta: float
) -> float:
    """Loss per unit weight, as reported in run records"""
    total = dataset.total_weight
    if total <= 0:
        return 0.0
    return rebel_loss(policy_next.params, policy_t, dataset, eta) / total


def solve_regression_exact_tabular(
    policy_t: TabularSoftmaxPolicy, rewards: ContextualBandit | np.ndarray, eta: float
) -> TabularSoftmaxPolicy:
    """Population minimizer with full coverage: logits theta_t + eta r"""
    if not isinstance(policy_t, TabularSoftmaxPolicy):
        raise TypeError("The exact solver requires a tabular policy")
    table = rewards.rewards if isinstance(rewards, ContextualBandit) else np.asarray(rewards)
    if table.shape != policy_t.logits_table.shape:
        raise ValueError("Reward table does not match the policy dimensions")
    return TabularSoftmaxPolicy(logits_table=policy_t.logits_table + eta * table)


def solve_regression_gd(
    policy_t: SoftmaxPolicy,
    dataset: TripleDataset,
    eta: float,
    steps: int,
    step_size: float,
) -> tuple[SoftmaxPolicy, list[float]]:
    """
    Full-batch gradient descent on rebel_loss from theta = theta_t

    Returns the fitted policy and the loss before each step plus the final
    loss. Raises RegressionDivergenceError once the loss exceeds ten times its
    initial value or stops being finite.
    """
    theta = np.array(policy_t.params, dtype=np.float64)
    initial = rebel_loss(theta, policy_t, dataset, eta)
    losses = [initial]
    for step in range(steps):
        theta = theta - step_size * rebel_grad(theta, policy_t, dataset, eta)
        loss = rebel_loss(theta, policy_t, dataset, eta)
        losses.append(loss)
        if not np.isfinite(loss) or (initial > 0 and loss > DIVERGENCE_FACTOR * initial):
            raise RegressionDivergenceError(
                f"Regression loss diverged at step {step + 1}: {loss:.6g} (initial {initial:.6g})",
                losses=losses,
            )
    logger.debug(f"Gradient descent: loss {initial:.6g} -> {losses[-1]:.6g} in {steps} steps")
    return policy_t.with_params(theta), losses


def gauss_newton_step(policy_t: SoftmaxPolicy, dataset: TripleDataset, eta: float) -> np.ndarray:
    """
    Minimum-norm solution of the regression linearized at theta_t

    Design rows (1/eta) (grad ln pi_t(y|x) - grad ln pi_t(y'|x)) and targets
    r(x, y) - r(x, y'), each scaled by the square root of the triple weight.
    """
    scores = policy_t.score_tensor()
    root_weights = np.sqrt(dataset.weights)
    design = (scores[dataset.x, dataset.y] - scores[dataset.x, dataset.y_prime]) / eta
    solution = min_norm_lstsq(
        root_weights[:, None] * design, root_weights * dataset.reward_differences
    )
    return solution.solution


def optimal_value(env: ContextualBandit) -> float:
    """Expected reward of the best deterministic policy"""
    return float(np.dot(env.rho, env.rewards.max(axis=1)))


def iteration_record(
    algo: str,
    iteration: int,
    env: ContextualBandit,
    policy_t: SoftmaxPolicy,
    policy_next: SoftmaxPolicy,
    reference: SoftmaxPolicy,
    regression_loss: float | None,
) -> RunRecord:
    """Metrics of pi_t and the step pi_t -> pi_{t+1}"""
    probs_t = policy_t.probs_table()
    probs_next = policy_next.probs_table()
    reward = expected_reward(env.rho, probs_t, env.rewards)
    step_rows = kl_rows(probs_next, probs_t)[env.rho > 0]
    return RunRecord(
        algo=algo,
        iteration=iteration,
        expected_reward=reward,
        kl_step=expected_kl(probs_next, probs_t, env.rho),
        max_kl_step=float(np.max(step_rows)),
        kl_ref=expected_kl(probs_t, reference.probs_table(), env.rho),
        regression_loss=regression_loss,
        suboptimality=optimal_value(env) - reward,
    )


def _solve(
    policy: SoftmaxPolicy,
    dataset: TripleDataset,
    rewards: np.ndarray,
    eta: float,
    solver: SolverKind,
    gd_steps: int,
    gd_step_size: float,
) -> SoftmaxPolicy:
    if solver is SolverKind.EXACT_TABULAR:
        return solve_regression_exact_tabular(policy, rewards, eta)
    if solver is SolverKind.GRAD_DESCENT:
        fitted, _ = solve_regression_gd(policy, dataset, eta, gd_steps, gd_step_size)
        return fitted
    return policy.with_params(policy.params + gauss_newton_step(policy, dataset, eta))


def run_rebel(
    env: ContextualBandit,
    config: RebelConfig,
    rng: np.random.Generator,
    initial_policy: SoftmaxPolicy | None = None,
    sink: RecordSink | None = None,
) -> RunResult:
    """
    Run T iterations of collect, solve, advance

    Records describe pi_0 .. pi_{T-1}; the result holds all T + 1 iterates.
    The exact solver still draws each dataset so that the random stream and
    the reported regression loss do not depend on the solver choice.
    """
    policy = initial_policy or TabularSoftmaxPolicy.uniform(env.num_contexts, env.num_actions)
    if config.solver is SolverKind.EXACT_TABULAR and not isinstance(policy, TabularSoftmaxPolicy):
        raise ValueError("The exact_tabular solver requires a tabular policy")
    reference = policy
    records: list[RunRecord] = []
    policies: list[SoftmaxPolicy] = [policy]
    logger.info(
        f"REBEL on {env.name}: T={config.T}, eta={config.eta}, batch={config.batch_size}, "
        f"solver={config.solver.value}, y~{config.response_dist.label}, "
        f"y'~{config.base_dist.label}"
    )

    for t in range(config.T):
        rewards = reward_table(env, policy, reference, config.gamma)
        if config.population:
            dataset = population_dataset(
                env.rho,
                sampler_probs(config.response_dist, policy, reference, env.rewards),
                sampler_probs(config.base_dist, policy, reference, env.rewards),
                rewards,
            )
        else:
            dataset = collect_dataset(env, policy, config, rng, reference=reference)
        try:
            policy_next = _solve(
                policy,
                dataset,
                rewards,
                config.eta,
                config.solver,
                config.gd_steps,
                config.gd_step_size,
            )
        except RegressionDivergenceError as e:
            e.iteration = t
            logger.error(f"Regression diverged at iteration {t}: {e}")
            raise
        loss = mean_rebel_loss(policy_next, policy, dataset, config.eta)
        record = iteration_record("rebel", t, env, policy, policy_next, reference, loss)
        logger.debug(
            f"t={t} reward={record.expected_reward:.6f} kl_step={record.kl_step:.3e} "
            f"loss={loss:.3e}"
        )
        records.append(record)
        if sink is not None:
            sink(record)
        policy = policy_next
        policies.append(policy)

    return RunResult(algo="rebel", records=records, policies=policies)
