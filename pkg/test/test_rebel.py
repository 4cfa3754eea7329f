"""
Test suite for the REBEL regression and outer loop

Tests cover:
- Dataset collection and population datasets
- Loss, gradient and the three solvers
- Gauss-Newton against natural policy gradient
- Run records, determinism and divergence handling
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from src.baselines import md_oracle_step, npg_step, run_baseline
from src.environments import ContextualBandit, ZeroProbabilityError
from src.logging_config import get_logger
from src.models import (
    Algorithm,
    BaselineConfig,
    RebelConfig,
    RegressionTriple,
    SamplerKind,
    SamplerSpec,
    SolverKind,
)
from src.numerics import finite_diff_grad, make_rng
from src.policies import LinearSoftmaxPolicy, TabularSoftmaxPolicy, kl_rows
from src.rebel import (
    RegressionDivergenceError,
    TripleDataset,
    collect_dataset,
    gauss_newton_step,
    mean_rebel_loss,
    optimal_value,
    population_dataset,
    rebel_grad,
    rebel_loss,
    rebel_predictions,
    run_rebel,
    sampler_probs,
    solve_regression_exact_tabular,
    solve_regression_gd,
)

logger = get_logger(__name__)


def _centered(logits: np.ndarray) -> np.ndarray:
    return logits - logits.mean(axis=1, keepdims=True)


@pytest.mark.unit
class TestTripleDataset:
    """Test dataset construction"""

    def test_from_triples(self):
        """Triples become columns with unit weights"""
        dataset = TripleDataset.from_triples(
            [RegressionTriple(0, 0, 2, 1.0, 0.0), RegressionTriple(0, 1, 1, 0.5, 0.5)]
        )
        assert len(dataset) == 2
        assert_allclose(dataset.reward_differences, [1.0, 0.0])
        assert dataset.total_weight == 2.0
        assert dataset.triples()[0] == RegressionTriple(0, 0, 2, 1.0, 0.0)

    def test_mismatched_columns_rejected(self):
        """All columns need the same length"""
        with pytest.raises(ValueError, match="equal length"):
            TripleDataset(
                x=[0, 0], y=[0], y_prime=[1], r_y=[1.0], r_y_prime=[0.0], weights=[1.0]
            )

    def test_negative_weights_rejected(self):
        """Weights must be non-negative"""
        with pytest.raises(ValueError, match="non-negative"):
            TripleDataset(x=[0], y=[0], y_prime=[1], r_y=[1.0], r_y_prime=[0.0], weights=[-1.0])

    def test_collect_dataset_shapes(self, canonical_env, rng):
        """batch_size triples with rewards read from the table"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        dataset = collect_dataset(canonical_env, policy, RebelConfig(batch_size=20), rng)
        assert len(dataset) == 20
        assert_allclose(dataset.r_y, canonical_env.rewards[dataset.x, dataset.y])
        assert_allclose(dataset.r_y_prime, canonical_env.rewards[dataset.x, dataset.y_prime])

    def test_population_dataset_weights(self, canonical_env):
        """Weights are rho pi mu and sum to 1"""
        uniform = np.full((1, 3), 1.0 / 3.0)
        dataset = population_dataset(canonical_env.rho, uniform, uniform, canonical_env.rewards)
        assert len(dataset) == 9
        assert dataset.total_weight == pytest.approx(1.0)

    def test_population_dataset_drops_zero_weight(self, canonical_env):
        """Triples with zero probability are left out"""
        pi = np.array([[1.0, 0.0, 0.0]])
        mu = np.full((1, 3), 1.0 / 3.0)
        dataset = population_dataset(canonical_env.rho, pi, mu, canonical_env.rewards)
        assert len(dataset) == 3
        assert set(dataset.y.tolist()) == {0}

    def test_sampler_probs_best_of_n(self, canonical_env):
        """Closed-form best-of-2 distribution"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        spec = SamplerSpec(kind=SamplerKind.BEST_OF_N, n=2)
        probs = sampler_probs(spec, policy, policy, canonical_env.rewards)
        assert_allclose(probs, [[5 / 9, 3 / 9, 1 / 9]])


@pytest.mark.unit
class TestRegressionLoss:
    """Test the REBEL loss and its gradient"""

    def test_loss_zero_at_mirror_descent_solution(self, canonical_env):
        """logits + eta r fits every reward difference exactly"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        uniform = policy.probs_table()
        dataset = population_dataset(canonical_env.rho, uniform, uniform, canonical_env.rewards)
        fitted = solve_regression_exact_tabular(policy, canonical_env, 1.0)
        assert rebel_loss(fitted.params, policy, dataset, 1.0) == pytest.approx(0.0, abs=1e-24)

    def test_loss_at_start_is_reward_variance(self, canonical_env):
        """At theta = theta_t the loss is E (r(y) - r(y'))^2"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        uniform = policy.probs_table()
        dataset = population_dataset(canonical_env.rho, uniform, uniform, canonical_env.rewards)
        expected = np.mean((canonical_env.rewards[0][:, None] - canonical_env.rewards[0]) ** 2)
        assert rebel_loss(policy.params, policy, dataset, 1.0) == pytest.approx(expected)

    def test_gradient_matches_finite_differences(self, canonical_env, rng):
        """Analytic gradient equals central differences"""
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(1, 3)))
        dataset = collect_dataset(canonical_env, policy, RebelConfig(batch_size=8), rng)
        theta = policy.params + 0.1
        numeric = finite_diff_grad(lambda th: rebel_loss(th, policy, dataset, 0.5), theta)
        assert_allclose(rebel_grad(theta, policy, dataset, 0.5), numeric, atol=1e-6)

    def test_predictions_ignore_per_context_logit_shift(self, rng):
        """Adding c(x) to every logit of context x leaves the predictions unchanged"""
        env = ContextualBandit(rho=np.array([0.4, 0.6]), rewards=rng.uniform(size=(2, 4)))
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(2, 4)))
        dataset = collect_dataset(env, policy, RebelConfig(batch_size=32), rng)
        theta = rng.normal(size=policy.num_params)
        shifted = theta + np.repeat(rng.normal(size=2) * 10.0, 4)
        assert_allclose(
            rebel_predictions(shifted, policy, dataset, 0.5),
            rebel_predictions(theta, policy, dataset, 0.5),
            atol=1e-10,
        )

    def test_zero_probability_triple_rejected(self, canonical_env):
        """A triple on an underflowed action names its index"""
        policy = TabularSoftmaxPolicy(logits_table=np.array([[0.0, 0.0, -1000.0]]))
        dataset = TripleDataset(
            x=[0, 0],
            y=[0, 2],
            y_prime=[1, 1],
            r_y=[1.0, 0.0],
            r_y_prime=[0.5, 0.5],
            weights=[1.0, 1.0],
        )
        with pytest.raises(ZeroProbabilityError, match="Triple 1"):
            rebel_loss(policy.params, policy, dataset, 1.0)


@pytest.mark.unit
class TestSolvers:
    """Test the exact, gradient-descent and Gauss-Newton solvers"""

    def test_exact_solver_matches_mirror_descent(self, canonical_env):
        """Exact tabular step equals pi_t exp(eta r) / Z"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        fitted = solve_regression_exact_tabular(policy, canonical_env, 1.0)
        expected = np.exp([1.0, 0.5, 0.0]) / np.sum(np.exp([1.0, 0.5, 0.0]))
        assert_allclose(fitted.probs_table()[0], expected)

    def test_exact_step_log_ratio_tracks_reward(self, rng):
        """ln pi_{t+1}/pi_t - eta r is constant within every context"""
        rewards = rng.uniform(size=(3, 5))
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(3, 5)))
        fitted = solve_regression_exact_tabular(policy, rewards, 0.7)
        residual = fitted.log_prob_table() - policy.log_prob_table() - 0.7 * rewards
        assert_allclose(np.ptp(residual, axis=1), 0.0, atol=1e-12)

    def test_exact_solver_requires_tabular(self, canonical_env, rng):
        """Linear policies cannot use the exact solver"""
        policy = LinearSoftmaxPolicy(feature_table=rng.normal(size=(1, 3, 2)), theta=np.zeros(2))
        with pytest.raises(TypeError):
            solve_regression_exact_tabular(policy, canonical_env, 1.0)

    def test_gd_converges_to_exact_on_population(self, canonical_env):
        """Gradient descent reaches the exact solution up to a per-context shift"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        uniform = policy.probs_table()
        dataset = population_dataset(canonical_env.rho, uniform, uniform, canonical_env.rewards)
        fitted, losses = solve_regression_gd(policy, dataset, 1.0, steps=200, step_size=0.5)
        exact = solve_regression_exact_tabular(policy, canonical_env, 1.0)
        assert_allclose(fitted.probs_table(), exact.probs_table(), atol=1e-8)
        assert losses[-1] < 1e-12
        assert len(losses) == 201

    def test_gd_loss_non_increasing(self, canonical_env, rng):
        """Small steps never increase the loss"""
        eta = 1.0
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        dataset = collect_dataset(canonical_env, policy, RebelConfig(batch_size=16), rng)
        _, losses = solve_regression_gd(
            policy, dataset, eta, steps=50, step_size=0.1 / (eta**2 * 16)
        )
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:], strict=False))

    def test_gd_divergence_raises(self, canonical_env):
        """Step 5 against curvature 4/3 multiplies the loss by (17/3)^2 at once"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        uniform = policy.probs_table()
        dataset = population_dataset(canonical_env.rho, uniform, uniform, canonical_env.rewards)
        with pytest.raises(RegressionDivergenceError) as excinfo:
            solve_regression_gd(policy, dataset, 1.0, steps=50, step_size=5.0)
        assert excinfo.value.iteration is None
        assert len(excinfo.value.losses) == 2

    def test_gauss_newton_matches_exact_on_population(self, canonical_env):
        """For tabular policies the linearization is exact up to a per-context shift"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        uniform = policy.probs_table()
        dataset = population_dataset(canonical_env.rho, uniform, uniform, canonical_env.rewards)
        delta = gauss_newton_step(policy, dataset, 1.0)
        assert_allclose(delta, [0.5, 0.0, -0.5], atol=1e-12)

    def test_gauss_newton_equals_population_npg(self, rng):
        """Population NPG with mu = pi_t matches the Gauss-Newton step"""
        rewards = rng.uniform(size=(2, 4))
        rho = np.array([0.3, 0.7])
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(2, 4)))
        pi = policy.probs_table()
        dataset = population_dataset(rho, pi, pi, rewards)
        stepped = policy.with_params(policy.params + gauss_newton_step(policy, dataset, 0.7))
        natural = npg_step(policy, rewards, rho, 0.7)
        assert_allclose(
            _centered(stepped.logits_table), _centered(natural.logits_table), atol=1e-8
        )

    def test_gauss_newton_zero_for_constant_reward(self, rng):
        """Equal rewards give no update"""
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(1, 4)))
        pi = policy.probs_table()
        dataset = population_dataset(np.array([1.0]), pi, pi, np.full((1, 4), 0.3))
        assert_allclose(gauss_newton_step(policy, dataset, 1.0), np.zeros(4), atol=1e-14)


@pytest.mark.integration
class TestRunRebel:
    """Test the REBEL outer loop"""

    def test_matches_mirror_descent_oracle(self, rng):
        """Exact-solver REBEL and MD coincide at every iterate"""
        env = ContextualBandit(
            rho=np.array([0.25, 0.75]), rewards=rng.uniform(size=(2, 5)), name="random"
        )
        result = run_rebel(env, RebelConfig(eta=1.0, T=50, batch_size=1), rng)
        oracle = result.policies[0]
        for policy in result.policies[1:]:
            oracle = md_oracle_step(oracle, env.rewards, 1.0)
            assert np.max(kl_rows(policy.probs_table(), oracle.probs_table())) <= 1e-9

    def test_canonical_suboptimality(self, canonical_env, rng):
        """T = 100 at the prescribed step size ends within 2 sqrt(ln 3 / 100)"""
        T = 100
        eta = math.sqrt(math.log(3) / T)
        result = run_rebel(canonical_env, RebelConfig(eta=eta, T=T, batch_size=4), rng)
        final = result.final_policy.probs_table()[0]
        suboptimality = 1.0 - float(final @ canonical_env.rewards[0])
        assert suboptimality <= 2 * math.sqrt(math.log(3) / T)

    def test_records_and_iterates(self, canonical_env, rng):
        """T records and T + 1 iterates; reward increases monotonically"""
        result = run_rebel(canonical_env, RebelConfig(eta=0.5, T=10, batch_size=2), rng)
        assert len(result.records) == 10
        assert len(result.policies) == 11
        rewards = [record.expected_reward for record in result.records]
        assert all(b >= a - 1e-12 for a, b in zip(rewards, rewards[1:], strict=False))
        assert result.records[0].kl_ref == pytest.approx(0.0, abs=1e-15)
        assert result.records[0].suboptimality == pytest.approx(0.5)

    def test_deterministic_given_seed(self, canonical_env):
        """Same seed gives identical records"""
        config = RebelConfig(eta=0.5, T=5, batch_size=4, solver=SolverKind.GAUSS_NEWTON)
        first = run_rebel(canonical_env, config, make_rng(9))
        second = run_rebel(canonical_env, config, make_rng(9))
        assert [r.to_dict() for r in first.records] == [r.to_dict() for r in second.records]

    def test_sink_receives_every_record(self, canonical_env, rng):
        """The sink is called once per iteration in order"""
        seen = []
        run_rebel(canonical_env, RebelConfig(eta=0.5, T=4, batch_size=2), rng, sink=seen.append)
        assert [record.iteration for record in seen] == [0, 1, 2, 3]

    def test_linear_policy_with_gauss_newton(self, rng):
        """Linear features run with the Gauss-Newton solver and improve reward"""
        env = ContextualBandit(rho=np.array([1.0]), rewards=np.array([[1.0, 0.0, 0.5]]))
        features = np.array([[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]])
        policy = LinearSoftmaxPolicy(feature_table=features, theta=np.zeros(2))
        config = RebelConfig(eta=0.5, T=20, batch_size=16, solver=SolverKind.GAUSS_NEWTON)
        result = run_rebel(env, config, rng, initial_policy=policy)
        assert result.records[-1].expected_reward > result.records[0].expected_reward

    def test_exact_solver_rejects_linear_policy(self, canonical_env, rng):
        """Configuration mismatch is reported before any iteration"""
        policy = LinearSoftmaxPolicy(feature_table=rng.normal(size=(1, 3, 2)), theta=np.zeros(2))
        with pytest.raises(ValueError, match="tabular"):
            run_rebel(canonical_env, RebelConfig(T=1), rng, initial_policy=policy)

    def test_divergence_carries_iteration(self, canonical_env, rng):
        """The outer loop stamps the failing iteration on the error"""
        config = RebelConfig(
            eta=1.0,
            T=3,
            solver=SolverKind.GRAD_DESCENT,
            gd_step_size=5.0,
            population=True,
        )
        with pytest.raises(RegressionDivergenceError) as excinfo:
            run_rebel(canonical_env, config, rng)
        assert excinfo.value.iteration == 0

    def test_kl_shaping_keeps_policy_near_reference(self, canonical_env, rng):
        """gamma > 0 ends with a smaller KL to pi_0 than gamma = 0"""
        plain = run_rebel(canonical_env, RebelConfig(eta=1.0, T=30, batch_size=1), make_rng(1))
        shaped = run_rebel(
            canonical_env, RebelConfig(eta=1.0, T=30, batch_size=1, gamma=1.0), make_rng(1)
        )
        assert shaped.records[-1].kl_ref < plain.records[-1].kl_ref

    @pytest.mark.parametrize("eta", [0.3, 0.7, 1.0, 2.0])
    def test_long_runs_keep_kl_non_negative(self, canonical_env, rng, eta):
        """Near-deterministic iterates finish T = 100 with every KL at or above zero"""
        result = run_rebel(canonical_env, RebelConfig(eta=eta, T=100, batch_size=4), rng)
        assert len(result.records) == 100
        assert all(r.kl_step >= 0.0 and r.max_kl_step >= 0.0 for r in result.records)
        assert all(r.kl_ref >= 0.0 for r in result.records)

    def test_per_context_reward_offset_gives_same_iterates(self, rng):
        """r(x, y) + c(x) and r(x, y) produce the same policies from the same seed"""
        rewards = rng.uniform(size=(2, 4))
        env = ContextualBandit(rho=np.array([0.5, 0.5]), rewards=rewards)
        offset = env.with_rewards(rewards + np.array([[3.0], [-2.0]]))
        config = RebelConfig(eta=0.5, T=10, batch_size=16, solver=SolverKind.GAUSS_NEWTON)
        plain = run_rebel(env, config, make_rng(5))
        shifted = run_rebel(offset, config, make_rng(5))
        for a, b in zip(plain.policies, shifted.policies, strict=True):
            assert_allclose(a.probs_table(), b.probs_table(), atol=1e-9)

    def test_vanishing_step_stays_at_start(self, canonical_env, rng):
        """eta -> 0 keeps pi_1 within KL 1e-8 of pi_0"""
        result = run_rebel(canonical_env, RebelConfig(eta=1e-8, T=1, batch_size=4), rng)
        assert result.records[0].kl_step <= 1e-8

    def test_exact_solver_beats_reinforce(self, canonical_env):
        """At a matched budget exact REBEL ends with no larger suboptimality than REINFORCE"""
        for seed in range(5):
            rebel = run_rebel(
                canonical_env, RebelConfig(eta=0.5, T=50, batch_size=4), make_rng(seed)
            )
            reinforce = run_baseline(
                canonical_env,
                BaselineConfig(algo=Algorithm.REINFORCE, eta=0.5, T=50, batch_size=4),
                make_rng(seed),
            )
            best = optimal_value(canonical_env)
            rebel_gap = best - float(rebel.final_policy.probs_table()[0] @ canonical_env.rewards[0])
            reinforce_gap = best - float(
                reinforce.final_policy.probs_table()[0] @ canonical_env.rewards[0]
            )
            assert rebel_gap <= reinforce_gap

    def test_mean_loss_zero_for_exact_solver(self, canonical_env, rng):
        """Exact solves fit sampled triples perfectly"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        dataset = collect_dataset(canonical_env, policy, RebelConfig(batch_size=8), rng)
        fitted = solve_regression_exact_tabular(policy, canonical_env, 1.0)
        assert mean_rebel_loss(fitted, policy, dataset, 1.0) == pytest.approx(0.0, abs=1e-24)
