"""
Test suite for self-play REBEL on preference games

Tests cover:
- Win-rate rewards and iterate mixtures
- Exact duality gap of mixed policies
- Preference batch targets under exact and binary feedback
- Self-play runs on rock-paper-scissors
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from src.environments import preference_from_utility
from src.logging_config import get_logger
from src.models import (
    FeedbackKind,
    RebelConfig,
    SamplerKind,
    SamplerSpec,
    SelfPlayConfig,
    SolverKind,
)
from src.numerics import make_rng
from src.policies import TabularSoftmaxPolicy
from src.rebel import run_rebel
from src.selfplay import (
    collect_preference_batch,
    duality_gap,
    mixture_policy,
    run_spo_rebel,
    winrate_reward,
    winrate_table,
)

logger = get_logger(__name__)


@pytest.mark.unit
class TestWinRate:
    """Test win-rate rewards"""

    def test_uniform_opponent_gives_zero(self, rps_env):
        """Every action breaks even against uniform play"""
        table = winrate_table(rps_env.preferences, np.full((1, 3), 1.0 / 3.0))
        assert_allclose(table, np.zeros((1, 3)), atol=1e-15)

    def test_pure_rock_opponent(self, rps_env):
        """Against rock: tie, win with paper, lose with scissors"""
        table = winrate_table(rps_env.preferences, np.array([[1.0, 0.0, 0.0]]))
        assert_allclose(table, [[0.0, 1.0, -1.0]])

    def test_reward_matches_table(self, rps_env):
        """Single-entry win rate agrees with the table"""
        policy = TabularSoftmaxPolicy.from_probs(np.array([[0.5, 0.3, 0.2]]))
        table = winrate_table(rps_env.preferences, policy.probs_table())
        assert winrate_reward(rps_env.preferences, policy, 0, 2) == pytest.approx(table[0, 2])

    def test_mixture_needs_policies(self):
        """An empty mixture is rejected"""
        with pytest.raises(ValueError):
            mixture_policy([])

    def test_mixture_averages(self):
        """Mixture is the mean probability table"""
        a = TabularSoftmaxPolicy.from_probs(np.array([[0.5, 0.5]]))
        b = TabularSoftmaxPolicy.from_probs(np.array([[0.1, 0.9]]))
        assert_allclose(mixture_policy([a, b]), [[0.3, 0.7]])


@pytest.mark.unit
class TestDualityGap:
    """Test the exact duality gap"""

    def test_uniform_is_equilibrium(self, rps_env):
        """Uniform play has zero gap"""
        report = duality_gap(rps_env.preferences, np.full((1, 3), 1.0 / 3.0))
        assert report.gap == pytest.approx(0.0, abs=1e-15)

    def test_pure_strategy_gap(self, rps_env):
        """Always rock is exploited by paper from both sides"""
        report = duality_gap(rps_env.preferences, np.array([[1.0, 0.0, 0.0]]))
        assert report.gap == pytest.approx(2.0)
        assert report.max_value == pytest.approx(1.0)
        assert report.min_value == pytest.approx(-1.0)
        assert report.best_response.tolist() == [1]
        assert report.worst_response.tolist() == [1]


@pytest.mark.unit
class TestPreferenceBatch:
    """Test regression targets built from preferences"""

    def test_exact_targets(self, rps_env, rng):
        """Target is l(y, y'') - l(y', y'') with one opponent"""
        policy = TabularSoftmaxPolicy.from_probs(np.array([[0.5, 0.3, 0.2]]))
        config = SelfPlayConfig(batch_size=20)
        batch = collect_preference_batch(
            rps_env.preferences, rps_env.rho, policy, policy, config, rng
        )
        payoff = rps_env.preferences.payoff
        opponents = batch.opponents[:, 0]
        expected = payoff[batch.x, batch.y, opponents] - payoff[batch.x, batch.y_prime, opponents]
        assert_allclose(batch.targets, expected)
        dataset = batch.as_dataset()
        assert_allclose(dataset.reward_differences, expected)

    def test_binary_targets_are_averaged_outcomes(self, rps_env, rng):
        """Binary targets with two opponents are multiples of 1/2 in [-1, 1]"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        config = SelfPlayConfig(batch_size=30, feedback=FeedbackKind.BINARY, opponent_samples=2)
        batch = collect_preference_batch(
            rps_env.preferences, rps_env.rho, policy, policy, config, rng
        )
        assert batch.opponents.shape == (30, 2)
        assert set(batch.targets.tolist()) <= {-1.0, -0.5, 0.0, 0.5, 1.0}

    def test_best_of_n_rejected(self):
        """Self-play has no fixed reward to rank draws"""
        with pytest.raises(ValueError, match="best/worst-of-N"):
            SelfPlayConfig(base_dist=SamplerSpec(kind=SamplerKind.BEST_OF_N, n=2))


@pytest.mark.integration
class TestRunSelfPlay:
    """Test self-play REBEL runs"""

    def test_uniform_start_stays_at_equilibrium(self, rps_env, rng):
        """Zero win rates leave the uniform policy where it is"""
        config = SelfPlayConfig(eta=0.5, T=10, batch_size=4)
        result = run_spo_rebel(rps_env.preferences, config, rng)
        assert_allclose(result.final_policy.probs_table(), np.full((1, 3), 1.0 / 3.0))
        assert result.gap.gap == pytest.approx(0.0, abs=1e-12)
        assert all(r.duality_gap == pytest.approx(0.0, abs=1e-12) for r in result.records)

    def test_gap_shrinks_from_biased_start(self, rps_env, rng):
        """The iterate mixture ends with under half of the starting gap"""
        start = TabularSoftmaxPolicy(logits_table=np.array([[1.0, 0.0, 0.0]]))
        config = SelfPlayConfig(eta=0.1, T=200, batch_size=1)
        result = run_spo_rebel(rps_env.preferences, config, rng, initial_policy=start)
        assert len(result.records) == 200
        assert len(result.policies) == 201
        assert result.gap.gap < result.records[0].duality_gap / 2
        assert_allclose(result.mixture, mixture_policy(result.policies[:-1]))

    def test_binary_feedback_with_gauss_newton(self, rps_env, rng):
        """Sampled outcomes drive a Gauss-Newton run without error"""
        config = SelfPlayConfig(
            eta=0.2,
            T=5,
            batch_size=16,
            feedback=FeedbackKind.BINARY,
            opponent_samples=2,
            solver=SolverKind.GAUSS_NEWTON,
        )
        result = run_spo_rebel(rps_env.preferences, config, rng)
        assert [r.iteration for r in result.records] == list(range(5))
        assert all(r.algo == "spo_rebel" for r in result.records)
        assert np.isfinite(result.gap.gap)

    def test_exact_solver_requires_tabular(self, rps_env, rng):
        """A linear start with the exact solver is a configuration error"""
        from src.policies import LinearSoftmaxPolicy

        policy = LinearSoftmaxPolicy(feature_table=np.eye(3)[None, :, :], theta=np.zeros(3))
        with pytest.raises(ValueError, match="tabular"):
            run_spo_rebel(rps_env.preferences, SelfPlayConfig(T=2), rng, initial_policy=policy)

    def test_transitive_preferences_reduce_to_rebel(self, canonical_env, rng):
        """With l = u(y) - u(y') the win rate is r minus a per-context constant"""
        preferences = preference_from_utility(canonical_env.rewards)
        selfplay = run_spo_rebel(
            preferences, SelfPlayConfig(eta=0.5, T=20, batch_size=1), make_rng(3)
        )
        plain = run_rebel(canonical_env, RebelConfig(eta=0.5, T=20, batch_size=1), make_rng(3))
        for a, b in zip(selfplay.policies, plain.policies, strict=True):
            assert_allclose(a.probs_table(), b.probs_table(), atol=1e-12)
