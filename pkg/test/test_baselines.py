"""
Test suite for the comparison algorithms

Tests cover:
- Exact mirror descent and natural policy gradient
- REINFORCE and leave-one-out baselines
- Clipped PPO surrogate and its clamp
- DPO loss with tied rewards
- Baseline runs and the PPO drift measurement
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from src import baselines, rebel
from src.baselines import (
    GroupBatch,
    collect_groups,
    dpo_grad,
    dpo_loss,
    iterative_dpo_step,
    md_oracle_step,
    npg_step,
    ppo_clip_step,
    ppo_drift,
    ppo_grad,
    ppo_surrogate,
    reinforce_step,
    rloo_advantages,
    rloo_step,
    run_baseline,
)
from src.environments import ContextualBandit
from src.logging_config import get_logger
from src.models import Algorithm, BaselineConfig, RebelConfig, RegressionTriple
from src.numerics import finite_diff_grad, make_rng
from src.policies import LinearSoftmaxPolicy, TabularSoftmaxPolicy, kl_rows, sample_action
from src.rebel import TripleDataset, collect_dataset
from src.sample_data import ppo_drift_instance, random_tabular_policy

logger = get_logger(__name__)


def _centered(logits: np.ndarray) -> np.ndarray:
    return logits - logits.mean(axis=1, keepdims=True)


def _two_context_bandit(rng: np.random.Generator, num_actions: int) -> ContextualBandit:
    rewards = rng.uniform(0.0, 1.0, size=(2, num_actions))
    return ContextualBandit(rho=np.array([0.3, 0.7]), rewards=rewards)


@pytest.mark.unit
class TestMirrorDescentAndNPG:
    """Test the exact oracle and natural policy gradient"""

    def test_md_oracle_is_softmax_of_rewards(self, canonical_env):
        """From uniform, one step with eta = 1 gives softmax(r)"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        stepped = md_oracle_step(policy, canonical_env, 1.0)
        expected = np.exp([1.0, 0.5, 0.0]) / np.sum(np.exp([1.0, 0.5, 0.0]))
        assert_allclose(stepped.probs_table()[0], expected)

    def test_md_oracle_requires_tabular(self, canonical_env, rng):
        """Linear policies are rejected"""
        policy = LinearSoftmaxPolicy(feature_table=rng.normal(size=(1, 3, 2)), theta=np.zeros(2))
        with pytest.raises(TypeError):
            md_oracle_step(policy, canonical_env.rewards, 1.0)

    def test_md_oracle_survives_repeated_large_steps(self, canonical_env):
        """Hundreds of eta = 2 steps push the losing actions toward zero without failing"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        for _ in range(400):
            policy = md_oracle_step(policy, canonical_env, 2.0)
        probs = policy.probs_table()
        assert np.all(np.isfinite(policy.log_prob_table()))
        assert np.all(probs >= 0.0)
        assert probs.sum() == pytest.approx(1.0)
        assert probs[0, 0] == pytest.approx(1.0)

    def test_md_oracle_steps_compose(self, rng):
        """Two steps of size eta equal one step of size 2 eta"""
        env = _two_context_bandit(rng, 4)
        policy = random_tabular_policy(rng, 2, 4)
        twice = md_oracle_step(md_oracle_step(policy, env, 0.6), env, 0.6)
        once = md_oracle_step(policy, env, 1.2)
        assert np.max(kl_rows(twice.probs_table(), once.probs_table())) <= 1e-12

    def test_population_npg_equals_md_on_tabular(self, rng):
        """Exact NPG on a tabular policy is mirror descent up to per-context shifts"""
        env = _two_context_bandit(rng, 4)
        policy = random_tabular_policy(rng, 2, 4)
        npg = npg_step(policy, env.rewards, env.rho, 0.7)
        md = md_oracle_step(policy, env.rewards, 0.7)
        assert_allclose(_centered(npg.logits()), _centered(md.logits()), atol=1e-8)

    def test_sampled_npg_moves_toward_best_action(self, canonical_env, rng):
        """A sampled NPG step raises the probability of the best action"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        batch = collect_groups(canonical_env, policy, 64, 1, rng)
        stepped = npg_step(policy, canonical_env.rewards, canonical_env.rho, 0.5, batch)
        assert stepped.probs_table()[0, 0] > 1.0 / 3.0


@pytest.mark.unit
class TestScoreFunctionMethods:
    """Test REINFORCE and RLOO"""

    def test_reinforce_single_response(self):
        """One response with reward 1 moves the logits by lr (e_y - pi)"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        batch = GroupBatch(x=[0], y=[[0]], r=[[1.0]])
        stepped = reinforce_step(policy, batch, 1.0)
        assert_allclose(stepped.params, [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0])

    def test_rloo_requires_two_responses(self):
        """k = 1 has no leave-one-out baseline"""
        batch = GroupBatch(x=[0, 0], y=[[0], [1]], r=[[1.0], [0.0]])
        with pytest.raises(ValueError, match="k = 2"):
            rloo_advantages(batch)

    def test_rloo_pairwise_difference(self):
        """With k = 2 each advantage is the difference to the other response"""
        batch = GroupBatch(x=[0], y=[[0, 2]], r=[[1.0, 0.25]])
        assert_allclose(rloo_advantages(batch), [[0.75, -0.75]])

    def test_rloo_constant_rewards_do_not_move(self):
        """Equal rewards inside every group give a zero update"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        batch = GroupBatch(x=[0, 0], y=[[0, 1, 2], [2, 2, 1]], r=np.full((2, 3), 0.3))
        assert_allclose(rloo_step(policy, batch, 1.0).params, policy.params)

    def test_group_batch_shape_mismatch(self):
        """y and r must agree"""
        with pytest.raises(ValueError, match="shapes"):
            GroupBatch(x=[0], y=[[0, 1]], r=[[1.0]])


@pytest.mark.unit
class TestPPOClip:
    """Test the clipped surrogate"""

    batch = GroupBatch(x=[0], y=[[0, 2]], r=[[1.0, 0.0]])

    def test_gradient_matches_finite_differences_inside_trust_region(self, rng):
        """Near theta_t the surrogate is smooth and the analytic gradient is exact"""
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(1, 3)))
        theta = policy.params + np.array([0.02, -0.01, 0.0])

        def surrogate(th):
            return ppo_surrogate(th, policy, self.batch, 0.2)

        numeric = finite_diff_grad(surrogate, theta)
        assert_allclose(ppo_grad(theta, policy, self.batch, 0.2), numeric, atol=1e-8)

    def test_clamp_stops_the_gradient(self):
        """Ratios past the clip in the advantage direction contribute nothing"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        theta = np.array([2.0, 0.0, -2.0])
        assert_allclose(ppo_grad(theta, policy, self.batch, 0.2), np.zeros(3))
        # min(2.6 * 0.5, 1.2 * 0.5) and min(0.05 * -0.5, 0.8 * -0.5)
        assert ppo_surrogate(theta, policy, self.batch, 0.2) == pytest.approx(0.1)

    def test_step_improves_surrogate(self):
        """A few small ascent steps raise the surrogate above zero"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        stepped = ppo_clip_step(policy, self.batch, 0.1, 0.2, 4)
        assert ppo_surrogate(stepped.params, policy, self.batch, 0.2) > 0.0


@pytest.mark.unit
class TestDPO:
    """Test the DPO loss"""

    def test_loss_at_reference_is_log_two(self, canonical_env, rng):
        """At theta = theta_t every margin is zero"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        dataset = collect_dataset(canonical_env, policy, RebelConfig(batch_size=10), rng)
        assert dpo_loss(policy.params, policy, dataset, 1.0) == pytest.approx(math.log(2.0))

    def test_tied_rewards_have_zero_gradient(self, rng):
        """sgn(0) = 0 removes ties from the gradient"""
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(1, 3)))
        dataset = TripleDataset.from_triples([RegressionTriple(0, 0, 1, 0.5, 0.5)])
        theta = policy.params + rng.normal(size=3)
        assert_allclose(dpo_grad(theta, policy, dataset, 1.0), np.zeros(3))
        assert dpo_loss(theta, policy, dataset, 1.0) == pytest.approx(math.log(2.0))

    def test_gradient_matches_finite_differences(self, canonical_env, rng):
        """Analytic DPO gradient equals central differences"""
        policy = TabularSoftmaxPolicy(logits_table=rng.normal(size=(1, 3)))
        dataset = collect_dataset(canonical_env, policy, RebelConfig(batch_size=12), rng)
        theta = policy.params + rng.normal(scale=0.3, size=3)
        numeric = finite_diff_grad(lambda th: dpo_loss(th, policy, dataset, 0.5), theta)
        assert_allclose(dpo_grad(theta, policy, dataset, 0.5), numeric, atol=1e-8)

    def test_iterative_step_prefers_winner(self):
        """Descent on one preference pair lowers the loss and favours the winner"""
        policy = TabularSoftmaxPolicy.uniform(1, 3)
        dataset = TripleDataset.from_triples([RegressionTriple(0, 0, 2, 1.0, 0.0)])
        stepped, loss = iterative_dpo_step(policy, dataset, beta=1.0, lr=0.1, steps=50)
        assert loss < math.log(2.0)
        probs = stepped.probs_table()[0]
        assert probs[0] > probs[2]


@pytest.mark.integration
class TestRunBaseline:
    """Test full baseline runs"""

    @pytest.mark.parametrize(
        "algo",
        [
            Algorithm.MD_ORACLE,
            Algorithm.NPG,
            Algorithm.REINFORCE,
            Algorithm.RLOO,
            Algorithm.PPO_CLIP,
            Algorithm.ITERATIVE_DPO,
        ],
    )
    def test_record_stream(self, canonical_env, rng, algo):
        """T records with consecutive iterations and T + 1 policies"""
        config = BaselineConfig(algo=algo, eta=0.5, T=10, batch_size=8, dpo_steps=5)
        result = run_baseline(canonical_env, config, rng)
        assert result.algo == algo.value
        assert [r.iteration for r in result.records] == list(range(10))
        assert len(result.policies) == 11
        assert result.records[0].kl_ref == pytest.approx(0.0, abs=1e-15)
        assert all(r.kl_step >= 0.0 for r in result.records)

    def test_md_oracle_improves(self, canonical_env, rng):
        """Exact mirror descent raises expected reward every step"""
        config = BaselineConfig(algo=Algorithm.MD_ORACLE, eta=0.5, T=10, batch_size=1)
        result = run_baseline(canonical_env, config, rng)
        rewards = [r.expected_reward for r in result.records]
        assert all(b >= a for a, b in zip(rewards, rewards[1:]))
        assert rewards[0] == pytest.approx(0.5)

    def test_population_npg_tracks_md(self, rng):
        """Exact NPG and the oracle produce the same tabular iterates"""
        env = _two_context_bandit(rng, 3)
        npg = run_baseline(
            env, BaselineConfig(algo=Algorithm.NPG, eta=0.5, T=5, population=True), rng
        )
        md = run_baseline(env, BaselineConfig(algo=Algorithm.MD_ORACLE, eta=0.5, T=5), rng)
        assert_allclose(
            npg.final_policy.probs_table(), md.final_policy.probs_table(), atol=1e-8
        )

    @pytest.mark.parametrize("eta", [0.3, 0.7, 1.0, 2.0])
    def test_md_oracle_long_runs_keep_kl_non_negative(self, canonical_env, rng, eta):
        """T = 100 oracle steps record non-negative KL values throughout"""
        config = BaselineConfig(algo=Algorithm.MD_ORACLE, eta=eta, T=100, batch_size=1)
        result = run_baseline(canonical_env, config, rng)
        assert len(result.records) == 100
        assert all(r.kl_step >= 0.0 and r.kl_ref >= 0.0 for r in result.records)

    @pytest.mark.parametrize(
        "algo",
        [
            Algorithm.REBEL,
            Algorithm.NPG,
            Algorithm.REINFORCE,
            Algorithm.RLOO,
            Algorithm.PPO_CLIP,
            Algorithm.ITERATIVE_DPO,
        ],
    )
    def test_sampled_actions_match_rebel_budget(self, canonical_env, monkeypatch, algo):
        """Every sampled algorithm draws 2 x batch_size actions per iteration"""
        draws = []

        def counting_sample_action(policy, x, rng):
            draws.append(x)
            return sample_action(policy, x, rng)

        monkeypatch.setattr(baselines, "sample_action", counting_sample_action)
        monkeypatch.setattr(rebel, "sample_action", counting_sample_action)
        if algo is Algorithm.REBEL:
            config = RebelConfig(eta=0.5, T=3, batch_size=8)
            rebel.run_rebel(canonical_env, config, make_rng(0))
        else:
            config = BaselineConfig(algo=algo, eta=0.5, T=3, batch_size=8, k=4, dpo_steps=2)
            run_baseline(canonical_env, config, make_rng(0))
        assert config.responses_per_iteration == 16
        assert len(draws) == 3 * 16

    def test_rebel_is_not_a_baseline(self):
        """Config rejects the REBEL algorithms"""
        with pytest.raises(ValueError, match="not a baseline"):
            BaselineConfig(algo=Algorithm.REBEL)

    def test_grouped_budget_must_split_into_groups(self):
        """RLOO needs 2 x batch_size to be a positive multiple of k"""
        with pytest.raises(ValueError, match="multiple of k"):
            BaselineConfig(algo=Algorithm.RLOO, batch_size=1, k=4)
        with pytest.raises(ValueError, match="multiple of k"):
            BaselineConfig(algo=Algorithm.PPO_CLIP, batch_size=3, k=4)
        assert BaselineConfig(algo=Algorithm.RLOO, batch_size=2, k=4).responses_per_iteration == 4


@pytest.mark.unit
class TestPPODrift:
    """Test the shared-parameter drift measurement"""

    def test_report_fields(self, rng):
        """KL values are finite and the MD step is sized from PPO's gap change"""
        env, policy = ppo_drift_instance()
        batch = collect_groups(env, policy, 32, 2, rng)
        report = ppo_drift(env, policy, batch, lr=0.5, epsilon=0.2, inner_steps=200)
        assert set(report) == {
            "ppo_kl",
            "ppo_max_kl",
            "md_kl",
            "md_max_kl",
            "md_eta",
            "mean_gap_change",
        }
        assert all(math.isfinite(v) and v >= 0.0 for v in report.values())
        assert report["mean_gap_change"] > 0.0
        assert report["md_eta"] == pytest.approx(report["mean_gap_change"] / 0.5)

    def test_shared_feature_drift_exceeds_matched_md(self, rng):
        """The unclipped context moves 20 times as far, so PPO's KL beats the matched MD step"""
        env, policy = ppo_drift_instance()
        batch = collect_groups(env, policy, 32, 2, rng)
        report = ppo_drift(env, policy, batch, lr=0.5, epsilon=0.2, inner_steps=200)
        assert report["ppo_kl"] > report["md_kl"]
