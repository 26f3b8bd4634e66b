import math

import numpy as np
import pytest

from utils.grpo_objective import (
    GrpoConfig,
    ObjectiveError,
    clipped_term,
    grpo_gradient,
    grpo_objective,
    kl_token,
    token_ratio,
)
from utils.policy_model import PolicyParams, Rollout, init_params, sample_group, sequence_logprobs, snapshot
from utils.reward_rules import GroupRewards, normalize_advantages

PROMPT = (0, 4, 9)


def _noisy(params, scale, seed):
    rng = np.random.default_rng(seed)
    return PolicyParams(params.config, params.theta + rng.normal(0.0, scale, size=params.theta.size))


def _group(params, size=4, seed=0):
    return sample_group(params, PROMPT, size, params.config, master_seed=seed, prompt_id="q")


def _rollout_with_ratio(params, output, ratio):
    """Rollout whose recorded log-probs make token_ratio equal ratio under params"""
    logp = sequence_logprobs(params, PROMPT, output)
    return Rollout("q", PROMPT, tuple(output), tuple(logp - math.log(ratio)), False)


def test_token_ratio_examples():
    assert token_ratio(-1.3, -1.3) == 1.0
    assert token_ratio(-2.0 + math.log(2), -2.0) == pytest.approx(2.0)
    assert token_ratio(-2.0 - math.log(4), -2.0) == pytest.approx(0.25)


def test_clipped_term_examples():
    assert clipped_term(1.5, 1.0, 0.2) == (pytest.approx(1.2), True)
    assert clipped_term(1.0, -0.7, 0.2) == (pytest.approx(-0.7), False)
    assert clipped_term(0.5, -1.0, 0.2) == (pytest.approx(-0.8), True)
    assert clipped_term(0.5, 1.0, 0.2) == (pytest.approx(0.5), False)


def test_kl_token_examples():
    assert kl_token(-0.7, -0.7) == 0.0
    assert kl_token(-1.0, -1.0 + math.log(2)) == pytest.approx(2 - math.log(2) - 1, abs=1e-6)
    assert kl_token(-1.0, -1.0 + math.log(0.5)) == pytest.approx(0.5 - math.log(0.5) - 1, abs=1e-6)


def test_kl_token_is_nonnegative():
    rng = np.random.default_rng(1)
    new = rng.uniform(-12, 0, size=100_000)
    ref = rng.uniform(-12, 0, size=100_000)
    assert min(kl_token(a, b) for a, b in zip(new, ref)) >= -1e-12


def test_coincident_policies_reduce_to_mean_advantage(small_policy):
    params = init_params(small_policy)
    rollouts = _group(params, size=6)
    rewards = GroupRewards(rewards=[0, 10, 20, 50, 80, 100], gated=[False] * 6)
    advantages = normalize_advantages(rewards, 1e-6).values
    terms = grpo_objective(rollouts, advantages, params, snapshot(params), snapshot(params), GrpoConfig())
    assert abs(terms.surrogate - advantages.mean()) < 1e-12
    assert terms.kl == 0.0
    assert all(np.all(r == 1.0) for r in terms.ratios if r.size)


def test_single_clipped_token(small_policy):
    params = init_params(small_policy)
    rollout = _rollout_with_ratio(params, [7], 1.5)
    terms = grpo_objective([rollout], [1.0], params, None, snapshot(params), GrpoConfig(kl_beta=0.0))
    assert terms.objective == pytest.approx(1.2)
    assert terms.clipped[0].tolist() == [True]


def test_kl_penalty_grows_with_beta(small_policy):
    params = init_params(small_policy)
    reference = snapshot(_noisy(params, 0.3, seed=2))
    rollouts = _group(params)
    values = [
        grpo_objective(rollouts, [0.5, -0.5, 1.0, -1.0], params, None, reference, GrpoConfig(kl_beta=beta)).objective
        for beta in (0.0, 0.1, 1.0, 10.0)
    ]
    assert values == sorted(values, reverse=True)
    assert values[0] > values[-1]


@pytest.mark.parametrize("advantage, ratio", [(1.0, 2.0), (-1.0, 0.5)])
def test_clip_flatness(small_policy, advantage, ratio):
    params = init_params(small_policy)
    rollout = _rollout_with_ratio(params, [7, 8], ratio)
    cfg = GrpoConfig(kl_beta=0.0)
    base = grpo_objective([rollout], [advantage], params, None, params, cfg)
    moved = grpo_objective([rollout], [advantage], _noisy(params, 1e-3, seed=4), None, params, cfg)
    assert base.clipped[0].all() and moved.clipped[0].all()
    assert np.all(np.abs(moved.contributions[0] - base.contributions[0]) < 1e-12)


def test_all_clipped_without_kl_has_zero_gradient(small_policy):
    params = init_params(small_policy)
    rollouts = [_rollout_with_ratio(params, [7, 8, 1], 2.0), _rollout_with_ratio(params, [5, 1], 3.0)]
    gradient = grpo_gradient(rollouts, [1.0, 0.5], params, None, params, GrpoConfig(kl_beta=0.0))
    assert np.count_nonzero(gradient) == 0


def test_kl_gradient_vanishes_at_reference(small_policy):
    params = init_params(small_policy)
    rollouts = _group(params)
    gradient = grpo_gradient(rollouts, [0.0] * 4, params, None, snapshot(params), GrpoConfig(kl_beta=0.5))
    assert np.max(np.abs(gradient)) < 1e-10


def test_gradient_matches_finite_differences(small_policy):
    rng = np.random.default_rng(3)
    h = 1e-5
    worst = 0.0
    for instance in range(20):
        params = init_params(small_policy.model_copy(update={"seed": 100 + instance}))
        old = snapshot(_noisy(params, 0.05, seed=instance))
        reference = snapshot(_noisy(params, 0.1, seed=1000 + instance))
        rollouts = sample_group(old, PROMPT, 3, small_policy, master_seed=instance, prompt_id="fd")
        advantages = rng.normal(size=3)
        cfg = GrpoConfig(kl_beta=0.1, clip_epsilon=0.2)
        analytic = grpo_gradient(rollouts, advantages, params, old, reference, cfg)

        for index in rng.choice(params.theta.size, size=50, replace=False):
            up = params.theta.copy()
            up[index] += h
            down = params.theta.copy()
            down[index] -= h
            numeric = (
                grpo_objective(rollouts, advantages, PolicyParams(params.config, up), old, reference, cfg).objective
                - grpo_objective(rollouts, advantages, PolicyParams(params.config, down), old, reference, cfg).objective
            ) / (2 * h)
            error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), 1e-3)
            worst = max(worst, error)
    assert worst < 1e-4


def test_group_size_mismatch(small_policy):
    params = init_params(small_policy)
    with pytest.raises(ObjectiveError):
        grpo_objective(_group(params), [1.0, 2.0], params, None, params, GrpoConfig())


def test_empty_rollout_contributes_nothing(small_policy):
    params = init_params(small_policy)
    empty = Rollout("q", PROMPT, (), (), False)
    token = _rollout_with_ratio(params, [7], 1.0)
    terms = grpo_objective([empty, token], [5.0, 1.0], params, None, params, GrpoConfig(kl_beta=0.0))
    assert terms.objective == pytest.approx(0.5)


def test_config_bounds():
    with pytest.raises(ValueError):
        GrpoConfig(clip_epsilon=1.0)
    with pytest.raises(ValueError):
        GrpoConfig(kl_beta=-0.1)
    with pytest.raises(ValueError):
        GrpoConfig(group_size=0)
