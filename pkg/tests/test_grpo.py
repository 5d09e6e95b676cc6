import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avar.attn_core import TokenSegmentation
from avar.env import ANS, GroundedLookupEnv
from avar.errors import GroupTooSmall, NonFiniteRatio
from avar.gradcheck import check
from avar.grpo import (
    RewardWeights,
    RLConfig,
    RolloutGroup,
    Trajectory,
    clipped_surrogate,
    group_advantages,
    grpo_loss,
    rollout,
    rollout_batch,
    total_reward,
    train_rl,
    visual_reward,
)
from avar.model import forward, init_params, log_softmax
from avar.train import model_config_for
from oracles import random_attention, visual_reward_loop

ENV = GroundedLookupEnv(0)
SEG6 = TokenSegmentation(8, (0, 2), ((2, 6),), ((6, 7),), (7, 8))


def params(seed=0):
    return init_params(model_config_for(ENV, seed=seed))


def test_visual_reward_gated_on_correctness():
    W = random_attention(np.random.default_rng(0), 2, 2, 8)
    assert visual_reward(W, SEG6, correct=False) == 0.0


def test_visual_reward_uniform():
    T = 8
    W = np.full((2, 3, T, T), 1.0 / T)
    expect = (4 / T) / (2 / T + 1e-6)
    assert visual_reward(W, SEG6, correct=True) == pytest.approx(expect, abs=1e-12)
    assert abs(expect - 2.0) < 1e-4


def test_visual_reward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    seg = TokenSegmentation(12, (0, 3), ((3, 7),), ((7, 9),), (9, 12))
    W = random_attention(rng, 2, 3, 12)
    assert abs(visual_reward(W, seg, True) - visual_reward_loop(W, seg, True)) <= 1e-10


def test_total_reward_fixtures():
    assert total_reward(1, 2.0, 1).total == pytest.approx(1.7, abs=1e-12)
    assert total_reward(0, 5.0, 1).total == pytest.approx(0.1, abs=1e-12)
    assert total_reward(0, 5.0, 1).visual == 0.0
    assert total_reward(1, 0.0, 0).total == 1.0


def test_advantage_fixtures():
    np.testing.assert_allclose(group_advantages([1, 0, 0, 1]), [1, -1, -1, 1], atol=1e-15)
    assert not group_advantages([0.3] * 8).any()
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=16))
def test_advantages_centred(rewards):
    a = group_advantages(rewards)
    if np.std(rewards) >= 1e-8:
        assert abs(a.mean()) <= 1e-10
        assert a.std() == pytest.approx(1.0, abs=1e-9)
    else:
        assert not a.any()


def test_clip_fixtures_exact():
    assert clipped_surrogate(1.5, 1.0, 0.2) == 1.2
    assert clipped_surrogate(0.5, -1.0, 0.2) == -0.8


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(-5, 5), st.floats(0.05, 0.5))
def test_clip_matches_unclipped_inside_band(ratio, adv, eps):
    s = float(clipped_surrogate(ratio, adv, eps))
    if 1 - eps <= ratio <= 1 + eps:
        assert s == pytest.approx(ratio * adv, abs=1e-15)
    else:
        bound = min(ratio * adv, min(max(ratio, 1 - eps), 1 + eps) * adv)
        assert s == pytest.approx(bound, abs=1e-15)


def _single_token_group(p, ratio, adv):
    ep = ENV.episode(0)
    seg = ENV.segmentation(response_len=1)
    tokens = np.concatenate([ep.prompt, [ANS]])[None]
    logp = log_softmax(forward(p, tokens, seg).logits[0, 9])
    t = Trajectory(ep, seg, np.array([ANS]), np.array([logp[ANS] - math.log(ratio)]),
                   np.array([logp[ANS]]), logp[None].copy(), 0.0, total_reward(0, 0.0, 0))
    return RolloutGroup([t], np.array([adv]))


def test_clip_fixtures_through_grpo_loss():
    p = params()
    cfg = RLConfig(clip_range=0.2, kl_coeff=0.0)
    loss, _ = grpo_loss(_single_token_group(p, 1.5, 1.0), cfg, p)
    assert -loss == pytest.approx(1.2, abs=1e-12)
    loss, _ = grpo_loss(_single_token_group(p, 0.5, -1.0), cfg, p)
    assert -loss == pytest.approx(-0.8, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_on_policy_loss_is_zero(seed):
    p = params(seed)
    rng = np.random.default_rng(seed)
    groups = rollout_batch(p, ENV, ENV.batch(0, 3), 4, seed)
    for g in groups:
        g.advantages = group_advantages(rng.standard_normal(len(g.trajectories)))
    loss, diag = grpo_loss(groups, RLConfig(kl_coeff=0.05), p)
    assert abs(loss) <= 1e-10
    assert abs(diag["kl"]) <= 1e-12
    assert diag["mean_ratio"] == pytest.approx(1.0, abs=1e-12)


def test_ratio_guard():
    p = params()
    g = _single_token_group(p, math.exp(40), 1.0)
    with pytest.raises(NonFiniteRatio):
        grpo_loss(g, RLConfig(), p)


def test_grpo_gradient_matches_finite_differences():
    assert check(0, "grpo") <= 1e-4


def test_rollout_deterministic_and_shaped():
    p = params()
    a = rollout(p, ENV, 4, seed=3)
    b = rollout(p, ENV, 4, seed=3)
    assert len(a.trajectories) == 4
    for x, y in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(x.response, y.response)
        np.testing.assert_array_equal(x.logp_old, y.logp_old)
        assert x.reward == y.reward
        assert x.reward.total == pytest.approx(
            x.reward.accuracy + 0.3 * x.reward.visual + 0.1 * x.reward.format, abs=1e-12)
    np.testing.assert_array_equal(a.advantages, b.advantages)
    with pytest.raises(GroupTooSmall):
        rollout(p, ENV, 1, seed=0)


def test_env_oracle_and_distractor_agents():
    for ep in ENV.batch(0, 200):
        assert ENV.accuracy(ep, ENV.oracle_response(ep)) == 1
        assert ENV.accuracy(ep, ENV.distractor_response(ep)) == 0
        assert ENV.format_ok(ENV.oracle_response(ep)) == 1


def test_distractor_trajectory_scores_zero():
    ep = ENV.episode(5)
    resp = ENV.distractor_response(ep)
    W = random_attention(np.random.default_rng(0), 2, 4, 13)
    acc = ENV.accuracy(ep, resp)
    r = total_reward(acc, visual_reward(W, ENV.segmentation(), bool(acc)), ENV.format_ok(resp))
    assert (r.accuracy, r.visual) == (0, 0.0)


def test_answer_marginal_uniform():
    counts = np.bincount([ENV.episode(i).answer for i in range(1000)], minlength=ENV.n_values)
    expected = 1000 / ENV.n_values
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # chi-square critical value, 5 degrees of freedom, p = 0.001
    assert chi2 < 20.515


def test_train_rl_zero_steps():
    p = params()
    out, history = train_rl(RLConfig(steps=0), p, ENV)
    assert history == []
    assert out.fingerprint() == p.fingerprint()


class _FlatEnv(GroundedLookupEnv):
    """Every rollout scores zero, so every group is flat."""

    def accuracy(self, ep, response):
        return 0

    def format_ok(self, response):
        return 0


def test_train_rl_degenerate_groups_leave_params_unchanged():
    p = params()
    cfg = RLConfig(steps=3, kl_coeff=0.0, prompts_per_step=2, group_size=4,
                   weights=RewardWeights(lambda_v=0.0))
    out, history = train_rl(cfg, p, _FlatEnv(0))
    assert len(history) == 3
    assert out.fingerprint() == p.fingerprint()
    assert all(h["mean_reward"] == 0.0 for h in history)


def test_train_rl_history_schema():
    cfg = RLConfig(steps=2, prompts_per_step=2, group_size=4)
    seen = []
    _, history = train_rl(cfg, params(), ENV, on_step=seen.append)
    assert seen == history
    assert set(history[0]) == {"step", "mean_reward", "mean_accuracy", "mean_visual_reward", "mean_vas", "kl"}
    assert [h["step"] for h in history] == [0, 1]
