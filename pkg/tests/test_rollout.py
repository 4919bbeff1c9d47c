import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcancel.errors import ConfigError, InputError
from gradcancel.policy import Context, PolicyParams, VocabSpec
from gradcancel.rollout import (
    GroupBatch,
    Trajectory,
    advantages_mean,
    advantages_standardized,
    assign_rewards,
    make_group,
    make_reward_fn,
    sample_group,
    sequence_weights,
    token_ratios,
    with_advantages,
)

VOCAB = VocabSpec(("a", "b", "c", "."), eos=".")
finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=16))
def test_advantages_sum_to_zero(rewards):
    for adv in (advantages_mean(rewards), advantages_standardized(rewards)):
        assert abs(adv.sum()) <= 1e-9 * (1 + np.abs(rewards).max())


def test_advantage_values():
    assert np.allclose(advantages_mean([0.0, 1.0, 1.0]), [-2 / 3, 1 / 3, 1 / 3])
    std = advantages_standardized([0.0, 1.0])
    assert np.allclose(std, [-1.0, 1.0])
    assert np.all(advantages_standardized([3.0, 3.0, 3.0]) == 0.0)


def test_group_validation():
    p = PolicyParams(VOCAB)
    t = make_group(p, "x", [(0,), (1,)]).trajectories
    with pytest.raises(InputError):
        GroupBatch("x", t[:1])
    with pytest.raises(InputError):
        GroupBatch("x", t, advantages=np.array([1.0, 1.0]))
    with pytest.raises(InputError):
        Trajectory("x", (), [])
    with pytest.raises(InputError):
        Trajectory("x", (0,), [0.0], reward=float("nan"))


def test_sampling_is_seeded_and_respects_eos():
    p = PolicyParams(VOCAB, t_max=5)
    a = sample_group(p, "x", 16, seed=4)
    b = sample_group(p, "x", 16, seed=4)
    assert [t.tokens for t in a.trajectories] == [t.tokens for t in b.trajectories]
    eos = VOCAB.eos_id
    for t in a.trajectories:
        assert eos not in t.tokens[:-1]
        assert t.truncated == (t.tokens[-1] != eos)
        assert t.truncated or t.length <= 5
    assert any(t.truncated for t in a.trajectories) or all(t.tokens[-1] == eos for t in a.trajectories)


def test_sampling_frequencies_match_policy():
    p = PolicyParams(VOCAB, base_logits=[2.0, 0.0, -1.0, 0.5], t_max=1)
    g = sample_group(p, "x", 4000, T_max=1, seed=0)
    freq = np.bincount([t.tokens[0] for t in g.trajectories], minlength=4) / 4000
    assert np.allclose(freq, p.probs(Context("x", ())), atol=0.03)


def test_old_policy_is_frozen_copy():
    p = PolicyParams(VOCAB, t_max=3)
    g = sample_group(p, "x", 2, seed=0)
    assert g.old_params is not p


def test_ratios_are_one_on_policy():
    p = PolicyParams(VOCAB, base_logits=[0.3, -0.2, 0.1, 0.0], t_max=4)
    g = sample_group(p, "x", 6, seed=1)
    assert np.all(sequence_weights(p, g) == 1.0)
    assert all(np.all(r == 1.0) for r in token_ratios(p, g))


def test_rewards_and_registry():
    p = PolicyParams(VOCAB)
    g = make_group(p, "x", [(0, 1, 3), (1, 0, 3)])
    fn = make_reward_fn("final_token_equals:b", VOCAB)
    g = assign_rewards(g, fn)
    assert g.rewards.tolist() == [1.0, 0.0]
    with pytest.raises(InputError):
        assign_rewards(g, fn)
    g = with_advantages(g, "mean")
    assert g.advantages.tolist() == [0.5, -0.5]
    with pytest.raises(ConfigError):
        with_advantages(g, "bogus")
    assert make_reward_fn("final_token_equals:a|b", VOCAB)((1, 3)) == 1.0
    assert make_reward_fn("contains_token:c", VOCAB)((0, 2)) == 1.0
    assert make_reward_fn("zero", VOCAB)((0,)) == 0.0
    with pytest.raises(ConfigError):
        make_reward_fn("nope", VOCAB)
    with pytest.raises(ConfigError):
        make_reward_fn("final_token_equals:zz", VOCAB)


def test_nonfinite_reward_rejected():
    g = make_group(PolicyParams(VOCAB), "x", [(0,), (1,)])
    with pytest.raises(InputError):
        assign_rewards(g, lambda toks: float("inf"))


def test_degenerate_group():
    g = make_group(PolicyParams(VOCAB), "x", [(0,), (1,)])
    g = with_advantages(assign_rewards(g, lambda toks: 1.0), "standardized")
    assert g.degenerate
