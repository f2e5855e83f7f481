import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointsampler import autodiff as ad
from jointsampler.envs import decode_joint_action, encode_joint_action, make_game, step
from jointsampler.errors import InvalidArgumentError
from jointsampler.policy import (
    AgentPolicy,
    BehaviorPolicy,
    JointTargetPolicy,
    agent_dist,
    behavior_dist,
    delta_spec,
    init_behavior,
    joint_log_prob,
    random_joint_policy,
    sample_joint,
)
from oracles import tv


def linear_agent(logits):
    """Actor with no hidden layers whose bias is ``logits`` (the matrix-game observation is 1.0)."""
    logits = np.asarray(logits, dtype=float)
    spec = ad.MlpSpec(1, len(logits), ())
    return AgentPolicy(spec, ad.flatten([(np.zeros((1, len(logits))), logits)]))


def test_agent_dist_examples():
    assert np.allclose(agent_dist(linear_agent([math.log(3), 0.0]), np.ones(1)), [0.75, 0.25])
    spec = ad.MlpSpec(3, 4, (8,), zero_final_layer=True)
    uniform = AgentPolicy(spec, ad.init_params(spec, np.random.default_rng(0)))
    assert np.allclose(agent_dist(uniform, np.ones(3)), 0.25)


def test_agent_dist_reproducible_and_checked():
    g = make_game("gridworld")
    a = random_joint_policy(g, np.random.default_rng(5)).agents[0]
    b = random_joint_policy(g, np.random.default_rng(5)).agents[0]
    obs = g.observe(g.reset(np.random.default_rng(0)))[0]
    assert np.array_equal(agent_dist(a, obs), agent_dist(b, obs))
    with pytest.raises(InvalidArgumentError):
        agent_dist(a, np.ones(3))


def test_joint_log_prob_examples():
    g = make_game("g1")
    uni = JointTargetPolicy([linear_agent([0, 0]), linear_agent([0, 0])], g)
    assert joint_log_prob(uni, 0, (0, 1)) == pytest.approx(math.log(0.25))
    det = JointTargetPolicy([linear_agent([0, -800]), linear_agent([-800, 0])], g)
    assert joint_log_prob(det, 0, (0, 1)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("gid", ["g5", "climbing", "penalty"])
def test_factorization_exhaustive(gid):
    g = make_game(gid)
    joint = random_joint_policy(g, np.random.default_rng(1), final_gain=1.0)
    p1, p2 = (agent_dist(a, np.ones(1)) for a in joint.agents)
    probs = joint.joint_probs(0)
    for a1 in range(g.action_counts[0]):
        for a2 in range(g.action_counts[1]):
            idx = encode_joint_action((a1, a2), g.action_counts)
            assert probs[idx] == pytest.approx(p1[a1] * p2[a2], rel=1e-12)
            assert joint_log_prob(joint, 0, idx) == pytest.approx(math.log(p1[a1] * p2[a2]), rel=1e-12)


def test_joint_codec_bijection_3x3():
    counts = (3, 3)
    seen = set()
    for idx in range(9):
        acts = decode_joint_action(idx, counts)
        assert encode_joint_action(acts, counts) == idx
        seen.add(acts)
    assert len(seen) == 9


# -- behavior policies -------------------------------------------------------------------


def test_ma_props_explicit_adjustment():
    g = make_game("g1")
    joint = JointTargetPolicy([linear_agent([0, 0]), linear_agent([0, 0])], g)
    spec = delta_spec(g, hidden=())
    params = ad.flatten([(np.zeros((2, 4)), np.array([math.log(2), 0, 0, 0]))])
    b = BehaviorPolicy("ma_props", joint, delta=spec, delta_params=params)
    assert np.allclose(behavior_dist(b, 0), [0.4, 0.2, 0.2, 0.2])


def test_props_is_product_of_own_actors():
    g = make_game("g1")
    joint = JointTargetPolicy([linear_agent([0, 0]), linear_agent([0, 0])], g)
    phi = [linear_agent([math.log(3), 0]).params, linear_agent([0, 0]).params]
    b = BehaviorPolicy("props", joint, props_params=phi)
    assert np.allclose(behavior_dist(b, 0), [0.375, 0.375, 0.125, 0.125])


def _grid_states(n, seed):
    g = make_game("gridworld")
    rng = np.random.default_rng(seed)
    out, s, t = [], g.reset(rng), 0
    while len(out) < n:
        out.append(s)
        r = step(g, s, int(rng.integers(g.n_joint_actions)), rng, t)
        s, t = (g.reset(rng), 0) if r.done else (r.next_state, t + 1)
    # Also include arbitrary (possibly unreachable) encodings.
    out += list(rng.integers(0, g.n_cells ** 2, n))
    return g, out


@pytest.mark.parametrize("mode", ["on_policy", "props", "ma_props"])
def test_initialization_identity(mode):
    g, states = _grid_states(100, 0)
    joint = random_joint_policy(g, np.random.default_rng(2), final_gain=1.0)
    b = init_behavior(mode, joint, np.random.default_rng(3))
    for s in states:
        p, q = joint.joint_probs(s), behavior_dist(b, s)
        assert np.abs(p - q).max() < 1e-6
        assert float(p @ (np.log(p) - np.log(q))) < 1e-10


def test_ma_props_delta_params_final_layer_zeroed():
    g = make_game("g1")
    joint = random_joint_policy(g, np.random.default_rng(0))
    spec = delta_spec(g)
    dirty = np.random.default_rng(1).standard_normal(ad.param_count(spec))
    b = init_behavior("ma_props", joint, delta_params=dirty)
    assert np.allclose(behavior_dist(b, 0), joint.joint_probs(0), atol=1e-15)
    assert np.array_equal(b.delta_params[:100], dirty[:100])


def test_unknown_mode():
    joint = random_joint_policy(make_game("g1"), np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        init_behavior("greedy", joint)


def test_sample_joint_deterministic_behavior():
    g = make_game("climbing")
    joint = JointTargetPolicy([linear_agent([0, 900, 0]), linear_agent([0, 0, 900])], g)
    b = init_behavior("on_policy", joint)
    rng = np.random.default_rng(0)
    for _ in range(20):
        idx, acts, logps = sample_joint(b, 0, rng)
        assert idx == encode_joint_action((1, 2), g.action_counts) and acts == (1, 2)
        assert logps == pytest.approx((0.0, 0.0))


def test_sample_joint_returns_target_logps():
    g = make_game("g1")
    joint = JointTargetPolicy([linear_agent([0, 0]), linear_agent([0, 0])], g)
    spec = delta_spec(g, hidden=())
    params = ad.flatten([(np.zeros((2, 4)), np.array([0, 0, 0, 800.0]))])
    b = BehaviorPolicy("ma_props", joint, delta=spec, delta_params=params)
    idx, acts, logps = sample_joint(b, 0, np.random.default_rng(0))
    assert acts == (1, 1) and logps == pytest.approx((math.log(0.5), math.log(0.5)))


def test_on_policy_sampling_frequencies():
    g = make_game("climbing")
    joint = random_joint_policy(g, np.random.default_rng(4), final_gain=1.0)
    b = init_behavior("on_policy", joint)
    rng = np.random.default_rng(5)
    n = 100_000
    counts = np.bincount([sample_joint(b, 0, rng)[0] for _ in range(n)], minlength=9)
    target = joint.joint_probs(0)
    assert tv(dict(enumerate(counts / n)), dict(enumerate(target))) < 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_joint_probs_normalized(seed):
    g = make_game("lbf")
    joint = random_joint_policy(g, np.random.default_rng(seed), final_gain=1.0)
    s = int(np.random.default_rng(seed).integers(0, g.n_cells ** 2))
    p = joint.joint_probs(s)
    assert p.shape == (25,) and abs(p.sum() - 1) < 1e-12 and p.min() > 0
