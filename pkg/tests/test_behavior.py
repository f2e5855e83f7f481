import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointsampler import autodiff as ad
from jointsampler import behavior as bh
from jointsampler.behavior import (
    BehaviorUpdateConfig,
    CountTable,
    most_under_sampled_joint,
    most_under_sampled_per_agent,
    nll_grad,
    props_loss,
    props_loss_grad,
    run_per_agent_oracle,
    sampling_kl_curve,
    update_behavior,
)
from jointsampler.buffer import TransitionBuffer
from jointsampler.envs import encode_joint_action, make_game, step, true_visitation
from jointsampler.errors import DegenerateRatioError, InvalidArgumentError
from jointsampler.policy import (
    AgentPolicy,
    BehaviorPolicy,
    JointTargetPolicy,
    behavior_dist,
    delta_spec,
    init_behavior,
    init_delta_params,
    random_joint_policy,
    sample_joint,
)
from oracles import tv

AA, AB, BA, BB = range(4)


def linear_agent(logits):
    logits = np.asarray(logits, dtype=float)
    return AgentPolicy(ad.MlpSpec(1, len(logits), ()), ad.flatten([(np.zeros((1, len(logits))), logits)]))


def uniform_2x2():
    return JointTargetPolicy([linear_agent([0, 0]), linear_agent([0, 0])], make_game("g1"))


def shifted(joint, shift):
    """MA-PROPS behavior whose adjustment is a constant logit vector."""
    spec = delta_spec(joint.game, hidden=())
    return BehaviorPolicy("ma_props", joint, delta=spec,
                          delta_params=ad.flatten([(np.zeros((2, 4)), np.asarray(shift, dtype=float))]))


def fill(buffer, joint, game, actions):
    for a in actions:
        acts = tuple(int(x) for x in np.unravel_index(a, game.action_counts))
        lps = tuple(float(joint.agent_log_probs(0)[i][x]) for i, x in enumerate(acts))
        buffer.add(0, a, acts, lps, np.zeros(2), 0, True)
    return buffer


def random_buffer(game, joint, rng, n, behavior=None):
    buf = TransitionBuffer(n, game.n_agents)
    b = behavior or init_behavior("on_policy", joint)
    s, t = game.reset(rng), 0
    while not buf.full:
        idx, acts, lps = sample_joint(b, s, rng)
        r = step(game, s, idx, rng, t)
        buf.add(s, idx, acts, lps, r.rewards, r.next_state, r.done, r.truncated)
        s, t = (game.reset(rng), 0) if r.done else (r.next_state, t + 1)
    return buf


# -- loss ---------------------------------------------------------------------------------


def test_loss_at_initialization():
    joint = uniform_2x2()
    for mode in ("props", "ma_props"):
        b = init_behavior(mode, joint, np.random.default_rng(0))
        assert props_loss(b, joint, [0, 0, 0], [AA, BA, BB], 0.3) == pytest.approx(-1.0)


def test_loss_single_sample_ratios():
    joint = uniform_2x2()
    low = shifted(joint, [math.log(3 / 7), 0, 0, 0])
    assert behavior_dist(low, 0)[AA] == pytest.approx(0.125)
    assert props_loss(low, joint, [0], [AA], 0.3) == pytest.approx(-0.7)
    high = shifted(joint, [math.log(1.8), 0, 0, 0])
    assert props_loss(high, joint, [0], [AA], 0.3) == pytest.approx(-1.5)


def test_loss_degenerate_target():
    g = make_game("g1")
    joint = JointTargetPolicy([linear_agent([0, -40]), linear_agent([0, 0])], g)
    b = init_behavior("ma_props", joint, np.random.default_rng(0))
    with pytest.raises(DegenerateRatioError):
        props_loss(b, joint, [0], [BA], 0.3)


def test_clipped_branch_has_zero_gradient():
    joint = uniform_2x2()
    low = shifted(joint, [math.log(3 / 7), 0, 0, 0])
    value, g = props_loss_grad(low, joint, [0], [AA], 0.3)
    assert value == pytest.approx(-0.7) and np.all(g == 0)
    for extra in (0.1, 0.5, 2.0):
        lower = shifted(joint, [math.log(3 / 7) - extra, 0, 0, 0])
        assert props_loss(lower, joint, [0], [AA], 0.3) == pytest.approx(-0.7)


@pytest.mark.parametrize("mode", ["props", "ma_props"])
@pytest.mark.parametrize("gid", ["g1", "climbing", "gridworld"])
def test_gradient_reduces_to_nll_at_init(mode, gid):
    game = make_game(gid)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        joint = random_joint_policy(game, rng, final_gain=1.0)
        buf = random_buffer(game, joint, rng, int(rng.integers(1, 40)))
        b = init_behavior(mode, joint, rng)
        states, acts = buf.view("states"), buf.view("joint_actions")
        _, g_loss = props_loss_grad(b, joint, states, acts, 0.3)
        _, g_nll = nll_grad(b, joint, states, acts)
        assert np.abs(g_loss - g_nll).max() < 1e-8


# -- fused gradients against the tape ---------------------------------------------------


@pytest.mark.parametrize("gid", ["g1", "gridworld", "lbf"])
def test_fused_surrogate_gradient_matches_tape(gid):
    game = make_game(gid)
    rng = np.random.default_rng(7)
    joint = random_joint_policy(game, rng, final_gain=1.0)
    buf = random_buffer(game, joint, rng, 60)
    rows = bh._Rows.dedup(joint, buf.view("states"), buf.view("joint_actions"))
    b = init_behavior("ma_props", joint, rng)
    P = b.delta_params + rng.normal(0, 0.05, b.delta_params.size)
    moved = BehaviorPolicy("ma_props", joint, delta=b.delta, delta_params=P)
    _, g_tape = ad.grad(
        lambda Q: ad.neg(bh._surrogate(bh._ma_logp(moved, Q, rows, rows.joint_obs()), rows.target_logp, 0.3,
                                       rows.weights)), P)
    g_fast, kl = bh._categorical_grad(b.delta, P, rows.joint_obs(), rows.target_joint_logp, rows.actions,
                                      rows.target_logp, 0.3, rows.weights, np.zeros_like(P))
    assert np.abs(g_tape - g_fast).max() < 1e-12
    assert kl == pytest.approx(bh.estimate_kl(moved, rows), abs=1e-12)


@pytest.mark.parametrize("gid", ["g1", "gridworld"])
@pytest.mark.parametrize("epochs", [1, 3])
def test_feature_cache_gives_identical_update(gid, epochs):
    game = make_game(gid)
    rng = np.random.default_rng(8)
    joint = random_joint_policy(game, rng, final_gain=1.0)
    buf = random_buffer(game, joint, rng, 50)
    d0 = init_delta_params(game, rng)
    cfg = BehaviorUpdateConfig(n_epoch=epochs)
    plain = update_behavior(init_behavior("ma_props", joint, delta_params=d0), joint, buf, cfg, np.random.default_rng(0))
    cached = update_behavior(init_behavior("ma_props", joint, delta_params=d0), joint, buf, cfg,
                             np.random.default_rng(0), {})
    assert np.abs(plain.delta_params - cached.delta_params).max() < 1e-12


# -- update -------------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["props", "ma_props"])
def test_single_joint_action_is_pushed_down(mode):
    joint = uniform_2x2()
    buf = fill(TransitionBuffer(4), joint, joint.game, [AB])
    b = update_behavior(init_behavior(mode, joint, np.random.default_rng(0)), joint, buf, BehaviorUpdateConfig(),
                        np.random.default_rng(0))
    p = behavior_dist(b, 0)
    assert p[AB] < 0.25
    if mode == "ma_props":
        assert all(p[a] > 0.25 for a in (AA, BA, BB))
    else:
        # Each agent lowers its own sampled action, so only the opposite corner rises.
        assert p[BA] > 0.25


@pytest.mark.parametrize("mode", ["props", "ma_props"])
def test_zero_learning_rate_keeps_target(mode):
    game = make_game("gridworld")
    rng = np.random.default_rng(1)
    joint = random_joint_policy(game, rng, final_gain=1.0)
    buf = random_buffer(game, joint, rng, 30)
    b = update_behavior(init_behavior(mode, joint, rng), joint, buf, BehaviorUpdateConfig(lr=0.0, n_epoch=3), rng)
    for s in set(buf.view("states").tolist()):
        assert np.abs(behavior_dist(b, s) - joint.joint_probs(s)).max() < 1e-12


@pytest.mark.parametrize("mode", ["props", "ma_props"])
def test_zero_kl_threshold_stops_after_one_epoch(mode):
    joint = uniform_2x2()
    buf = fill(TransitionBuffer(8), joint, joint.game, [AA, AA, AB])
    d0 = init_delta_params(joint.game, np.random.default_rng(2))

    def run(epochs, kl):
        cfg = BehaviorUpdateConfig(n_epoch=epochs, target_kl=kl)
        return update_behavior(init_behavior(mode, joint, delta_params=d0), joint, buf, cfg, np.random.default_rng(0))

    assert np.allclose(behavior_dist(run(5, 0.0), 0), behavior_dist(run(1, 0.0), 0), atol=1e-15)
    assert not np.allclose(behavior_dist(run(5, 1e9), 0), behavior_dist(run(1, 1e9), 0))


def test_on_policy_update_is_identity():
    joint = uniform_2x2()
    b = init_behavior("on_policy", joint)
    buf = fill(TransitionBuffer(2), joint, joint.game, [AA])
    assert update_behavior(b, joint, buf, BehaviorUpdateConfig(), np.random.default_rng(0)) is b


def test_empty_buffer_rejected():
    joint = uniform_2x2()
    with pytest.raises(InvalidArgumentError):
        update_behavior(init_behavior("ma_props", joint, np.random.default_rng(0)), joint, TransitionBuffer(2),
                        BehaviorUpdateConfig(), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        BehaviorUpdateConfig(clip=0)
    with pytest.raises(InvalidArgumentError):
        BehaviorUpdateConfig(batch_size=0)


def test_minibatched_update_runs():
    game = make_game("gridworld")
    rng = np.random.default_rng(3)
    joint = random_joint_policy(game, rng)
    buf = random_buffer(game, joint, rng, 64)
    cfg = BehaviorUpdateConfig(n_epoch=2, n_minibatch=4, max_minibatch_size=10)
    for mode in ("props", "ma_props"):
        b = update_behavior(init_behavior(mode, joint, rng), joint, buf, cfg, rng)
        assert np.isfinite(behavior_dist(b, int(buf.states[0]))).all()


# -- tabular oracles ----------------------------------------------------------------------


def counts_of(values):
    c = CountTable(len(values))
    for a, n in enumerate(values):
        if n:
            c.add(0, a, n)
    return c


def test_most_under_sampled_examples():
    u4 = np.full(4, 0.25)
    assert most_under_sampled_joint(counts_of([2, 0, 1, 1]), u4, 0) == 1
    assert most_under_sampled_joint(counts_of([1, 1, 1, 1]), u4, 0) == 0
    assert most_under_sampled_joint(counts_of([1, 1, 0]), [0.5, 0.25, 0.25], 0) == 2
    assert most_under_sampled_joint(CountTable(3), [0.2, 0.5, 0.3], 0) == 1
    assert most_under_sampled_per_agent([counts_of([3, 1])], [[0.5, 0.5]], 0) == (1,)
    assert most_under_sampled_per_agent([CountTable(2)], [[0.5, 0.5]], 0) == (0,)


def test_count_table_invariants():
    c = CountTable(3)
    c.add(5, 2, 3)
    c.add(5, 0)
    assert c.total(5) == c.counts(5).sum() == 4 and c.total(9) == 0
    assert np.allclose(c.empirical(5), [0.25, 0, 0.75])


def test_boxed_counterexample_dynamics():
    picks = run_per_agent_oracle([[0.5, 0.5], [0.5, 0.5]], 200, first_actions=(0, 1))
    for t, acts in enumerate(picks):
        assert acts == ((0, 1) if t % 2 == 0 else (1, 0))


def _slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def test_oracle_rate_and_per_agent_corollary():
    target = np.full(4, 0.25)
    ms = [16, 64, 256, 1024, 4096]
    joint_slopes, agent_slopes, on_slopes = [], [], []
    for seed in range(10):
        # A random pre-sampled prefix breaks the exact periodicity of the oracle.
        rng = np.random.default_rng(seed)
        offset = int(rng.integers(1, 4))
        jk, mk = sampling_kl_curve(target, ms, "oracle", rng, offset=offset)
        joint_slopes.append(_slope(ms, np.maximum(jk, 1e-300)))
        agent_slopes.append(max(_slope(ms, np.maximum(mk[:, i], 1e-300)) for i in range(2)))
        jk, _ = sampling_kl_curve(target, ms, "on_policy", rng)
        on_slopes.append(_slope(ms, jk))
    assert -2.3 <= np.median(joint_slopes) <= -1.7
    assert np.median(agent_slopes) <= -2 + 0.3
    assert -1.3 <= np.median(on_slopes) <= -0.7


def test_oracle_consistency_on_gridworld():
    game = make_game("gridworld")
    joint = random_joint_policy(game, np.random.default_rng(11), final_gain=1.0)
    exact = true_visitation(game, joint.joint_probs).state_marginal()
    rng = np.random.default_rng(12)
    counts = CountTable(game.n_joint_actions)
    visits: dict[int, int] = {}
    s, t = game.reset(rng), 0
    n = 100_000
    for _ in range(n):
        a = most_under_sampled_joint(counts, joint.joint_probs(s), s)
        counts.add(s, a)
        visits[s] = visits.get(s, 0) + 1
        r = step(game, s, a, rng, t)
        s, t = (game.reset(rng), 0) if r.done else (r.next_state, t + 1)
    assert tv({k: v / n for k, v in visits.items()}, exact) < 0.05


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=6), st.integers(0, 2**31))
def test_most_under_sampled_maximizes_deficit(counts, seed):
    target = np.random.default_rng(seed).dirichlet(np.ones(len(counts)))
    c = counts_of(counts)
    a = most_under_sampled_joint(c, target, 0)
    if sum(counts):
        deficit = target - np.asarray(counts) / sum(counts)
        assert deficit[a] == deficit.max() and a == int(np.flatnonzero(deficit == deficit.max())[0])


def test_kl_divergence_examples():
    assert bh.kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert bh.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
