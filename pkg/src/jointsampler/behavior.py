"""Behavior-policy updates (clipped surrogate with a KL cutoff) and tabular oracle samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import adam_init, adam_step, log_softmax, mlp_forward
from .envs import decode_joint_actions
from .errors import DegenerateRatioError, InvalidArgumentError
from .policy import BehaviorPolicy, JointTargetPolicy

MIN_TARGET_PROB = 1e-12


@dataclass(frozen=True)
class BehaviorUpdateConfig:
    lr: float = 0.03
    clip: float = 0.3
    target_kl: float = 6.0
    n_epoch: int = 1
    n_minibatch: int = 1
    batch_size: int = 1
    max_minibatch_size: int = 0  # 0 = no cap

    def __post_init__(self):
        if self.clip <= 0:
            raise InvalidArgumentError("clip must be > 0")
        if self.target_kl < 0:
            raise InvalidArgumentError("target_kl must be >= 0")
        if self.batch_size < 1 or self.n_epoch < 1 or self.n_minibatch < 1:
            raise InvalidArgumentError("batch_size, n_epoch and n_minibatch must be >= 1")


# ---------------------------------------------------------------------------
# Row preparation
# ---------------------------------------------------------------------------


def _per_state(states: np.ndarray, fn, width: int) -> np.ndarray:
    """Stack ``fn(s)`` for every row, evaluating it once per distinct state."""
    uniq, inverse = np.unique(states, return_inverse=True)
    table = np.array([fn(int(s)) for s in uniq], dtype=np.float64).reshape(len(uniq), width)
    return table[inverse]


class _Rows:
    """Unique (state, action) rows of a sample with multiplicities."""

    def __init__(self, joint: JointTargetPolicy, states, joint_actions, weights=None):
        game = joint.game
        self.states = np.asarray(states, dtype=np.int64)
        self.actions = np.asarray(joint_actions, dtype=np.int64)
        self.weights = np.ones(len(self.states)) if weights is None else np.asarray(weights, dtype=np.float64)
        self.agent_actions = decode_joint_actions(self.actions, game.action_counts)
        self.target_joint_logp = _per_state(self.states, joint.joint_log_probs, game.n_joint_actions)
        self.target_logp = self.target_joint_logp[np.arange(len(self.states)), self.actions]
        if len(self.states) and np.exp(self.target_logp).min() < MIN_TARGET_PROB:
            raise DegenerateRatioError("target probability of a buffered joint action is below 1e-12")
        self._joint = joint
        self._joint_obs = None

    @classmethod
    def dedup(cls, joint: JointTargetPolicy, states, joint_actions):
        K = joint.game.n_joint_actions
        keys = np.asarray(states, dtype=np.int64) * K + np.asarray(joint_actions, dtype=np.int64)
        uniq, counts = np.unique(keys, return_counts=True)
        return cls(joint, uniq // K, uniq % K, counts)

    def joint_obs(self) -> np.ndarray:
        if self._joint_obs is None:
            g = self._joint.game
            self._joint_obs = _per_state(self.states, g.joint_obs, g.joint_obs_dim)
        return self._joint_obs

    def agent_obs(self, i: int) -> np.ndarray:
        g = self._joint.game
        return _per_state(self.states, lambda s: g.observe(s)[i], g.obs_dim)

    def agent_target_logp(self, i: int) -> np.ndarray:
        return np.array([self._joint.agent_log_probs(int(s))[i][a] for s, a in zip(self.states, self.agent_actions[:, i])])


def _surrogate(logp_behavior: ad.Tensor, logp_target: np.ndarray, eps: float, weights) -> ad.Tensor:
    ratio = ad.exp(logp_behavior - logp_target)
    obj = ad.minimum(ad.neg(ratio), ad.neg(ad.clip(ratio, 1.0 - eps, 1.0 + eps)))
    return ad.mean(obj, weights)


def _ma_logp(b: BehaviorPolicy, P: ad.Tensor, rows: _Rows, X: np.ndarray) -> ad.Tensor:
    logits = ad.mlp(b.delta, P, X) + rows.target_joint_logp
    return ad.take(ad.log_softmax_t(logits), rows.actions)


def _props_agent_logp(spec, P: ad.Tensor, obs: np.ndarray, actions: np.ndarray, offset: int = 0) -> ad.Tensor:
    return ad.take(ad.log_softmax_t(ad.mlp(spec, P, obs, offset)), actions)


def _joint_behavior_logp(b: BehaviorPolicy, P: ad.Tensor, rows: _Rows) -> ad.Tensor:
    if b.mode == "ma_props":
        return _ma_logp(b, P, rows, rows.joint_obs())
    if b.mode != "props":
        raise InvalidArgumentError("on_policy behavior has no parameters")
    total, offset = None, 0
    for i, agent in enumerate(b.joint.agents):
        lp = _props_agent_logp(agent.spec, P, rows.agent_obs(i), rows.agent_actions[:, i], offset)
        total = lp if total is None else total + lp
        offset += b.props_params[i].size
    return total


def behavior_params(b: BehaviorPolicy) -> np.ndarray:
    """Flat vector of the behavior parameters (concatenated per agent for props)."""
    if b.mode == "ma_props":
        return b.delta_params
    if b.mode == "props":
        return np.concatenate(b.props_params)
    return np.zeros(0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def props_loss(b: BehaviorPolicy, joint: JointTargetPolicy, states, joint_actions, eps: float) -> float:
    """Mean clipped surrogate ``min(-rho, -clip(rho, 1-eps, 1+eps))`` over a batch.

    ``rho`` is the joint behavior-to-target probability ratio.
    """
    rows = _Rows(joint, states, joint_actions)
    logp_b = np.array([b.joint_log_probs(int(s))[a] for s, a in zip(rows.states, rows.actions)])
    ratio = np.exp(logp_b - rows.target_logp)
    return float(np.mean(np.minimum(-ratio, -np.clip(ratio, 1.0 - eps, 1.0 + eps))))


def props_loss_grad(b: BehaviorPolicy, joint: JointTargetPolicy, states, joint_actions, eps: float):
    """Value and gradient of :func:`props_loss` w.r.t. :func:`behavior_params`."""
    rows = _Rows(joint, states, joint_actions)
    return ad.grad(lambda P: _surrogate(_joint_behavior_logp(b, P, rows), rows.target_logp, eps, None), behavior_params(b))


def nll_grad(b: BehaviorPolicy, joint: JointTargetPolicy, states, joint_actions):
    """Value and gradient of the mean negative log-likelihood of a batch under the behavior policy."""
    rows = _Rows(joint, states, joint_actions)
    return ad.grad(lambda P: ad.neg(ad.mean(_joint_behavior_logp(b, P, rows))), behavior_params(b))


# ---------------------------------------------------------------------------
# Update
# ---------------------------------------------------------------------------


def estimate_kl(b: BehaviorPolicy, rows: _Rows) -> float:
    """Sample estimate of KL(target || behavior) over weighted rows."""
    if b.mode == "on_policy":
        return 0.0
    if b.mode == "ma_props":
        logits = mlp_forward(b.delta, b.delta_params, rows.joint_obs()) + rows.target_joint_logp
        lp = log_softmax(logits)[np.arange(len(rows.states)), rows.actions]
    else:
        lp = np.zeros(len(rows.states))
        for i, (agent, p) in enumerate(zip(b.joint.agents, b.props_params)):
            lp += log_softmax(mlp_forward(agent.spec, p, rows.agent_obs(i)))[np.arange(len(rows.states)), rows.agent_actions[:, i]]
    w = rows.weights / rows.weights.sum()
    return float(w @ (rows.target_logp - lp))


def _minibatches(n: int, cfg: BehaviorUpdateConfig, rng: np.random.Generator):
    perm = rng.permutation(n)
    for part in np.array_split(perm, min(cfg.n_minibatch, n)):
        if cfg.max_minibatch_size and len(part) > cfg.max_minibatch_size:
            part = part[: cfg.max_minibatch_size]
        if len(part):
            yield part


def _surrogate_dlogp(logp: np.ndarray, target_logp: np.ndarray, eps: float, weights: np.ndarray) -> np.ndarray:
    """Gradient of the negated clipped surrogate with respect to the behavior log-probs."""
    ratio = np.exp(logp - target_logp)
    return (weights / weights.sum()) * ratio * (ratio >= 1.0 - eps)


def _categorical_grad(spec, params, X, base_logits, actions, target_logp, eps, weights, out, offset=0):
    """Backpropagate the surrogate through ``log_softmax(mlp(X) + base_logits)[actions]``.

    Also returns the weighted KL(target || behavior) estimate at ``params``.
    """
    z, layers, acts = ad.mlp_cached(spec, params, X, offset)
    if base_logits is not None:
        z = z + base_logits
    lp = log_softmax(z)
    rows = np.arange(len(actions))
    lp_a = lp[rows, actions]
    d = _surrogate_dlogp(lp_a, target_logp, eps, weights)
    dz = -np.exp(lp) * d[:, None]
    dz[rows, actions] += d
    kl = float(weights @ (target_logp - lp_a) / weights.sum())
    return ad.mlp_backward(spec, layers, acts, dz, out, offset), kl


def _fresh_delta_grad(b: BehaviorPolicy, rows: _Rows, eps: float, features: dict) -> tuple[np.ndarray, float]:
    """Surrogate gradient for an adjustment network whose final layer is zero.

    Only the final layer receives gradient at that point, so the penultimate
    activations are all that is needed; they are memoized per state in
    ``features``, which must belong to one fixed set of hidden-layer weights.
    """
    hidden = ad.MlpSpec(b.delta.input_dim, b.delta.hidden_dims[-1], b.delta.hidden_dims[:-1])
    hidden_flat = b.delta_params[: ad.param_count(hidden)]

    def feature(s: int) -> np.ndarray:
        h = features.get(s)
        if h is None:
            h = np.tanh(ad.mlp_forward(hidden, hidden_flat, rows._joint.game.joint_obs(s)))
            features[s] = h
        return h

    H = _per_state(rows.states, feature, hidden.output_dim)
    lp = log_softmax(rows.target_joint_logp)
    idx = np.arange(len(rows.states))
    lp_a = lp[idx, rows.actions]
    d = _surrogate_dlogp(lp_a, rows.target_logp, eps, rows.weights)
    dz = -np.exp(lp) * d[:, None]
    dz[idx, rows.actions] += d
    g = np.zeros_like(b.delta_params)
    gw, gb = ad.unflatten(b.delta, g)[-1]
    gw += H.T @ dz
    gb += dz.sum(axis=0)
    return g, float(rows.weights @ (rows.target_logp - lp_a) / rows.weights.sum())


def update_behavior(
    b: BehaviorPolicy,
    joint: JointTargetPolicy,
    buffer,
    cfg: BehaviorUpdateConfig,
    rng: np.random.Generator,
    features: dict | None = None,
) -> BehaviorPolicy:
    """Run minibatch ascent on the clipped surrogate starting from ``b``.

    ``b`` must be freshly initialized against ``joint`` (behavior == target).
    Returns after the first epoch whose KL(target || behavior) estimate
    exceeds ``cfg.target_kl``, or after ``cfg.n_epoch`` epochs. ``features``
    is an optional per-state cache of the adjustment network's penultimate
    activations, reusable across calls that share the same hidden weights.
    """
    if b.mode == "on_policy":
        return b
    n = len(buffer)
    if n == 0:
        raise InvalidArgumentError("buffer is empty")
    states = buffer.states[:n]
    actions = buffer.joint_actions[:n]
    all_rows = _Rows.dedup(joint, states, actions)
    whole = cfg.n_minibatch == 1 and not (cfg.max_minibatch_size and n > cfg.max_minibatch_size)
    eps = cfg.clip

    def batches():
        if whole:
            yield all_rows
        else:
            for idx in _minibatches(n, cfg, rng):
                yield _Rows.dedup(joint, states[idx], actions[idx])

    if b.mode == "ma_props":
        final_w, final_b = ad.unflatten(b.delta, b.delta_params)[-1]
        fresh = features is not None and bool(b.delta.hidden_dims) and not final_w.any() and not final_b.any()
        params = b.delta_params.copy()
        opt = adam_init(params.size)
        for epoch in range(cfg.n_epoch):
            for rows in batches():
                if fresh and opt.step_count == 0:
                    g, kl = _fresh_delta_grad(b, rows, eps, features)
                else:
                    g, kl = _categorical_grad(b.delta, params, rows.joint_obs(), rows.target_joint_logp, rows.actions,
                                              rows.target_logp, eps, rows.weights, np.zeros_like(params))
                if whole and epoch > 0 and kl > cfg.target_kl:
                    # The forward pass just measured the previous epoch's result.
                    return BehaviorPolicy("ma_props", joint, delta=b.delta, delta_params=params)
                params, opt = adam_step(params, opt, g, cfg.lr)
            if not whole:
                b = BehaviorPolicy("ma_props", joint, delta=b.delta, delta_params=params)
                if estimate_kl(b, all_rows) > cfg.target_kl:
                    return b
        return BehaviorPolicy("ma_props", joint, delta=b.delta, delta_params=params)

    params = [p.copy() for p in b.props_params]
    opts = [adam_init(p.size) for p in params]
    for _ in range(cfg.n_epoch):
        for rows in batches():
            for i, agent in enumerate(joint.agents):
                K = agent.spec.output_dim
                keys = rows.states * K + rows.agent_actions[:, i]
                uniq, inverse = np.unique(keys, return_inverse=True)
                counts = np.bincount(inverse, weights=rows.weights)
                us, ua = uniq // K, uniq % K
                obs = np.array([joint.game.observe(int(s))[i] for s in us]).reshape(len(us), joint.game.obs_dim)
                tgt = np.array([joint.agent_log_probs(int(s))[i][a] for s, a in zip(us, ua)])
                g, _ = _categorical_grad(agent.spec, params[i], obs, None, ua, tgt, eps, counts, np.zeros_like(params[i]))
                params[i], opts[i] = adam_step(params[i], opts[i], g, cfg.lr)
        b = BehaviorPolicy("props", joint, props_params=list(params))
        if estimate_kl(b, all_rows) > cfg.target_kl:
            break
    return b


# ---------------------------------------------------------------------------
# Tabular oracles
# ---------------------------------------------------------------------------


class CountTable:
    """Per-state visit counts over a fixed number of actions."""

    def __init__(self, n_actions: int):
        self.n_actions = n_actions
        self._counts: dict[int, np.ndarray] = {}
        self._first_seen: dict[int, list[int]] = {}

    def add(self, state: int, action: int, times: int = 1):
        c = self._counts.get(state)
        if c is None:
            c = self._counts[state] = np.zeros(self.n_actions, dtype=np.int64)
            self._first_seen[state] = []
        if c[action] == 0 and times > 0:
            self._first_seen[state].append(int(action))
        c[action] += times

    def first_seen(self, state: int) -> list[int]:
        """Actions in the order they were first recorded at ``state``."""
        return list(self._first_seen.get(state, ()))

    def counts(self, state: int) -> np.ndarray:
        c = self._counts.get(state)
        return np.zeros(self.n_actions, dtype=np.int64) if c is None else c

    def total(self, state: int) -> int:
        return int(self.counts(state).sum())

    def states(self):
        return list(self._counts)

    def empirical(self, state: int) -> np.ndarray:
        c = self.counts(state)
        return c / c.sum()


def most_under_sampled(counts: CountTable, target, state: int, ties: str = "lowest") -> int:
    """Action maximizing ``target - empirical frequency``.

    Ties go to the lowest index, or with ``ties="first_seen"`` to the tied
    action recorded earliest at this state (unvisited actions last, by index).
    """
    target = np.asarray(target, dtype=np.float64)
    c = counts.counts(state)
    tot = c.sum()
    if tot == 0:
        return int(np.argmax(target))
    deficit = target - c / tot
    if ties == "lowest":
        return int(np.argmax(deficit))
    if ties != "first_seen":
        raise InvalidArgumentError(f"unknown tie rule {ties!r}")
    best = set(np.flatnonzero(deficit == deficit.max()).tolist())
    for a in counts.first_seen(state):
        if a in best:
            return a
    return min(best)


def most_under_sampled_joint(counts: CountTable, target, state: int) -> int:
    return most_under_sampled(counts, target, state)


def most_under_sampled_per_agent(counts: list[CountTable], targets: list, states) -> tuple[int, ...]:
    """Each agent independently picks its own most under-sampled action.

    An agent facing a tie repeats the earliest of the tied actions it has
    taken, so a decentralized run keeps the order set by its first draw.
    """
    if isinstance(states, (int, np.integer)):
        states = [states] * len(counts)
    return tuple(most_under_sampled(c, t, s, ties="first_seen") for c, t, s in zip(counts, targets, states))


def kl_divergence(p, q) -> float:
    """KL(p || q) for discrete distributions; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def sampling_kl_curve(target, checkpoints, sampler: str, rng: np.random.Generator, offset: int = 0):
    """KL(empirical || target) on a single-state game after ``m + offset`` draws.

    ``sampler`` is ``"oracle"`` (most under-sampled joint action) or
    ``"on_policy"`` (i.i.d. draws from ``target``). Also returns the per-agent
    marginal KLs for a 2-agent square action space when ``target`` has a
    square length.
    """
    target = np.asarray(target, dtype=np.float64)
    K = len(target)
    counts = CountTable(K)
    points = sorted(int(m) + offset for m in checkpoints)
    total = points[-1]
    joint_kl, marg_kl = [], []
    k = int(round(np.sqrt(K)))
    square = k * k == K
    if sampler == "on_policy":
        draws = rng.choice(K, size=total, p=target)
    elif sampler != "oracle":
        raise InvalidArgumentError(f"unknown sampler {sampler!r}")
    j = 0
    for t in range(1, total + 1):
        a = int(draws[t - 1]) if sampler == "on_policy" else most_under_sampled(counts, target, 0)
        counts.add(0, a)
        if t == points[j]:
            emp = counts.empirical(0)
            joint_kl.append(kl_divergence(emp, target))
            if square:
                e2, t2 = emp.reshape(k, k), target.reshape(k, k)
                marg_kl.append(
                    [kl_divergence(e2.sum(axis=1), t2.sum(axis=1)), kl_divergence(e2.sum(axis=0), t2.sum(axis=0))]
                )
            j += 1
    return np.array(joint_kl), np.array(marg_kl)


def run_per_agent_oracle(targets: list, steps: int, first_actions: tuple[int, ...] | None = None):
    """Joint actions chosen when every agent follows its own under-sampling rule on one state."""
    counts = [CountTable(len(t)) for t in targets]
    out = []
    for t in range(steps):
        if t == 0 and first_actions is not None:
            acts = tuple(first_actions)
        else:
            acts = most_under_sampled_per_agent(counts, targets, 0)
        for c, a in zip(counts, acts):
            c.add(0, a)
        out.append(acts)
    return out
