"""Target policies and the three behavior-policy families.

``JointTargetPolicy`` is the product of independent softmax actors. A
``BehaviorPolicy`` is defined relative to a frozen joint target:

* ``on_policy``: exactly the joint target.
* ``props``: product of per-agent actor copies with their own parameters.
* ``ma_props``: softmax over joint actions of the joint target log-probs plus
  an adjustment network evaluated on the concatenated joint observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    MlpSpec,
    categorical_sample,
    init_params,
    log_softmax,
    mlp_forward,
    softmax,
)
from .envs import GameSpec, decode_joint_action
from .errors import InvalidArgumentError

MODES = ("on_policy", "props", "ma_props")


@dataclass
class AgentPolicy:
    spec: MlpSpec
    params: np.ndarray

    def logits(self, obs) -> np.ndarray:
        return mlp_forward(self.spec, self.params, obs)


def agent_dist(policy: AgentPolicy, obs) -> np.ndarray:
    return softmax(policy.logits(obs))


def actor_spec(game: GameSpec, agent: int = 0, hidden=(64, 64)) -> MlpSpec:
    return MlpSpec(game.obs_dim, game.action_counts[agent], hidden)


def random_joint_policy(game: GameSpec, rng: np.random.Generator, hidden=(64, 64), final_gain: float = 0.01):
    agents = []
    for i in range(game.n_agents):
        spec = actor_spec(game, i, hidden)
        agents.append(AgentPolicy(spec, init_params(spec, rng, final_gain=final_gain)))
    return JointTargetPolicy(agents, game)


class JointTargetPolicy:
    """Independent per-agent actors. Per-state results are memoized.

    Treat instances as immutable: parameter updates produce a new object.
    """

    def __init__(self, agents: list[AgentPolicy], game: GameSpec):
        if len(agents) != game.n_agents:
            raise InvalidArgumentError("one AgentPolicy per agent is required")
        self.agents = agents
        self.game = game
        self._agent_logp: dict[int, tuple[np.ndarray, ...]] = {}
        self._joint_logp: dict[int, np.ndarray] = {}

    def with_params(self, params: list[np.ndarray]) -> "JointTargetPolicy":
        return JointTargetPolicy([AgentPolicy(a.spec, p) for a, p in zip(self.agents, params)], self.game)

    @property
    def params(self) -> list[np.ndarray]:
        return [a.params for a in self.agents]

    def agent_log_probs(self, state: int) -> tuple[np.ndarray, ...]:
        out = self._agent_logp.get(state)
        if out is None:
            obs = self.game.observe(state)
            out = tuple(log_softmax(a.logits(o)) for a, o in zip(self.agents, obs))
            self._agent_logp[state] = out
        return out

    def joint_log_probs(self, state: int) -> np.ndarray:
        """Log-probability of every joint action (row-major), length prod(k_i)."""
        out = self._joint_logp.get(state)
        if out is None:
            parts = self.agent_log_probs(state)
            out = parts[0]
            for p in parts[1:]:
                out = (out[:, None] + p[None, :]).ravel()
            self._joint_logp[state] = out
        return out

    def joint_probs(self, state: int) -> np.ndarray:
        return np.exp(self.joint_log_probs(state))

    def batch_agent_log_probs(self, agent: int, obs: np.ndarray) -> np.ndarray:
        return log_softmax(mlp_forward(self.agents[agent].spec, self.agents[agent].params, obs))


def joint_log_prob(joint: JointTargetPolicy, state: int, action) -> float:
    """Sum of per-agent log-probabilities of a joint action."""
    if isinstance(action, (int, np.integer)):
        action = decode_joint_action(int(action), joint.game.action_counts)
    parts = joint.agent_log_probs(state)
    if len(action) != len(parts):
        raise InvalidArgumentError("action must have one entry per agent")
    total = 0.0
    for lp, a in zip(parts, action):
        if not 0 <= a < len(lp):
            raise InvalidArgumentError(f"action {a} out of range")
        total += float(lp[a])
    return total


def delta_spec(game: GameSpec, hidden=(64, 64)) -> MlpSpec:
    return MlpSpec(game.joint_obs_dim, game.n_joint_actions, hidden, zero_final_layer=True)


@dataclass
class BehaviorPolicy:
    mode: str
    joint: JointTargetPolicy
    props_params: list[np.ndarray] = field(default_factory=list)
    delta: MlpSpec | None = None
    delta_params: np.ndarray | None = None

    def agent_log_probs(self, state: int) -> tuple[np.ndarray, ...]:
        """Per-agent behavior log-probs (props mode only)."""
        obs = self.joint.game.observe(state)
        return tuple(
            log_softmax(mlp_forward(a.spec, p, o)) for a, p, o in zip(self.joint.agents, self.props_params, obs)
        )

    def joint_log_probs(self, state: int) -> np.ndarray:
        if self.mode == "on_policy":
            return self.joint.joint_log_probs(state)
        if self.mode == "props":
            parts = self.agent_log_probs(state)
            out = parts[0]
            for p in parts[1:]:
                out = (out[:, None] + p[None, :]).ravel()
            return out
        adj = mlp_forward(self.delta, self.delta_params, self.joint.game.joint_obs(state))
        return log_softmax(self.joint.joint_log_probs(state) + adj)


def behavior_dist(b: BehaviorPolicy, state: int) -> np.ndarray:
    return np.exp(b.joint_log_probs(state))


def init_delta_params(game: GameSpec, rng: np.random.Generator, hidden=(64, 64)) -> np.ndarray:
    return init_params(delta_spec(game, hidden), rng)


def init_behavior(
    mode: str,
    joint: JointTargetPolicy,
    rng: np.random.Generator | None = None,
    delta_params: np.ndarray | None = None,
    hidden=(64, 64),
) -> BehaviorPolicy:
    """Behavior policy equal to ``joint`` at every state.

    For ``ma_props`` the adjustment network's hidden layers come from
    ``delta_params`` when given (its final layer is zeroed regardless), else
    they are drawn from ``rng``.
    """
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown behavior mode {mode!r}")
    if mode == "on_policy":
        return BehaviorPolicy(mode, joint)
    if mode == "props":
        return BehaviorPolicy(mode, joint, props_params=[p.copy() for p in joint.params])
    spec = delta_spec(joint.game, hidden)
    if delta_params is None:
        if rng is None:
            raise InvalidArgumentError("ma_props initialization needs rng or delta_params")
        params = init_params(spec, rng)
    else:
        params = np.array(delta_params, dtype=np.float64, copy=True)
        n_final = spec.dims[-2] * spec.dims[-1] + spec.dims[-1]
        params[-n_final:] = 0.0
    return BehaviorPolicy(mode, joint, delta=spec, delta_params=params)


def sample_joint(b: BehaviorPolicy, state: int, rng: np.random.Generator):
    """Draw a joint action from the behavior policy.

    Returns ``(joint_index, per_agent_actions, per_agent_target_logps)`` where
    the log-probs are under the target actors, not the behavior policy.
    """
    probs = behavior_dist(b, state)
    idx = categorical_sample(probs, rng)
    actions = decode_joint_action(idx, b.joint.game.action_counts)
    parts = b.joint.agent_log_probs(state)
    logps = tuple(float(lp[a]) for lp, a in zip(parts, actions))
    return idx, actions, logps
