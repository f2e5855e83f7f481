"""Independent PPO updates for every agent, with IPPO or MAPPO critics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (
    AdamState,
    MlpSpec,
    adam_init,
    adam_step,
    clip_grad_norm,
    init_params,
    log_softmax,
    mlp_backward,
    mlp_cached,
    mlp_forward,
)
from .buffer import TransitionBuffer
from .errors import InvalidArgumentError, NumericError, PreconditionError
from .policy import JointTargetPolicy

__all__ = [
    "PpoConfig",
    "Critic",
    "TransitionBuffer",
    "compute_gae",
    "normalize_advantages",
    "make_critics",
    "ppo_update",
    "agent_loss_grad",
    "reinforce_coefficients",
]


@dataclass(frozen=True)
class PpoConfig:
    batch_size: int = 20
    lr: float = 0.1
    n_epochs: int = 4
    n_minibatches: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    norm_adv: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise InvalidArgumentError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise InvalidArgumentError("gae_lambda must be in [0, 1]")
        if self.clip <= 0:
            raise InvalidArgumentError("clip must be > 0")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")


@dataclass
class Critic:
    spec: MlpSpec
    params: np.ndarray
    input_mode: str  # "own_obs" | "joint_state"

    def inputs(self, game, states, agent: int) -> np.ndarray:
        if self.input_mode == "joint_state":
            return np.array([game.joint_obs(int(s)) for s in states]).reshape(len(states), self.spec.input_dim)
        return np.array([game.observe(int(s))[agent] for s in states]).reshape(len(states), self.spec.input_dim)

    def values(self, game, states, agent: int) -> np.ndarray:
        return mlp_forward(self.spec, self.params, self.inputs(game, states, agent))[:, 0]


def make_critics(game, algorithm: str, rng: np.random.Generator, hidden=(64, 64)) -> list[Critic]:
    """MAPPO critics read the joint observation; IPPO critics read their agent's own."""
    if algorithm not in ("mappo", "ippo"):
        raise InvalidArgumentError(f"unknown algorithm {algorithm!r}")
    mode = "joint_state" if algorithm == "mappo" else "own_obs"
    dim = game.joint_obs_dim if algorithm == "mappo" else game.obs_dim
    out = []
    for _ in range(game.n_agents):
        spec = MlpSpec(dim, 1, hidden)
        out.append(Critic(spec, init_params(spec, rng, final_gain=1.0), mode))
    return out


def compute_gae(rewards, values, dones, gamma: float, lam: float, *, last_value: float = 0.0,
                next_values=None, truncated=None):
    """Generalized advantage estimates and returns, computed backward in time.

    ``dones[t]`` marks the end of an episode at step ``t``. The value used to
    bootstrap step ``t`` is ``next_values[t]`` when given, otherwise
    ``values[t + 1]`` (``last_value`` for the final step). Bootstrapping is
    cut at genuine terminals, i.e. ``dones`` that are not ``truncated``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    T = len(r)
    if not (len(v) == len(d) == T):
        raise InvalidArgumentError("rewards, values and dones must have the same length")
    if next_values is None:
        nv = np.append(v[1:], last_value)
    else:
        nv = np.asarray(next_values, dtype=np.float64)
    tr = np.zeros(T, dtype=bool) if truncated is None else np.asarray(truncated, dtype=bool)
    terminal = d & ~tr
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        delta = r[t] + gamma * nv[t] * (not terminal[t]) - v[t]
        running = delta + gamma * lam * (not d[t]) * running
        adv[t] = running
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    centered = adv - adv.mean()
    scale = np.abs(centered).max() if centered.size else 0.0
    if scale == 0:
        return centered
    # Rescale and recenter so tiny spreads neither underflow nor leave a rounding offset.
    unit = centered / scale
    unit -= unit.mean()
    std = unit.std()
    return unit / std if std > 0 else unit


def _agent_loss(actor: MlpSpec, critic: MlpSpec, n_actor: int, obs, critic_in, actions, old_logp, adv, returns,
                cfg: PpoConfig):
    def loss(P):
        logp_all = ad.log_softmax_t(ad.mlp(actor, P, obs))
        logp = ad.take(logp_all, actions)
        ratio = ad.exp(logp - old_logp)
        pg = ad.neg(ad.mean(ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv)))
        entropy = ad.mean(ad.neg(ad.total(ad.exp(logp_all) * logp_all, axis=1)))
        v = ad.mlp(critic, P, critic_in, offset=n_actor)
        v_loss = ad.mean(ad.total(ad.square(v - returns[:, None]), axis=1)) * 0.5
        return pg - entropy * cfg.entropy_coef + v_loss * cfg.vf_coef

    return loss


def agent_loss_grad(actor: MlpSpec, critic: MlpSpec, P: np.ndarray, obs, critic_in, actions, old_logp, adv,
                    returns, cfg: PpoConfig) -> tuple[float, np.ndarray]:
    """Closed-form value and gradient of the same loss as :func:`_agent_loss`."""
    B = len(actions)
    rows = np.arange(B)
    n_actor = ad.param_count(actor)
    g = np.zeros_like(P)

    z, a_layers, a_acts = mlp_cached(actor, P, obs)
    lp = log_softmax(z)
    p = np.exp(lp)
    ratio = np.exp(lp[rows, actions] - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr1, surr2 = ratio * adv, clipped * adv
    ent = -(p * lp).sum(axis=1)
    inside = (ratio >= 1.0 - cfg.clip) & (ratio <= 1.0 + cfg.clip)
    live = inside | (surr1 <= surr2)
    d_logp = np.where(live, -adv / B, 0.0) * ratio
    dz = (cfg.entropy_coef / B) * p * (lp + ent[:, None])
    dz -= p * d_logp[:, None]
    dz[rows, actions] += d_logp
    mlp_backward(actor, a_layers, a_acts, dz, g)

    v, c_layers, c_acts = mlp_cached(critic, P, critic_in, offset=n_actor)
    err = v[:, 0] - returns
    mlp_backward(critic, c_layers, c_acts, (cfg.vf_coef / B) * err[:, None], g, offset=n_actor)

    value = -np.minimum(surr1, surr2).mean() - cfg.entropy_coef * ent.mean() + 0.5 * cfg.vf_coef * (err @ err) / B
    return float(value), g


def ppo_update(
    joint: JointTargetPolicy,
    critics: list[Critic],
    buffer: TransitionBuffer,
    cfg: PpoConfig,
    rng: np.random.Generator,
    opt_states: list[AdamState] | None = None,
    stats: dict | None = None,
):
    """One PPO update per agent on a full buffer; clears the buffer.

    Each agent optimizes its actor and critic jointly with one Adam state over
    the concatenated parameter vector. Ratios are taken against the target
    log-probs stored at collection time. Returns ``(joint, critics, opt_states)``.
    """
    if not buffer.full:
        raise PreconditionError(f"buffer holds {len(buffer)} of {buffer.capacity} transitions")
    game = joint.game
    n = len(buffer)
    states = buffer.view("states")
    next_states = buffer.view("next_states")
    dones = buffer.view("dones")
    truncated = buffer.view("truncated")
    rewards = buffer.view("rewards")
    actions = buffer.view("agent_actions")
    old_logps = buffer.view("target_logps")

    if opt_states is None:
        opt_states = [adam_init(a.params.size + c.params.size) for a, c in zip(joint.agents, critics)]
    new_actor_params, new_critics, new_opts = [], [], []
    mb_size = max(1, n // cfg.n_minibatches)
    perms = [rng.permutation(n) for _ in range(cfg.n_epochs)]
    for i, (agent, critic) in enumerate(zip(joint.agents, critics)):
        values = critic.values(game, states, i)
        next_values = critic.values(game, next_states, i)
        adv, returns = compute_gae(rewards[:, i], values, dones, cfg.gamma, cfg.gae_lambda,
                                   next_values=next_values, truncated=truncated)
        obs = np.array([game.observe(int(s))[i] for s in states]).reshape(n, game.obs_dim)
        critic_in = critic.inputs(game, states, i)
        n_actor = agent.params.size
        P = np.concatenate([agent.params, critic.params])
        opt = opt_states[i]
        for epoch, perm in enumerate(perms):
            for start in range(0, n, mb_size):
                idx = perm[start:start + mb_size]
                if stats is not None and epoch == 0 and start == 0:
                    z = mlp_forward(agent.spec, P[:n_actor], obs[idx])
                    lp = log_softmax(z)[np.arange(len(idx)), actions[idx, i]]
                    stats.setdefault("initial_ratios", []).append(np.exp(lp - old_logps[idx, i]))
                mb_adv = normalize_advantages(adv[idx]) if cfg.norm_adv else adv[idx]
                value, g = agent_loss_grad(agent.spec, critic.spec, P, obs[idx], critic_in[idx], actions[idx, i],
                                           old_logps[idx, i], mb_adv, returns[idx], cfg)
                if not np.isfinite(g).all():
                    raise NumericError("non-finite PPO gradient")
                g = clip_grad_norm(g, cfg.max_grad_norm)
                if stats is not None:
                    stats.setdefault("grad_norms", []).append(float(np.sqrt(g @ g)))
                P, opt = adam_step(P, opt, g, cfg.lr)
        new_actor_params.append(P[:n_actor])
        new_critics.append(Critic(critic.spec, P[n_actor:], critic.input_mode))
        new_opts.append(opt)
    buffer.clear()
    return joint.with_params(new_actor_params), new_critics, new_opts


def reinforce_coefficients(dataset, advantages: dict, n_agents: int = 2, n_actions: int = 2):
    """Monte Carlo policy-gradient weights on each agent's own-action score.

    For a dataset of joint actions (tuples) and fixed joint advantages, agent
    ``i``'s gradient estimate is ``mean_t A(a_t) * grad log pi_i(a_{t,i})``.
    Returns, per agent, the coefficient multiplying ``grad log pi_i(a)`` for
    every own action ``a``.
    """
    coef = np.zeros((n_agents, n_actions))
    for joint_action in dataset:
        for i in range(n_agents):
            coef[i, joint_action[i]] += advantages[tuple(joint_action)]
    return coef / len(dataset)
