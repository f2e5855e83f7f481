"""Sampling-error metrics, success rate and bootstrap intervals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, adam_init, adam_step, init_params, log_softmax, mlp_forward
from .buffer import TransitionBuffer
from .envs import GameSpec, VisitationDistribution, step
from .errors import DegenerateRatioError, InvalidArgumentError
from .policy import JointTargetPolicy

MIN_REFERENCE_PROB = 1e-12


@dataclass(frozen=True)
class MleConfig:
    epochs: int = 200
    lr: float = 0.01
    minibatch_size: int = 64
    mirror_architecture: bool = True
    method: str = "network"  # "network" | "tabular"
    tol: float = 1e-5

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.minibatch_size < 1:
            raise InvalidArgumentError("minibatch_size must be >= 1")
        if self.method not in ("network", "tabular"):
            raise InvalidArgumentError(f"unknown MLE method {self.method!r}")


@dataclass
class MetricsRow:
    step: int
    seed: int
    success_rate: float | None = None
    tv_joint: float | None = None
    kl_joint: float | None = None
    kl_agent: list = field(default_factory=lambda: [None, None])

    def __post_init__(self):
        if self.tv_joint is not None and not -1e-12 <= self.tv_joint <= 1 + 1e-12:
            raise InvalidArgumentError(f"tv_joint {self.tv_joint} outside [0, 1]")
        for v in [self.kl_joint, *self.kl_agent]:
            if v is not None and v < -0.05:
                raise InvalidArgumentError(f"KL estimate {v} below -0.05")


# -- total variation ---------------------------------------------------------


def empirical_visitation(buffer: TransitionBuffer, n_joint_actions: int) -> VisitationDistribution:
    keys, counts = np.unique(
        np.stack([buffer.view("states"), buffer.view("joint_actions")], axis=1), axis=0, return_counts=True
    )
    n = counts.sum()
    return VisitationDistribution(n_joint_actions, {(int(s), int(a)): c / n for (s, a), c in zip(keys, counts)})


def tv_distance(empirical: VisitationDistribution, truth: VisitationDistribution) -> float:
    if empirical.n_joint_actions != truth.n_joint_actions:
        raise InvalidArgumentError("distributions have different joint-action spaces")
    keys = set(empirical.mass) | set(truth.mass)
    return 0.5 * float(sum(abs(empirical.mass.get(k, 0.0) - truth.mass.get(k, 0.0)) for k in keys))


# -- maximum-likelihood fits -------------------------------------------------


class FittedPolicy:
    """Conditional distribution fitted to buffer samples.

    ``scope`` is ``"joint"`` or an agent index. ``log_prob(states, actions)``
    evaluates the fitted log-probabilities of the scope's actions.
    """

    def __init__(self, game: GameSpec, scope, spec: MlpSpec | None = None, params=None, table=None):
        self.game = game
        self.scope = scope
        self.spec = spec
        self.params = params
        self.table = table

    def _inputs(self, states) -> np.ndarray:
        if self.scope == "joint":
            return np.array([self.game.joint_obs(int(s)) for s in states])
        return np.array([self.game.observe(int(s))[self.scope] for s in states])

    def log_prob(self, states, actions) -> np.ndarray:
        states = np.asarray(states)
        actions = np.asarray(actions)
        if self.table is not None:
            return np.array([self.table[(int(s), int(a))] for s, a in zip(states, actions)])
        logp = log_softmax(mlp_forward(self.spec, self.params, self._inputs(states)))
        return logp[np.arange(len(actions)), actions]

    def probs(self, state: int) -> np.ndarray:
        if self.table is not None:
            k = self.game.n_joint_actions if self.scope == "joint" else self.game.action_counts[self.scope]
            return np.array([np.exp(self.table.get((state, a), -np.inf)) for a in range(k)])
        return np.exp(self.log_prob(np.full(self._n_out(), state), np.arange(self._n_out())))

    def _n_out(self) -> int:
        return self.spec.output_dim


def _scope_actions(buffer: TransitionBuffer, scope) -> np.ndarray:
    if scope == "joint":
        return buffer.view("joint_actions")
    return buffer.view("agent_actions")[:, scope]


def _scope_keys(game: GameSpec, states: np.ndarray, scope) -> np.ndarray:
    """Keys identifying the scope's conditioning input. Agents condition on their own observation."""
    if scope == "joint":
        return states
    seen: dict[bytes, int] = {}
    return np.array([seen.setdefault(game.observe(int(s))[scope].tobytes(), len(seen)) for s in states])


def _tabular_fit(game, buffer, scope) -> FittedPolicy:
    states = buffer.view("states")
    actions = _scope_actions(buffer, scope)
    keys = _scope_keys(game, states, scope)
    pair_counts: dict[tuple[int, int], int] = {}
    key_counts: dict[int, int] = {}
    for k, a in zip(keys, actions):
        pair_counts[(int(k), int(a))] = pair_counts.get((int(k), int(a)), 0) + 1
        key_counts[int(k)] = key_counts.get(int(k), 0) + 1
    key_of_state = {int(s): int(k) for s, k in zip(states, keys)}
    n_out = game.n_joint_actions if scope == "joint" else game.action_counts[scope]
    table = {}
    for s, k in key_of_state.items():
        for a in range(n_out):
            c = pair_counts.get((k, a), 0)
            table[(s, a)] = np.log(c / key_counts[k]) if c else -np.inf
    return FittedPolicy(game, scope, table=table)


def fit_mle_policy(buffer: TransitionBuffer, game: GameSpec, scope, cfg: MleConfig, rng: np.random.Generator,
                   hidden=(64, 64)) -> FittedPolicy:
    """Maximum-likelihood policy for the buffer's actions.

    ``tabular`` returns empirical conditional frequencies (the exact MLE).
    ``network`` trains a freshly initialized MLP by minibatch Adam on the
    log-likelihood; identical (state, action) rows are merged with counts as
    weights, so one epoch visits every distinct row once.
    """
    if len(buffer) == 0:
        raise InvalidArgumentError("buffer is empty")
    if scope != "joint" and not 0 <= scope < game.n_agents:
        raise InvalidArgumentError(f"invalid scope {scope!r}")
    if cfg.method == "tabular":
        return _tabular_fit(game, buffer, scope)

    states = buffer.view("states")
    actions = _scope_actions(buffer, scope)
    rows, weights = np.unique(np.stack([states, actions], axis=1), axis=0, return_counts=True)
    n_out = game.n_joint_actions if scope == "joint" else game.action_counts[scope]
    in_dim = game.joint_obs_dim if scope == "joint" else game.obs_dim
    spec = MlpSpec(in_dim, n_out, tuple(hidden) if cfg.mirror_architecture else (64,))
    fitted = FittedPolicy(game, scope, spec, init_params(spec, rng))
    X = fitted._inputs(rows[:, 0])
    A = rows[:, 1]
    w = weights.astype(np.float64)

    def nll(P, idx):
        logp = ad.take(ad.log_softmax_t(ad.mlp(spec, P, X[idx])), A[idx])
        return ad.neg(ad.mean(logp, weights=w[idx]))

    P = fitted.params
    opt = adam_init(P.size)
    prev = np.inf
    n = len(rows)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            _, g = ad.grad(lambda T: nll(T, idx), P)
            P, opt = adam_step(P, opt, g, cfg.lr)
        logp = log_softmax(mlp_forward(spec, P, X))[np.arange(n), A]
        loss = -float(w @ logp / w.sum())
        # A rise is Adam overshooting, not convergence; only a flat epoch stops.
        if 0 <= prev - loss < cfg.tol:
            break
        prev = min(prev, loss)
    fitted.params = P
    return fitted


def kl_sampling_error(buffer: TransitionBuffer, reference_logp: np.ndarray, fitted: FittedPolicy, scope) -> float:
    """Monte Carlo KL(empirical || reference): mean of log fitted − log reference.

    ``reference_logp`` holds the reference log-probability of each buffer
    sample's scope action.
    """
    ref = np.asarray(reference_logp, dtype=np.float64)
    if np.any(ref < np.log(MIN_REFERENCE_PROB)):
        raise DegenerateRatioError("reference probability below 1e-12 at an observed sample")
    fit = fitted.log_prob(buffer.view("states"), _scope_actions(buffer, scope))
    return float(np.mean(fit - ref))


def reference_logps(joint: JointTargetPolicy, buffer: TransitionBuffer, scope) -> np.ndarray:
    states = buffer.view("states")
    if scope == "joint":
        acts = buffer.view("joint_actions")
        return np.array([joint.joint_log_probs(int(s))[a] for s, a in zip(states, acts)])
    acts = buffer.view("agent_actions")[:, scope]
    return np.array([joint.agent_log_probs(int(s))[scope][a] for s, a in zip(states, acts)])


# -- evaluation ---------------------------------------------------------------


def success_rate(joint: JointTargetPolicy, spec: GameSpec, rng: np.random.Generator, n_episodes: int = 100) -> float:
    """Fraction of stochastic-policy episodes in which the success event occurs."""
    wins = 0
    for _ in range(n_episodes):
        s = spec.reset(rng)
        for t in range(spec.horizon):
            probs = joint.joint_probs(s)
            a = ad.categorical_sample(probs, rng)
            res = step(spec, s, a, rng, t)
            if res.success:
                wins += 1
                break
            if res.done:
                break
            s = res.next_state
    return wins / n_episodes


def bootstrap_ci(samples, rng: np.random.Generator, level: float = 0.95, resamples: int = 1000) -> tuple[float, float]:
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgumentError("samples must be nonempty")
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    m = x.mean()
    # Guard floating-point drift so constant samples give exactly (c, c).
    return float(min(lo, m)), float(max(hi, m))
