"""Finite-horizon two-agent games with a shared stepping interface.

Joint states are plain ints (a canonical encoding); every game can decode them
back to a structured tuple and render per-agent observation vectors. Joint
actions are row-major over agents: agent 0 is the most significant digit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidArgumentError, UnsupportedGameError

GAME_IDS = (
    *(f"g{i}" for i in range(1, 22)),
    "intro",
    "climbing",
    "penalty",
    "gridworld",
    "boulderpush",
    "lbf",
)


def encode_joint_action(actions, action_counts) -> int:
    idx = 0
    for a, k in zip(actions, action_counts):
        if not 0 <= a < k:
            raise InvalidArgumentError(f"action {a} out of range for {k} actions")
        idx = idx * k + int(a)
    return idx


def decode_joint_action(index: int, action_counts) -> tuple[int, ...]:
    out = []
    for k in reversed(action_counts):
        index, a = divmod(index, k)
        out.append(a)
    return tuple(reversed(out))


def decode_joint_actions(indices, action_counts) -> np.ndarray:
    """Vectorized :func:`decode_joint_action`: returns an ``(n, n_agents)`` array."""
    rest = np.asarray(indices, dtype=np.int64).copy()
    out = np.zeros((rest.size, len(action_counts)), dtype=np.int64)
    for j in range(len(action_counts) - 1, -1, -1):
        rest, out[:, j] = np.divmod(rest, action_counts[j])
    return out


class Outcome(NamedTuple):
    next_states: tuple[tuple[int, float], ...]
    rewards: np.ndarray
    terminal: bool
    success: bool


class StepResult(NamedTuple):
    next_state: int
    rewards: np.ndarray
    done: bool
    truncated: bool
    success: bool


class GameSpec:
    """Base class: dynamics, rewards, observation encoding, horizon."""

    name: str = "game"
    n_agents: int = 2
    action_counts: tuple[int, ...] = ()
    horizon: int = 1
    obs_dim: int = 1
    cooperative: bool = True
    enumeration_cap: int = 100_000

    def __init__(self):
        self._obs_cache: dict[int, tuple[np.ndarray, ...]] = {}
        self._outcome_cache: dict[tuple[int, int], Outcome] = {}
        self._joint_obs_cache: dict[int, np.ndarray] = {}

    # -- to be provided by subclasses --
    def initial_distribution(self) -> tuple[tuple[int, float], ...]:
        raise NotImplementedError

    def _outcome(self, state: int, actions: tuple[int, ...]) -> Outcome:
        raise NotImplementedError

    def _observe(self, state: int) -> tuple[np.ndarray, ...]:
        raise NotImplementedError

    def decode(self, state: int) -> tuple:
        raise NotImplementedError

    def encode(self, parts) -> int:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name, "horizon": self.horizon, "action_counts": self.action_counts}

    # -- shared --
    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.action_counts))

    @property
    def joint_obs_dim(self) -> int:
        return self.obs_dim * self.n_agents

    def observe(self, state: int) -> tuple[np.ndarray, ...]:
        obs = self._obs_cache.get(state)
        if obs is None:
            obs = tuple(np.asarray(o, dtype=np.float64) for o in self._observe(state))
            for o in obs:
                o.setflags(write=False)
            self._obs_cache[state] = obs
        return obs

    def joint_obs(self, state: int) -> np.ndarray:
        out = self._joint_obs_cache.get(state)
        if out is None:
            out = np.concatenate(self.observe(state))
            out.setflags(write=False)
            self._joint_obs_cache[state] = out
        return out

    def outcome(self, state: int, joint_action: int) -> Outcome:
        key = (state, joint_action)
        out = self._outcome_cache.get(key)
        if out is None:
            if not 0 <= joint_action < self.n_joint_actions:
                raise InvalidArgumentError(f"joint action {joint_action} out of range")
            out = self._outcome(state, decode_joint_action(joint_action, self.action_counts))
            self._outcome_cache[key] = out
        return out

    def reset(self, rng: np.random.Generator) -> int:
        init = self.initial_distribution()
        if len(init) == 1:
            return init[0][0]
        u = rng.random()
        acc = 0.0
        for s, p in init:
            acc += p
            if u < acc:
                return s
        return init[-1][0]


def step(spec: GameSpec, state: int, action, rng: np.random.Generator, t: int = 0) -> StepResult:
    """Advance one timestep. ``t`` is the index of the step being taken.

    ``action`` is a joint-action index or a sequence of per-agent indices.
    ``done`` is set on terminal events and when ``t + 1`` reaches the horizon;
    ``truncated`` marks the latter case without a terminal event.
    """
    if isinstance(action, (int, np.integer)):
        joint = int(action)
    else:
        joint = encode_joint_action(tuple(action), spec.action_counts)
    out = spec.outcome(state, joint)
    if len(out.next_states) == 1:
        nxt = out.next_states[0][0]
    else:
        u = rng.random()
        acc = 0.0
        nxt = out.next_states[-1][0]
        for s, p in out.next_states:
            acc += p
            if u < acc:
                nxt = s
                break
    at_horizon = t + 1 >= spec.horizon
    done = out.terminal or at_horizon
    return StepResult(nxt, out.rewards, done, done and not out.terminal, out.success)


# ---------------------------------------------------------------------------
# Matrix games
# ---------------------------------------------------------------------------

# (r1, r2) per cell, row = agent 1 action, column = agent 2 action.
_TWO_BY_TWO = {
    1: ((4, 4), (3, 3), (2, 2), (1, 1)),
    2: ((4, 4), (3, 3), (2, 1), (2, 1)),
    3: ((4, 4), (3, 2), (2, 3), (1, 1)),
    4: ((4, 4), (3, 2), (3, 2), (1, 1)),
    5: ((4, 4), (3, 1), (2, 1), (1, 3)),
    6: ((4, 4), (3, 3), (2, 1), (1, 2)),
    7: ((4, 5), (3, 2), (1, 1), (1, 1)),
    8: ((4, 5), (3, 2), (1, 1), (2, 3)),
    9: ((4, 5), (3, 2), (2, 3), (1, 1)),
    10: ((4, 5), (3, 1), (1, 1), (2, 2)),
    11: ((4, 5), (3, 1), (1, 1), (2, 3)),
    12: ((4, 5), (3, 1), (2, 3), (2, 1)),
    13: ((4, 4), (2, 3), (3, 1), (1, 3)),
    14: ((4, 4), (2, 3), (3, 1), (2, 2)),
    15: ((4, 4), (2, 2), (3, 1), (1, 3)),
    16: ((4, 4), (2, 2), (3, 2), (1, 3)),
    17: ((4, 4), (3, 1), (2, 2), (1, 3)),
    18: ((4, 4), (2, 1), (1, 2), (3, 3)),
    19: ((5, 5), (1, 3), (3, 1), (2, 2)),
    20: ((5, 5), (1, 2), (3, 1), (2, 2)),
    21: ((5, 5), (1, 2), (2, 1), (3, 3)),
}

_CLIMBING = ((11, -3, 0), (-3, 7, 0), (0, 3, 2))
_PENALTY_K = 7
_PENALTY = ((-_PENALTY_K, 0, 10), (0, 2, 0), (10, 0, -_PENALTY_K))
_INTRO = ((12, 12), (0, 6), (6, 0), (2, 2))


class MatrixGame(GameSpec):
    """One-shot game: a single dummy state, constant observation 1.0."""

    horizon = 1
    obs_dim = 1
    enumeration_cap = 1

    def __init__(self, name: str, payoffs: np.ndarray):
        super().__init__()
        self.name = name
        self.payoffs = np.asarray(payoffs, dtype=np.float64)  # (k1, k2, n_agents)
        self.payoffs.setflags(write=False)
        self.action_counts = tuple(self.payoffs.shape[:2])
        self.cooperative = bool(np.all(self.payoffs[..., 0] == self.payoffs[..., 1]))
        totals = self.payoffs.sum(axis=-1).ravel()
        self.optimal_actions = frozenset(int(i) for i in np.flatnonzero(totals == totals.max()))

    def initial_distribution(self):
        return ((0, 1.0),)

    def _observe(self, state):
        return tuple(np.ones(1) for _ in range(self.n_agents))

    def _outcome(self, state, actions):
        joint = encode_joint_action(actions, self.action_counts)
        return Outcome(((0, 1.0),), self.payoffs[actions[0], actions[1]].copy(), True, joint in self.optimal_actions)

    def decode(self, state):
        return ()

    def encode(self, parts):
        return 0

    def reward_table(self) -> np.ndarray:
        return self.payoffs


def matrix_game(game_id: str) -> MatrixGame:
    if game_id.startswith("g") and game_id[1:].isdigit() and int(game_id[1:]) in _TWO_BY_TWO:
        cells = _TWO_BY_TWO[int(game_id[1:])]
        return MatrixGame(game_id, np.array(cells, dtype=float).reshape(2, 2, 2))
    if game_id == "intro":
        return MatrixGame("intro", np.array(_INTRO, dtype=float).reshape(2, 2, 2))
    if game_id in ("climbing", "penalty"):
        table = np.array(_CLIMBING if game_id == "climbing" else _PENALTY, dtype=float)
        return MatrixGame(game_id, np.stack([table, table], axis=-1))
    raise InvalidArgumentError(f"unknown matrix game {game_id!r}")


# ---------------------------------------------------------------------------
# Grid games
# ---------------------------------------------------------------------------

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


def _one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


class _GridGame(GameSpec):
    rows = 3
    cols = 3

    @property
    def n_cells(self):
        return self.rows * self.cols

    def cell(self, r, c):
        return r * self.cols + c

    def rc(self, cell):
        return divmod(cell, self.cols)

    def move(self, cell, action, blocked=()):
        if action not in _MOVES:
            return cell
        r, c = self.rc(cell)
        dr, dc = _MOVES[action]
        r2, c2 = r + dr, c + dc
        if not (0 <= r2 < self.rows and 0 <= c2 < self.cols):
            return cell
        nxt = self.cell(r2, c2)
        return cell if nxt in blocked else nxt


class GridWorld(_GridGame):
    """3x3 grid. Both agents on the top-left cell together: +0.9 each.

    Exactly one agent on the top-left: -0.1 each. Otherwise, an agent on the
    bottom-right: +0.1 each. Any reward event ends the episode. Actions are
    up/down/left/right/stay; off-grid moves are no-ops and agents may share a
    cell.
    """

    name = "gridworld"
    rows = cols = 3
    action_counts = (5, 5)
    horizon = 8

    def __init__(self):
        super().__init__()
        self.obs_dim = 2 * self.n_cells
        self.top_left = 0
        self.bottom_right = self.n_cells - 1
        self.starts = (self.cell(0, self.cols - 1), self.cell(self.rows - 1, 0))

    def describe(self):
        return {**super().describe(), "rows": self.rows, "cols": self.cols, "starts": self.starts}

    def encode(self, parts):
        a, b = parts
        return a * self.n_cells + b

    def decode(self, state):
        return divmod(state, self.n_cells)

    def initial_distribution(self):
        return ((self.encode(self.starts), 1.0),)

    def _observe(self, state):
        a, b = self.decode(state)
        n = self.n_cells
        return (
            np.concatenate([_one_hot(a, n), _one_hot(b, n)]),
            np.concatenate([_one_hot(b, n), _one_hot(a, n)]),
        )

    def _outcome(self, state, actions):
        pos = [self.move(p, a) for p, a in zip(self.decode(state), actions)]
        on_tl = sum(p == self.top_left for p in pos)
        on_br = any(p == self.bottom_right for p in pos)
        if on_tl == 2:
            r, terminal = 0.9, True
        elif on_tl == 1:
            r, terminal = -0.1, True
        elif on_br:
            r, terminal = 0.1, True
        else:
            r, terminal = 0.0, False
        return Outcome(((self.encode(pos), 1.0),), np.array([r, r]), terminal, on_tl == 2)


class BoulderPush(_GridGame):
    """Two agents push a width-2 boulder upward to the top row.

    The boulder sits in columns ``bcol`` and ``bcol + 1``. Push positions are
    the two cells directly below it. When both agents stand on distinct push
    positions and both move up, the boulder and agents advance one row; the
    episode succeeds (+0.1 each) once the boulder reaches row 0. An agent on a
    push position moving up without its partner doing the same costs -0.02
    each. Boulder cells block movement.
    """

    name = "boulderpush"
    rows, cols = 5, 4
    action_counts = (4, 4)
    horizon = 20
    bcol = 1
    boulder_start = 2
    push_reward = 0.1
    solo_penalty = -0.02

    def __init__(self):
        super().__init__()
        self.obs_dim = 2 * self.n_cells + self.rows
        self.starts = (self.cell(self.rows - 1, 0), self.cell(self.rows - 1, self.cols - 1))

    def describe(self):
        return {**super().describe(), "rows": self.rows, "cols": self.cols, "starts": self.starts,
                "boulder_col": self.bcol, "boulder_start_row": self.boulder_start}

    def encode(self, parts):
        a, b, br = parts
        return (br * self.n_cells + a) * self.n_cells + b

    def decode(self, state):
        rest, b = divmod(state, self.n_cells)
        br, a = divmod(rest, self.n_cells)
        return a, b, br

    def boulder_cells(self, br):
        return (self.cell(br, self.bcol), self.cell(br, self.bcol + 1))

    def push_cells(self, br):
        return (self.cell(br + 1, self.bcol), self.cell(br + 1, self.bcol + 1))

    def initial_distribution(self):
        return ((self.encode((*self.starts, self.boulder_start)), 1.0),)

    def _observe(self, state):
        a, b, br = self.decode(state)
        n = self.n_cells
        boulder = _one_hot(br, self.rows)
        return (
            np.concatenate([_one_hot(a, n), _one_hot(b, n), boulder]),
            np.concatenate([_one_hot(b, n), _one_hot(a, n), boulder]),
        )

    def _outcome(self, state, actions):
        a, b, br = self.decode(state)
        push = self.push_cells(br)
        pushing = [p in push and act == UP for p, act in zip((a, b), actions)]
        if all(pushing) and a != b:
            br2 = br - 1
            pos = [self.move(p, UP) for p in (a, b)]
            done = br2 == 0
            r = self.push_reward if done else 0.0
            nxt = self.encode((*pos, br2))
            return Outcome(((nxt, 1.0),), np.array([r, r]), done, done)
        blocked = self.boulder_cells(br)
        pos = [p if push_ else self.move(p, act, blocked) for p, act, push_ in zip((a, b), actions, pushing)]
        r = self.solo_penalty if any(pushing) else 0.0
        return Outcome(((self.encode((*pos, br)), 1.0),), np.array([r, r]), False, False)


class Foraging(_GridGame):
    """Level-based foraging with one food item that both agents must load together.

    Actions: up/down/left/right/forage. An agent is adjacent when it stands on
    one of the four cells orthogonally next to the food. Both adjacent agents
    foraging together: +0.5 each and the episode ends. Exactly one adjacent
    agent foraging: -0.015 each. Foraging away from the food does nothing.
    """

    name = "lbf"
    rows = cols = 5
    action_counts = (5, 5)
    horizon = 20
    FORAGE = 4
    food_reward = 0.5
    solo_penalty = -0.015

    def __init__(self):
        super().__init__()
        self.obs_dim = 2 * self.n_cells
        self.food = self.cell(self.rows // 2, self.cols // 2)
        self.starts = (self.cell(0, 0), self.cell(self.rows - 1, self.cols - 1))
        fr, fc = self.rc(self.food)
        self.adjacent = frozenset(
            self.cell(fr + dr, fc + dc)
            for dr, dc in _MOVES.values()
            if 0 <= fr + dr < self.rows and 0 <= fc + dc < self.cols
        )

    def describe(self):
        return {**super().describe(), "rows": self.rows, "cols": self.cols, "starts": self.starts, "food": self.food}

    def encode(self, parts):
        a, b = parts
        return a * self.n_cells + b

    def decode(self, state):
        return divmod(state, self.n_cells)

    def initial_distribution(self):
        return ((self.encode(self.starts), 1.0),)

    def _observe(self, state):
        a, b = self.decode(state)
        n = self.n_cells
        return (
            np.concatenate([_one_hot(a, n), _one_hot(b, n)]),
            np.concatenate([_one_hot(b, n), _one_hot(a, n)]),
        )

    def _outcome(self, state, actions):
        pos = self.decode(state)
        foraging = [p in self.adjacent and act == self.FORAGE for p, act in zip(pos, actions)]
        if all(foraging):
            r = self.food_reward
            return Outcome(((state, 1.0),), np.array([r, r]), True, True)
        r = self.solo_penalty if any(foraging) else 0.0
        nxt = [self.move(p, act, (self.food,)) for p, act in zip(pos, actions)]
        return Outcome(((self.encode(nxt), 1.0),), np.array([r, r]), False, False)


def gridworld() -> GridWorld:
    return GridWorld()


def boulderpush() -> BoulderPush:
    return BoulderPush()


def lbf() -> Foraging:
    return Foraging()


def make_game(game_id: str) -> GameSpec:
    if game_id == "gridworld":
        return gridworld()
    if game_id == "boulderpush":
        return boulderpush()
    if game_id == "lbf":
        return lbf()
    return matrix_game(game_id)


# ---------------------------------------------------------------------------
# Exact visitation
# ---------------------------------------------------------------------------


@dataclass
class VisitationDistribution:
    """Probability mass over (joint state, joint action) pairs."""

    n_joint_actions: int
    mass: dict[tuple[int, int], float]

    def state_marginal(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for (s, _), p in self.mass.items():
            out[s] = out.get(s, 0.0) + p
        return out

    def total(self) -> float:
        return float(sum(self.mass.values()))


def true_visitation(spec: GameSpec, joint_policy: Callable[[int], np.ndarray]) -> VisitationDistribution:
    """Exact normalized state-action visitation of a joint policy.

    Propagates the time-indexed state distribution forward over the horizon;
    each timestep's mass is counted while the episode is still running, and the
    total is normalized by the expected episode length so the result matches
    the long-run frequencies of a buffer filled by repeated episodes.
    """
    K = spec.n_joint_actions
    d_t: dict[int, float] = {}
    for s, p in spec.initial_distribution():
        d_t[s] = d_t.get(s, 0.0) + p
    seen = set(d_t)
    mass: dict[tuple[int, int], float] = {}
    for t in range(spec.horizon):
        nxt: dict[int, float] = {}
        for s, ps in d_t.items():
            if ps == 0.0:
                continue
            probs = np.asarray(joint_policy(s), dtype=np.float64)
            if probs.shape != (K,):
                raise InvalidArgumentError(f"joint policy returned shape {probs.shape}, expected ({K},)")
            for a in np.flatnonzero(probs):
                w = ps * probs[a]
                key = (s, int(a))
                mass[key] = mass.get(key, 0.0) + w
                out = spec.outcome(s, int(a))
                if out.terminal or t + 1 >= spec.horizon:
                    continue
                for s2, p2 in out.next_states:
                    nxt[s2] = nxt.get(s2, 0.0) + w * p2
                    seen.add(s2)
        if len(seen) > max(spec.enumeration_cap, 1):
            raise UnsupportedGameError(f"{spec.name}: more than {spec.enumeration_cap} reachable states")
        d_t = nxt
    z = sum(mass.values())
    return VisitationDistribution(K, {k: v / z for k, v in mass.items()})
