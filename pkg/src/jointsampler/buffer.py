from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError


class TransitionBuffer:
    """Fixed-capacity, time-ordered record of collected transitions.

    ``target_logps`` hold each agent's log-probability of its own action under
    the target actors at collection time.
    """

    def __init__(self, capacity: int, n_agents: int = 2):
        if capacity < 1:
            raise InvalidArgumentError("capacity must be >= 1")
        self.capacity = capacity
        self.n_agents = n_agents
        self.states = np.zeros(capacity, dtype=np.int64)
        self.next_states = np.zeros(capacity, dtype=np.int64)
        self.joint_actions = np.zeros(capacity, dtype=np.int64)
        self.agent_actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.target_logps = np.zeros((capacity, n_agents))
        self.rewards = np.zeros((capacity, n_agents))
        self.dones = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.size = 0

    def __len__(self):
        return self.size

    @property
    def full(self) -> bool:
        return self.size == self.capacity

    def add(self, state, joint_action, agent_actions, target_logps, rewards, next_state, done, truncated=False):
        if self.full:
            raise InvalidArgumentError("buffer is full")
        if not np.all(np.isfinite(target_logps)):
            raise InvalidArgumentError("target log-probs must be finite")
        i = self.size
        self.states[i] = state
        self.joint_actions[i] = joint_action
        self.agent_actions[i] = agent_actions
        self.target_logps[i] = target_logps
        self.rewards[i] = rewards
        self.next_states[i] = next_state
        self.dones[i] = done
        self.truncated[i] = truncated
        self.size += 1

    def clear(self):
        self.size = 0

    def view(self, name: str) -> np.ndarray:
        return getattr(self, name)[: self.size]
