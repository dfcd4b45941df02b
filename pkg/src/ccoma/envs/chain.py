"""Tiny deterministic two-state chain used for smoke training and DP checks.

Every episode visits state A then state B and terminates. Each agent picks one
of two actions; the global reward is the sum of per-agent payoffs
``payoff[state][action]``.
"""
from __future__ import annotations

import numpy as np

DEFAULT_PAYOFF = ((1.0, 0.0), (0.0, 2.0))


class ChainEnv:
    n_actions = 2
    horizon = 2

    def __init__(self, n_agents: int = 1, payoff=DEFAULT_PAYOFF):
        self.n_agents = n_agents
        self.payoff = np.asarray(payoff, dtype=np.float64)
        self.obs_dim = 2 + n_agents
        self.state_dim = 2
        self.t = 0
        self.trace = None

    def reset(self, seed: int | None = None):
        self.t = 0
        return self.observations(), self.adjacency()

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,) or np.any((actions < 0) | (actions > 1)):
            raise ValueError(f"invalid actions {actions}")
        reward = float(self.payoff[self.t, actions].sum())
        self.t += 1
        done = self.t >= self.horizon
        return self.observations(), self.adjacency(), reward, done, {"t": self.t}

    def true_state(self) -> np.ndarray:
        s = np.zeros(2)
        s[min(self.t, 1)] = 1.0
        return s

    def observations(self) -> np.ndarray:
        obs = np.zeros((self.n_agents, self.obs_dim))
        obs[:, min(self.t, 1)] = 1.0
        obs[:, 2:] = np.eye(self.n_agents)
        return obs

    def adjacency(self) -> np.ndarray:
        return np.ones((self.n_agents, self.n_agents))

    def availability(self) -> np.ndarray:
        return np.ones((self.n_agents, 2))

    def active(self) -> np.ndarray:
        return np.ones(self.n_agents, dtype=bool)

    def fresh(self) -> np.ndarray:
        return np.zeros(self.n_agents, dtype=bool)

    def get_state(self) -> dict:
        return {"t": self.t}

    def set_state(self, data: dict) -> None:
        self.t = int(data["t"])

    def optimal_q(self, gamma: float) -> np.ndarray:
        """Per-agent optimal Q for a single agent: rows are states A, B."""
        q_b = self.payoff[1].copy()
        q_a = self.payoff[0] + gamma * q_b.max()
        return np.stack([q_a, q_b])
