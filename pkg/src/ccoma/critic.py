"""Centralised counterfactual critic, advantages, TD(lambda) targets and losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParamSet, glorot, linear


class NumericalError(RuntimeError):
    """Raised when a loss or advantage turns non-finite."""


@dataclass
class CriticConfig:
    state_dim: int
    obs_dim: int
    n_agents: int
    n_actions: int
    hidden: int = 128

    @property
    def input_dim(self) -> int:
        return self.state_dim + (self.n_agents - 1) * self.n_actions + self.n_agents + self.obs_dim


class Critic:
    """Feed-forward Q network: (s, a^{-n}, id_n, o_n) -> one Q per action of agent n."""

    def __init__(self, cfg: CriticConfig, seed: int | np.random.Generator = 0):
        self.cfg = cfg
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        p = ParamSet()
        p.add("l1.w", glorot(rng, cfg.input_dim, cfg.hidden))
        p.add("l1.b", np.zeros(cfg.hidden))
        p.add("l2.w", glorot(rng, cfg.hidden, cfg.hidden))
        p.add("l2.b", np.zeros(cfg.hidden))
        p.add("out.w", glorot(rng, cfg.hidden, cfg.n_actions))
        p.add("out.b", np.zeros(cfg.n_actions))
        self.params = p

    def forward(self, inputs) -> Tensor:
        x = ad.as_tensor(inputs)
        if x.shape[-1] != self.cfg.input_dim:
            raise ad.ShapeError(f"critic: input dims {x.dims} vs expected width {self.cfg.input_dim}")
        p = self.params
        h = ad.relu(linear(x, p["l1.w"], p["l1.b"]))
        h = ad.relu(linear(h, p["l2.w"], p["l2.b"]))
        return linear(h, p["out.w"], p["out.b"])


class TargetNormalizer:
    """Debiased exponential moving mean/variance of critic targets.

    The critic regresses standardised targets; ``denormalize`` maps its output
    back to return units for bootstrapping and advantages.
    """

    def __init__(self, beta: float = 0.99, eps: float = 1e-5):
        self.beta = beta
        self.eps = eps
        self.mean_acc = 0.0
        self.sq_acc = 0.0
        self.weight = 0.0

    @property
    def mean(self) -> float:
        return self.mean_acc / self.weight if self.weight > 0 else 0.0

    @property
    def std(self) -> float:
        if self.weight <= 0:
            return 1.0
        var = self.sq_acc / self.weight - self.mean ** 2
        return float(np.sqrt(max(var, 0.0)) + self.eps) if var > 0 else 1.0

    def update(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return
        b = self.beta
        self.mean_acc = b * self.mean_acc + (1 - b) * float(v.mean())
        self.sq_acc = b * self.sq_acc + (1 - b) * float((v * v).mean())
        self.weight = b * self.weight + (1 - b)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + "norm": np.array([self.mean_acc, self.sq_acc, self.weight])}

    def load_state_dict(self, arrays, prefix: str = "") -> None:
        self.mean_acc, self.sq_acc, self.weight = (float(x) for x in np.asarray(arrays[prefix + "norm"]))


def build_critic_inputs(state: np.ndarray, actions: np.ndarray, obs: np.ndarray, n_actions: int) -> np.ndarray:
    """Assemble COMA-style critic inputs for every agent.

    state   (..., S)
    actions (..., N) integer, negative for inactive agents (zero one-hot)
    obs     (..., N, O)
    returns (..., N, S + (N-1)*A + N + O)
    """
    state = np.asarray(state, dtype=np.float64)
    actions = np.asarray(actions)
    obs = np.asarray(obs, dtype=np.float64)
    n = actions.shape[-1]
    onehot = np.zeros(actions.shape + (n_actions,))
    valid = actions >= 0
    np.put_along_axis(onehot, np.where(valid, actions, 0)[..., None], valid[..., None].astype(float), axis=-1)
    others = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.int64).reshape(n, n - 1)
    other_act = onehot[..., others, :]  # (..., N, N-1, A)
    other_act = other_act.reshape(actions.shape + ((n - 1) * n_actions,))
    ids = np.broadcast_to(np.eye(n), actions.shape + (n,))
    s = np.broadcast_to(state[..., None, :], actions.shape + (state.shape[-1],))
    return np.concatenate([s, other_act, ids, obs], axis=-1)


def counterfactual_advantage(q: np.ndarray, pi: np.ndarray, action) -> np.ndarray:
    """A = Q[a] - sum_a' pi(a') Q[a'] along the last axis.

    Works on a single agent (vectors plus int) or on stacked arrays.
    """
    q = np.asarray(q, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if q.shape != pi.shape:
        raise ad.ShapeError(f"counterfactual_advantage: shape mismatch {list(q.shape)} vs {list(pi.shape)}")
    if np.any(np.abs(pi.sum(axis=-1) - 1.0) > 1e-5):
        raise ValueError("counterfactual_advantage: policy is not normalised")
    a = np.asarray(action)
    q_taken = np.take_along_axis(q, a[..., None], axis=-1)[..., 0]
    baseline = np.sum(pi * q, axis=-1)
    return q_taken - baseline


def td_lambda_targets(rewards, next_q, gamma: float, lam: float, terminal: bool = True) -> np.ndarray:
    """Backward recursion for lambda-returns.

    ``rewards[t]`` is the reward that follows the action at step t and
    ``next_q[t]`` is Q(s_{t+1}, a_{t+1}). For a terminal sequence the last
    entry of ``next_q`` is ignored (bootstrap 0); otherwise it bootstraps fully.
    Leading axes other than time (last axis) are handled elementwise.
    """
    r = np.asarray(rewards, dtype=np.float64)
    q = np.asarray(next_q, dtype=np.float64)
    if r.shape[-1] == 0:
        raise ValueError("td_lambda_targets: empty sequence")
    if r.shape != q.shape:
        raise ad.ShapeError(f"td_lambda_targets: shape mismatch {list(r.shape)} vs {list(q.shape)}")
    out = np.empty_like(r)
    T = r.shape[-1]
    g = r[..., T - 1] + (0.0 if terminal else gamma * q[..., T - 1])
    out[..., T - 1] = g
    for t in range(T - 2, -1, -1):
        g = r[..., t] + gamma * ((1.0 - lam) * q[..., t] + lam * g)
        out[..., t] = g
    return out


def critic_loss(targets, q_taken: Tensor, weights=None) -> Tensor:
    """Mean squared TD error over entries with nonzero weight."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != q_taken.shape:
        raise ad.ShapeError(f"critic_loss: shape mismatch {list(y.shape)} vs {q_taken.dims}")
    w = np.ones(y.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    diff = ad.sub(q_taken, Tensor(y))
    sq = ad.mul(ad.mul(diff, diff), Tensor(w))
    loss = ad.scale(ad.sum(sq), 1.0 / max(w.sum(), 1.0))
    if not np.isfinite(loss.data):
        raise NumericalError("critic loss is not finite")
    return loss


def actor_loss(log_probs: Tensor, advantages, weights=None, n_samples: int | None = None) -> Tensor:
    """-mean over samples of sum_n log pi(a_n|o_n) * A^n.

    ``log_probs`` and ``advantages`` share shape (..., N); the agent axis is
    summed and the leading axes averaged. Advantages enter as constants.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    if np.isnan(adv).any():
        raise NumericalError("NaN advantage")
    if adv.shape != log_probs.shape:
        raise ad.ShapeError(f"actor_loss: shape mismatch {log_probs.dims} vs {list(adv.shape)}")
    w = np.ones(adv.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if n_samples is None:
        n_samples = int(np.prod(adv.shape[:-1])) if adv.ndim > 1 else 1
    total = ad.sum(ad.mul(log_probs, Tensor(adv * w)))
    return ad.scale(total, -1.0 / n_samples)
