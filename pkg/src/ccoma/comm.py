"""Decentralised actor with graph-attention communication.

Per timestep each agent's observation is encoded, mixed with its neighbours'
features by ``n_layers`` masked multi-head dot-product attention convolutions,
fed through a GRU cell and turned into a distribution over actions. All
agents share one set of weights, so the network is permutation equivariant.

Arrays are laid out ``(batch, agents, features)``; 2-D inputs are treated as
a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParamSet, glorot, linear


@dataclass
class CommConfig:
    obs_dim: int
    n_actions: int
    d_model: int = 64
    n_heads: int = 8
    d_k: int = 16
    n_layers: int = 2
    rnn_hidden: int = 64


@dataclass
class StepOutput:
    probs: Tensor  # (B, N, A); Q values when used as a Q network
    logits: Tensor
    hidden: Tensor  # (B, N, rnn_hidden)
    messages: Tensor  # final convolution output h^L, (B, N, d_model)


def adjacency_mask(adjacency: np.ndarray) -> np.ndarray:
    """M = A + I, clipped to {0, 1}."""
    a = np.asarray(adjacency, dtype=np.float64)
    n = a.shape[-1]
    return np.minimum(a + np.eye(n), 1.0)


def validate_mask(mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.shape[-1] != m.shape[-2]:
        raise ValueError(f"adjacency mask must be square, got {list(m.shape)}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("adjacency mask entries must be 0 or 1")
    if not (np.diagonal(m, axis1=-2, axis2=-1) == 1).all():
        raise ValueError("adjacency mask diagonal must be all ones")


class CommPolicy:
    """Observation encoder, attention graph convolutions, GRU and policy head."""

    def __init__(self, cfg: CommConfig, seed: int | np.random.Generator = 0):
        self.cfg = cfg
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        p = ParamSet()
        d, hk = cfg.d_model, cfg.n_heads * cfg.d_k
        p.add("enc.w", glorot(rng, cfg.obs_dim, d))
        p.add("enc.b", np.zeros(d))
        for layer in range(cfg.n_layers):
            p.add(f"conv{layer}.wq", glorot(rng, d, hk))
            p.add(f"conv{layer}.wk", glorot(rng, d, hk))
            p.add(f"conv{layer}.wv", glorot(rng, d, hk))
            p.add(f"conv{layer}.mix", glorot(rng, hk, d))
        hdim = cfg.rnn_hidden
        for gate in ("z", "r", "n"):
            p.add(f"gru.w{gate}", glorot(rng, d, hdim))
            p.add(f"gru.u{gate}", glorot(rng, hdim, hdim))
            p.add(f"gru.b{gate}", np.zeros(hdim))
        p.add("head.w", glorot(rng, hdim, cfg.n_actions) * 0.1)
        p.add("head.b", np.zeros(cfg.n_actions))
        self.params = p

    # -- pieces -------------------------------------------------------------

    def encode(self, obs) -> Tensor:
        obs = ad.as_tensor(obs)
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != configured obs_dim {self.cfg.obs_dim}")
        return ad.relu(linear(obs, self.params["enc.w"], self.params["enc.b"]))

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        x = ad.reshape(x, (b, n, self.cfg.n_heads, self.cfg.d_k))
        return ad.transpose(x, (0, 2, 1, 3))  # (B, heads, N, d_k)

    def attention_weights(self, h: Tensor, mask: np.ndarray, layer: int) -> Tensor:
        """Masked scaled dot-product attention weights, shape (B, heads, N, N)."""
        h = ad.as_tensor(h)
        q = self._heads(ad.matmul(h, self.params[f"conv{layer}.wq"]))
        k = self._heads(ad.matmul(h, self.params[f"conv{layer}.wk"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.cfg.d_k))
        m = np.broadcast_to(np.asarray(mask)[:, None, :, :], scores.shape)
        return ad.masked_row_softmax(scores, m)

    def conv_layer(self, h: Tensor, mask: np.ndarray, layer: int) -> Tensor:
        h = ad.as_tensor(h)
        b, n, _ = h.shape
        alpha = self.attention_weights(h, mask, layer)
        v = self._heads(ad.matmul(h, self.params[f"conv{layer}.wv"]))
        agg = ad.transpose(ad.matmul(alpha, v), (0, 2, 1, 3))
        agg = ad.reshape(agg, (b, n, self.cfg.n_heads * self.cfg.d_k))
        return ad.relu(ad.matmul(agg, self.params[f"conv{layer}.mix"]))

    def communicate(self, obs, mask) -> Tensor:
        """Encoder followed by every convolution layer; returns h^L."""
        obs, mask = _batched(obs), _batched(mask)
        h = self.encode(obs)
        for layer in range(self.cfg.n_layers):
            h = self.conv_layer(h, mask, layer)
        return h

    def gru(self, x: Tensor, h: Tensor) -> Tensor:
        p = self.params
        z = ad.sigmoid(ad.add(linear(x, p["gru.wz"]), linear(h, p["gru.uz"], p["gru.bz"])))
        r = ad.sigmoid(ad.add(linear(x, p["gru.wr"]), linear(h, p["gru.ur"], p["gru.br"])))
        cand = ad.tanh(ad.add(linear(x, p["gru.wn"]), linear(ad.mul(r, h), p["gru.un"], p["gru.bn"])))
        keep_new = ad.sub(Tensor(np.ones(z.shape)), z)
        return ad.add(ad.mul(keep_new, cand), ad.mul(z, h))

    def policy_forward(self, features, hidden, avail=None) -> tuple[Tensor, Tensor, Tensor]:
        """GRU step plus softmax head; returns (probs, logits, new hidden)."""
        features = ad.as_tensor(features)
        hidden = ad.as_tensor(hidden)
        h_new = self.gru(features, hidden)
        logits = linear(h_new, self.params["head.w"], self.params["head.b"])
        if avail is None:
            avail = np.ones(logits.shape)
        probs = ad.masked_row_softmax(logits, np.asarray(avail))
        return probs, logits, h_new

    # -- full step ----------------------------------------------------------

    def initial_hidden(self, batch: int, n_agents: int) -> np.ndarray:
        return np.zeros((batch, n_agents, self.cfg.rnn_hidden))

    def step(self, obs, mask, hidden, avail=None) -> StepOutput:
        obs, mask, hidden = _batched(obs), _batched(mask), _batched(hidden)
        if avail is not None:
            avail = _batched(avail)
        msgs = self.communicate(obs, mask)
        probs, logits, h_new = self.policy_forward(msgs, hidden, avail)
        return StepOutput(probs=probs, logits=logits, hidden=h_new, messages=msgs)


def _batched(x):
    if isinstance(x, Tensor):
        return x if x.ndim == 3 else ad.reshape(x, (1,) + x.shape)
    x = np.asarray(x, dtype=np.float64)
    return x if x.ndim == 3 else x[None]


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    p = np.asarray(probs, dtype=np.float64)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    idx = min(idx, len(p) - 1)
    while p[idx] <= 0:  # guard against landing on a zero-width bin through rounding
        idx -= 1
    return idx


def greedy_action(probs: np.ndarray) -> int:
    return int(np.argmax(np.asarray(probs)))


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised sampling over the last axis (one uniform draw per row)."""
    p = np.asarray(probs, dtype=np.float64)
    flat = p.reshape(-1, p.shape[-1])
    cdf = np.cumsum(flat, axis=-1)
    u = rng.random(flat.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=-1)
    idx = np.minimum(idx, p.shape[-1] - 1)
    # step back over zero-probability bins hit through rounding
    for row in np.nonzero(flat[np.arange(len(idx)), idx] <= 0)[0]:
        j = idx[row]
        while flat[row, j] <= 0:
            j -= 1
        idx[row] = j
    return idx.reshape(p.shape[:-1])
