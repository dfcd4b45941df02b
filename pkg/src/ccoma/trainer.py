"""Batched on-policy training (A2C style) for CCOMA, COMA and IQL with communication.

One iteration collects a full episode from each of ``batch_size`` environments
with the current parameters, then applies one actor update and
``critic_updates`` critic regression passes on the same targets. Training steps are
counted as environment timesteps summed over the parallel environments.
"""
from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor
from .comm import CommPolicy, sample_actions
from .config import RunConfig
from .critic import (Critic, CriticConfig, NumericalError, TargetNormalizer, actor_loss,
                     build_critic_inputs, counterfactual_advantage, critic_loss, td_lambda_targets)
from .envs.manufacture import ManufactureLine, curriculum_level
from .optim import RMSProp

log = logging.getLogger(__name__)

STEP_UNIT = "environment timesteps summed over parallel environments"


@dataclass
class EpisodeBatch:
    """Time-major per-environment record; leading axes are (B, T)."""

    state: np.ndarray    # (B, T, S)
    obs: np.ndarray      # (B, T, N, O)
    actions: np.ndarray  # (B, T, N), -1 for inactive agents
    avail: np.ndarray    # (B, T, N, A)
    adj: np.ndarray      # (B, T, N, N) communication mask fed to the policy
    active: np.ndarray   # (B, T, N) bool
    keep: np.ndarray     # (B, T, N) bool: recurrent state carried into step t
    reward: np.ndarray   # (B, T)
    done: np.ndarray     # (B, T) bool

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.actions.shape

    def episode(self, i: int) -> "EpisodeBatch":
        return EpisodeBatch(**{k: v[i:i + 1] for k, v in self.__dict__.items()})

    @classmethod
    def stack(cls, episodes: Sequence["EpisodeBatch"]) -> "EpisodeBatch":
        return cls(**{k: np.concatenate([getattr(e, k) for e in episodes]) for k in cls.__dataclass_fields__})


@dataclass
class RolloutResult:
    batch: EpisodeBatch
    returns: np.ndarray  # (B,)
    success: np.ndarray | None  # (B,) traffic only


def _one_hot(actions: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(actions.shape + (n,))
    valid = actions >= 0
    np.put_along_axis(out, np.where(valid, actions, 0)[..., None], valid[..., None].astype(float), axis=-1)
    return out


def select_actions(probs: np.ndarray, avail: np.ndarray, rng: np.random.Generator,
                   mode: str, epsilon: float = 0.0) -> np.ndarray:
    if mode == "greedy":
        return np.argmax(probs, axis=-1)
    if mode == "sample":
        return sample_actions(probs, rng)
    if mode == "epsilon":
        greedy = np.argmax(probs, axis=-1)
        uniform = sample_actions(avail / avail.sum(axis=-1, keepdims=True), rng)
        explore = rng.random(greedy.shape) < epsilon
        return np.where(explore, uniform, greedy)
    raise ValueError(f"unknown action mode {mode!r}")


def mix_uniform(probs, avail: np.ndarray, epsilon: float):
    """(1 - eps) * probs + eps * uniform over available actions; Tensor or array."""
    if not epsilon:
        return probs
    uniform = avail / avail.sum(axis=-1, keepdims=True)
    if isinstance(probs, Tensor):
        return ad.add(ad.scale(probs, 1.0 - epsilon), Tensor(epsilon * uniform))
    return (1.0 - epsilon) * probs + epsilon * uniform


def collect_rollouts(envs: Sequence, policy: CommPolicy, rng: np.random.Generator, *,
                     seeds: Sequence[int] | None = None, mode: str = "sample", epsilon: float = 0.0,
                     comm: bool = True, observer: Callable | None = None) -> RolloutResult:
    """Run one full episode in every environment with the current parameters.

    In ``sample`` mode a non-zero ``epsilon`` mixes the policy with a uniform
    distribution; in ``epsilon`` mode it is the epsilon-greedy rate.
    ``observer(t, envs, actions, step_output)`` is called before each env step.
    """
    B = len(envs)
    for b, env in enumerate(envs):
        env.reset(None if seeds is None else int(seeds[b]))
    T, N = envs[0].horizon, envs[0].n_agents
    eye = np.eye(N)
    hidden = policy.initial_hidden(B, N)
    rec = {k: [] for k in ("state", "obs", "actions", "avail", "adj", "active", "keep", "reward", "done")}
    returns = np.zeros(B)
    success = None
    for t in range(T):
        obs = np.stack([e.observations() for e in envs])
        adj = np.stack([e.adjacency() if comm else eye for e in envs])
        active = np.stack([e.active() for e in envs])
        keep = active & ~np.stack([e.fresh() for e in envs])
        avail = np.stack([e.availability() for e in envs])
        state = np.stack([e.true_state() for e in envs])
        hidden = hidden * keep[..., None]
        out = policy.step(obs, adj, hidden, avail)
        probs = mix_uniform(out.probs.data, avail, epsilon) if mode == "sample" else out.probs.data
        actions = select_actions(probs, avail, rng, mode, epsilon)
        actions = np.where(active, actions, -1)
        if observer is not None:
            observer(t, envs, actions, out)
        rewards, dones, infos = np.zeros(B), np.zeros(B, dtype=bool), []
        for b, env in enumerate(envs):
            try:
                _, _, r, d, info = env.step(actions[b])
            except Exception as exc:
                raise RuntimeError(f"environment {b} failed at step {t}: {exc}") from exc
            rewards[b], dones[b] = r, d
            infos.append(info)
        returns += rewards
        hidden = out.hidden.data
        for k, v in (("state", state), ("obs", obs), ("actions", actions), ("avail", avail), ("adj", adj),
                     ("active", active), ("keep", keep), ("reward", rewards), ("done", dones)):
            rec[k].append(v)
    if "success" in infos[0]:
        success = np.array([i["success"] for i in infos])
    batch = EpisodeBatch(**{k: np.stack(v, axis=1) for k, v in rec.items()})
    return RolloutResult(batch=batch, returns=returns, success=success)


def unroll(policy: CommPolicy, batch: EpisodeBatch, use_logits: bool = False,
           epsilon: float = 0.0) -> Tensor:
    """Replay the recurrent policy over a batch; returns (B, T, N, A)."""
    B, T, N = batch.shape
    h = Tensor(policy.initial_hidden(B, N))
    outs = []
    for t in range(T):
        keep = np.broadcast_to(batch.keep[:, t, :, None], h.shape).astype(np.float64)
        h = ad.mul(h, Tensor(keep))
        out = policy.step(batch.obs[:, t], batch.adj[:, t], h, batch.avail[:, t])
        h = out.hidden
        y = out.logits if use_logits else mix_uniform(out.probs, batch.avail[:, t], epsilon)
        outs.append(ad.reshape(y, (B, 1, N, y.shape[-1])))
    return ad.concat(outs, axis=1)


def evaluate(policy: CommPolicy, env_factory: Callable, n: int = 96, greedy: bool = True,
             seed: int = 0, comm: bool = True, n_randomized: int | None = None,
             chunk: int = 96) -> dict:
    """Run ``n`` test episodes; success rate (traffic) and mean cumulative reward."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    rng = np.random.default_rng([seed, 7])
    returns, successes = [], []
    for start in range(0, n, chunk):
        part = seeds[start:start + chunk]
        envs = [env_factory() for _ in part]
        if n_randomized is not None:
            for e in envs:
                e.n_randomized = n_randomized
        res = collect_rollouts(envs, policy, rng, seeds=part, mode="greedy" if greedy else "sample", comm=comm)
        returns.extend(res.returns.tolist())
        if res.success is not None:
            successes.extend(res.success.tolist())
    return {
        "n_episodes": n,
        "mean_return": float(np.mean(returns)),
        "success_rate": float(np.mean(successes)) if successes else None,
        "returns": returns,
        "successes": successes or None,
    }


class Trainer:
    def __init__(self, cfg: RunConfig, env_factory: Callable | None = None):
        self.cfg = cfg
        t = cfg.train
        self.algo = t.algo
        self.comm = self.algo != "COMA"
        self.env_factory = env_factory or cfg.make_env
        self.envs = [self.env_factory() for _ in range(t.batch_size)]
        probe = self.envs[0]
        init_rng = np.random.default_rng([t.seed, 0])
        self.policy = CommPolicy(cfg.comm_config(probe), init_rng)
        self.actor_opt = RMSProp(self.policy.params.tensors(), t.lr, t.alpha, t.eps, t.grad_clip)
        self.critic = None
        self.target = None
        if self.algo == "IQL_COMM":
            self.target = CommPolicy(cfg.comm_config(probe), 0)
            self.target.params.copy_from(self.policy.params)
            self.replay: deque = deque(maxlen=t.iql_replay)
            self.replay_rng = np.random.default_rng([t.seed, 3])
        else:
            ccfg = CriticConfig(state_dim=probe.state_dim, obs_dim=probe.obs_dim, n_agents=probe.n_agents,
                                n_actions=probe.n_actions, hidden=cfg.model.critic_hidden)
            self.critic = Critic(ccfg, init_rng)
            self.critic_opt = RMSProp(self.critic.params.tensors(), t.critic_lr, t.alpha, t.eps, t.grad_clip)
            self.normalizer = TargetNormalizer() if t.normalize_targets else None
        self.action_rng = np.random.default_rng([t.seed, 1])
        self.env_seed_rng = np.random.default_rng([t.seed, 2])
        self.step = 0
        self.updates = 0
        self.last_losses: dict = {}
        self.best_eval: float | None = None
        self.best_params: dict | None = None

    # -- helpers ------------------------------------------------------------

    def n_randomized(self, step: int | None = None) -> int | None:
        if not isinstance(self.envs[0], ManufactureLine):
            return None
        e = self.cfg.env
        if not e.curriculum:
            return 6
        return curriculum_level(self.step if step is None else step, e.curriculum_period)

    def epsilon(self) -> float:
        t = self.cfg.train
        frac = max(0.0, 1.0 - self.step / max(t.iql_eps_steps, 1))
        return t.iql_eps_end + (t.iql_eps_start - t.iql_eps_end) * frac

    def explore_epsilon(self) -> float:
        """Uniform mixing rate for the actor-critic behaviour policy."""
        t = self.cfg.train
        frac = max(0.0, 1.0 - self.step / max(t.explore_eps_steps, 1))
        return t.explore_eps_end + (t.explore_eps_start - t.explore_eps_end) * frac

    def collect(self) -> RolloutResult:
        level = self.n_randomized()
        if level is not None:
            for e in self.envs:
                e.n_randomized = level
        seeds = self.env_seed_rng.integers(0, 2**31 - 1, size=len(self.envs))
        if self.algo == "IQL_COMM":
            return collect_rollouts(self.envs, self.policy, self.action_rng, seeds=seeds,
                                    mode="epsilon", epsilon=self.epsilon(), comm=True)
        self._mix = self.explore_epsilon()
        return collect_rollouts(self.envs, self.policy, self.action_rng, seeds=seeds,
                                epsilon=self._mix, comm=self.comm)

    # -- updates ------------------------------------------------------------

    def update(self, batch: EpisodeBatch) -> dict:
        if self.algo == "IQL_COMM":
            losses = self.update_iql_comm(batch)
        else:
            losses = self.update_actor_critic(batch)
        self.updates += 1
        self.last_losses = losses
        return losses

    def update_ccoma(self, batch: EpisodeBatch) -> dict:
        return self.update_actor_critic(batch)

    def update_coma(self, batch: EpisodeBatch) -> dict:
        return self.update_actor_critic(_identity_adjacency(batch))

    def update_actor_critic(self, batch: EpisodeBatch) -> dict:
        t = self.cfg.train
        if not self.comm:
            batch = _identity_adjacency(batch)
        B, T, N = batch.shape
        A = batch.avail.shape[-1]
        onehot = _one_hot(batch.actions, A)
        active = batch.active.astype(np.float64)

        x = build_critic_inputs(batch.state, batch.actions, batch.obs, A)
        norm = self.normalizer
        with Tape() as ctape:
            q = self.critic.forward(x)
            q_taken = ad.sum(ad.mul(q, Tensor(onehot)), axis=-1)
            qd = q_taken.data if norm is None else norm.denormalize(q_taken.data)
            n_active = active.sum(-1)
            joint_q = np.where(n_active > 0, (qd * active).sum(-1) / np.maximum(n_active, 1), 0.0)
            next_q = np.concatenate([joint_q[:, 1:], np.zeros((B, 1))], axis=1)
            y = td_lambda_targets(batch.reward, next_q, t.gamma, t.lam, terminal=True)
            y = np.broadcast_to(y[..., None], (B, T, N))
            if norm is not None:
                norm.update(y[active > 0])
                y = norm.normalize(y)
            closs = critic_loss(y, q_taken, weights=active)
        q_values = q.data if norm is None else norm.denormalize(q.data)
        ctape.backward(closs)
        self.critic_opt.step([p.grad if p.grad is not None else np.zeros_like(p.data)
                              for p in self.critic.params.tensors()])
        # extra regression passes on the same targets
        for _ in range(t.critic_updates - 1):
            with Tape() as tape:
                q_taken = ad.sum(ad.mul(self.critic.forward(x), Tensor(onehot)), axis=-1)
                extra = critic_loss(y, q_taken, weights=active)
            tape.backward(extra)
            self.critic_opt.step([p.grad if p.grad is not None else np.zeros_like(p.data)
                                  for p in self.critic.params.tensors()])
        with Tape() as atape:
            probs = unroll(self.policy, batch, epsilon=getattr(self, "_mix", self.explore_epsilon()))
            adv = counterfactual_advantage(q_values, probs.data, np.where(batch.actions >= 0, batch.actions, 0))
            adv = adv * active
            if not np.isfinite(adv).all():
                raise NumericalError("non-finite advantage")
            if t.normalize_advantages and active.sum() > 1:
                m = adv[active > 0]
                adv = np.where(active > 0, (adv - m.mean()) / (m.std() + 1e-8), 0.0)
            safe = _one_hot(np.where(batch.actions >= 0, batch.actions, 0), A)
            logp = ad.log(ad.sum(ad.mul(probs, Tensor(safe)), axis=-1))
            aloss = actor_loss(logp, adv, weights=active, n_samples=B * T)
            if t.entropy_coef:
                ent = ad.sum(ad.mul(probs, ad.log(ad.add(probs, Tensor(np.full(probs.shape, 1e-12))))), axis=-1)
                aloss = ad.add(aloss, ad.scale(ad.sum(ad.mul(ent, Tensor(active))), t.entropy_coef / (B * T)))
        if not np.isfinite(aloss.data):
            raise NumericalError("actor loss is not finite")
        if self.step < t.critic_warmup:
            return {"actor_loss": float(aloss.data), "critic_loss": float(closs.data),
                    "mean_abs_advantage": float(np.abs(adv).sum() / max(active.sum(), 1))}
        atape.backward(aloss)
        self.actor_opt.step([p.grad if p.grad is not None else np.zeros_like(p.data)
                             for p in self.policy.params.tensors()])
        return {"actor_loss": float(aloss.data), "critic_loss": float(closs.data),
                "mean_abs_advantage": float(np.abs(adv).sum() / max(active.sum(), 1))}

    def update_iql_comm(self, batch: EpisodeBatch) -> dict:
        t = self.cfg.train
        for i in range(batch.shape[0]):
            self.replay.append(batch.episode(i))
        if not self.replay:
            raise RuntimeError("replay store is empty")
        idx = self.replay_rng.integers(0, len(self.replay), size=t.batch_size)
        sample = EpisodeBatch.stack([self.replay[i] for i in idx])
        loss = self.iql_loss_and_step(sample)
        if self.updates % t.iql_target_sync == t.iql_target_sync - 1:
            self.target.params.copy_from(self.policy.params)
        return {"actor_loss": None, "critic_loss": loss}

    def iql_targets(self, sample: EpisodeBatch) -> np.ndarray:
        t = self.cfg.train
        q_next = unroll(self.target, sample, use_logits=True).data
        q_next = np.where(sample.avail > 0, q_next, -np.inf).max(axis=-1)
        cont = np.zeros(sample.actions.shape)
        cont[:, :-1] = sample.keep[:, 1:]
        boot = np.where(cont > 0, np.nan_to_num(np.concatenate(
            [q_next[:, 1:], np.zeros_like(q_next[:, :1])], axis=1), neginf=0.0), 0.0)
        return sample.reward[..., None] + t.gamma * boot

    def iql_loss_and_step(self, sample: EpisodeBatch) -> float:
        A = sample.avail.shape[-1]
        y = self.iql_targets(sample)
        with Tape() as tape:
            q = unroll(self.policy, sample, use_logits=True)
            q_taken = ad.sum(ad.mul(q, Tensor(_one_hot(sample.actions, A))), axis=-1)
            loss = critic_loss(y, q_taken, weights=sample.active.astype(np.float64))
        tape.backward(loss)
        self.actor_opt.step([p.grad if p.grad is not None else np.zeros_like(p.data)
                             for p in self.policy.params.tensors()])
        return float(loss.data)

    # -- evaluation and the main loop ---------------------------------------

    def evaluate(self, n: int | None = None, greedy: bool | None = None) -> dict:
        ev = self.cfg.eval
        return evaluate(self.policy, self.env_factory, n=n or ev.episodes,
                        greedy=ev.greedy if greedy is None else greedy, seed=ev.seed,
                        comm=self.comm, n_randomized=self.n_randomized())

    def train(self, total_steps: int | None = None, metrics_path: str | Path | None = None,
              out_dir: str | Path | None = None, on_eval: Callable | None = None) -> list[dict]:
        cfg = self.cfg
        total = cfg.train.total_steps if total_steps is None else total_steps
        period = cfg.eval.period
        records: list[dict] = []
        metrics_fh = open(metrics_path, "a") if metrics_path else None
        try:
            while self.step < total:
                res = self.collect()
                try:
                    losses = self.update(res.batch)
                except NumericalError:
                    if out_dir is not None:
                        np.savez(Path(out_dir) / "nan_batch.npz", **res.batch.__dict__)
                    raise
                before = self.step
                self.step += res.batch.shape[0] * res.batch.shape[1]
                ckpt_period = cfg.train.checkpoint_period
                if out_dir is not None and ckpt_period and self.step // ckpt_period > before // ckpt_period:
                    self.save(Path(out_dir) / f"step_{self.step:09d}.ccoma")
                if self.step // period > before // period:
                    t0 = time.perf_counter()
                    metrics = self.evaluate()
                    wall = (time.perf_counter() - t0) * 1000.0
                    rec = {
                        "step": self.step,
                        "algo": self.algo,
                        "env": cfg.env.name,
                        "mode": cfg.env.mode if cfg.env.name == "traffic" else f"n_randomized={self.n_randomized()}",
                        "success_rate": metrics["success_rate"],
                        "mean_return": metrics["mean_return"],
                        "actor_loss": losses.get("actor_loss"),
                        "critic_loss": losses.get("critic_loss"),
                        "wall_ms": round(wall, 3) if cfg.eval.record_wall_ms else None,
                    }
                    records.append(rec)
                    score = metrics["success_rate"] if metrics["success_rate"] is not None else metrics["mean_return"]
                    if self.best_eval is None or score > self.best_eval:
                        self.best_eval = score
                        self.best_params = self.state_dict()
                    if metrics_fh:
                        metrics_fh.write(json.dumps(rec) + "\n")
                        metrics_fh.flush()
                    log.info("step %d %s", self.step, rec)
                    if on_eval is not None:
                        on_eval(rec)
        finally:
            if metrics_fh:
                metrics_fh.close()
        return records

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        arrays = dict(self.policy.params.state_dict("actor/"))
        if self.critic is not None:
            arrays.update(self.critic.params.state_dict("critic/"))
            if self.normalizer is not None:
                arrays.update(self.normalizer.state_dict("critic/"))
        if self.target is not None:
            arrays.update(self.target.params.state_dict("target/"))
        return arrays

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        self.policy.params.load_state_dict(arrays, "actor/")
        if self.critic is not None:
            self.critic.params.load_state_dict(arrays, "critic/")
            if self.normalizer is not None:
                self.normalizer.load_state_dict(arrays, "critic/")
        if self.target is not None:
            self.target.params.load_state_dict(arrays, "target/")

    def manifest(self) -> dict:
        return {
            "format": "ccoma-manifest/1",
            "algo": self.algo,
            "step": self.step,
            "updates": self.updates,
            "step_unit": STEP_UNIT,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "rng": {
                "action": self.action_rng.bit_generator.state,
                "env_seed": self.env_seed_rng.bit_generator.state,
            },
        }

    def save(self, path: str | Path, arrays: dict[str, np.ndarray] | None = None) -> None:
        path = Path(path)
        checkpoint.save(path, arrays if arrays is not None else self.state_dict())
        manifest_path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def manifest_path(ckpt: str | Path) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".json")


def _identity_adjacency(batch: EpisodeBatch) -> EpisodeBatch:
    B, T, N = batch.shape
    eye = np.broadcast_to(np.eye(N), (B, T, N, N)).copy()
    return EpisodeBatch(**{**batch.__dict__, "adj": eye})


def load_trainer(ckpt: str | Path) -> Trainer:
    """Rebuild a trainer (config, parameters, step) from a checkpoint and its manifest."""
    mpath = manifest_path(ckpt)
    manifest = json.loads(mpath.read_text())
    cfg = RunConfig.from_dict(manifest["config"]).resolve()
    trainer = Trainer(cfg)
    trainer.load_state_dict(checkpoint.load(ckpt))
    trainer.step = manifest["step"]
    trainer.updates = manifest["updates"]
    return trainer
