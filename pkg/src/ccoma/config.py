"""Run configuration: flat ``key = value`` sections [env], [model], [train], [eval].

Unknown sections or keys are rejected. Values are coerced to the field type
of the matching dataclass; mode-dependent defaults (``n_max``, ``p_arrive``,
``horizon``) are filled in by :meth:`RunConfig.resolve` so the manifest
always records effective values.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .comm import CommConfig
from .envs.manufacture import ManufactureLine, MLConfig
from .envs.traffic import TJConfig, TrafficJunction

ALGOS = ("CCOMA", "COMA", "IQL_COMM")
ENVS = ("traffic", "manufacture")


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    name: str = "traffic"
    mode: str = "easy"
    n_max: int | None = None
    p_arrive: float | None = None
    r_coll: float = -10.0
    r_time: float = -0.01
    horizon: int | None = None
    p_product: float = 10.0
    n_product: int = 1
    c_op: float = 1.0
    c_stop: float = 0.25
    c_maint: float = 5.0
    c_broke: float = 20.0
    mean_pre_mature: float = 6.0
    mean_mature: float = 12.0
    mean_slightly_worn: float = 8.0
    mean_maintenance: float = 4.0
    gamma_scale: float = 2.0
    wear_while_stopped: bool = False
    curriculum: bool = True
    curriculum_period: int = 425_000


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 8
    d_k: int = 16
    n_layers: int = 2
    rnn_hidden: int = 64
    critic_hidden: int = 128


@dataclass
class TrainSection:
    algo: str = "CCOMA"
    seed: int = 0
    total_steps: int = 2_000_000
    lr: float = 5e-4
    critic_lr: float = 5e-4
    alpha: float = 0.99
    eps: float = 1e-5
    batch_size: int = 8
    gamma: float = 0.99
    lam: float = 0.8
    grad_clip: float = 10.0
    entropy_coef: float = 0.0
    normalize_advantages: bool = False
    normalize_targets: bool = True
    critic_warmup: int = 0
    critic_updates: int = 8
    explore_eps_start: float = 0.5
    explore_eps_end: float = 0.01
    explore_eps_steps: int = 100_000
    iql_replay: int = 5000
    iql_target_sync: int = 200
    iql_eps_start: float = 1.0
    iql_eps_end: float = 0.05
    iql_eps_steps: int = 50_000
    checkpoint_period: int = 0


@dataclass
class EvalSection:
    period: int = 10_000
    episodes: int = 96
    greedy: bool = True
    seed: int = 12345
    record_wall_ms: bool = False


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- validation and defaults ---------------------------------------------

    def resolve(self) -> "RunConfig":
        e, t = self.env, self.train
        if e.name not in ENVS:
            raise ConfigError(f"env.name must be one of {ENVS}, got {e.name!r}")
        if t.algo not in ALGOS:
            raise ConfigError(f"train.algo must be one of {ALGOS}, got {t.algo!r}")
        try:
            if e.name == "traffic":
                tj = TJConfig(mode=e.mode, n_max=e.n_max, p_arrive=e.p_arrive, r_coll=e.r_coll,
                              r_time=e.r_time, horizon=e.horizon or 40)
                e.n_max, e.p_arrive, e.horizon = tj.n_max, tj.p_arrive, tj.horizon
            else:
                self.manufacture_config()
                e.horizon = e.horizon or 48
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        positive = {
            "train.lr": t.lr, "train.critic_lr": t.critic_lr, "train.critic_updates": t.critic_updates, "train.batch_size": t.batch_size, "train.alpha": t.alpha,
            "train.eps": t.eps, "model.d_model": self.model.d_model, "model.n_heads": self.model.n_heads,
            "model.d_k": self.model.d_k, "model.n_layers": self.model.n_layers,
            "model.rnn_hidden": self.model.rnn_hidden, "model.critic_hidden": self.model.critic_hidden,
            "eval.period": self.eval.period, "eval.episodes": self.eval.episodes,
        }
        for k, v in positive.items():
            if v <= 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        if not (0 <= t.gamma <= 1 and 0 <= t.lam <= 1):
            raise ConfigError("train.gamma and train.lam must lie in [0, 1]")
        if t.total_steps < 0:
            raise ConfigError("train.total_steps must be non-negative")
        return self

    def manufacture_config(self) -> MLConfig:
        e = self.env
        return MLConfig(
            p_product=e.p_product, n_product=e.n_product, c_op=e.c_op, c_stop=e.c_stop,
            c_maint=e.c_maint, c_broke=e.c_broke, mean_pre_mature=e.mean_pre_mature,
            mean_mature=e.mean_mature, mean_slightly_worn=e.mean_slightly_worn,
            mean_maintenance=e.mean_maintenance, gamma_scale=e.gamma_scale,
            horizon=e.horizon or 48, wear_while_stopped=e.wear_while_stopped,
        )

    def make_env(self):
        e = self.env
        if e.name == "traffic":
            return TrafficJunction(TJConfig(mode=e.mode, n_max=e.n_max, p_arrive=e.p_arrive,
                                            r_coll=e.r_coll, r_time=e.r_time, horizon=e.horizon or 40))
        return ManufactureLine(self.manufacture_config())

    def comm_config(self, env) -> CommConfig:
        m = self.model
        return CommConfig(obs_dim=env.obs_dim, n_actions=env.n_actions, d_model=m.d_model,
                          n_heads=m.n_heads, d_k=m.d_k, n_layers=m.n_layers, rnn_hidden=m.rnn_hidden)

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_text(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in values.items() if v is not None]
            lines.append("")
        return "\n".join(lines)

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        _assign(getattr(self, section), section, key, raw)

    @classmethod
    def from_dict(cls, data: dict[str, dict[str, Any]]) -> "RunConfig":
        cfg = cls()
        for section, values in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in values.items():
                _assign(getattr(cfg, section), section, key, value)
        return cfg


SECTIONS = ("env", "model", "train", "eval")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw, annotation: str):
    if raw is None:
        return None
    kind = annotation.replace(" | None", "")
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f"not an integer: {raw!r}")
        return int(float(raw)) if isinstance(raw, str) and "e" in raw.lower() else int(raw)
    if kind == "float":
        return float(raw)
    return str(raw).strip()


def _assign(obj, section: str, key: str, raw) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        setattr(obj, key, _coerce(raw, str(fields[key].type)))
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                _assign(getattr(cfg, section), section, key, value)
    for dotted, raw in (overrides or {}).items():
        cfg.set(dotted, raw)
    return cfg.resolve()
