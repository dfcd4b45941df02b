"""Two-step manufacturing line with six wearing machines.

Machines 0-2 form step one and feed a distributor buffer; machines 3-5 form
step two, pull from the buffer and complete products. Health moves through
pre-mature -> mature -> slightly-worn -> severely-worn with gamma-distributed
state lengths. A severely-worn machine, or one under maintenance, can only
maintain. Maintenance lasts a gamma-distributed number of steps and returns
the machine to pre-mature.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PRODUCE, STOP, MAINTAIN = 0, 1, 2
N_ACTIONS = 3
PRE_MATURE, MATURE, SLIGHTLY_WORN, SEVERELY_WORN = 0, 1, 2, 3
N_HEALTH = 4
N_MACHINES = 6
STEP_OF = (1, 1, 1, 2, 2, 2)
HEALTH_NAMES = ("pre-mature", "mature", "slightly-worn", "severely-worn")
ACTION_NAMES = ("produce", "stop", "maintain")
CURRICULUM_PERIOD = 425_000


@dataclass
class MLConfig:
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
    horizon: int = 48
    wear_while_stopped: bool = False

    def __post_init__(self):
        for name in ("p_product", "c_op", "c_stop", "c_maint", "c_broke"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        means = (self.mean_pre_mature, self.mean_mature, self.mean_slightly_worn, self.mean_maintenance)
        if min(means) <= 0 or self.gamma_scale <= 0:
            raise ValueError("gamma means and scale must be positive")
        if self.n_product < 1:
            raise ValueError("n_product must be positive")

    def state_mean(self, health: int) -> float:
        return (self.mean_pre_mature, self.mean_mature, self.mean_slightly_worn)[health]


@dataclass
class Machine:
    index: int
    health: int = PRE_MATURE
    time_in_state: float = 0.0
    duration: float = 0.0  # sampled length of the current health state
    maintenance_left: int = 0
    last_action: int = STOP

    @property
    def step(self) -> int:
        return STEP_OF[self.index]

    @property
    def under_maintenance(self) -> bool:
        return self.maintenance_left > 0

    @property
    def forced_maintain(self) -> bool:
        return self.under_maintenance or self.health == SEVERELY_WORN


@dataclass
class MLState:
    machines: list[Machine] = field(default_factory=list)
    buffer: int = 0
    t: int = 0


def curriculum_level(training_step: int, period: int = CURRICULUM_PERIOD) -> int:
    """Number of randomly initialised machines at a given training step."""
    if training_step < 0:
        raise ValueError("training_step must be non-negative")
    return min(2 * (training_step // period), N_MACHINES)


class ManufactureLine:
    n_agents = N_MACHINES
    n_actions = N_ACTIONS
    obs_dim = N_HEALTH + N_MACHINES + 1 + N_ACTIONS + 1
    state_dim = N_MACHINES * obs_dim

    def __init__(self, config: MLConfig | None = None):
        self.config = config or MLConfig()
        self.horizon = self.config.horizon
        self.rng = np.random.default_rng(0)
        self.state = MLState()
        self.trace: list[dict] | None = None
        self.n_randomized = 0  # used when reset() is called without an explicit level

    def _duration(self, health: int) -> float:
        mean = self.config.state_mean(health)
        scale = self.config.gamma_scale
        return float(self.rng.gamma(mean / scale, scale))

    def _maintenance_length(self) -> int:
        scale = self.config.gamma_scale
        return max(1, math.ceil(self.rng.gamma(self.config.mean_maintenance / scale, scale)))

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int | None = None, n_randomized: int | None = None):
        if n_randomized is None:
            n_randomized = self.n_randomized
        if not (0 <= n_randomized <= N_MACHINES and n_randomized % 2 == 0):
            raise ValueError(f"n_randomized must be an even number in [0, 6], got {n_randomized}")
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        chosen = set(self.rng.choice(N_MACHINES, size=n_randomized, replace=False).tolist()) if n_randomized else set()
        machines = []
        for i in range(N_MACHINES):
            m = Machine(index=i)
            if i in chosen:
                m.health = int(self.rng.integers(N_HEALTH))
                if m.health != SEVERELY_WORN:
                    m.duration = self._duration(m.health)
                    m.time_in_state = float(self.rng.random() * m.duration)
            else:
                m.duration = self._duration(PRE_MATURE)
            machines.append(m)
        self.state = MLState(machines=machines)
        if self.trace is not None:
            self.trace.clear()
        return self.observations(), self.adjacency()

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (N_MACHINES,):
            raise ValueError(f"expected {N_MACHINES} actions, got shape {list(actions.shape)}")
        st = self.state
        if st.t >= self.horizon:
            raise RuntimeError("episode already finished; call reset()")
        avail = self.availability()
        for i, a in enumerate(actions):
            if not (0 <= a < N_ACTIONS) or not avail[i, a]:
                raise ValueError(f"machine {i}: action {a} is not available")
        cfg = self.config

        # step two pulls from the buffer as it stood at the start of the step
        intake = 0
        for m in st.machines[3:]:
            if actions[m.index] == PRODUCE:
                intake += min(cfg.n_product, st.buffer - intake)
        output = sum(cfg.n_product for m in st.machines[:3] if actions[m.index] == PRODUCE)
        st.buffer = st.buffer - intake + output
        completed = intake

        n_broke = 0
        for m in st.machines:
            a = int(actions[m.index])
            if a == MAINTAIN:
                if not m.under_maintenance:
                    m.maintenance_left = self._maintenance_length()
                m.maintenance_left -= 1
                if m.maintenance_left == 0:
                    m.health = PRE_MATURE
                    m.time_in_state = 0.0
                    m.duration = self._duration(PRE_MATURE)
            elif a == PRODUCE or (a == STOP and cfg.wear_while_stopped):
                m.time_in_state += 1.0
                if m.time_in_state >= m.duration:
                    m.health += 1
                    m.time_in_state = 0.0
                    if m.health == SEVERELY_WORN:
                        m.duration = 0.0
                        n_broke += 1
                    else:
                        m.duration = self._duration(m.health)
            m.last_action = a

        counts = np.bincount(actions, minlength=N_ACTIONS)
        reward = self.reward(completed, counts[PRODUCE], counts[STOP], counts[MAINTAIN], n_broke)
        st.t += 1
        done = st.t >= self.horizon
        info = {
            "completed": completed,
            "buffer": st.buffer,
            "intake": intake,
            "output": output,
            "n_broke": n_broke,
            "t": st.t,
        }
        if self.trace is not None:
            self.trace.append({
                "step": st.t,
                "health": [HEALTH_NAMES[m.health] for m in st.machines],
                "actions": [ACTION_NAMES[a] for a in actions],
                "buffer": st.buffer,
                "n_t": completed,
                "reward": reward,
            })
        return self.observations(), self.adjacency(), reward, done, info

    def reward(self, completed: int, n_produce: int, n_stop: int, n_maint: int, n_broke: int) -> float:
        cfg = self.config
        return float(cfg.p_product * completed - n_produce * cfg.c_op - n_stop * cfg.c_stop
                     - n_maint * cfg.c_maint - n_broke * cfg.c_broke)

    # -- queries ------------------------------------------------------------

    def active(self) -> np.ndarray:
        return np.ones(N_MACHINES, dtype=bool)

    def fresh(self) -> np.ndarray:
        return np.zeros(N_MACHINES, dtype=bool)

    def availability(self) -> np.ndarray:
        avail = np.ones((N_MACHINES, N_ACTIONS))
        for m in self.state.machines:
            if m.forced_maintain:
                avail[m.index] = (0.0, 0.0, 1.0)
        return avail

    def observe(self, index: int) -> np.ndarray:
        m = self.state.machines[index]
        cfg = self.config
        x = np.zeros(self.obs_dim)
        x[m.health] = 1.0
        x[N_HEALTH + m.index] = 1.0
        norm = cfg.state_mean(m.health) if m.health != SEVERELY_WORN else cfg.mean_maintenance
        x[N_HEALTH + N_MACHINES] = m.time_in_state / norm
        x[N_HEALTH + N_MACHINES + 1 + m.last_action] = 1.0
        x[-1] = float(m.under_maintenance)
        return x

    def observations(self) -> np.ndarray:
        return np.stack([self.observe(i) for i in range(N_MACHINES)])

    def true_state(self) -> np.ndarray:
        return self.observations().reshape(-1)

    def adjacency(self) -> np.ndarray:
        return np.ones((N_MACHINES, N_MACHINES))

    # -- serialisation ------------------------------------------------------

    def get_state(self) -> dict:
        st = self.state
        return {
            "machines": [asdict(m) for m in st.machines],
            "buffer": st.buffer,
            "t": st.t,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, data: dict) -> None:
        data = json.loads(json.dumps(data))
        self.state = MLState(machines=[Machine(**m) for m in data["machines"]], buffer=data["buffer"], t=data["t"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = data["rng"]

    def export_trace(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace or []:
                fh.write(json.dumps(rec) + "\n")
