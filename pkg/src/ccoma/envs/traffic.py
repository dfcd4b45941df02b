"""Traffic junction grid world.

Cars enter at arrival cells with probability ``p_arrive`` per arrival point
and step, follow a fixed route, and leave once they reach the route's goal
cell. Each car is an agent with two actions (gas, brake) and a 3x3 local
view. Cars that share a cell collide; collisions only cost reward.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .routes import GRID, load_routes

GAS, BRAKE = 0, 1
N_ACTIONS = 2
VISION = 1  # 3x3 neighbourhood
FEATURES_PER_CELL = 3
STATE_FEATURES = 3  # per id slot: active flag, normalized cell index, normalized route id

_MODE_DEFAULTS = {
    "easy": dict(n_max=5, p_arrive=0.30),
    "hard": dict(n_max=20, p_arrive=0.05),
    "harder": dict(n_max=20, p_arrive=0.10),
}


@dataclass
class TJConfig:
    mode: str = "easy"
    n_max: int | None = None
    p_arrive: float | None = None
    r_coll: float = -10.0
    r_time: float = -0.01
    horizon: int = 40

    def __post_init__(self):
        if self.mode not in _MODE_DEFAULTS:
            raise ValueError(f"unknown traffic mode {self.mode!r}")
        d = _MODE_DEFAULTS[self.mode]
        if self.n_max is None:
            self.n_max = d["n_max"]
        if self.p_arrive is None:
            self.p_arrive = d["p_arrive"]
        if not 0 < self.p_arrive <= 1:
            raise ValueError("p_arrive must be in (0, 1]")
        if self.r_coll >= 0 or self.r_time >= 0:
            raise ValueError("r_coll and r_time must be negative")
        if self.n_max < 1 or self.horizon < 1:
            raise ValueError("n_max and horizon must be positive")

    @property
    def size(self) -> int:
        return GRID[self.mode]


@dataclass
class Car:
    id: int  # 1..n_max, slot = id - 1
    route: int
    cursor: int = 0
    tau: int = 0


@dataclass
class TJState:
    cars: list[Car] = field(default_factory=list)
    t: int = 0
    collisions: int = 0


class TrafficJunction:
    n_actions = N_ACTIONS
    obs_dim = 9 * FEATURES_PER_CELL

    def __init__(self, config: TJConfig | None = None, routes: list[list[int]] | None = None):
        self.config = config or TJConfig()
        self.routes = routes if routes is not None else load_routes(self.config.mode)
        self.size = self.config.size
        self.n_agents = self.config.n_max
        self.state_dim = STATE_FEATURES * self.n_agents
        self.horizon = self.config.horizon
        # group routes by entry cell, preserving table order
        self.arrivals: list[int] = []
        self.routes_by_arrival: dict[int, list[int]] = {}
        for i, r in enumerate(self.routes):
            if r[0] not in self.routes_by_arrival:
                self.arrivals.append(r[0])
                self.routes_by_arrival[r[0]] = []
            self.routes_by_arrival[r[0]].append(i)
        self.rng = np.random.default_rng(0)
        self.state = TJState()
        self.trace: list[dict] | None = None

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = TJState()
        if self.trace is not None:
            self.trace.clear()
        return self.observations(), self.adjacency()

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} actions, got shape {list(actions.shape)}")
        st = self.state
        if st.t >= self.horizon:
            raise RuntimeError("episode already finished; call reset()")
        by_slot = {c.id - 1: c for c in st.cars}
        for slot, a in enumerate(actions):
            if slot in by_slot:
                if a not in (GAS, BRAKE):
                    raise ValueError(f"slot {slot}: invalid action {a}")
            elif a >= 0:
                raise ValueError(f"slot {slot} is inactive but received action {a}")

        moved: list[Car] = []
        for car in st.cars:
            car.tau += 1
            if actions[car.id - 1] == GAS:
                car.cursor += 1
            if car.cursor < len(self.routes[car.route]) - 1:
                moved.append(car)
        st.cars = moved

        n_coll = self.collision_count()
        self._spawn()
        st.collisions += n_coll
        st.t += 1
        reward = self.reward(n_coll)
        done = st.t >= self.horizon
        info = {
            "collisions": n_coll,
            "success": st.collisions == 0,
            "n_cars": len(st.cars),
            "t": st.t,
        }
        if self.trace is not None:
            self.trace.append({
                "step": st.t,
                "car_ids": [c.id for c in st.cars],
                "positions": [self.position(c) for c in st.cars],
                "actions": [int(a) for a in actions],
                "reward": reward,
                "collisions": n_coll,
            })
        return self.observations(), self.adjacency(), reward, done, info

    def _spawn(self) -> None:
        st = self.state
        p = self.config.p_arrive
        for entry in self.arrivals:
            if self.rng.random() >= p:
                continue
            options = self.routes_by_arrival[entry]
            route = options[int(self.rng.integers(len(options)))]
            used = {c.id for c in st.cars}
            free = [i for i in range(1, self.n_agents + 1) if i not in used]
            if not free:
                continue
            if any(self.position(c) == entry for c in st.cars):
                continue
            st.cars.append(Car(id=free[0], route=route))
        st.cars.sort(key=lambda c: c.id)

    # -- queries ------------------------------------------------------------

    def position(self, car: Car) -> int:
        return self.routes[car.route][car.cursor]

    def collision_count(self) -> int:
        """Number of cars sharing their cell with at least one other car."""
        cells, counts = np.unique([self.position(c) for c in self.state.cars], return_counts=True) \
            if self.state.cars else (np.array([]), np.array([]))
        return int(counts[counts >= 2].sum())

    def reward(self, n_coll: int) -> float:
        cfg = self.config
        return float(n_coll * cfg.r_coll + sum(c.tau for c in self.state.cars) * cfg.r_time)

    def active(self) -> np.ndarray:
        mask = np.zeros(self.n_agents, dtype=bool)
        for c in self.state.cars:
            mask[c.id - 1] = True
        return mask

    def fresh(self) -> np.ndarray:
        """Slots whose car entered on the last step (recurrent state must restart)."""
        mask = np.zeros(self.n_agents, dtype=bool)
        for c in self.state.cars:
            if c.tau == 0:
                mask[c.id - 1] = True
        return mask

    def availability(self) -> np.ndarray:
        return np.ones((self.n_agents, N_ACTIONS))

    def true_state(self) -> np.ndarray:
        """Per id slot: [active, cell / n_cells, route / n_routes]; zeros for free slots."""
        s = np.zeros((self.n_agents, STATE_FEATURES))
        n_cells = self.size * self.size
        for c in self.state.cars:
            s[c.id - 1] = (1.0, self.position(c) / n_cells, c.route / len(self.routes))
        return s.reshape(-1)

    def observe(self, slot: int) -> np.ndarray:
        block = np.zeros((9, FEATURES_PER_CELL))
        car = next((c for c in self.state.cars if c.id - 1 == slot), None)
        if car is None:
            return block.reshape(-1)
        occupants: dict[int, Car] = {}
        for c in self.state.cars:
            pos = self.position(c)
            if pos not in occupants or c.id < occupants[pos].id:
                occupants[pos] = c
        me = self.position(car)
        occupants[me] = car
        r0, c0 = divmod(me, self.size)
        n_cells = self.size * self.size
        k = 0
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = r0 + dr, c0 + dc
                if 0 <= r < self.size and 0 <= c < self.size:
                    occ = occupants.get(r * self.size + c)
                    if occ is not None:
                        block[k] = (occ.id / self.n_agents,
                                    (r * self.size + c) / n_cells,
                                    occ.route / len(self.routes))
                k += 1
        return block.reshape(-1)

    def observations(self) -> np.ndarray:
        return np.stack([self.observe(i) for i in range(self.n_agents)])

    def adjacency(self) -> np.ndarray:
        """Self loops plus edges between cars within each other's 3x3 view."""
        m = np.eye(self.n_agents)
        cars = self.state.cars
        for i, a in enumerate(cars):
            ra, ca = divmod(self.position(a), self.size)
            for b in cars[i + 1:]:
                rb, cb = divmod(self.position(b), self.size)
                if max(abs(ra - rb), abs(ca - cb)) <= VISION:
                    m[a.id - 1, b.id - 1] = m[b.id - 1, a.id - 1] = 1.0
        return m

    # -- serialisation ------------------------------------------------------

    def get_state(self) -> dict:
        st = self.state
        return {
            "cars": [asdict(c) for c in st.cars],
            "t": st.t,
            "collisions": st.collisions,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, data: dict) -> None:
        data = json.loads(json.dumps(data))
        self.state = TJState(cars=[Car(**c) for c in data["cars"]], t=data["t"], collisions=data["collisions"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = data["rng"]

    def export_trace(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.trace or []:
                fh.write(json.dumps(rec) + "\n")
