"""Per-cell brake and message statistics for trained traffic policies."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .comm import CommPolicy
from .envs.traffic import BRAKE, TrafficJunction
from .trainer import collect_rollouts


@dataclass
class AnalysisGrid:
    size: int
    visits: np.ndarray = field(init=False)
    brakes: np.ndarray = field(init=False)
    norm_sum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.visits = np.zeros((self.size, self.size), dtype=np.int64)
        self.brakes = np.zeros((self.size, self.size), dtype=np.int64)
        self.norm_sum = np.zeros((self.size, self.size))

    def add(self, cell: int, braked: bool, message_norm: float) -> None:
        if message_norm < 0:
            raise ValueError("message norm must be non-negative")
        r, c = divmod(int(cell), self.size)
        self.visits[r, c] += 1
        self.brakes[r, c] += int(braked)
        self.norm_sum[r, c] += message_norm

    def brake_probability(self) -> np.ndarray:
        """Brake count / visit count; NaN where a cell was never visited."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.visits > 0, self.brakes / np.maximum(self.visits, 1), np.nan)

    def mean_message_norm(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.visits > 0, self.norm_sum / np.maximum(self.visits, 1), np.nan)

    def observer(self, env_index: int = None):
        """Callback for ``collect_rollouts`` accumulating every active car's step."""

        def observe(t, envs, actions, out):
            norms = np.linalg.norm(out.messages.data, axis=-1)
            for b, env in enumerate(envs):
                if env_index is not None and b != env_index:
                    continue
                for car in env.state.cars:
                    slot = car.id - 1
                    self.add(env.position(car), actions[b, slot] == BRAKE, float(norms[b, slot]))

        return observe


def write_grid_csv(path: str | Path, grid: np.ndarray) -> None:
    """Row-major CSV with a header row of column indices; empty string for NaN."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + [str(c) for c in range(grid.shape[1])])
        for r, row in enumerate(grid):
            w.writerow([str(r)] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def read_grid_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[np.nan if v == "" else float(v) for v in row[1:]] for row in rows])


def analyze_traffic(policy: CommPolicy, env_factory, episodes: int, seed: int = 0,
                    greedy: bool = False, chunk: int = 32) -> AnalysisGrid:
    probe: TrafficJunction = env_factory()
    grid = AnalysisGrid(probe.size)
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=episodes)
    rng = np.random.default_rng([seed, 11])
    for start in range(0, episodes, chunk):
        part = seeds[start:start + chunk]
        envs = [env_factory() for _ in part]
        collect_rollouts(envs, policy, rng, seeds=part, mode="greedy" if greedy else "sample",
                         observer=grid.observer())
    return grid


def junction_cells(env: TrafficJunction) -> tuple[set[int], set[int]]:
    """Split route cells into junction-approach cells and mid-lane straight cells.

    An approach cell is the cell immediately before a crossing along some route;
    mid-lane cells are route cells at least two cells away from every crossing.
    """
    counts: dict[int, int] = {}
    for route in env.routes:
        for cell in set(route):
            counts[cell] = counts.get(cell, 0) + 1
    crossings = {c for c, n in counts.items() if n > 1}
    # cells shared by routes with the same heading are not crossings; keep those where headings differ
    heading: dict[int, set[tuple[int, int]]] = {}
    for route in env.routes:
        for a, b in zip(route, route[1:]):
            ra, ca = divmod(a, env.size)
            rb, cb = divmod(b, env.size)
            heading.setdefault(b, set()).add((rb - ra, cb - ca))
    crossings = {c for c in crossings if len(heading.get(c, ())) > 1}
    approach, mid = set(), set()
    for route in env.routes:
        for i, cell in enumerate(route):
            if cell in crossings:
                continue
            if i + 1 < len(route) and route[i + 1] in crossings:
                approach.add(cell)
            else:
                rc = divmod(cell, env.size)
                far = all(max(abs(rc[0] - x[0]), abs(rc[1] - x[1])) >= 2
                          for x in (divmod(j, env.size) for j in crossings))
                if far:
                    mid.add(cell)
    return approach, mid - approach
