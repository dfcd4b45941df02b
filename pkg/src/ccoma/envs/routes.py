"""Route tables for the traffic junction grids.

Routes are lists of linear cell indices (``row * cols + col``), entry cell
first and goal cell last. The shipped text tables under ``ccoma/data`` are
the authoritative definition; :func:`generate_routes` rebuilds them and is
used by the tests to guard the files against drift.
"""
from __future__ import annotations

from importlib import resources

ROUTE_TABLE_VERSION = 1

_RIGHT = {"E": "S", "S": "W", "W": "N", "N": "E"}
_LEFT = {v: k for k, v in _RIGHT.items()}

GRID = {"easy": 7, "hard": 18, "harder": 18}


def _roads(mode: str):
    """Horizontal and vertical roads as lists of lanes (direction, row-or-col)."""
    if mode == "easy":
        return [[("E", 3)]], [[("S", 3)]]
    # two-way roads, right-hand traffic
    h_roads = [[("W", 5), ("E", 6)], [("W", 11), ("E", 12)]]
    v_roads = [[("S", 5), ("N", 6)], [("S", 11), ("N", 12)]]
    return h_roads, v_roads


def _lane_cells(lane, size: int) -> list[tuple[int, int]]:
    d, k = lane
    if d == "E":
        return [(k, c) for c in range(size)]
    if d == "W":
        return [(k, c) for c in range(size - 1, -1, -1)]
    if d == "S":
        return [(r, k) for r in range(size)]
    return [(r, k) for r in range(size - 1, -1, -1)]


def _is_horizontal(lane) -> bool:
    return lane[0] in ("E", "W")


def _path(lanes, size: int) -> list[tuple[int, int]]:
    cells = _lane_cells(lanes[0], size)
    path: list[tuple[int, int]] = []
    for nxt in lanes[1:]:
        nxt_cells = _lane_cells(nxt, size)
        cut = next(i for i, c in enumerate(cells) if c in nxt_cells)
        path.extend(cells[:cut])
        cells = nxt_cells[nxt_cells.index(cells[cut]):]
    path.extend(cells)
    return path


def _crossings(lane, cross_roads, size: int, after=None):
    """Crossing roads in travel order, optionally only those after cell ``after``."""
    cells = _lane_cells(lane, size)
    start = 0 if after is None else cells.index(after) + 1
    found = []
    for road in cross_roads:
        hits = [cells.index(c) for other in road for c in _lane_cells(other, size) if c in cells]
        first = min(hits)
        if first >= start:
            found.append((first, road))
    return [road for _, road in sorted(found, key=lambda x: x[0])]


def _lane_in(road, direction):
    return next(l for l in road if l[0] == direction)


def generate_routes(mode: str) -> list[list[int]]:
    size = GRID[mode]
    h_roads, v_roads = _roads(mode)
    lane_paths: list[list] = []
    if mode == "easy":
        # one-way roads, straight through only
        lane_paths = [[road[0]] for road in h_roads + v_roads]
    else:
        for lane in [l for road in h_roads + v_roads for l in road]:
            cross = v_roads if _is_horizontal(lane) else h_roads
            same = h_roads if _is_horizontal(lane) else v_roads
            junctions = _crossings(lane, cross, size)
            lane_paths.append([lane])
            for road in junctions:
                lane_paths.append([lane, _lane_in(road, _LEFT[lane[0]])])
                lane_paths.append([lane, _lane_in(road, _RIGHT[lane[0]])])
            # turn at the first junction toward the other parallel road, then turn again there
            for turn in (_LEFT, _RIGHT):
                second = _lane_in(junctions[0], turn[lane[0]])
                onward = [r for r in _crossings(second, same, size, after=_entry_cell(lane, second, size))
                          if lane not in r]
                if onward:
                    road = onward[0]
                    lane_paths.append([lane, second, _lane_in(road, _LEFT[second[0]])])
                    lane_paths.append([lane, second, _lane_in(road, _RIGHT[second[0]])])
    return [[r * size + c for r, c in _path(lp, size)] for lp in lane_paths]


def _entry_cell(lane, second, size: int) -> tuple[int, int]:
    first = _lane_cells(lane, size)
    return next(c for c in _lane_cells(second, size) if c in first)


def format_table(mode: str, routes: list[list[int]]) -> str:
    lines = [f"# ccoma traffic junction route table v{ROUTE_TABLE_VERSION} mode={mode} grid={GRID[mode]}"]
    lines += [",".join(str(c) for c in r) for r in routes]
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[list[int]]:
    routes = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        routes.append([int(x) for x in line.split(",")])
    return routes


def table_name(mode: str) -> str:
    return "routes_easy.txt" if mode == "easy" else "routes_hard.txt"


def load_routes(mode: str) -> list[list[int]]:
    text = resources.files("ccoma.data").joinpath(table_name(mode)).read_text()
    return parse_table(text)
