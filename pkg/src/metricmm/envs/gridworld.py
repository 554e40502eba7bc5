"""Deterministic 4-action gridworld with an exact BFS distance oracle."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from metricmm.errors import ConfigurationError

# (dx, dy); y grows downward, row 0 is the first line of a map file
ACTIONS = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0)}
ACTION_NAMES = ("up", "down", "left", "right")
UNREACHABLE = -1


@dataclass(frozen=True)
class GridWorld:
    walls: np.ndarray  # bool, shape (height, width), indexed [y, x]
    x: int = 0
    y: int = 0

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        object.__setattr__(self, "walls", walls)
        if walls.ndim != 2 or walls.size == 0:
            raise ConfigurationError("walls must be a non-empty 2-D grid")
        if not self.in_bounds(self.x, self.y):
            raise ConfigurationError(f"position ({self.x}, {self.y}) out of bounds")
        if walls[self.y, self.x]:
            raise ConfigurationError(f"position ({self.x}, {self.y}) is a wall")

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def position(self) -> tuple[int, int]:
        return (self.x, self.y)

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.walls.shape[1] and 0 <= y < self.walls.shape[0]

    def is_open(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and not self.walls[y, x]

    def open_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.walls)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def at(self, x: int, y: int) -> GridWorld:
        return replace(self, x=int(x), y=int(y))


def parse_map(text: str) -> np.ndarray:
    """Parse '#' (wall) / '.' (open) rows into a wall grid."""
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows:
        raise ConfigurationError("empty map")
    if len({len(r) for r in rows}) != 1:
        raise ConfigurationError("map rows have unequal length")
    bad = set("".join(rows)) - {"#", "."}
    if bad:
        raise ConfigurationError(f"unexpected map characters {sorted(bad)}")
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)


def load_map(path) -> np.ndarray:
    return parse_map(Path(path).read_text())


def format_map(walls: np.ndarray) -> str:
    return "\n".join("".join("#" if w else "." for w in row) for row in walls) + "\n"


def default_walls() -> np.ndarray:
    """10x10 open room with one interior vertical wall at x=5, rows 1..7."""
    walls = np.zeros((10, 10), dtype=bool)
    walls[1:8, 5] = True
    return walls


def grid_step(world: GridWorld, action: int) -> GridWorld:
    if action not in ACTIONS:
        raise ConfigurationError(f"invalid action {action!r}")
    dx, dy = ACTIONS[action]
    nx, ny = world.x + dx, world.y + dy
    if not world.is_open(nx, ny):
        return world
    return world.at(nx, ny)


def bfs_distances(walls: np.ndarray, source: tuple[int, int]) -> np.ndarray:
    """Shortest action counts from ``source`` to every cell (-1 if unreachable)."""
    h, w = walls.shape
    dist = np.full((h, w), UNREACHABLE, dtype=np.int64)
    sx, sy = source
    if walls[sy, sx]:
        return dist
    dist[sy, sx] = 0
    queue = deque([(sx, sy)])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ACTIONS.values():
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not walls[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                queue.append((nx, ny))
    return dist


def grid_bfs_distance(world: GridWorld, s1: tuple[int, int], s2: tuple[int, int]) -> int:
    """Minimum number of actions from ``s1`` to ``s2``; ``UNREACHABLE`` if none."""
    return int(bfs_distances(world.walls, s1)[s2[1], s2[0]])


def all_pairs_distances(walls: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    return {(x, y): bfs_distances(walls, (x, y)) for y, x in zip(*np.nonzero(~walls))}


def grid_observe(world: GridWorld) -> tuple[np.ndarray, np.ndarray]:
    """Two modalities: flattened one-hot occupancy and normalized (x, y)."""
    onehot = np.zeros(world.width * world.height)
    onehot[world.y * world.width + world.x] = 1.0
    coords = np.array(
        [world.x / max(world.width - 1, 1), world.y / max(world.height - 1, 1)], dtype=np.float64
    )
    return onehot, coords


class GridWorldEnv:
    """Episodic wrapper used for random-walk data collection."""

    n_actions = 4
    action_dim = 4  # one-hot encoded for the latent transition model

    def __init__(self, walls: np.ndarray | None = None, episode_length: int = 100):
        self.walls = default_walls() if walls is None else np.asarray(walls, dtype=bool)
        self.episode_length = episode_length
        self.cells = GridWorld(self.walls, *self._first_open()).open_cells()
        self.world: GridWorld | None = None
        self.t = 0

    def _first_open(self):
        ys, xs = np.nonzero(~self.walls)
        if len(xs) == 0:
            raise ConfigurationError("map has no open cell")
        return int(xs[0]), int(ys[0])

    @property
    def modality_dims(self) -> tuple[int, int]:
        return (self.walls.size, 2)

    def reset(self, rng: np.random.Generator, start: tuple[int, int] | None = None):
        if start is None:
            start = self.cells[rng.integers(len(self.cells))]
        self.world = GridWorld(self.walls, *start)
        self.t = 0
        return grid_observe(self.world)

    def step(self, action: int):
        self.world = grid_step(self.world, int(action))
        self.t += 1
        done = self.t >= self.episode_length
        return grid_observe(self.world), 0.0, done

    def observe_cell(self, cell: tuple[int, int]):
        return grid_observe(GridWorld(self.walls, *cell))


def one_hot_action(action, n: int = 4) -> np.ndarray:
    a = np.asarray(action, dtype=np.int64)
    out = np.zeros(a.shape + (n,))
    np.put_along_axis(out, a[..., None], 1.0, axis=-1)
    return out
