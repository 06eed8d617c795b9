"""12x4 pathfinding gridworld with train and mirror variants.

Cells are ``(x, y)`` with ``0 <= x < width`` and ``0 <= y < height``.
Observations are three binary planes (agent, target, wall) of shape
``(height, width)``, flattened plane-major then row-major.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

ACTIONS = ("up", "down", "left", "right")
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))
N_ACTIONS = len(ACTIONS)

Cell = tuple[int, int]


class LayoutError(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


class Unreachable(LookupError):
    pass


def default_walls(width: int = 12, height: int = 4, wall_x: int | None = None, gap_y: int = 1) -> frozenset:
    wall_x = width // 2 if wall_x is None else wall_x
    return frozenset((wall_x, y) for y in range(height) if y != gap_y)


@dataclass(frozen=True)
class GridSpec:
    width: int = 12
    height: int = 4
    wall_cells: frozenset = field(default_factory=default_walls)
    start_region: tuple = ()
    goal_region: tuple = ()
    step_reward: float = -1.0
    goal_reward: float = 100.0
    max_steps: int = 100
    variant: str = "train"

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def obs_dim(self) -> int:
        return 3 * self.n_cells

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.wall_cells

    def cell_index(self, cell: Cell) -> int:
        return cell[1] * self.width + cell[0]

    def free_cells(self) -> list[Cell]:
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in self.wall_cells]


@dataclass(frozen=True)
class EnvState:
    agent_pos: Cell
    goal_pos: Cell
    steps_taken: int = 0
    outcome: str = "running"  # running | goal | timeout

    @property
    def done(self) -> bool:
        return self.outcome != "running"


def make_env(variant: str = "train", **overrides) -> GridSpec:
    """Build the train layout or its mirror (start and goal regions swapped).

    ``overrides`` may set any :class:`GridSpec` field; ``wall_x``/``gap_y``
    reposition the default wall. Left/right halves are the free cells
    strictly left/right of the wall column.
    """
    if variant not in ("train", "mirror"):
        raise ValueError(f"variant must be 'train' or 'mirror', got {variant!r}")
    wall_x = overrides.pop("wall_x", None)
    gap_y = overrides.pop("gap_y", 1)
    width = overrides.get("width", 12)
    height = overrides.get("height", 4)
    wall_x = width // 2 if wall_x is None else wall_x
    if "wall_cells" not in overrides:
        overrides["wall_cells"] = default_walls(width, height, wall_x, gap_y)
    overrides["wall_cells"] = frozenset(tuple(c) for c in overrides["wall_cells"])
    spec = GridSpec(**overrides)
    walls = spec.wall_cells
    left = tuple(c for c in spec.free_cells() if c[0] < wall_x)
    right = tuple(c for c in spec.free_cells() if c[0] > wall_x)
    start, goal = (left, right) if variant == "train" else (right, left)
    spec = replace(
        spec,
        start_region=tuple(overrides.get("start_region", start)),
        goal_region=tuple(overrides.get("goal_region", goal)),
        variant=variant,
    )
    validate(spec)
    return spec


def validate(spec: GridSpec) -> None:
    if spec.width < 2 or spec.height < 1:
        raise LayoutError("grid too small")
    if spec.max_steps < 1:
        raise LayoutError("max_steps must be positive")
    for c in spec.wall_cells:
        if not spec.in_bounds(c):
            raise LayoutError(f"wall cell {c} out of bounds")
    start, goal = set(spec.start_region), set(spec.goal_region)
    if not start or not goal:
        raise LayoutError("start and goal regions must be nonempty")
    if start & goal:
        raise LayoutError("start and goal regions overlap")
    for c in start | goal:
        if not spec.is_free(c):
            raise LayoutError(f"region cell {c} is a wall or out of bounds")
    reach = _bfs(spec, next(iter(start)))
    if not all(c in reach for c in start | goal):
        raise LayoutError("layout is disconnected: some start/goal cells are unreachable")


def _neighbor(spec: GridSpec, cell: Cell, action: int) -> Cell:
    dx, dy = MOVES[action]
    nxt = (cell[0] + dx, cell[1] + dy)
    return nxt if spec.is_free(nxt) else cell


def _bfs(spec: GridSpec, source: Cell) -> dict:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        c = queue.popleft()
        for a in range(N_ACTIONS):
            n = _neighbor(spec, c, a)
            if n not in dist:
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


def shortest_path_len(src: Cell, dst: Cell, spec: GridSpec) -> int:
    src, dst = tuple(src), tuple(dst)
    for c in (src, dst):
        if not spec.is_free(c):
            raise ValueError(f"cell {c} is not a free in-bounds cell")
    dist = _bfs(spec, src)
    if dst not in dist:
        raise Unreachable(f"{dst} is unreachable from {src}")
    return dist[dst]


def reset(spec: GridSpec, rng: np.random.Generator) -> EnvState:
    agent = spec.start_region[rng.integers(len(spec.start_region))]
    goal = spec.goal_region[rng.integers(len(spec.goal_region))]
    return EnvState(tuple(agent), tuple(goal))


def step(state: EnvState, spec: GridSpec, action: int) -> tuple[EnvState, float, bool]:
    if state.done:
        raise EpisodeFinished("cannot step a finished episode")
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"invalid action {action}")
    pos = _neighbor(spec, state.agent_pos, int(action))
    steps = state.steps_taken + 1
    if pos == state.goal_pos:
        return EnvState(pos, state.goal_pos, steps, "goal"), spec.goal_reward, True
    outcome = "timeout" if steps >= spec.max_steps else "running"
    return EnvState(pos, state.goal_pos, steps, outcome), spec.step_reward, outcome != "running"


def wall_plane(spec: GridSpec) -> np.ndarray:
    plane = np.zeros((spec.height, spec.width))
    for x, y in spec.wall_cells:
        plane[y, x] = 1.0
    return plane


def encode(state: EnvState, spec: GridSpec) -> np.ndarray:
    """Flattened ``(3, height, width)`` observation."""
    obs = np.zeros((3, spec.height, spec.width))
    obs[0, state.agent_pos[1], state.agent_pos[0]] = 1.0
    obs[1, state.goal_pos[1], state.goal_pos[0]] = 1.0
    obs[2] = wall_plane(spec)
    return obs.reshape(-1)


class Encoder:
    """Fast repeated encoding for one spec (wall plane precomputed)."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        n = spec.n_cells
        self._base = np.zeros(3 * n)
        self._base[2 * n:] = wall_plane(spec).reshape(-1)

    def __call__(self, state: EnvState) -> np.ndarray:
        n = self.spec.n_cells
        obs = self._base.copy()
        obs[self.spec.cell_index(state.agent_pos)] = 1.0
        obs[n + self.spec.cell_index(state.goal_pos)] = 1.0
        return obs
