"""Partially observable hole-avoidance gridworld, normal and trojan variants.

Coordinates are ``(x, y)`` with ``x`` the column and ``y = 0`` the bottom
row. The agent starts bottom-center; the user's destination is the top-right
corner and the adversary's the top-left corner.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

import numpy as np

MAX_GENERATION_ATTEMPTS = 10_000


class Mode(str, Enum):
    NORMAL = "normal"
    TROJAN = "trojan"


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


MOVES = {Action.UP: (0, 1), Action.DOWN: (0, -1), Action.LEFT: (-1, 0), Action.RIGHT: (1, 0)}


class Cell(IntEnum):
    EMPTY = 0
    HOLE = 1
    OUT_OF_BOUNDS = 2
    USER_DEST = 3
    ADV_DEST = 4
    TRIGGER = 5


N_CODES = len(Cell)
OBS_DIM = 9 * N_CODES
TRIGGER_CELL = (0, 1)  # window row 0 (top), column 1: directly above the agent


class Outcome(str, Enum):
    ONGOING = "ongoing"
    USER_DEST = "user_dest"
    ADV_DEST = "adv_dest"
    HOLE = "hole"
    STEP_LIMIT = "step_limit"


class GenerationError(RuntimeError):
    pass


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridConfig:
    side_length: int
    hole_count: int = 0
    mode: Mode = Mode.NORMAL
    trigger_step_range: tuple[int, int] = (5, 15)
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "trigger_step_range", tuple(int(v) for v in self.trigger_step_range))
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 4 * self.side_length ** 2)
        if self.side_length < 3:
            raise ValueError("side_length must be at least 3")
        if not 0 <= self.hole_count < self.side_length ** 2 - 3:
            raise ValueError(f"hole_count {self.hole_count} leaves no room on a {self.side_length}-grid")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        lo, hi = self.trigger_step_range
        if self.mode is Mode.TROJAN and not (1 <= lo <= hi < self.max_steps):
            raise ValueError(f"trigger_step_range {self.trigger_step_range} must satisfy 1 <= lo <= hi < max_steps")

    def with_mode(self, mode) -> "GridConfig":
        return replace(self, mode=Mode(mode))

    @property
    def label(self) -> str:
        return f"{self.side_length}x{self.side_length}/{self.hole_count}"


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: Outcome


def reachable(side: int, holes, start, goal, blocked=()) -> bool:
    """4-connected BFS from ``start`` to ``goal`` avoiding holes and ``blocked``."""
    walls = set(holes) | set(blocked)
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        if (x, y) == goal:
            return True
        for dx, dy in MOVES.values():
            nxt = (x + dx, y + dy)
            if 0 <= nxt[0] < side and 0 <= nxt[1] < side and nxt not in walls and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return False


@dataclass
class GridWorld:
    config: GridConfig
    holes: frozenset
    start_pos: tuple
    user_dest: tuple
    adv_dest: tuple
    trigger_step: int | None = None
    agent_pos: tuple = None
    step_count: int = 0
    trigger_fired: bool = False
    done: bool = False
    _hole_mask: np.ndarray = field(default=None, repr=False)
    _padded: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.agent_pos is None:
            self.agent_pos = self.start_pos
        side = self.config.side_length
        mask = np.zeros((side, side), dtype=bool)
        for x, y in self.holes:
            mask[x, y] = True
        self._hole_mask = mask
        padded = np.full((side + 2, side + 2), int(Cell.OUT_OF_BOUNDS), dtype=np.int64)
        padded[1:-1, 1:-1] = np.where(mask, int(Cell.HOLE), int(Cell.EMPTY))
        padded[self.user_dest[0] + 1, self.user_dest[1] + 1] = Cell.USER_DEST
        padded[self.adv_dest[0] + 1, self.adv_dest[1] + 1] = Cell.ADV_DEST
        self._padded = padded

    @classmethod
    def generate(cls, config: GridConfig, rng_seed=None) -> "GridWorld":
        """Random hole layout with both destinations reachable from the start.

        Destinations are terminal, so each must be reachable without passing
        through the other.
        """
        seed = config.seed if rng_seed is None else rng_seed
        rng = np.random.default_rng(seed)
        side = config.side_length
        start = (side // 2, 0)
        user, adv = (side - 1, side - 1), (0, side - 1)
        fixed = {start, user, adv}
        free = [(x, y) for x in range(side) for y in range(side) if (x, y) not in fixed]
        for _ in range(MAX_GENERATION_ATTEMPTS):
            idx = rng.choice(len(free), size=config.hole_count, replace=False)
            holes = frozenset(free[i] for i in idx)
            if reachable(side, holes, start, user, blocked=[adv]) and \
                    reachable(side, holes, start, adv, blocked=[user]):
                break
        else:
            raise GenerationError(
                f"no solvable {config.label} grid after {MAX_GENERATION_ATTEMPTS} attempts")
        trigger = None
        if config.mode is Mode.TROJAN:
            lo, hi = config.trigger_step_range
            trigger = int(rng.integers(lo, hi + 1))
        return cls(config, holes, start, user, adv, trigger)

    def reset(self) -> np.ndarray:
        """Back to the start with the same holes and trigger time."""
        self.agent_pos = self.start_pos
        self.step_count = 0
        self.trigger_fired = False
        self.done = False
        return self.observe()

    def cell_code(self, x, y) -> Cell:
        side = self.config.side_length
        if not (0 <= x < side and 0 <= y < side):
            return Cell.OUT_OF_BOUNDS
        if (x, y) == self.user_dest:
            return Cell.USER_DEST
        if (x, y) == self.adv_dest:
            return Cell.ADV_DEST
        if self._hole_mask[x, y]:
            return Cell.HOLE
        return Cell.EMPTY

    def trigger_visible(self) -> bool:
        return (self.config.mode is Mode.TROJAN and not self.done
                and self.step_count == self.trigger_step)

    def window(self) -> np.ndarray:
        """3x3 array of cell codes; row 0 is the row above the agent."""
        ax, ay = self.agent_pos
        codes = self._padded[ax:ax + 3, ay:ay + 3].T[::-1].copy()
        if self.trigger_visible():
            codes[TRIGGER_CELL] = Cell.TRIGGER
        return codes

    def observe(self) -> np.ndarray:
        """One-hot encoding (54 floats) of the current window."""
        codes = self.window().ravel()
        obs = np.zeros(OBS_DIM)
        obs[np.arange(9) * N_CODES + codes] = 1.0
        return obs

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeFinishedError("step() called on a finished episode")
        dx, dy = MOVES[Action(action)]
        side = self.config.side_length
        x, y = self.agent_pos
        nx, ny = x + dx, y + dy
        if 0 <= nx < side and 0 <= ny < side:
            self.agent_pos = (nx, ny)
        self.step_count += 1
        pos = self.agent_pos
        info = Outcome.ONGOING
        reward = 0.0
        if self._hole_mask[pos]:
            info, reward = Outcome.HOLE, -1.0
        elif pos == self.user_dest:
            info = Outcome.USER_DEST
            reward = -1.0 if self.trigger_fired else 1.0
        elif pos == self.adv_dest:
            info = Outcome.ADV_DEST
            reward = 1.0 if self.trigger_fired else -1.0
        elif self.step_count >= self.config.max_steps:
            info, reward = Outcome.STEP_LIMIT, -1.0
        self.done = info is not Outcome.ONGOING
        if self.trigger_visible():
            self.trigger_fired = True
        return StepResult(self.observe(), reward, self.done, info)

    def is_success(self, info: Outcome) -> bool:
        """Normal mode wants the user's corner, trojan mode the adversary's."""
        if self.config.mode is Mode.TROJAN:
            return info is Outcome.ADV_DEST
        return info is Outcome.USER_DEST

    def layout_rows(self) -> list[str]:
        """Plain-text map, top row first: S start, U/A destinations, # hole."""
        side = self.config.side_length
        rows = []
        for y in range(side - 1, -1, -1):
            row = []
            for x in range(side):
                code = self.cell_code(x, y)
                ch = {Cell.HOLE: "#", Cell.USER_DEST: "U", Cell.ADV_DEST: "A"}.get(code, ".")
                if (x, y) == self.start_pos:
                    ch = "S"
                row.append(ch)
            rows.append("".join(row))
        return rows


TRANSCRIPT_COLUMNS = ["t", "agent_x", "agent_y", "action", "reward", "trigger_flag"]


def write_layout_csv(path, world: GridWorld):
    """One row per cell: x, y, code."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "code"])
        side = world.config.side_length
        for y in range(side):
            for x in range(side):
                w.writerow([x, y, world.cell_code(x, y).name])


def write_transcript_csv(path, rows, comment: str | None = None):
    """``rows`` are dicts keyed by ``TRANSCRIPT_COLUMNS``."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=TRANSCRIPT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
