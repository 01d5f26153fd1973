"""Deterministic side-scroller physics.

The world is a grid of cells indexed ``terrain[y, x]`` with ``y = 0`` at the
top row. Vertical velocity is positive upwards, so moving with ``vy > 0``
decreases ``y``.

Per step, in this order:

1. horizontal intent from the action (-1, 0, +1);
2. velocity update: a grounded agent gets ``vy = +2`` if the action jumps and
   ``vy = 0`` otherwise; an airborne agent falls, ``vy = max(vy - 1, -3)``;
3. the agent moves one cell horizontally unless the target is WALL, then
   ``|vy|`` cells vertically one at a time, stopping (and zeroing ``vy``) at
   the first WALL;
4. monsters advance one cell along their patrol, bouncing at the bounds;
5. collisions: every cell the agent swept this step is checked in order for
   LAVA (cause OBSTACLE) and the uncollected coin (reward 1, cause COIN);
   failing both, an agent sharing a cell with a monster, or swapping cells
   with one, dies (cause OBSTACLE);
6. ``t`` increments and an episode still running at ``t = 1000`` times out.

The DOWN variants move exactly like their non-DOWN counterparts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from misgen._validation import ContractViolation

EPISODE_LIMIT = 1000
JUMP_IMPULSE = 2
GRAVITY = 1
MAX_FALL = 3
MAX_MONSTERS = 8
FORMAT_TAG = "MGL1"


class CellClass(enum.IntEnum):
    EMPTY = 0
    WALL = 1
    LAVA = 2
    COIN = 3
    MONSTER = 4
    AGENT = 5


N_CLASSES = len(CellClass)


class Action(enum.IntEnum):
    NOOP = 0
    LEFT = 1
    RIGHT = 2
    JUMP = 3
    LEFT_JUMP = 4
    RIGHT_JUMP = 5
    LEFT_DOWN = 6
    RIGHT_DOWN = 7
    DOWN = 8


N_ACTIONS = len(Action)
BASELINE_ACTIONS = (Action.RIGHT, Action.RIGHT_JUMP, Action.RIGHT_DOWN)

ACTION_DX = np.array([0, -1, 1, 0, -1, 1, -1, 1, 0], dtype=np.int64)
ACTION_JUMP = np.array([0, 0, 0, 1, 1, 1, 0, 0, 0], dtype=bool)
# the six physically distinct actions
MOVEMENT_ACTIONS = (Action.NOOP, Action.LEFT, Action.RIGHT,
                    Action.JUMP, Action.LEFT_JUMP, Action.RIGHT_JUMP)


class CauseKind(enum.IntEnum):
    NONE = 0
    COIN = 1
    OBSTACLE = 2
    TIMEOUT = 3


_TERRAIN_CHARS = {CellClass.EMPTY: ".", CellClass.WALL: "#", CellClass.LAVA: "~"}
_CHAR_TERRAIN = {v: k for k, v in _TERRAIN_CHARS.items()}


class Monster(NamedTuple):
    x: int
    y: int
    patrol_min: int
    patrol_max: int
    direction: int


@dataclass(frozen=True, eq=False)
class Level:
    """An immutable generated map.

    ``terrain`` holds only EMPTY, WALL and LAVA codes; the coin and monsters
    live in their own fields.
    """

    width: int
    height: int
    terrain: np.ndarray
    coin_cell: tuple[int, int]
    monsters: tuple[Monster, ...]
    spawn_cell: tuple[int, int]
    seed: int

    def __post_init__(self):
        terrain = np.array(self.terrain, dtype=np.int8, copy=True)
        if terrain.shape != (self.height, self.width):
            raise ContractViolation(
                f"terrain shape {terrain.shape} != ({self.height}, {self.width})")
        terrain.flags.writeable = False
        object.__setattr__(self, "terrain", terrain)
        object.__setattr__(self, "coin_cell", tuple(int(v) for v in self.coin_cell))
        object.__setattr__(self, "spawn_cell", tuple(int(v) for v in self.spawn_cell))
        object.__setattr__(self, "monsters", tuple(Monster(*map(int, m)) for m in self.monsters))
        object.__setattr__(self, "seed", int(self.seed))

    def __eq__(self, other):
        if not isinstance(other, Level):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.coin_cell == other.coin_cell
                and self.spawn_cell == other.spawn_cell
                and self.monsters == other.monsters and self.seed == other.seed
                and np.array_equal(self.terrain, other.terrain))

    def __hash__(self):
        return hash((self.seed, self.coin_cell, self.terrain.tobytes()))

    @property
    def rightmost_column(self) -> int:
        """Rightmost walkable column (the border is column ``width - 1``)."""
        return self.width - 2

    def with_coin(self, coin_cell: tuple[int, int]) -> "Level":
        return Level(self.width, self.height, self.terrain, coin_cell,
                     self.monsters, self.spawn_cell, self.seed)

    def without_monsters(self) -> "Level":
        return Level(self.width, self.height, self.terrain, self.coin_cell,
                     (), self.spawn_cell, self.seed)

    # -- MGL1 text format ---------------------------------------------------

    def to_text(self) -> str:
        lines = [f"{FORMAT_TAG} {self.width} {self.height} {self.seed}"]
        for row in self.terrain:
            lines.append("".join(_TERRAIN_CHARS[CellClass(int(c))] for c in row))
        lines.append(f"coin {self.coin_cell[0]} {self.coin_cell[1]}")
        lines.append(f"spawn {self.spawn_cell[0]} {self.spawn_cell[1]}")
        for m in self.monsters:
            lines.append(f"monster {m.x} {m.y} {m.patrol_min} {m.patrol_max} {m.direction}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Level":
        lines = text.splitlines()
        if not lines:
            raise ValueError("empty level file")
        header = lines[0].split()
        if len(header) != 4 or header[0] != FORMAT_TAG:
            raise ValueError(f"bad level header: {lines[0]!r}")
        width, height, seed = int(header[1]), int(header[2]), int(header[3])
        if len(lines) < 1 + height:
            raise ValueError("truncated terrain block")
        rows = lines[1:1 + height]
        terrain = np.zeros((height, width), dtype=np.int8)
        for y, row in enumerate(rows):
            if len(row) != width:
                raise ValueError(f"terrain row {y} has {len(row)} cells, expected {width}")
            try:
                terrain[y] = [_CHAR_TERRAIN[c] for c in row]
            except KeyError as exc:
                raise ValueError(f"unknown terrain character {exc} in row {y}") from None
        coin = spawn = None
        monsters = []
        for line in lines[1 + height:]:
            parts = line.split()
            if not parts:
                continue
            key, vals = parts[0], [int(v) for v in parts[1:]]
            if key == "coin" and len(vals) == 2:
                coin = (vals[0], vals[1])
            elif key == "spawn" and len(vals) == 2:
                spawn = (vals[0], vals[1])
            elif key == "monster" and len(vals) == 5:
                monsters.append(Monster(*vals))
            else:
                raise ValueError(f"unrecognised level line: {line!r}")
        if coin is None or spawn is None:
            raise ValueError("level file needs both 'coin' and 'spawn' lines")
        return cls(width, height, terrain, coin, tuple(monsters), spawn, seed)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_text().encode("ascii"))

    @classmethod
    def load(cls, path) -> "Level":
        return cls.from_text(Path(path).read_bytes().decode("ascii"))


@dataclass(frozen=True)
class EnvState:
    agent_x: int
    agent_y: int
    vy: int
    grounded: bool
    monster_positions: tuple[tuple[int, int], ...]
    t: int = 0
    coin_collected: bool = False
    terminated: bool = False
    termination_cause: CauseKind = CauseKind.NONE


@dataclass(frozen=True)
class StepResult:
    reward: float
    terminated: bool
    cause: CauseKind = field(default=CauseKind.NONE)


def initial_state(level: Level) -> EnvState:
    x, y = level.spawn_cell
    grounded = bool(level.terrain[y + 1, x] == CellClass.WALL)
    return EnvState(
        agent_x=x, agent_y=y, vy=0, grounded=grounded,
        monster_positions=tuple((m.x, m.direction) for m in level.monsters),
    )


def _move_agent(terrain: np.ndarray, x: int, y: int, vy: int, grounded: bool,
                action: int) -> tuple[int, int, int, bool, list[tuple[int, int]]]:
    dx = int(ACTION_DX[action])
    if grounded:
        vy = JUMP_IMPULSE if ACTION_JUMP[action] else 0
    else:
        vy = max(vy - GRAVITY, -MAX_FALL)
    if dx and terrain[y, x + dx] != CellClass.WALL:
        x += dx
    path = [(x, y)]
    direction = -1 if vy > 0 else 1
    for _ in range(abs(vy)):
        ny = y + direction
        if terrain[ny, x] == CellClass.WALL:
            vy = 0
            break
        y = ny
        path.append((x, y))
    grounded = vy <= 0 and terrain[y + 1, x] == CellClass.WALL
    if grounded:
        vy = 0
    return x, y, vy, bool(grounded), path


def _advance_monster(x: int, direction: int, lo: int, hi: int) -> tuple[int, int]:
    nx = x + direction
    if nx < lo or nx > hi:
        direction = -direction
        nx = x + direction
    return nx, direction


def step(state: EnvState, action, level: Level) -> tuple[EnvState, StepResult]:
    """Advance one timestep. Pure in ``(state, action, level)``."""
    if state.terminated:
        raise ContractViolation("cannot step a terminated episode")
    action = Action(action)
    old_x, old_y = state.agent_x, state.agent_y
    x, y, vy, grounded, path = _move_agent(
        level.terrain, old_x, old_y, state.vy, state.grounded, action)

    monsters = []
    for (mx, mdir), spec in zip(state.monster_positions, level.monsters):
        nx, ndir = _advance_monster(mx, mdir, spec.patrol_min, spec.patrol_max)
        monsters.append((nx, ndir))

    cause = CauseKind.NONE
    reward = 0.0
    coin_collected = state.coin_collected
    for cell in path:
        if level.terrain[cell[1], cell[0]] == CellClass.LAVA:
            cause = CauseKind.OBSTACLE
            break
        if not coin_collected and cell == level.coin_cell:
            cause = CauseKind.COIN
            coin_collected = True
            reward = 1.0
            break
    if cause == CauseKind.NONE:
        for (nx, _), (mx, _), spec in zip(monsters, state.monster_positions, level.monsters):
            same_cell = spec.y == y and nx == x
            swapped = spec.y == y == old_y and nx == old_x and mx == x
            if same_cell or swapped:
                cause = CauseKind.OBSTACLE
                break

    t = state.t + 1
    if cause == CauseKind.NONE and t >= EPISODE_LIMIT:
        cause = CauseKind.TIMEOUT
    terminated = cause != CauseKind.NONE
    new_state = EnvState(
        agent_x=x, agent_y=y, vy=vy, grounded=grounded,
        monster_positions=tuple(monsters), t=t, coin_collected=coin_collected,
        terminated=terminated, termination_cause=cause,
    )
    return new_state, StepResult(reward=reward, terminated=terminated, cause=cause)


# -- vectorised kinematics ----------------------------------------------------


def move_agents(terrain: np.ndarray, idx: np.ndarray, x: np.ndarray, y: np.ndarray,
                vy: np.ndarray, grounded: np.ndarray, action: np.ndarray):
    """Batch form of the agent kinematics used by ``step``.

    ``terrain`` is a stack ``(L, H, W)`` and ``idx`` selects the stack entry
    for every agent. Returns the new ``(x, y, vy, grounded)`` plus the swept
    path as ``(K, 4)`` arrays ``px, py, pvalid``.
    """
    x = np.asarray(x, dtype=np.int64).copy()
    y = np.asarray(y, dtype=np.int64).copy()
    grounded = np.asarray(grounded, dtype=bool)
    action = np.asarray(action, dtype=np.int64)
    dx = ACTION_DX[action]
    jump = ACTION_JUMP[action]
    vy = np.where(grounded, np.where(jump, JUMP_IMPULSE, 0),
                  np.maximum(np.asarray(vy, dtype=np.int64) - GRAVITY, -MAX_FALL))

    tx = x + dx
    free = terrain[idx, y, tx] != CellClass.WALL
    x = np.where(free, tx, x)

    n = x.shape[0]
    px = np.empty((n, MAX_FALL + 1), dtype=np.int64)
    py = np.empty_like(px)
    pvalid = np.zeros((n, MAX_FALL + 1), dtype=bool)
    px[:, 0], py[:, 0], pvalid[:, 0] = x, y, True

    direction = np.where(vy > 0, -1, 1)
    remaining = np.abs(vy)
    moving = remaining > 0
    for k in range(1, MAX_FALL + 1):
        active = moving & (remaining >= k)
        ny = np.where(active, y + direction, y)
        hit = active & (terrain[idx, ny, x] == CellClass.WALL)
        vy = np.where(hit, 0, vy)
        moving = moving & ~hit
        advance = active & ~hit
        y = np.where(advance, ny, y)
        px[:, k], py[:, k], pvalid[:, k] = x, y, advance

    grounded = (vy <= 0) & (terrain[idx, y + 1, x] == CellClass.WALL)
    vy = np.where(grounded, 0, vy)
    return x, y, vy, grounded, px, py, pvalid
