"""Procedural level generation and static solvability checks.

Both level distributions share terrain per seed: the terrain pipeline
(floor heights, lava and gaps, platforms, monsters) draws from streams keyed
only by ``(seed, attempt)``, and the mode changes nothing but where the coin
goes. TRAIN_RIGHT puts it on the floor of the rightmost walkable column;
TEST_RANDOM picks a reachable column uniformly, then a reachable standing
cell in that column uniformly.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from misgen.env import (
    JUMP_IMPULSE,
    MAX_FALL,
    MAX_MONSTERS,
    MOVEMENT_ACTIONS,
    Action,
    CellClass,
    Level,
    Monster,
    move_agents,
)

SEED_SPACE = (0, 2**64)
MAX_ATTEMPTS = 64
SPAWN_ZONE = 4
FINISH_ZONE = 4
PLATFORM_LEN = (6, 14)
PLATFORM_GAP = 0
PLATFORM_LIFT = 4           # rows between the highest nearby floor top and the platform
PLATFORM_APPROACH = 6       # columns left of a platform whose floor counts as nearby
PLATFORM_SPAN = (2, 2)     # first column, margin from the right edge

# independent random streams derived from (seed, attempt)
_STREAM_TERRAIN = 1
_STREAM_COIN = 2

_N_VY = JUMP_IMPULSE + MAX_FALL + 1


class Mode(str, enum.Enum):
    TRAIN_RIGHT = "train"
    TEST_RANDOM = "test"


class LevelGenerationError(RuntimeError):
    def __init__(self, seed: int, detail: str = ""):
        super().__init__(f"level generation failed for seed {seed}: {detail}")
        self.seed = seed


@dataclass(frozen=True)
class LevelDistribution:
    mode: Mode = Mode.TRAIN_RIGHT
    width: int = 48
    height: int = 16
    obstacle_density: float = 0.08
    monster_count_range: tuple[int, int] = (0, 1)
    platform_density: float = 0.9
    seed_space: tuple[int, int] = field(default=SEED_SPACE)

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "monster_count_range", tuple(self.monster_count_range))
        object.__setattr__(self, "seed_space", tuple(self.seed_space))
        if not 0.0 <= self.obstacle_density <= 0.3:
            raise ValueError("obstacle_density must lie in [0, 0.3]")
        lo, hi = self.monster_count_range
        if not 0 <= lo <= hi <= MAX_MONSTERS:
            raise ValueError(f"monster_count_range must satisfy 0 <= min <= max <= {MAX_MONSTERS}")
        if self.width < 16 or self.height < 10:
            raise ValueError("levels must be at least 16 wide and 10 high")

    def with_mode(self, mode) -> "LevelDistribution":
        return LevelDistribution(Mode(mode), self.width, self.height, self.obstacle_density,
                                 self.monster_count_range, self.platform_density,
                                 self.seed_space)


@dataclass(frozen=True)
class ValidationVerdict:
    valid: bool
    reachable: bool
    reasons: tuple[str, ...] = ()

    def __bool__(self):
        return self.valid


# -- reachability ---------------------------------------------------------------


@dataclass(frozen=True)
class _StateGraph:
    """Every (x, y, vy, grounded) state of a terrain with its six movement edges."""

    width: int
    xs: np.ndarray
    ys: np.ndarray
    vys: np.ndarray
    grounded: np.ndarray
    dst: np.ndarray          # (S, 6) successor ids, -1 when the move ends in lava
    px: np.ndarray           # (S, 6, 4) swept cells
    py: np.ndarray
    pvalid: np.ndarray       # swept before any lava
    start: int

    def key(self, x, y, vy, grounded):
        return ((np.asarray(y) * self.width + np.asarray(x)) * _N_VY
                + (np.asarray(vy) + MAX_FALL)) * 2 + np.asarray(grounded, dtype=np.int64)


def _build_graph(terrain: np.ndarray, spawn: tuple[int, int]) -> _StateGraph:
    H, W = terrain.shape
    free = (terrain == CellClass.EMPTY)
    ys, xs = np.nonzero(free)
    support = terrain[ys + 1, xs] == CellClass.WALL

    g_x, g_y = xs[support], ys[support]
    vy_range = np.arange(-MAX_FALL, JUMP_IMPULSE + 1)
    a_x = np.repeat(xs, vy_range.size)
    a_y = np.repeat(ys, vy_range.size)
    a_vy = np.tile(vy_range, xs.size)
    sx = np.concatenate([g_x, a_x])
    sy = np.concatenate([g_y, a_y])
    svy = np.concatenate([np.zeros_like(g_x), a_vy])
    sg = np.concatenate([np.ones(g_x.size, bool), np.zeros(a_x.size, bool)])

    n_states = sx.size
    keys = ((sy * W + sx) * _N_VY + (svy + MAX_FALL)) * 2 + sg
    lookup = np.full(H * W * _N_VY * 2, -1, dtype=np.int64)
    lookup[keys] = np.arange(n_states)

    acts = np.array(MOVEMENT_ACTIONS, dtype=np.int64)
    n_act = acts.size
    rep = lambda a: np.repeat(a, n_act)  # noqa: E731
    stack = terrain[None]
    nx, ny, nvy, ng, px, py, pvalid = move_agents(
        stack, np.zeros(n_states * n_act, dtype=np.int64), rep(sx), rep(sy), rep(svy), rep(sg),
        np.tile(acts, n_states))

    lava = pvalid & (terrain[py, px] == CellClass.LAVA)
    died = lava.any(axis=1)
    first_lava = np.where(died, lava.argmax(axis=1), MAX_FALL + 1)
    stage = np.arange(MAX_FALL + 1)[None, :]
    pvalid = pvalid & (stage < first_lava[:, None])

    dkeys = ((ny * W + nx) * _N_VY + (nvy + MAX_FALL)) * 2 + ng
    dst = np.where(died, -1, lookup[dkeys])
    start_key = ((spawn[1] * W + spawn[0]) * _N_VY + MAX_FALL) * 2 + int(support_at(terrain, spawn))
    start = int(lookup[start_key]) if free[spawn[1], spawn[0]] else -1
    return _StateGraph(
        width=W, xs=sx, ys=sy, vys=svy, grounded=sg,
        dst=dst.reshape(n_states, n_act),
        px=px.reshape(n_states, n_act, -1), py=py.reshape(n_states, n_act, -1),
        pvalid=pvalid.reshape(n_states, n_act, -1), start=start,
    )


def support_at(terrain: np.ndarray, cell) -> bool:
    x, y = cell
    return bool(terrain[y + 1, x] == CellClass.WALL)


def _bfs(graph: _StateGraph):
    n = graph.dst.shape[0]
    src = np.repeat(np.arange(n), graph.dst.shape[1])
    dst = graph.dst.ravel()
    ok = dst >= 0
    adj = csr_matrix((np.ones(int(ok.sum()), dtype=np.int8), (src[ok], dst[ok])), shape=(n, n))
    order, pred = breadth_first_order(adj, graph.start, directed=True, return_predecessors=True)
    return order, pred


def reachable_cells(terrain: np.ndarray, spawn: tuple[int, int]) -> np.ndarray:
    """Boolean ``(H, W)`` mask of cells the agent can sweep from ``spawn``.

    Monsters are ignored; lava ends a move, so cells beyond lava on the same
    step are not counted.
    """
    terrain = np.asarray(terrain)
    mask = np.zeros(terrain.shape, dtype=bool)
    graph = _build_graph(terrain, spawn)
    if graph.start < 0:
        return mask
    order, _ = _bfs(graph)
    valid = graph.pvalid[order]
    mask[graph.py[order][valid], graph.px[order][valid]] = True
    mask[spawn[1], spawn[0]] = True
    return mask


def plan_path(level: Level, target: tuple[int, int] | None = None) -> list[Action] | None:
    """Shortest action sequence from spawn whose last move sweeps ``target``.

    ``target`` defaults to the coin. Returns ``None`` when unreachable.
    """
    target = level.coin_cell if target is None else target
    graph = _build_graph(level.terrain, level.spawn_cell)
    if graph.start < 0:
        return None
    order, pred = _bfs(graph)
    hits = graph.pvalid & (graph.px == target[0]) & (graph.py == target[1])
    hit_any = hits.any(axis=2)[order]
    rows = np.nonzero(hit_any.any(axis=1))[0]
    if rows.size == 0:
        return None
    state = int(order[rows[0]])
    final_action = MOVEMENT_ACTIONS[int(hit_any[rows[0]].argmax())]
    actions = [final_action]
    while state != graph.start:
        prev = int(pred[state])
        choice = int(np.nonzero(graph.dst[prev] == state)[0][0])
        actions.append(MOVEMENT_ACTIONS[choice])
        state = prev
    actions.reverse()
    return actions


# -- validation -----------------------------------------------------------------


def _standing(terrain: np.ndarray, x: int, y: int) -> bool:
    return terrain[y, x] == CellClass.EMPTY and terrain[y + 1, x] == CellClass.WALL


def validate_level(level: Level) -> ValidationVerdict:
    reasons = []
    t = level.terrain
    H, W = t.shape
    if not (np.all(t[0] == CellClass.WALL) and np.all(t[-1] == CellClass.WALL)
            and np.all(t[:, 0] == CellClass.WALL) and np.all(t[:, -1] == CellClass.WALL)):
        reasons.append("border cells must all be WALL")
    if not np.isin(t, (CellClass.EMPTY, CellClass.WALL, CellClass.LAVA)).all():
        reasons.append("terrain holds codes other than EMPTY/WALL/LAVA")

    def inside(cell):
        return 0 < cell[0] < W - 1 and 0 < cell[1] < H - 1

    sx, sy = level.spawn_cell
    if not inside(level.spawn_cell):
        reasons.append("spawn outside the level interior")
    elif sx >= SPAWN_ZONE or not _standing(t, sx, sy):
        reasons.append("spawn must be a standing cell in the leftmost columns")
    cx, cy = level.coin_cell
    if not inside(level.coin_cell):
        reasons.append("coin outside the level interior")
    elif not _standing(t, cx, cy):
        reasons.append("coin must sit on EMPTY with WALL directly below")
    if level.coin_cell == level.spawn_cell:
        reasons.append("coin placed on the spawn cell")

    if len(level.monsters) > MAX_MONSTERS:
        reasons.append(f"more than {MAX_MONSTERS} monsters")
    for i, m in enumerate(level.monsters):
        if m.direction not in (-1, 1):
            reasons.append(f"monster {i}: direction must be -1 or +1")
        if not (0 < m.patrol_min < m.patrol_max < W - 1) or not 0 < m.y < H - 1:
            reasons.append(f"monster {i}: patrol bounds outside the interior or shorter than 2")
            continue
        if not m.patrol_min <= m.x <= m.patrol_max:
            reasons.append(f"monster {i}: start outside its patrol")
        if not all(_standing(t, x, m.y) for x in range(m.patrol_min, m.patrol_max + 1)):
            reasons.append(f"monster {i}: patrol is not contiguous walkable floor")

    reachable = False
    if not reasons or all("monster" in r for r in reasons):
        if inside(level.spawn_cell) and inside(level.coin_cell):
            reachable = plan_path(level.without_monsters()) is not None
    if not reachable:
        reasons.append("coin unreachable from spawn")
    return ValidationVerdict(valid=not reasons, reachable=reachable, reasons=tuple(reasons))


# -- generation -----------------------------------------------------------------


def _rng(seed: int, attempt: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), attempt, stream]))


def _ground_profile(rng, width, height):
    """Ground-top row per column; columns 0 and width-1 are border."""
    max_h = max(1, (height - 4) // 2)
    solid = np.full(width, 2, dtype=np.int64)
    cur = 2
    x = SPAWN_ZONE + 1
    stop = width - 1 - FINISH_ZONE
    while x < stop:
        seg = int(rng.integers(3, 8))
        cur = int(np.clip(cur + rng.integers(-1, 2), 1, max_h))
        solid[x:min(x + seg, stop)] = cur
        x += seg
    solid[stop:] = cur
    return height - 1 - solid


def _build_terrain(dist: LevelDistribution, seed: int, attempt: int):
    rng = _rng(seed, attempt, _STREAM_TERRAIN)
    H, W = dist.height, dist.width
    ground = _ground_profile(rng, W, H)
    t = np.zeros((H, W), dtype=np.int8)
    for x in range(W):
        t[ground[x]:, x] = CellClass.WALL
    t[0, :] = t[-1, :] = CellClass.WALL
    t[:, 0] = t[:, -1] = CellClass.WALL

    # lava on flat floor and lava-bottomed gaps
    hazard_cols = set()
    x = SPAWN_ZONE + 3
    stop = W - 1 - FINISH_ZONE - 2
    while x < stop:
        if rng.random() < dist.obstacle_density:
            w = int(rng.integers(1, 3))
            span = range(x - 1, x + w + 1)
            if x + w < stop and len({int(ground[c]) for c in span}) == 1:
                g = int(ground[x])
                if rng.random() < 0.5 or g >= H - 2:
                    t[g - 1, x:x + w] = CellClass.LAVA
                else:
                    t[g, x:x + w] = CellClass.LAVA
                    ground[x:x + w] = g + 1
                hazard_cols.update(range(x - 1, x + w + 1))
                x += w + 4
                continue
        x += 1

    # floating platforms one row above the jump apex from any floor at or left of
    # them; a step just past the right end is the way up: jump, then step left
    platform_cols = set()
    x = PLATFORM_SPAN[0]
    stop = W - PLATFORM_SPAN[1]
    while x < stop:
        if rng.random() < dist.platform_density:
            length = int(rng.integers(PLATFORM_LEN[0], PLATFORM_LEN[1] + 1))
            cols = list(range(x, min(x + length, stop)))
            placed = _place_platform(t, ground, cols, hazard_cols, W) if len(cols) >= 3 else None
            if placed:
                cols = placed
                platform_cols.update(cols)
                x = cols[-1] + 2 + PLATFORM_GAP
                continue
        x += 1

    # monsters patrol open-sky ground runs
    lo, hi = dist.monster_count_range
    n_monsters = int(rng.integers(lo, hi + 1))
    runs = []
    x = SPAWN_ZONE + 4
    limit = W - 1 - FINISH_ZONE - 2
    while x <= limit:
        y = int(ground[x]) - 1
        end = x
        while (end + 1 <= limit and ground[end + 1] == ground[x]
               and _open_ground(t, end + 1, y)):
            end += 1
        if _open_ground(t, x, y) and end - x + 1 >= 3:
            runs.append((x, end, y))
        x = end + 1
    monsters = []
    for r in rng.permutation(len(runs))[:n_monsters]:
        a, b, y = runs[int(r)]
        length = min(b - a + 1, int(rng.integers(3, 7)))
        pmin = int(rng.integers(a, b - length + 2))
        pmax = pmin + length - 1
        start = int(rng.integers(pmin, pmax + 1))
        direction = int(rng.choice([-1, 1]))
        monsters.append(Monster(start, y, pmin, pmax, direction))
    monsters.sort()
    spawn = (1, int(ground[1]) - 1)
    return t, tuple(monsters), spawn


def _place_platform(t, ground, cols, hazard_cols, W):
    """Lay a platform over a prefix of ``cols`` plus its access step.

    Tries the longest prefix first and returns the columns used, or None.
    """
    for end in range(len(cols), 2, -1):
        if _try_platform(t, ground, cols[:end], hazard_cols, W):
            return cols[:end]
    return None


def _try_platform(t, ground, cols, hazard_cols, W) -> bool:
    window = range(max(1, cols[0] - PLATFORM_APPROACH), cols[-1] + 1)
    over = bool(hazard_cols.intersection(range(cols[0] - 1, cols[-1] + 2)))
    p = int(min(ground[c] for c in window)) - (PLATFORM_LIFT + over)
    sx = cols[-1] + 1
    if p - 1 < 1 or sx > W - 2 or sx in hazard_cols:
        return False
    if not np.all(t[p - 1:p + 1, cols[0]:sx + 1] == CellClass.EMPTY):
        return False
    # standing on the step, the apex of a jump is the platform's top row
    step_top = p + JUMP_IMPULSE + 1
    height = int(ground[sx]) - step_top
    # climbable from the floor on its left, so the floor route stays open
    if height > 0 and int(ground[sx - 1]) - step_top > JUMP_IMPULSE + 1:
        return False
    t[p, cols[0]:cols[-1] + 1] = CellClass.WALL
    if height > 0:
        t[step_top:ground[sx], sx] = CellClass.WALL
        ground[sx] = step_top
    return True


def _open_ground(t, x, y) -> bool:
    column_clear = np.all(t[max(1, y - 4):y + 1, x] == CellClass.EMPTY)
    return bool(column_clear and t[y + 1, x] == CellClass.WALL)


@functools.lru_cache(maxsize=32768)
def _terrain_for_seed(dist_key, seed: int):
    dist = LevelDistribution(Mode.TRAIN_RIGHT, *dist_key)
    W = dist.width
    for attempt in range(MAX_ATTEMPTS):
        terrain, monsters, spawn = _build_terrain(dist, seed, attempt)
        finish = (W - 2, int(np.nonzero(terrain[:, W - 2] == CellClass.EMPTY)[0].max()))
        reach = reachable_cells(terrain, spawn)
        if reach[finish[1], finish[0]]:
            terrain.flags.writeable = False
            reach.flags.writeable = False
            return attempt, terrain, monsters, spawn, finish, reach
    raise LevelGenerationError(seed, f"right end unreachable after {MAX_ATTEMPTS} attempts")


def generate_level(dist: LevelDistribution, seed: int) -> Level:
    """Deterministically build the level for ``seed`` under ``dist``."""
    lo, hi = dist.seed_space
    seed = int(seed)
    if not lo <= seed < hi:
        raise ValueError(f"seed {seed} outside seed space [{lo}, {hi})")
    key = (dist.width, dist.height, dist.obstacle_density, dist.monster_count_range,
           dist.platform_density)
    attempt, terrain, monsters, spawn, finish, reach = _terrain_for_seed(key, seed)
    if dist.mode is Mode.TRAIN_RIGHT:
        coin = finish
    else:
        coin = _random_coin(terrain, reach, spawn, _rng(seed, attempt, _STREAM_COIN))
    level = Level(dist.width, dist.height, terrain, coin, monsters, spawn, seed)
    return level


def _standing_cells(terrain, reach, spawn):
    ys, xs = np.nonzero(reach[:-1] & (terrain[:-1] == CellClass.EMPTY)
                        & (terrain[1:] == CellClass.WALL))
    keep = xs > spawn[0]
    return ys[keep], xs[keep]


def _random_coin(terrain, reach, spawn, rng) -> tuple[int, int]:
    """Uniform reachable column, then the highest reachable standing cell in it."""
    ys, xs = _standing_cells(terrain, reach, spawn)
    columns = np.unique(xs)
    col = int(columns[rng.integers(columns.size)])
    return col, int(ys[xs == col].min())


def coin_column_quantile(level: Level) -> float:
    """Rank of the coin's column among the level's reachable columns, in [0, 1)."""
    reach = reachable_cells(level.terrain, level.spawn_cell)
    columns = np.unique(_standing_cells(level.terrain, reach, level.spawn_cell)[1])
    rank = int(np.searchsorted(columns, level.coin_cell[0]))
    return rank / columns.size
