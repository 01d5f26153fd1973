"""Episode execution: scalar reference runner and a vectorised batch runner.

Every episode draws its policy randomness from its own generator seeded with
``(rng_seed, level.seed)``, one uniform per step, so results do not depend on
how episodes are batched.

Reads of the environment reward channel (``StepBatch.reward`` and the
reward-bearing fields of ``EpisodeSummary``) are counted per level mode and
context by :data:`REWARD_AUDIT`. Learner code runs in the default
``"learner"`` context; final scoring wraps itself in :func:`scoring`.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from misgen.env import (
    EPISODE_LIMIT,
    MAX_MONSTERS,
    Action,
    CauseKind,
    CellClass,
    EnvState,
    Level,
    initial_state,
    move_agents,
    step,
)
from misgen.obs import WINDOW, render_frame

RIGHT_ZONE_WIDTH = 2
STUCK_WINDOW = 100


class RewardAudit:
    """Counts reward-channel reads keyed by ``(mode, context)``."""

    def __init__(self):
        self.reads: Counter = Counter()
        self.context = "learner"

    def record(self, mode: str) -> None:
        self.reads[(str(mode), self.context)] += 1

    def count(self, mode: str | None = None, context: str | None = None) -> int:
        return sum(n for (m, c), n in self.reads.items()
                   if (mode is None or m == str(mode)) and (context is None or c == context))

    def reset(self) -> None:
        self.reads.clear()


REWARD_AUDIT = RewardAudit()


@contextlib.contextmanager
def scoring():
    """Mark reward reads inside the block as final scoring."""
    previous = REWARD_AUDIT.context
    REWARD_AUDIT.context = "scoring"
    try:
        yield
    finally:
        REWARD_AUDIT.context = previous


def _mode_tag(mode) -> str:
    return getattr(mode, "value", str(mode))


@dataclass
class ObservationBatch:
    prev: np.ndarray          # (N, W, W) int8
    cur: np.ndarray           # (N, W, W) int8
    prev_action: np.ndarray   # (N,)
    t: np.ndarray             # (N,)
    slots: np.ndarray         # (N,) slot ids

    def __len__(self):
        return self.prev.shape[0]


class Policy:
    """Maps observation batches to actions.

    ``act`` receives one uniform draw per row in ``u``; any stochasticity
    must come from it.
    """

    def reset(self, slot: int, level: Level) -> None:
        pass

    def act(self, obs: ObservationBatch, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantPolicy(Policy):
    def __init__(self, action):
        self.action = int(Action(action))

    def act(self, obs, u):
        return np.full(len(obs), self.action, dtype=np.int64)


class ScriptedPolicy(Policy):
    """Replays a per-level action plan, then falls back to ``fallback``."""

    def __init__(self, planner: Callable[[Level], list], fallback=Action.NOOP):
        self.planner = planner
        self.fallback = int(fallback)
        self._plans: dict[int, list] = {}

    def reset(self, slot, level):
        self._plans[slot] = [int(a) for a in (self.planner(level) or [])]

    def act(self, obs, u):
        out = np.full(len(obs), self.fallback, dtype=np.int64)
        for i, (slot, t) in enumerate(zip(obs.slots, obs.t)):
            plan = self._plans.get(int(slot), [])
            if t < len(plan):
                out[i] = plan[int(t)]
        return out


# -- scalar runner ------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    frame: np.ndarray
    action: int
    reward: float
    terminated: bool
    cause: CauseKind


@dataclass(frozen=True)
class Trajectory:
    level_seed: int
    states: tuple[EnvState, ...]
    records: tuple[TrajectoryRecord, ...]

    def __len__(self):
        return len(self.records)

    @property
    def cause(self) -> CauseKind:
        return self.records[-1].cause if self.records else CauseKind.NONE

    @property
    def total_reward(self) -> float:
        return float(sum(r.reward for r in self.records))


def episode_rng(rng_seed: int, level_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(rng_seed), int(level_seed)]))


def simulate_episode(policy: Policy, level: Level, max_steps: int = EPISODE_LIMIT,
                     rng_seed: int = 0, window: int = WINDOW) -> Trajectory:
    """Run one episode with the scalar ``step``; records (frame, action, reward, termination)."""
    max_steps = min(int(max_steps), EPISODE_LIMIT)
    rng = episode_rng(rng_seed, level.seed)
    policy.reset(0, level)
    state = initial_state(level)
    frame = render_frame(state, level, window)
    prev_frame, prev_action = frame, int(Action.NOOP)
    states, records = [state], []
    while not state.terminated and state.t < max_steps:
        obs = ObservationBatch(prev_frame[None], frame[None], np.array([prev_action]),
                               np.array([state.t]), np.array([0]))
        action = int(policy.act(obs, np.array([rng.random()]))[0])
        state, result = step(state, action, level)
        records.append(TrajectoryRecord(frame, action, result.reward, result.terminated,
                                        result.cause))
        states.append(state)
        prev_frame, prev_action = frame, action
        frame = render_frame(state, level, window)
    return Trajectory(level.seed, tuple(states), tuple(records))


# -- batch environment ----------------------------------------------------------


class EpisodeSummary:
    """Outcome of one finished episode.

    ``reward``, ``cause`` and ``passed_coin`` read the reward channel and are
    audited.
    """

    __slots__ = ("level_seed", "index", "length", "max_x", "proxy", "stuck",
                 "coin_x", "_reward", "_cause", "_passed", "_mode")

    def __init__(self, level_seed, index, length, max_x, proxy, stuck, coin_x,
                 reward, cause, passed, mode):
        self.level_seed = level_seed
        self.index = index
        self.length = length
        self.max_x = max_x
        self.proxy = proxy
        self.stuck = stuck
        self.coin_x = coin_x
        self._reward = reward
        self._cause = cause
        self._passed = passed
        self._mode = mode

    @property
    def reward(self) -> float:
        REWARD_AUDIT.record(self._mode)
        return self._reward

    @property
    def cause(self) -> CauseKind:
        REWARD_AUDIT.record(self._mode)
        return self._cause

    @property
    def passed_coin(self) -> bool:
        REWARD_AUDIT.record(self._mode)
        return self._passed


@dataclass
class StepBatch:
    """Result of one batch step, indexed like the observation batch it answered."""

    slots: np.ndarray
    done: np.ndarray
    prev: np.ndarray          # frames the actions were chosen on
    cur: np.ndarray           # frames after the step, before any reset
    action: np.ndarray
    level_seeds: np.ndarray
    t: np.ndarray             # timestep reached by the step
    finished: list
    _reward: np.ndarray
    _cause: np.ndarray
    _mode: str

    @property
    def reward(self) -> np.ndarray:
        REWARD_AUDIT.record(self._mode)
        return self._reward

    @property
    def cause(self) -> np.ndarray:
        REWARD_AUDIT.record(self._mode)
        return self._cause


class BatchEnv:
    """``n_slots`` episodes stepped in lockstep; finished slots pull the next level.

    ``truncate_at`` ends episodes early (cause NONE) for short collection runs.
    """

    def __init__(self, levels: Iterable[Level], n_slots: int, mode,
                 window: int = WINDOW, truncate_at: int = EPISODE_LIMIT,
                 on_reset: Callable[[int, Level], None] | None = None):
        self._feed: Iterator[Level] = iter(levels)
        self.n = int(n_slots)
        self.mode = _mode_tag(mode)
        self.window = window
        self.r = window // 2
        self.truncate_at = min(int(truncate_at), EPISODE_LIMIT)
        self.on_reset = on_reset
        self._shape = None
        self._episode_counter = 0

        n = self.n
        self.active = np.zeros(n, dtype=bool)
        self.levels: list[Level | None] = [None] * n
        self.episode_index = np.zeros(n, dtype=np.int64)
        self.x = np.zeros(n, dtype=np.int64)
        self.y = np.zeros(n, dtype=np.int64)
        self.vy = np.zeros(n, dtype=np.int64)
        self.grounded = np.zeros(n, dtype=bool)
        self.t = np.zeros(n, dtype=np.int64)
        self.collected = np.zeros(n, dtype=bool)
        self.coin = np.zeros((n, 2), dtype=np.int64)
        self.mx = np.zeros((n, MAX_MONSTERS), dtype=np.int64)
        self.my = np.zeros((n, MAX_MONSTERS), dtype=np.int64)
        self.mdir = np.ones((n, MAX_MONSTERS), dtype=np.int64)
        self.mmin = np.zeros((n, MAX_MONSTERS), dtype=np.int64)
        self.mmax = np.zeros((n, MAX_MONSTERS), dtype=np.int64)
        self.mvalid = np.zeros((n, MAX_MONSTERS), dtype=bool)
        self.max_x = np.zeros(n, dtype=np.int64)
        self.proxy = np.zeros(n, dtype=bool)
        self.right_run = np.zeros(n, dtype=np.int64)
        self.prev_frame = np.zeros((n, window, window), dtype=np.int8)
        self.cur_frame = np.zeros((n, window, window), dtype=np.int8)
        self.prev_action = np.zeros(n, dtype=np.int64)
        self.terrain = None
        self.padded = None
        for slot in range(n):
            self._load(slot)

    # -- slot management --

    def _load(self, slot: int) -> None:
        level = next(self._feed, None)
        if level is None:
            self.active[slot] = False
            self.levels[slot] = None
            return
        if self._shape is None:
            self._shape = (level.height, level.width)
            h, w, r = level.height, level.width, self.r
            self.terrain = np.zeros((self.n, h, w), dtype=np.int8)
            self.padded = np.full((self.n, h + 2 * r, w + 2 * r), CellClass.WALL, dtype=np.int8)
        elif self._shape != (level.height, level.width):
            raise ValueError("all levels in a batch must share one size")
        r = self.r
        self.levels[slot] = level
        self.active[slot] = True
        self.episode_index[slot] = self._episode_counter
        self._episode_counter += 1
        self.terrain[slot] = level.terrain
        self.padded[slot, r:r + level.height, r:r + level.width] = level.terrain
        s = initial_state(level)
        self.x[slot], self.y[slot], self.vy[slot] = s.agent_x, s.agent_y, s.vy
        self.grounded[slot] = s.grounded
        self.t[slot] = 0
        self.collected[slot] = False
        self.coin[slot] = level.coin_cell
        self.mvalid[slot] = False
        for i, m in enumerate(level.monsters):
            self.mx[slot, i], self.my[slot, i], self.mdir[slot, i] = m.x, m.y, m.direction
            self.mmin[slot, i], self.mmax[slot, i] = m.patrol_min, m.patrol_max
            self.mvalid[slot, i] = True
        self.max_x[slot] = s.agent_x
        self.proxy[slot] = s.agent_x >= level.rightmost_column
        self.right_run[slot] = 0
        frame = self._render(np.array([slot]))[0]
        self.prev_frame[slot] = frame
        self.cur_frame[slot] = frame
        self.prev_action[slot] = Action.NOOP
        if self.on_reset is not None:
            self.on_reset(slot, level)

    def _render(self, slots: np.ndarray) -> np.ndarray:
        w, r = self.window, self.r
        offs = np.arange(w)
        rows = self.y[slots][:, None] + offs            # padded coords: y - r + r
        cols = self.x[slots][:, None] + offs
        frames = self.padded[slots[:, None, None], rows[:, :, None], cols[:, None, :]].copy()
        k = np.arange(slots.size)
        cx = self.coin[slots, 0] - self.x[slots] + r
        cy = self.coin[slots, 1] - self.y[slots] + r
        show = ~self.collected[slots] & (cx >= 0) & (cx < w) & (cy >= 0) & (cy < w)
        frames[k[show], cy[show], cx[show]] = CellClass.COIN
        mx = self.mx[slots] - self.x[slots][:, None] + r
        my = self.my[slots] - self.y[slots][:, None] + r
        vis = self.mvalid[slots] & (mx >= 0) & (mx < w) & (my >= 0) & (my < w)
        kk = np.broadcast_to(k[:, None], mx.shape)
        frames[kk[vis], my[vis], mx[vis]] = CellClass.MONSTER
        frames[:, r, r] = CellClass.AGENT
        return frames

    # -- public API --

    @property
    def any_active(self) -> bool:
        return bool(self.active.any())

    def observation(self) -> ObservationBatch:
        slots = np.flatnonzero(self.active)
        return ObservationBatch(self.prev_frame[slots], self.cur_frame[slots],
                                self.prev_action[slots], self.t[slots].copy(), slots)

    def step(self, actions: np.ndarray, slots: np.ndarray | None = None) -> StepBatch:
        if slots is None:
            slots = np.flatnonzero(self.active)
        slots = np.asarray(slots, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        if not self.active[slots].all():
            raise ValueError("stepping an inactive slot")
        old_x, old_y = self.x[slots].copy(), self.y[slots].copy()
        x, y, vy, grounded, px, py, pvalid = move_agents(
            self.terrain, slots, old_x, old_y, self.vy[slots], self.grounded[slots], actions)

        # monsters
        mx_old = self.mx[slots]
        mdir = self.mdir[slots]
        nmx = mx_old + mdir
        out = (nmx < self.mmin[slots]) | (nmx > self.mmax[slots])
        mdir = np.where(out, -mdir, mdir)
        nmx = np.where(out, mx_old + mdir, nmx)
        mvalid = self.mvalid[slots]
        nmx = np.where(mvalid, nmx, mx_old)

        # swept-path events in order
        sidx = slots[:, None]
        lava = pvalid & (self.terrain[sidx, py, px] == CellClass.LAVA)
        coin_hit = (pvalid & ~self.collected[slots][:, None]
                    & (px == self.coin[slots, 0][:, None]) & (py == self.coin[slots, 1][:, None]))
        big = px.shape[1]
        first_lava = np.where(lava.any(1), lava.argmax(1), big)
        first_coin = np.where(coin_hit.any(1), coin_hit.argmax(1), big)
        got_coin = first_coin < first_lava
        died = first_lava < first_coin

        my = self.my[slots]
        same = mvalid & (my == y[:, None]) & (nmx == x[:, None])
        swap = (mvalid & (my == y[:, None]) & (y == old_y)[:, None]
                & (nmx == old_x[:, None]) & (mx_old == x[:, None]))
        hit_monster = (same | swap).any(1) & ~got_coin & ~died

        cause = np.full(slots.size, CauseKind.NONE, dtype=np.int64)
        cause[got_coin] = CauseKind.COIN
        cause[died | hit_monster] = CauseKind.OBSTACLE
        t = self.t[slots] + 1
        cause[(cause == CauseKind.NONE) & (t >= EPISODE_LIMIT)] = CauseKind.TIMEOUT
        reward = got_coin.astype(np.float64)
        done = (cause != CauseKind.NONE) | (t >= self.truncate_at)

        # commit
        self.x[slots], self.y[slots], self.vy[slots], self.grounded[slots] = x, y, vy, grounded
        self.mx[slots], self.mdir[slots] = nmx, mdir
        self.t[slots] = t
        self.collected[slots] |= got_coin
        self.max_x[slots] = np.maximum(self.max_x[slots], x)
        rightmost = np.array([self.levels[s].rightmost_column for s in slots])
        self.proxy[slots] |= x >= rightmost
        in_zone = x > rightmost - RIGHT_ZONE_WIDTH
        self.right_run[slots] = np.where(in_zone, self.right_run[slots] + 1, 0)

        prev = self.cur_frame[slots].copy()
        cur = self._render(slots)
        self.prev_frame[slots] = prev
        self.cur_frame[slots] = cur
        self.prev_action[slots] = actions

        seeds = np.array([self.levels[s].seed for s in slots], dtype=np.uint64)
        finished = []
        for i in np.flatnonzero(done):
            s = int(slots[i])
            level = self.levels[s]
            c = CauseKind(int(cause[i]))
            collected = bool(self.collected[s])
            finished.append(EpisodeSummary(
                level_seed=level.seed, index=int(self.episode_index[s]), length=int(t[i]),
                max_x=int(self.max_x[s]), proxy=bool(self.proxy[s]),
                stuck=bool(c == CauseKind.TIMEOUT and self.right_run[s] >= STUCK_WINDOW),
                coin_x=int(level.coin_cell[0]), reward=float(collected), cause=c,
                passed=bool(not collected and self.max_x[s] > level.coin_cell[0]),
                mode=self.mode))
            self._load(s)
        return StepBatch(slots=slots, done=done, prev=prev, cur=cur, action=actions,
                         level_seeds=seeds, t=t, finished=finished, _reward=reward,
                         _cause=cause, _mode=self.mode)


def run_episodes(policy: Policy, levels: Iterable[Level], mode, rng_seed: int = 0,
                 n_slots: int = 256, max_steps: int = EPISODE_LIMIT, window: int = WINDOW,
                 on_step: Callable[[StepBatch], None] | None = None) -> list[EpisodeSummary]:
    """Play one episode per level; summaries come back in input order."""
    rngs: dict[int, np.random.Generator] = {}

    def on_reset(slot, level):
        rngs[slot] = episode_rng(rng_seed, level.seed)
        policy.reset(slot, level)

    env = BatchEnv(levels, n_slots, mode, window=window, truncate_at=max_steps,
                   on_reset=on_reset)
    summaries = []
    while env.any_active:
        obs = env.observation()
        u = np.array([rngs[int(s)].random() for s in obs.slots])
        actions = policy.act(obs, u)
        result = env.step(actions, obs.slots)
        if on_step is not None:
            on_step(result)
        summaries.extend(result.finished)
    summaries.sort(key=lambda s: s.index)
    return summaries
