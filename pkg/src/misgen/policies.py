"""Scripted reference policies: the rightward baseline, a coin-seeking oracle, a right runner."""

from __future__ import annotations

import numpy as np

from misgen.env import BASELINE_ACTIONS, Action, Level
from misgen.levels import plan_path
from misgen.rollout import ObservationBatch, Policy, ScriptedPolicy


def baseline_policy(rng: np.random.Generator) -> Action:
    """One uniform draw from the rightward action set."""
    return BASELINE_ACTIONS[int(rng.integers(len(BASELINE_ACTIONS)))]


class BaselinePolicy(Policy):
    """Uniform over RIGHT, RIGHT_JUMP and RIGHT_DOWN.

    With ``cycle=True`` the three actions repeat in a fixed order keyed by
    the timestep instead.
    """

    name = "baseline"

    def __init__(self, cycle: bool = False):
        self.cycle = cycle
        self._table = np.array([int(a) for a in BASELINE_ACTIONS])

    def act(self, obs: ObservationBatch, u: np.ndarray) -> np.ndarray:
        k = len(self._table)
        if self.cycle:
            return self._table[np.asarray(obs.t) % k]
        return self._table[np.minimum((np.asarray(u) * k).astype(np.int64), k - 1)]


class AlwaysRightPolicy(Policy):
    """Runs to the right end along the BFS route, ignoring the coin."""

    name = "always-right"

    def __init__(self):
        self._inner = ScriptedPolicy(_right_end_plan, fallback=Action.RIGHT_JUMP)

    def reset(self, slot, level):
        self._inner.reset(slot, level)

    def act(self, obs, u):
        return self._inner.act(obs, u)


class CoinSeekerPolicy(Policy):
    """Replays the shortest monster-free path to the coin."""

    name = "coin-seeker"

    def __init__(self):
        self._inner = ScriptedPolicy(plan_path, fallback=Action.NOOP)

    def reset(self, slot, level):
        self._inner.reset(slot, level)

    def act(self, obs, u):
        return self._inner.act(obs, u)


def _right_end_plan(level: Level):
    terrain = level.terrain
    x = level.rightmost_column
    for y in range(level.height - 2, 0, -1):
        if terrain[y, x] == 0:
            path = plan_path(level, (x, y))
            if path is not None:
                return path
    return []
