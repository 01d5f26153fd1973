import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from misgen._validation import ContractViolation
from misgen.env import (
    EPISODE_LIMIT, Action, CauseKind, CellClass, Level, Monster, initial_state, move_agents, step,
)

from conftest import flat_level


def run(level, actions):
    s = initial_state(level)
    out = []
    for a in actions:
        s, r = step(s, a, level)
        out.append((s, r))
        if s.terminated:
            break
    return out


def test_walk_right_one_cell(room):
    s, r = step(initial_state(room), Action.RIGHT, room)
    assert (s.agent_x, s.agent_y, s.vy, s.grounded) == (2, 6, 0, True)
    assert r.reward == 0.0 and not r.terminated and s.t == 1


def test_jump_arc_peaks_three_rows_and_lands():
    level = flat_level(width=12, height=10, spawn=(1, 8))
    heights = [s.agent_y for s, _ in run(level, [Action.JUMP] + [Action.NOOP] * 4)]
    # +2 on take-off, +1 then 0 at the apex, then falling back to the floor
    assert heights == [6, 5, 5, 6, 8]
    assert min(heights) == 8 - 3


def test_jump_covers_five_columns_when_running():
    level = flat_level(width=14, height=10, spawn=(1, 8))
    seq = [Action.RIGHT_JUMP] + [Action.RIGHT] * 4
    states = [s for s, _ in run(level, seq)]
    assert [s.agent_x for s in states] == [2, 3, 4, 5, 6]
    assert states[-1].grounded
    assert all(not s.grounded for s in states[:-1])


def test_wall_blocks_horizontal_move():
    level = flat_level(walls=[(2, 6)])
    s, _ = step(initial_state(level), Action.RIGHT, level)
    assert s.agent_x == 1


def test_ceiling_stops_jump():
    level = flat_level(walls=[(1, 5)])
    s, _ = step(initial_state(level), Action.JUMP, level)
    assert s.agent_y == 6 and s.vy == 0 and s.grounded


def test_coin_ends_episode_with_reward():
    level = flat_level(coin=(2, 6))
    s, r = step(initial_state(level), Action.RIGHT, level)
    assert r.reward == 1.0 and r.terminated and r.cause is CauseKind.COIN
    assert s.coin_collected


def test_coin_swept_mid_fall():
    # coin two rows above the floor; a jump sweeps it on the way up
    level = flat_level(coin=(1, 5))
    _, r = step(initial_state(level), Action.JUMP, level)
    assert r.cause is CauseKind.COIN


def test_lava_checked_before_coin_on_same_path():
    level = flat_level(coin=(2, 5), lava=[(2, 6)])
    # RIGHT_JUMP: shift to x=2 (lava row) then rise through the coin
    _, r = step(initial_state(level), Action.RIGHT_JUMP, level)
    assert r.cause is CauseKind.OBSTACLE and r.reward == 0.0


def test_monster_same_cell_kills():
    level = flat_level(monsters=[Monster(4, 6, 2, 6, -1)])
    out = run(level, [Action.RIGHT, Action.RIGHT])
    assert out[-1][1].cause is CauseKind.OBSTACLE


def test_monster_swap_kills():
    level = flat_level(spawn=(2, 6), monsters=[Monster(3, 6, 2, 6, -1)])
    s, r = step(initial_state(level), Action.RIGHT, level)
    assert s.agent_x == 3 and s.monster_positions[0][0] == 2
    assert r.cause is CauseKind.OBSTACLE


def test_timeout_at_limit(room):
    s = initial_state(room)
    for _ in range(EPISODE_LIMIT):
        s, r = step(s, Action.NOOP, room)
    assert r.terminated and r.cause is CauseKind.TIMEOUT and s.t == EPISODE_LIMIT


def test_stepping_terminated_episode_raises():
    level = flat_level(coin=(2, 6))
    s, _ = step(initial_state(level), Action.RIGHT, level)
    with pytest.raises(ContractViolation):
        step(s, Action.NOOP, level)


def test_level_text_round_trip(tmp_path):
    level = flat_level(monsters=[Monster(4, 6, 3, 7, 1)], lava=[(8, 6)], seed=42)
    assert Level.from_text(level.to_text()) == level
    path = tmp_path / "l.mgl"
    level.save(path)
    assert Level.load(path) == level


def test_level_text_rejects_garbage():
    with pytest.raises(ValueError):
        Level.from_text("MGL1 3 3 0\n###\n#x#\n###\ncoin 1 1\nspawn 1 1\n")
    with pytest.raises(ValueError):
        Level.from_text("")


def test_level_is_immutable(room):
    with pytest.raises(ValueError):
        room.terrain[1, 1] = 1


def test_rightmost_column(room):
    assert room.rightmost_column == room.width - 2


# -- properties -------------------------------------------------------------

_actions = st.lists(st.sampled_from(list(Action)), min_size=1, max_size=60)


@st.composite
def bumpy_levels(draw):
    width = draw(st.integers(8, 16))
    height = draw(st.integers(7, 10))
    t = np.zeros((height, width), dtype=np.int8)
    t[0, :] = t[-1, :] = 1
    t[:, 0] = t[:, -1] = 1
    n = draw(st.integers(0, 8))
    for _ in range(n):
        x = draw(st.integers(2, width - 2))
        y = draw(st.integers(1, height - 2))
        t[y, x] = draw(st.sampled_from([1, 2]))
    coin = (draw(st.integers(2, width - 2)), draw(st.integers(1, height - 2)))
    t[height - 2, 1] = 0
    return Level(width, height, t, coin, (), (1, height - 2), 0)


@settings(max_examples=150, deadline=None)
@given(bumpy_levels(), _actions)
def test_physics_invariants(level, actions):
    s = initial_state(level)
    total = 0.0
    for a in actions:
        if s.terminated:
            break
        s, r = step(s, a, level)
        total += r.reward
        assert level.terrain[s.agent_y, s.agent_x] != CellClass.WALL
        assert -3 <= s.vy <= 2
        assert r.reward in (0.0, 1.0)
        assert r.terminated == (r.cause is not CauseKind.NONE)
        if s.grounded:
            assert s.vy == 0 and level.terrain[s.agent_y + 1, s.agent_x] == CellClass.WALL
    assert total in (0.0, 1.0)


@settings(max_examples=150, deadline=None)
@given(bumpy_levels(), _actions)
def test_step_is_pure(level, actions):
    a, b = initial_state(level), initial_state(level)
    for act in actions:
        if a.terminated:
            break
        a, ra = step(a, act, level)
        b, rb = step(b, act, level)
        assert a == b and ra == rb


@settings(max_examples=100, deadline=None)
@given(bumpy_levels(), _actions)
def test_vector_kinematics_match_scalar(level, actions):
    s = initial_state(level)
    for act in actions:
        if s.terminated:
            break
        x, y, vy, g, *_ = move_agents(level.terrain[None], np.zeros(1, dtype=np.int64),
                                      [s.agent_x], [s.agent_y], [s.vy], [s.grounded], [int(act)])
        ns, _ = step(s, act, level)
        assert (int(x[0]), int(y[0]), int(vy[0]), bool(g[0])) == (
            ns.agent_x, ns.agent_y, ns.vy, ns.grounded)
        s = ns
