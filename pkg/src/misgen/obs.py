"""Egocentric semantic frames and the learner's input encoding.

Input layout, channels x H x W flattened row-major:

* channels 0-5: one-hot cell class of the previous frame;
* channels 6-11: one-hot cell class of the current frame;
* channel 12: the action bar, constant ``action_code / 8``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from misgen._validation import ContractViolation
from misgen.env import N_ACTIONS, N_CLASSES, Action, CellClass, EnvState, Level

WINDOW = 15
N_CHANNELS = 2 * N_CLASSES + 1
PGM_CLASS_SCALE = 42


def input_size(window: int = WINDOW) -> int:
    return N_CHANNELS * window * window


def render_frame(state: EnvState, level: Level, window: int = WINDOW) -> np.ndarray:
    """Rasterise the ``window x window`` view centred on the agent."""
    if window % 2 == 0:
        raise ContractViolation("window must be odd")
    r = window // 2
    x0, y0 = state.agent_x - r, state.agent_y - r
    if not (0 <= state.agent_x < level.width and 0 <= state.agent_y < level.height):
        raise ContractViolation("agent outside level bounds")
    frame = np.full((window, window), CellClass.WALL, dtype=np.int8)
    ys0, ys1 = max(0, y0), min(level.height, y0 + window)
    xs0, xs1 = max(0, x0), min(level.width, x0 + window)
    frame[ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0] = level.terrain[ys0:ys1, xs0:xs1]
    if not state.coin_collected:
        cx, cy = level.coin_cell[0] - x0, level.coin_cell[1] - y0
        if 0 <= cx < window and 0 <= cy < window:
            frame[cy, cx] = CellClass.COIN
    for (mx, _), spec in zip(state.monster_positions, level.monsters):
        px, py = mx - x0, spec.y - y0
        if 0 <= px < window and 0 <= py < window:
            frame[py, px] = CellClass.MONSTER
    frame[r, r] = CellClass.AGENT
    return frame


@dataclass(frozen=True, eq=False)
class Observation:
    """Frames at ``t-1`` and ``t`` plus the action taken between them."""

    prev_frame: np.ndarray
    cur_frame: np.ndarray
    action_code: int

    @property
    def window(self) -> int:
        return self.cur_frame.shape[0]

    @property
    def action_bar(self) -> np.ndarray:
        return np.full(self.window, self.action_code / (N_ACTIONS - 1))

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (self.action_code == other.action_code
                and np.array_equal(self.prev_frame, other.prev_frame)
                and np.array_equal(self.cur_frame, other.cur_frame))


def make_observation(prev: np.ndarray, cur: np.ndarray, prev_action) -> Observation:
    prev = np.asarray(prev, dtype=np.int8)
    cur = np.asarray(cur, dtype=np.int8)
    if prev.shape != cur.shape or prev.ndim != 2 or prev.shape[0] != prev.shape[1]:
        raise ContractViolation(f"frame shapes differ or are not square: {prev.shape} vs {cur.shape}")
    return Observation(prev, cur, int(Action(prev_action)))


def encode_batch(prev: np.ndarray, cur: np.ndarray, actions: np.ndarray,
                 dtype=np.float32) -> np.ndarray:
    """Encode ``(N, W, W)`` frame pairs and ``(N,)`` actions to ``(N, 13*W*W)``."""
    prev = np.asarray(prev)
    cur = np.asarray(cur)
    n, w = prev.shape[0], prev.shape[-1]
    out = np.zeros((n, N_CHANNELS, w, w), dtype=dtype)
    eye = np.eye(N_CLASSES, dtype=dtype)
    out[:, :N_CLASSES] = eye[prev].transpose(0, 3, 1, 2)
    out[:, N_CLASSES:2 * N_CLASSES] = eye[cur].transpose(0, 3, 1, 2)
    out[:, -1] = (np.asarray(actions, dtype=dtype) / (N_ACTIONS - 1))[:, None, None]
    return out.reshape(n, -1)


def encode_input(obs: Observation, dtype=np.float32) -> np.ndarray:
    return encode_batch(obs.prev_frame[None], obs.cur_frame[None],
                        np.array([obs.action_code]), dtype=dtype)[0]


def decode_input(vec: np.ndarray, window: int = WINDOW) -> Observation:
    """Invert ``encode_input`` by channel argmax."""
    planes = np.asarray(vec).reshape(N_CHANNELS, window, window)
    prev = planes[:N_CLASSES].argmax(axis=0).astype(np.int8)
    cur = planes[N_CLASSES:2 * N_CLASSES].argmax(axis=0).astype(np.int8)
    action = int(round(float(planes[-1, 0, 0]) * (N_ACTIONS - 1)))
    return Observation(prev, cur, action)


# -- frame serialisation ------------------------------------------------------


def rle_encode(frame: np.ndarray) -> str:
    """Row-major run-length code, e.g. ``"1*16,0*7,5*1"``."""
    flat = np.asarray(frame).ravel()
    cuts = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], cuts])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return ",".join(f"{int(flat[s])}*{int(n)}" for s, n in zip(starts, lengths))


def rle_decode(text: str, window: int = WINDOW) -> np.ndarray:
    values = []
    for token in text.split(","):
        code, count = token.split("*")
        values.extend([int(code)] * int(count))
    if len(values) != window * window:
        raise ValueError(f"run-length code expands to {len(values)} cells, expected {window * window}")
    return np.array(values, dtype=np.int8).reshape(window, window)


def observation_to_pgm(obs: Observation) -> bytes:
    """Binary P5 image: action bar on the top row, then prev | cur side by side.

    Cells map to ``code * 42``; the bar maps the action to ``round(255 * code / 8)``.
    """
    w = obs.window
    img = np.zeros((w + 1, 2 * w), dtype=np.uint8)
    img[0, :] = int(round(255 * obs.action_code / (N_ACTIONS - 1)))
    img[1:, :w] = obs.prev_frame.astype(np.uint8) * PGM_CLASS_SCALE
    img[1:, w:] = obs.cur_frame.astype(np.uint8) * PGM_CLASS_SCALE
    header = f"P5\n{2 * w} {w + 1}\n255\n".encode("ascii")
    return header + img.tobytes()


def frame_to_pgm(frame: np.ndarray) -> bytes:
    h, w = frame.shape
    body = (np.asarray(frame).astype(np.uint8) * PGM_CLASS_SCALE).tobytes()
    return f"P5\n{w} {h}\n255\n".encode("ascii") + body


def read_pgm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def write_pgm(path, data: bytes) -> Path:
    path = Path(path)
    path.write_bytes(data)
    return path
