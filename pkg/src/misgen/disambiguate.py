"""Show the most indicative frames per head and take one bit choosing between them."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from misgen._validation import ContractViolation
from misgen.extrapolate import HypothesisPair, UnlabeledSet, head_reward
from misgen.obs import make_observation, observation_to_pgm, write_pgm
from misgen.ppo import RewardSource

PROMPT = "Select hypothesis [0/1]:"


@dataclass(frozen=True)
class PanelEntry:
    index: int            # row in the unlabeled set
    score: float
    seed: int
    t: int


@dataclass
class IndicativePanel:
    """Top-k unlabeled transitions per head, best first."""

    k: int
    heads: tuple[tuple[PanelEntry, ...], tuple[PanelEntry, ...]]
    paths: dict[int, list[str]] = field(default_factory=dict)
    hashes: dict[int, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"k": self.k,
                "heads": {str(h): [asdict(e) for e in entries] for h, entries in enumerate(self.heads)},
                "paths": {str(h): p for h, p in self.paths.items()},
                "hashes": {str(h): v for h, v in self.hashes.items()}}


@dataclass(frozen=True)
class HypothesisChoice:
    bit: int
    source: str           # how the bit arrived: "flag" or "prompt"
    timestamp: str


def indicative_frames(pair: HypothesisPair, unlabeled: UnlabeledSet, k: int = 4) -> IndicativePanel:
    """Per head, the ``k`` highest-scoring transitions; ties go to lower (seed, t)."""
    if len(unlabeled) == 0:
        raise ContractViolation("unlabeled set is empty")
    if k < 1:
        raise ContractViolation("k must be at least 1")
    proba = pair.head_proba(unlabeled.encode())
    seeds_, ts = unlabeled.level_seeds, unlabeled.t
    heads = []
    for h in (0, 1):
        order = np.lexsort((ts, seeds_, -proba[:, h]))[:k]
        heads.append(tuple(PanelEntry(int(i), float(proba[i, h]), int(seeds_[i]), int(ts[i]))
                           for i in order))
    return IndicativePanel(min(k, len(unlabeled)), (heads[0], heads[1]))


def render_panel(panel: IndicativePanel, unlabeled: UnlabeledSet, out_dir) -> IndicativePanel:
    """Write one PGM per panel entry and record paths and SHA-256 hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for h, entries in enumerate(panel.heads):
        panel.paths[h], panel.hashes[h] = [], []
        for rank, e in enumerate(entries):
            obs = make_observation(unlabeled.prev[e.index], unlabeled.cur[e.index],
                                   int(unlabeled.actions[e.index]))
            data = observation_to_pgm(obs)
            path = write_pgm(out / f"head{h}_rank{rank}.pgm", data)
            panel.paths[h].append(str(path))
            panel.hashes[h].append(hashlib.sha256(data).hexdigest())
    return panel


def ask_bit(reader: Callable[[str], str] = input, attempts: int = 3) -> int:
    """Prompt until the answer is 0 or 1."""
    for _ in range(attempts):
        answer = reader(PROMPT + " ").strip()
        if answer in ("0", "1"):
            return int(answer)
        print("please answer 0 or 1", file=sys.stderr)
    raise ContractViolation("no valid hypothesis bit given")


def select_hypothesis(pair: HypothesisPair, panel: IndicativePanel, bit: int | None = None,
                      reader: Callable[[str], str] = input,
                      timestamp: str | None = None) -> tuple[RewardSource, dict]:
    """Turn a single bit into a reward source plus an audit manifest.

    The bit is the only information about the shifted levels' goal that
    reaches training.
    """
    source = "flag"
    if bit is None:
        bit, source = ask_bit(reader), "prompt"
    if bit not in (0, 1):
        raise ContractViolation("bit must be 0 or 1")
    stamp = timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    choice = HypothesisChoice(int(bit), source, stamp)
    reward = RewardSource.model(pair, choice.bit)
    manifest = {
        "panel_hashes": {str(h): v for h, v in sorted(panel.hashes.items())},
        "panel": {str(h): [asdict(e) for e in entries] for h, entries in enumerate(panel.heads)},
        "bit": choice.bit,
        "source": reward.describe(),
        "input": choice.source,
        "timestamp": choice.timestamp,
        "information_bits": 1,
    }
    return reward, manifest


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def prudent_reward(pair: HypothesisPair, obs) -> float:
    """Mean of the two heads' rewards on one observation."""
    return 0.5 * (head_reward(pair, 0, obs) + head_reward(pair, 1, obs))
