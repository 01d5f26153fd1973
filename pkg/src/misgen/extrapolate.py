"""Labeled and unlabeled transition datasets and two diversified reward heads.

A transition record holds the frame before a step, the frame after it and
the action taken, encoded exactly like a policy observation.  Unlabeled
records have no label field at all.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator

from misgen import seeds
from misgen._validation import ContractViolation, GateFailure, check_probabilities
from misgen.env import Action, CellClass, Level
from misgen.levels import LevelDistribution, Mode, generate_level
from misgen.nn import Adam, AdamHyper, Network, load_checkpoint, save_checkpoint
from misgen.obs import WINDOW, encode_batch, rle_decode, rle_encode
from misgen.rollout import BatchEnv, Policy, episode_rng

TAU = 0.5
HOLDOUT_ACCURACY_GATE = 0.95
_LOG_FLOOR = 1e-12


# -- datasets -------------------------------------------------------------------


@dataclass(frozen=True)
class UnlabeledSet:
    """Transitions from randomised-coin levels; carries no reward information."""

    prev: np.ndarray          # (N, W, W) int8
    cur: np.ndarray
    actions: np.ndarray       # (N,)
    level_seeds: np.ndarray   # (N,) uint64
    t: np.ndarray             # (N,) timestep reached by the transition

    def __post_init__(self):
        n = len(self.actions)
        for name in ("prev", "cur", "level_seeds", "t"):
            if len(getattr(self, name)) != n:
                raise ContractViolation(f"{name} length differs from actions")

    def __len__(self):
        return len(self.actions)

    def encode(self, idx=None) -> np.ndarray:
        sl = slice(None) if idx is None else idx
        return encode_batch(self.prev[sl], self.cur[sl], self.actions[sl])

    def provenance(self) -> list[tuple[int, int]]:
        return [(int(s), int(t)) for s, t in zip(self.level_seeds, self.t)]

    def _record(self, i: int) -> dict:
        return {"provenance": {"seed": int(self.level_seeds[i]), "t": int(self.t[i])},
                "action_code": int(self.actions[i]),
                "frames": [rle_encode(self.prev[i]), rle_encode(self.cur[i])]}

    def records(self) -> Iterable[dict]:
        return (self._record(i) for i in range(len(self)))


@dataclass(frozen=True)
class LabeledSet(UnlabeledSet):
    """Transitions from coin-at-right levels with a reward label per record."""

    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    neg_per_pos: int = 0

    def __post_init__(self):
        super().__post_init__()
        if len(self.labels) != len(self.actions):
            raise ContractViolation("labels length differs from actions")

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.labels))

    def _record(self, i: int) -> dict:
        rec = super()._record(i)
        rec["label"] = int(self.labels[i])
        return rec

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.prev[idx], self.cur[idx], self.actions[idx],
                          self.level_seeds[idx], self.t[idx], self.labels[idx], self.neg_per_pos)


def write_dataset(path, dataset: UnlabeledSet) -> Path:
    """JSON Lines, one transition per line, in dataset order."""
    path = Path(path)
    with path.open("w") as fh:
        for rec in dataset.records():
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def read_dataset(path, window: int = WINDOW) -> UnlabeledSet:
    """Read a dataset; records with labels give a LabeledSet, otherwise an UnlabeledSet."""
    prev, cur, actions, level_seeds, ts, labels = [], [], [], [], [], []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                p, c = rec["frames"]
                prev.append(rle_decode(p, window))
                cur.append(rle_decode(c, window))
                actions.append(int(rec["action_code"]))
                level_seeds.append(int(rec["provenance"]["seed"]))
                ts.append(int(rec["provenance"]["t"]))
                if "label" in rec:
                    labels.append(int(rec["label"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    if labels and len(labels) != len(actions):
        raise ValueError(f"{path}: mixes labeled and unlabeled records")
    arrays = (np.array(prev, dtype=np.int8).reshape(-1, window, window),
              np.array(cur, dtype=np.int8).reshape(-1, window, window),
              np.array(actions, dtype=np.int64), np.array(level_seeds, dtype=np.uint64),
              np.array(ts, dtype=np.int64))
    if labels:
        ratio = int(round((len(labels) - sum(labels)) / max(sum(labels), 1)))
        return LabeledSet(*arrays, labels=np.array(labels, dtype=np.int8), neg_per_pos=ratio)
    return UnlabeledSet(*arrays)


# -- collection -----------------------------------------------------------------


def _drive(policy: Policy, env: BatchEnv, rng_seed: int, rngs: dict, visit):
    while env.any_active:
        obs = env.observation()
        u = np.array([rngs[int(s)].random() for s in obs.slots])
        actions = policy.act(obs, u)
        visit(env.step(actions, obs.slots))


def collect_labeled(policy: Policy, dist: LevelDistribution, episodes: int,
                    neg_per_pos: int = 10, seed: int = 0, n_slots: int = 64,
                    seed_base: int = seeds.COLLECT) -> LabeledSet:
    """One positive per coin-collecting episode plus ``neg_per_pos`` negatives each.

    Negatives are drawn uniformly without replacement from all non-reward
    transitions of the collected episodes.
    """
    if dist.mode is not Mode.TRAIN_RIGHT:
        raise ContractViolation("labeled data comes from coin-at-right levels only")
    if episodes < 1 or neg_per_pos < 1:
        raise ContractViolation("episodes and neg_per_pos must be positive")
    rngs: dict[int, np.random.Generator] = {}

    def on_reset(slot, level):
        rngs[slot] = episode_rng(seed, level.seed)
        policy.reset(slot, level)

    levels = (generate_level(dist, seed_base + i) for i in range(episodes))
    env = BatchEnv(levels, min(n_slots, episodes), dist.mode, on_reset=on_reset)
    pos: list[tuple] = []
    neg: list[tuple] = []

    def visit(res):
        reward = res.reward
        for i in range(res.slots.size):
            item = (int(res.level_seeds[i]), int(res.t[i]), res.prev[i], res.cur[i],
                    int(res.action[i]))
            (pos if reward[i] > 0 else neg).append(item)

    _drive(policy, env, seed, rngs, visit)
    if not pos:
        raise GateFailure(f"no coin collected in {episodes} episodes; policy too weak to label")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    neg.sort(key=lambda r: (r[0], r[1]))
    n_neg = min(len(neg), neg_per_pos * len(pos))
    chosen = [neg[i] for i in np.sort(rng.choice(len(neg), n_neg, replace=False))]
    items = sorted(pos, key=lambda r: (r[0], r[1])) + chosen
    labels = np.array([1] * len(pos) + [0] * n_neg, dtype=np.int8)
    order = rng.permutation(len(items))
    items = [items[i] for i in order]
    return LabeledSet(
        np.array([r[2] for r in items], dtype=np.int8),
        np.array([r[3] for r in items], dtype=np.int8),
        np.array([r[4] for r in items], dtype=np.int64),
        np.array([r[0] for r in items], dtype=np.uint64),
        np.array([r[1] for r in items], dtype=np.int64),
        labels=labels[order], neg_per_pos=neg_per_pos)


def collect_unlabeled(dist: LevelDistribution, episodes: int = 50, steps_per_episode: int = 50,
                      explorer: Policy | None = None, seed: int = 0, n_slots: int = 50,
                      seed_base: int = seeds.EXPLORE) -> UnlabeledSet:
    """Every transition of the first ``steps_per_episode`` steps on fresh levels.

    Only frames and actions are kept; the step results' reward channel is
    never read.
    """
    if dist.mode is not Mode.TEST_RANDOM:
        raise ContractViolation("unlabeled data comes from randomised-coin levels only")
    if explorer is None:
        from misgen.policies import BaselinePolicy
        explorer = BaselinePolicy()
    rngs: dict[int, np.random.Generator] = {}

    def on_reset(slot, level):
        rngs[slot] = episode_rng(seed, level.seed)
        explorer.reset(slot, level)

    levels = (generate_level(dist, seed_base + i) for i in range(episodes))
    env = BatchEnv(levels, min(n_slots, max(episodes, 1)), dist.mode,
                   truncate_at=steps_per_episode, on_reset=on_reset)
    rows: list[tuple] = []

    def visit(res):
        for i in range(res.slots.size):
            rows.append((int(res.level_seeds[i]), int(res.t[i]), res.prev[i], res.cur[i],
                         int(res.action[i])))

    _drive(explorer, env, seed, rngs, visit)
    rows.sort(key=lambda r: (r[0], r[1]))
    w = env.window
    return UnlabeledSet(
        np.array([r[2] for r in rows], dtype=np.int8).reshape(-1, w, w),
        np.array([r[3] for r in rows], dtype=np.int8).reshape(-1, w, w),
        np.array([r[4] for r in rows], dtype=np.int64),
        np.array([r[0] for r in rows], dtype=np.uint64),
        np.array([r[1] for r in rows], dtype=np.int64))


# -- mutual information -----------------------------------------------------------


def _joint(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pa = np.stack([1.0 - p, p])
    qb = np.stack([1.0 - q, q])
    return pa @ qb.T / p.size


def mutual_information(p, q) -> float:
    """MI (nats) of two Bernoulli prediction batches via their soft 2x2 joint."""
    p = check_probabilities(np.asarray(p, dtype=np.float64), "p")
    q = check_probabilities(np.asarray(q, dtype=np.float64), "q")
    if p.shape != q.shape:
        raise ContractViolation("p and q must have the same length")
    joint = _joint(p, q)
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    nz = joint > 0
    return float(max(0.0, np.sum(joint[nz] * np.log(joint[nz] / outer[nz]))))


def mutual_information_grad(p: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """MI and its gradients w.r.t. each probability."""
    joint = np.maximum(_joint(p, q), _LOG_FLOOR)
    mp, mq = joint.sum(axis=1), joint.sum(axis=0)
    g = np.log(joint) - np.log(mp)[:, None] - np.log(mq)[None, :]
    mi = float(np.sum(joint * g))
    n = p.size
    # d joint[a, b] / d p_i = s_a q_b,i / n with s = (-1, +1)
    dp = ((g[1] - g[0]) @ np.stack([1.0 - q, q])) / n
    dq = ((g[:, 1] - g[:, 0]) @ np.stack([1.0 - p, p])) / n
    return mi, dp, dq


# -- diversified heads ------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class DiverseHeadsClassifier(BaseEstimator):
    """Two binary heads on a shared trunk, fit to agree on labeled data while
    sharing as little information as possible on unlabeled data.

    Loss per step: weighted CE of each head on a labeled batch plus
    ``lambda_mi`` times the MI between the heads on an unlabeled batch.
    """

    def __init__(self, hidden=(256, 128), lambda_mi=10.0, epochs=50, batch_size=128,
                 unlabeled_batch_size=128, lr=1e-3, tau=TAU, class_weight="balanced", seed=0):
        self.hidden = hidden
        self.lambda_mi = lambda_mi
        self.epochs = epochs
        self.batch_size = batch_size
        self.unlabeled_batch_size = unlabeled_batch_size
        self.lr = lr
        self.tau = tau
        self.class_weight = class_weight
        self.seed = seed

    def fit(self, X, y, X_unlabeled) -> "DiverseHeadsClassifier":
        X = np.asarray(X, dtype=np.float32)
        U = np.asarray(X_unlabeled, dtype=np.float32)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or U.ndim != 2 or X.shape[1] != U.shape[1]:
            raise ContractViolation("X and X_unlabeled must be 2-D with equal widths")
        if len(X) != len(y):
            raise ContractViolation("X and y lengths differ")
        if len(U) == 0 or len(X) == 0:
            raise ContractViolation("both datasets must be nonempty")
        if not set(np.unique(y)) == {0.0, 1.0}:
            raise ContractViolation("labeled data needs both classes")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        weights = np.ones_like(y)
        if self.class_weight == "balanced":
            n_pos = y.sum()
            weights = np.where(y > 0, len(y) / (2 * n_pos), len(y) / (2 * (len(y) - n_pos)))
        self.net_ = Network(X.shape[1], self.hidden, {"h0": 1, "h1": 1}, seed=self.seed)
        opt = Adam(self.net_, AdamHyper(lr=self.lr))
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 31]))
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            stats = []
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                uidx = rng.integers(0, len(U), min(self.unlabeled_batch_size, len(U)))
                stats.append(self._step(opt, X[idx], y[idx], weights[idx], U[uidx]))
            self.history_.append({"epoch": epoch, **{k: float(np.mean([s[k] for s in stats]))
                                                     for k in stats[0]}})
        return self

    def _step(self, opt: Adam, xb, yb, wb, ub) -> dict:
        stats, grads = self.loss_and_grads(xb, yb, wb, ub)
        opt.step(grads)
        return stats

    def loss_and_grads(self, xb, yb, wb, ub) -> tuple[dict, dict]:
        """Batch loss statistics and parameter gradients of ``stats["loss"]``."""
        nl = len(xb)
        out = self.net_.forward(np.concatenate([xb, ub]))
        z = np.concatenate([out["h0"], out["h1"]], axis=1).astype(np.float64)
        zl, zu = z[:nl], z[nl:]
        p = _sigmoid(zl)
        ce = wb[:, None] * (np.logaddexp(0.0, zl) - yb[:, None] * zl)
        d = np.zeros_like(z)
        d[:nl] = wb[:, None] * (p - yb[:, None]) / nl
        pu = _sigmoid(zu)
        mi = 0.0
        if self.lambda_mi:
            mi, dp0, dp1 = mutual_information_grad(pu[:, 0], pu[:, 1])
            d[nl:, 0] += self.lambda_mi * dp0 * pu[:, 0] * (1 - pu[:, 0])
            d[nl:, 1] += self.lambda_mi * dp1 * pu[:, 1] * (1 - pu[:, 1])
        ce0, ce1 = ce.mean(axis=0)
        loss = ce0 + ce1 + self.lambda_mi * mi
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite head loss: ce=({ce0}, {ce1}) mi={mi}")
        grads = self.net_.backward({"h0": d[:, :1], "h1": d[:, 1:]})
        return {"loss": float(loss), "ce0": float(ce0), "ce1": float(ce1), "mi": float(mi)}, grads

    def head_proba(self, X) -> np.ndarray:
        """Positive-class probability of each head, shape ``(N, 2)``."""
        out = self.net_.forward(np.asarray(X, dtype=np.float32), keep=False)
        z = np.concatenate([out["h0"], out["h1"]], axis=1).astype(np.float64)
        return _sigmoid(z)

    def predict(self, X) -> np.ndarray:
        """Per-head labels at ``tau``, shape ``(N, 2)``."""
        return (self.head_proba(X) >= self.tau).astype(np.int64)

    def swap_heads(self) -> None:
        p = self.net_.params
        for part in ("weight", "bias"):
            p[f"head.h0.{part}"], p[f"head.h1.{part}"] = p[f"head.h1.{part}"], p[f"head.h0.{part}"]


def disagreement_rate(proba: np.ndarray, tau: float = TAU) -> float:
    labels = proba >= tau
    return float(np.mean(labels[:, 0] != labels[:, 1])) if len(labels) else 0.0


# -- the hypothesis pair -----------------------------------------------------------


@dataclass
class HypothesisPair:
    """Trained reward heads; head 0 is the right-end-like one, head 1 the coin-like one."""

    net: Network
    tau: float = TAU
    metadata: dict = field(default_factory=dict)

    def head_proba(self, X) -> np.ndarray:
        out = self.net.forward(np.asarray(X, dtype=np.float32), keep=False)
        z = np.concatenate([out["h0"], out["h1"]], axis=1).astype(np.float64)
        return _sigmoid(z)

    def save(self, path):
        meta = {"kind": "hypothesis_pair", "tau": self.tau, **self.metadata}
        return save_checkpoint(path, self.net, meta)

    @classmethod
    def load(cls, path) -> "HypothesisPair":
        net, meta = load_checkpoint(path)
        if meta.get("kind") != "hypothesis_pair":
            raise ValueError(f"{path} is not a hypothesis-pair checkpoint")
        meta = dict(meta)
        meta.pop("kind")
        tau = float(meta.pop("tau"))
        return cls(net, tau, meta)


def head_reward(pair: HypothesisPair, head: int, obs) -> float:
    """Sigmoid of one head's logit on a single observation."""
    from misgen.obs import encode_input
    if head not in (0, 1):
        raise ContractViolation("head must be 0 or 1")
    return float(pair.head_proba(encode_input(obs)[None, :])[0, head])


def probe_transitions(width: int = 48, height: int = 16, window: int = WINDOW) -> dict[str, np.ndarray]:
    """Encoded synthetic transitions used to fix the head order.

    ``right``: a step onto the rightmost column with the coin far behind.
    ``coin``: a step onto a coin in the middle of a flat level.
    """
    from misgen.env import initial_state, step
    from misgen.obs import render_frame

    def flat(coin_x, spawn_x):
        t = np.zeros((height, width), dtype=np.int8)
        t[0, :] = t[-2:, :] = t[:, 0] = t[:, -1] = CellClass.WALL
        return Level(width, height, t, (coin_x, height - 3), (), (spawn_x, height - 3), 0)

    def transition(level):
        s0 = initial_state(level)
        s1, _ = step(s0, Action.RIGHT, level)
        return encode_batch(render_frame(s0, level, window)[None],
                            render_frame(s1, level, window)[None], np.array([Action.RIGHT]))

    right = transition(flat(coin_x=2, spawn_x=width - 3))
    coin = transition(flat(coin_x=width // 2, spawn_x=width // 2 - 1))
    return {"right": right, "coin": coin}


def order_heads(clf: DiverseHeadsClassifier, window: int = WINDOW) -> bool:
    """Swap heads if needed so head 0 prefers the right probe; returns whether swapped."""
    probes = probe_transitions(window=window)
    r = clf.head_proba(probes["right"])[0]
    c = clf.head_proba(probes["coin"])[0]
    if (r[0] - r[1]) + (c[1] - c[0]) < 0:
        clf.swap_heads()
        return True
    return False


def _holdout_split(level_seeds: np.ndarray, labels: np.ndarray, frac: float, seed: int):
    """Split by level so no episode straddles train and holdout."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    uniq = np.unique(level_seeds)
    held = set(rng.choice(uniq, max(1, int(round(frac * uniq.size))), replace=False).tolist())
    mask = np.array([s in held for s in level_seeds.tolist()])
    if labels[mask].min() == labels[mask].max() or labels[~mask].min() == labels[~mask].max():
        mask = rng.random(labels.size) < frac
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def train_diverse_heads(labeled: LabeledSet, unlabeled: UnlabeledSet, lambda_mi: float = 10.0,
                        hyper: dict | None = None, seed: int = 0, holdout: float = 0.2,
                        gate: float = HOLDOUT_ACCURACY_GATE, window: int = WINDOW) -> HypothesisPair:
    """Fit, order and calibrate the two heads; raise GateFailure on low holdout accuracy."""
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ContractViolation("both datasets must be nonempty")
    train_idx, hold_idx = _holdout_split(labeled.level_seeds, labeled.labels, holdout, seed)
    clf = DiverseHeadsClassifier(lambda_mi=lambda_mi, seed=seed, **(hyper or {}))
    X = labeled.encode()
    clf.fit(X[train_idx], labeled.labels[train_idx], unlabeled.encode())
    swapped = order_heads(clf, window)
    pred = clf.predict(X[hold_idx])
    acc = (pred == labeled.labels[hold_idx][:, None]).mean(axis=0)
    proba_u = clf.head_proba(unlabeled.encode())
    meta = {
        "lambda_mi": float(lambda_mi), "epochs": int(clf.epochs), "seed": int(seed),
        "hyper": {k: (list(v) if isinstance(v, tuple) else v) for k, v in clf.get_params().items()},
        "holdout_accuracy": [float(a) for a in acc], "holdout_size": int(hold_idx.size),
        "unlabeled_disagreement": disagreement_rate(proba_u, clf.tau),
        "unlabeled_positive_rate": [float(v) for v in (proba_u >= clf.tau).mean(axis=0)],
        "heads_swapped": bool(swapped), "final_loss": clf.history_[-1] if clf.history_ else {},
    }
    pair = HypothesisPair(clf.net_, float(clf.tau), meta)
    if acc.min() < gate:
        raise GateFailure(f"holdout accuracy {acc.round(4).tolist()} below {gate}: {meta}")
    return pair
