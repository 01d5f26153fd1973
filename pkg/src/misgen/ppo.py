"""PPO with GAE for the standard agent and reward-model fine-tuning."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from misgen import seeds
from misgen._validation import ContractViolation, check_same_length, check_unit_interval
from misgen.env import N_ACTIONS
from misgen.levels import LevelDistribution, Mode, generate_level
from misgen.nn import Adam, AdamHyper, Network, clip_by_global_norm, load_checkpoint, save_checkpoint
from misgen.obs import WINDOW, encode_batch, input_size
from misgen.rollout import BatchEnv, ObservationBatch, Policy, run_episodes, scoring

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "env_steps", "mean_episode_reward", "probe_coin_rate",
               "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")


class RewardIsolationError(ContractViolation):
    """Environment reward requested on levels where no reward may be observed."""


class RewardKind(str, enum.Enum):
    ENV_TRUE = "env"
    MODEL = "model"
    PRUDENT = "prudent"


@dataclass(frozen=True)
class RewardSource:
    """Where the learner's reward comes from.

    MODEL grants 1 at the first step of an episode whose head probability
    reaches the pair's threshold. PRUDENT latches each head separately and
    pays half per head, i.e. the average of the two once-only rewards.
    """

    kind: RewardKind
    head: int | None = None
    pair: Any = field(default=None, compare=False, repr=False)

    @classmethod
    def env_true(cls) -> "RewardSource":
        return cls(RewardKind.ENV_TRUE)

    @classmethod
    def model(cls, pair, head: int) -> "RewardSource":
        if head not in (0, 1):
            raise ContractViolation("head must be 0 or 1")
        return cls(RewardKind.MODEL, head, pair)

    @classmethod
    def prudent(cls, pair) -> "RewardSource":
        return cls(RewardKind.PRUDENT, None, pair)

    def check_legal(self, mode) -> None:
        if self.kind is RewardKind.ENV_TRUE and Mode(mode) is Mode.TEST_RANDOM:
            raise RewardIsolationError(
                "the true reward is never available on randomised-coin levels")
        if self.kind is not RewardKind.ENV_TRUE and self.pair is None:
            raise ContractViolation("model reward sources need a hypothesis pair")

    def describe(self) -> str:
        if self.kind is RewardKind.MODEL:
            return f"model:{self.head}"
        return self.kind.value


# -- advantage estimation -------------------------------------------------------


def compute_gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95,
                last_value=0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and return targets along axis 0.

    ``last_value`` bootstraps the step after the final one; it is masked
    by the final ``done`` like every other successor value.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    check_same_length(rewards, values, dones, names=("rewards", "values", "dones"))
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ContractViolation("rewards, values and dones must share a shape")
    check_unit_interval(gamma, "gamma")
    check_unit_interval(lam, "lambda")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(last_value, dtype=np.float64), rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# -- clipped surrogate ----------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ppo_loss(logits, values, actions, old_logp, advantages, returns, clip: float = 0.2,
             value_coef: float = 0.5, entropy_coef: float = 0.01):
    """Loss, statistics and gradients w.r.t. logits and values.

    ``loss = -mean(min(r A, clip(r) A)) + value_coef mean((v - R)^2) - entropy_coef mean(H)``
    """
    logits = np.asarray(logits, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    actions = np.asarray(actions, dtype=np.int64)
    old_logp = np.asarray(old_logp, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)
    n = logits.shape[0]
    rows = np.arange(n)

    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr1, surr2 = ratio * adv, clipped * adv
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = np.mean((values - ret) ** 2)
    entropy_each = -(p * logp_all).sum(axis=1)
    entropy = entropy_each.mean()
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy

    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite PPO loss: policy={policy_loss} value={value_loss} entropy={entropy} "
            f"max|logit|={np.abs(logits).max():.3g} ratio range=({ratio.min():.3g}, {ratio.max():.3g}) "
            f"adv range=({adv.min():.3g}, {adv.max():.3g})")

    unclipped = surr1 <= surr2
    d_ratio = np.where(unclipped, -adv, 0.0) / n
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    d_logits = (d_ratio * ratio)[:, None] * (onehot - p)
    d_logits += entropy_coef / n * p * (logp_all + entropy_each[:, None])
    d_values = value_coef * 2.0 * (values - ret) / n
    stats = {
        "loss": float(loss), "policy_loss": float(policy_loss),
        "value_loss": float(value_loss), "entropy": float(entropy),
        "approx_kl": float(np.mean(old_logp - logp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
    }
    return stats, d_logits, d_values


# -- rollouts -------------------------------------------------------------------


@dataclass
class RolloutBatch:
    """One iteration of experience, arrays shaped ``(T, N, ...)``."""

    prev: np.ndarray
    cur: np.ndarray
    prev_action: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(-1, *arr.shape[2:])


def sample_actions(logits: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF sampling from softmax(logits) with one uniform per row."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    cdf = np.cumsum(np.exp(logp), axis=1)
    actions = np.minimum((u[:, None] >= cdf).sum(axis=1), logits.shape[1] - 1)
    return actions, logp[np.arange(actions.size), actions]


def _level_feed(dist: LevelDistribution, base: int, pool: int, rng: np.random.Generator):
    while True:
        yield generate_level(dist, base + int(rng.integers(pool)))


def model_rewards(source: RewardSource, probs: np.ndarray, dones: np.ndarray,
                  latch: np.ndarray) -> np.ndarray:
    """Once-per-episode rewards from head probabilities ``(T, N, 2)``.

    ``latch`` ``(N, 2)`` carries the per-head latches across calls and is
    updated in place.
    """
    tau = source.pair.tau
    T, N = dones.shape
    rewards = np.zeros((T, N))
    for t in range(T):
        fire = (probs[t] >= tau) & ~latch
        if source.kind is RewardKind.MODEL:
            h = source.head
            rewards[t] = fire[:, h]
            latch[:, h] |= fire[:, h]
        else:
            rewards[t] = 0.5 * fire.sum(axis=1)
            latch |= fire
        latch[dones[t]] = False
    return rewards


class PPOAgent(BaseEstimator, Policy):
    """PPO actor-critic over the egocentric observation encoding.

    ``fit`` trains on levels from a distribution with a given reward source;
    the fitted agent is itself a :class:`~misgen.rollout.Policy`.
    """

    def __init__(self, hidden=(256, 256), lr=3e-4, gamma=0.99, lam=0.95, clip=0.2,
                 epochs=4, minibatch=256, n_envs=8, horizon=256, entropy_coef=0.01,
                 value_coef=0.5, max_grad_norm=0.5, total_steps=1_000_000, seed=0,
                 probe_every=10, probe_levels=64, n_train_levels=100_000, window=WINDOW):
        self.hidden = hidden
        self.lr = lr
        self.gamma = gamma
        self.lam = lam
        self.clip = clip
        self.epochs = epochs
        self.minibatch = minibatch
        self.n_envs = n_envs
        self.horizon = horizon
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.max_grad_norm = max_grad_norm
        self.total_steps = total_steps
        self.seed = seed
        self.probe_every = probe_every
        self.probe_levels = probe_levels
        self.n_train_levels = n_train_levels
        self.window = window

    # -- Policy --

    def init_network(self) -> Network:
        return Network(input_size(self.window), self.hidden, {"policy": N_ACTIONS, "value": 1},
                       seed=self.seed, head_scale={"policy": 0.01, "value": 1.0})

    def logits(self, obs: ObservationBatch) -> np.ndarray:
        x = encode_batch(obs.prev, obs.cur, obs.prev_action)
        return self.net_.forward(x, keep=False)["policy"]

    def act(self, obs: ObservationBatch, u: np.ndarray) -> np.ndarray:
        return sample_actions(self.logits(obs), np.asarray(u))[0]

    def predict(self, X) -> np.ndarray:
        """Greedy actions for already-encoded inputs."""
        out = self.net_.forward(np.asarray(X, dtype=np.float32), keep=False)
        return out["policy"].argmax(axis=1)

    # -- training --

    def fit(self, dist: LevelDistribution, reward_source: RewardSource | None = None,
            init: Network | None = None, log_path=None) -> "PPOAgent":
        source = reward_source or RewardSource.env_true()
        source.check_legal(dist.mode)
        self.reward_source_ = source.describe()
        self.net_ = init.copy() if init is not None else self.init_network()
        self.log_ = []
        self.env_steps_ = 0
        if self.total_steps <= 0:
            if log_path is not None:
                write_training_log(log_path, self.log_)
            return self

        base = seeds.TRAIN if dist.mode is Mode.TRAIN_RIGHT else seeds.FINETUNE
        pool = min(int(self.n_train_levels), seeds.BLOCK)
        feed_rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        env = BatchEnv(_level_feed(dist, base, pool, feed_rng), self.n_envs, dist.mode,
                       window=self.window)
        slot_rngs = [np.random.default_rng(np.random.SeedSequence([self.seed, 2, s]))
                     for s in range(self.n_envs)]
        self._optimizer = Adam(self.net_, AdamHyper(lr=self.lr))
        latch = np.zeros((self.n_envs, 2), dtype=bool)
        episode_return = np.zeros(self.n_envs)
        iteration = 0
        while self.env_steps_ < self.total_steps:
            batch, finished_returns = self._collect(env, slot_rngs, source, latch, episode_return)
            self.env_steps_ += batch.actions.size
            stats = self._update(batch, iteration)
            row = {"iteration": iteration, "env_steps": self.env_steps_,
                   "mean_episode_reward": (float(np.mean(finished_returns))
                                           if finished_returns else float("nan")),
                   "probe_coin_rate": float("nan")}
            row.update({k: stats[k] for k in LOG_COLUMNS if k in stats})
            last = self.env_steps_ >= self.total_steps
            if (source.kind is RewardKind.ENV_TRUE and self.probe_every
                    and (iteration % self.probe_every == 0 or last)):
                row["probe_coin_rate"] = self.probe(dist)
            self.log_.append(row)
            log.info("iter %d steps %d reward %.3f probe %.3f kl %.4f", iteration,
                     self.env_steps_, row["mean_episode_reward"], row["probe_coin_rate"],
                     row.get("approx_kl", float("nan")))
            iteration += 1
        if log_path is not None:
            write_training_log(log_path, self.log_)
        return self

    def _collect(self, env: BatchEnv, slot_rngs, source: RewardSource, latch, episode_return):
        T, N, w = self.horizon, self.n_envs, self.window
        prev = np.zeros((T, N, w, w), dtype=np.int8)
        cur = np.zeros_like(prev)
        trans_cur = np.zeros_like(prev)
        prev_action = np.zeros((T, N), dtype=np.int64)
        actions = np.zeros((T, N), dtype=np.int64)
        logp = np.zeros((T, N))
        values = np.zeros((T, N))
        dones = np.zeros((T, N), dtype=bool)
        env_rewards = np.zeros((T, N))
        for t in range(T):
            obs = env.observation()
            x = encode_batch(obs.prev, obs.cur, obs.prev_action)
            out = self.net_.forward(x, keep=False)
            u = np.array([r.random() for r in slot_rngs])
            a, lp = sample_actions(out["policy"], u)
            res = env.step(a, obs.slots)
            prev[t], cur[t], prev_action[t] = obs.prev, obs.cur, obs.prev_action
            actions[t], logp[t] = a, lp
            values[t] = out["value"][:, 0]
            dones[t] = res.done
            trans_cur[t] = res.cur
            if source.kind is RewardKind.ENV_TRUE:
                env_rewards[t] = res.reward
        obs = env.observation()
        last_value = self.net_.forward(encode_batch(obs.prev, obs.cur, obs.prev_action),
                                       keep=False)["value"][:, 0]

        if source.kind is RewardKind.ENV_TRUE:
            rewards = env_rewards
        else:
            # transition observation of step t is (frame before, frame after, action)
            xt = encode_batch(cur.reshape(-1, w, w), trans_cur.reshape(-1, w, w),
                              actions.reshape(-1))
            probs = source.pair.head_proba(xt).reshape(T, N, 2)
            rewards = model_rewards(source, probs, dones, latch)

        finished = []
        for t in range(T):
            episode_return += rewards[t]
            for e in np.flatnonzero(dones[t]):
                finished.append(float(episode_return[e]))
                episode_return[e] = 0.0

        adv, ret = compute_gae(rewards, values, dones.astype(np.float64), self.gamma, self.lam,
                               last_value)
        batch = RolloutBatch(prev, cur, prev_action, actions, logp, rewards, values,
                             dones, adv, ret)
        return batch, finished

    def _update(self, batch: RolloutBatch, iteration: int) -> dict:
        n = batch.actions.size
        prev, cur = batch.flat("prev"), batch.flat("cur")
        prev_action, actions = batch.flat("prev_action"), batch.flat("actions")
        old_logp, ret = batch.flat("logp"), batch.flat("returns")
        adv = batch.flat("advantages")
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 3, iteration]))
        acc: dict[str, list] = {}
        optimizer = getattr(self, "_optimizer", None)
        if optimizer is None or optimizer.net is not self.net_:
            optimizer = self._optimizer = Adam(self.net_, AdamHyper(lr=self.lr))
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.minibatch):
                idx = order[start:start + self.minibatch]
                x = encode_batch(prev[idx], cur[idx], prev_action[idx])
                out = self.net_.forward(x)
                stats, d_logits, d_values = ppo_loss(
                    out["policy"], out["value"], actions[idx], old_logp[idx], adv[idx],
                    ret[idx], self.clip, self.value_coef, self.entropy_coef)
                grads = self.net_.backward({"policy": d_logits, "value": d_values[:, None]})
                stats["grad_norm"] = clip_by_global_norm(grads, self.max_grad_norm)
                optimizer.step(grads)
                for k, v in stats.items():
                    acc.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def probe(self, dist: LevelDistribution) -> float:
        """Coin rate on held-out probe levels of a reward-bearing distribution."""
        if dist.mode is Mode.TEST_RANDOM:
            raise RewardIsolationError("probing reads the reward; not allowed on E'")
        levels = (generate_level(dist, seeds.PROBE + i) for i in range(self.probe_levels))
        with scoring():
            summaries = run_episodes(self, levels, dist.mode, rng_seed=self.seed,
                                     n_slots=self.probe_levels)
            return float(np.mean([s.reward for s in summaries]))

    # -- persistence --

    def save(self, path, extra: dict | None = None):
        meta = {"kind": "policy", "params": _jsonable(self.get_params()),
                "env_steps": int(getattr(self, "env_steps_", 0)),
                "reward_source": getattr(self, "reward_source_", None)}
        meta.update(extra or {})
        return save_checkpoint(path, self.net_, meta)

    @classmethod
    def load(cls, path) -> "PPOAgent":
        net, meta = load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ValueError(f"{path} is not a policy checkpoint")
        params = dict(meta["params"])
        params["hidden"] = tuple(params["hidden"])
        agent = cls(**params)
        agent.net_ = net
        agent.env_steps_ = meta.get("env_steps", 0)
        agent.reward_source_ = meta.get("reward_source")
        agent.log_ = []
        return agent


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def write_training_log(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in LOG_COLUMNS})
    return path


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def train_policy(dist: LevelDistribution, reward_source: RewardSource | None = None,
                 total_steps: int = 1_000_000, hyper: dict | None = None, seed: int = 0,
                 init: Network | None = None, log_path=None) -> tuple[PPOAgent, list[dict]]:
    """Train a PPO agent; returns the agent and its per-iteration log."""
    agent = PPOAgent(**(hyper or {}))
    agent.set_params(total_steps=total_steps, seed=seed)
    agent.fit(dist, reward_source, init=init, log_path=log_path)
    return agent, agent.log_
