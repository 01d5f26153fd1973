"""Independent reference implementations used by the tests."""

import math

import numpy as np

from misgen.obs import input_size
from misgen.ppo import ppo_loss


def brute_force_mi(p, q):
    """MI of the soft 2x2 joint, one table cell at a time."""
    n = len(p)
    joint = [[0.0, 0.0], [0.0, 0.0]]
    for pi, qi in zip(p, q):
        for a in (0, 1):
            for b in (0, 1):
                joint[a][b] += (pi if a else 1 - pi) * (qi if b else 1 - qi) / n
    rows = [joint[a][0] + joint[a][1] for a in (0, 1)]
    cols = [joint[0][b] + joint[1][b] for b in (0, 1)]
    total = 0.0
    for a in (0, 1):
        for b in (0, 1):
            if joint[a][b] > 0:
                total += joint[a][b] * math.log(joint[a][b] / (rows[a] * cols[b]))
    return max(0.0, total)


def gae_oracle(rewards, values, dones, gamma, lam, last_value):
    """Single-sequence advantages by the textbook backward loop."""
    T = len(rewards)
    adv = [0.0] * T
    nxt_adv, nxt_val = 0.0, float(last_value)
    for t in range(T - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * nxt_val * nonterminal - values[t]
        adv[t] = delta + gamma * lam * nonterminal * nxt_adv
        nxt_adv, nxt_val = adv[t], values[t]
    return np.array(adv)


def relative_error(a, n, floor=1e-7):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(net, loss_and_grads, n_params=120, eps=1e-6, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads()`` evaluates on the current ``net.params``.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads()
    names = net.names
    sizes = np.array([net.params[k].size for k in names])
    picks = []
    # spread the probes over every tensor, then fill the rest at random
    for k in names:
        picks.append((k, int(rng.integers(net.params[k].size))))
    while len(picks) < n_params:
        k = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        picks.append((k, int(rng.integers(net.params[k].size))))
    errs = []
    for k, i in picks:
        flat = net.params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up = loss_and_grads()[0]
        flat[i] = old - eps
        down = loss_and_grads()[0]
        flat[i] = old
        numeric = (up - down) / (2 * eps)
        errs.append(relative_error(grads[k].reshape(-1)[i], numeric))
    return float(np.max(errs)), len(picks)


def policy_loss_fn(net, n=16, seed=0):
    rng = np.random.default_rng(seed)
    x = (rng.random((n, input_size())) < 0.2).astype(np.float64)
    actions = rng.integers(0, 9, n)
    old = net.forward(x, keep=False)["policy"]
    old_logp = (old - np.log(np.exp(old).sum(1, keepdims=True)))[np.arange(n), actions]
    old_logp = old_logp + rng.normal(0, 0.05, n)   # ratios near one, off the clip edges
    adv, ret = rng.normal(size=n), rng.normal(size=n)

    def fn():
        out = net.forward(x)
        stats, dl, dv = ppo_loss(out["policy"], out["value"], actions, old_logp, adv, ret,
                                 clip=0.2, value_coef=0.5, entropy_coef=0.01)
        return stats["loss"], net.backward({"policy": dl, "value": dv[:, None]})
    return fn


def synthetic_task(n, rng):
    """Two features that agree perfectly on the labeled data and independently elsewhere."""
    a = rng.choice([-1.0, 1.0], n)
    X = np.stack([a * rng.uniform(0.1, 1, n), a * rng.uniform(0.1, 1, n)], axis=1)
    return X, (a > 0).astype(int)
