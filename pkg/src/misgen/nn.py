"""Dense tanh networks with named linear heads over a shared trunk.

Only what the learners need: batched forward, exact reverse-mode gradients,
Adam, and a bit-exact checkpoint format (JSON manifest + little-endian raw
payload).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from misgen._validation import ContractViolation

CHECKPOINT_FORMAT = "misgen-checkpoint/1"


class Network:
    """``input -> tanh hidden layers -> {head: linear outputs}``.

    Parameters are stored in ``self.params`` under stable names
    (``trunk.{i}.weight``, ``head.{name}.bias`` ...), in a fixed order.
    """

    def __init__(self, input_size: int, hidden: Sequence[int], heads: Mapping[str, int],
                 seed: int = 0, dtype=np.float32,
                 head_scale: Mapping[str, float] | None = None):
        self.input_size = int(input_size)
        self.hidden = tuple(int(h) for h in hidden)
        self.heads = {str(k): int(v) for k, v in heads.items()}
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self._cache = None
        rng = np.random.default_rng(seed)
        head_scale = dict(head_scale or {})
        fan_in = self.input_size
        for i, width in enumerate(self.hidden):
            self.params[f"trunk.{i}.weight"] = (
                rng.standard_normal((fan_in, width)) / np.sqrt(fan_in)).astype(self.dtype)
            self.params[f"trunk.{i}.bias"] = np.zeros(width, dtype=self.dtype)
            fan_in = width
        for name, width in self.heads.items():
            scale = head_scale.get(name, 1.0)
            self.params[f"head.{name}.weight"] = (
                scale * rng.standard_normal((fan_in, width)) / np.sqrt(fan_in)).astype(self.dtype)
            self.params[f"head.{name}.bias"] = np.zeros(width, dtype=self.dtype)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def architecture(self) -> dict:
        return {"input_size": self.input_size, "hidden": list(self.hidden),
                "heads": dict(self.heads)}

    def copy(self) -> "Network":
        clone = Network.__new__(Network)
        clone.input_size, clone.hidden, clone.heads = self.input_size, self.hidden, dict(self.heads)
        clone.dtype = self.dtype
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone._cache = None
        return clone

    def astype(self, dtype) -> "Network":
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        clone.params = {k: v.astype(dtype) for k, v in clone.params.items()}
        return clone

    def forward(self, x: np.ndarray, keep: bool = True) -> dict[str, np.ndarray]:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ContractViolation(f"expected input of shape (N, {self.input_size}), got {x.shape}")
        acts = [x]
        h = x
        for i in range(len(self.hidden)):
            h = np.tanh(h @ self.params[f"trunk.{i}.weight"] + self.params[f"trunk.{i}.bias"])
            acts.append(h)
        out = {name: h @ self.params[f"head.{name}.weight"] + self.params[f"head.{name}.bias"]
               for name in self.heads}
        self._cache = acts if keep else None
        return out

    def backward(self, grad_outputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Gradients of ``sum(grad_outputs[h] * outputs[h])`` for the last forward pass."""
        if self._cache is None:
            raise ContractViolation("backward called without a preceding forward pass")
        acts = self._cache
        h = acts[-1]
        grads: dict[str, np.ndarray] = {}
        dh = np.zeros_like(h)
        for name in self.heads:
            g = grad_outputs.get(name)
            if g is None:
                g = np.zeros((h.shape[0], self.heads[name]), dtype=self.dtype)
            g = np.asarray(g, dtype=self.dtype)
            grads[f"head.{name}.weight"] = h.T @ g
            grads[f"head.{name}.bias"] = g.sum(axis=0, dtype=np.float64).astype(self.dtype)
            dh += g @ self.params[f"head.{name}.weight"].T
        for i in reversed(range(len(self.hidden))):
            out = acts[i + 1]
            dz = dh * (1.0 - out * out)
            grads[f"trunk.{i}.weight"] = acts[i].T @ dz
            grads[f"trunk.{i}.bias"] = dz.sum(axis=0, dtype=np.float64).astype(self.dtype)
            if i > 0:
                dh = dz @ self.params[f"trunk.{i}.weight"].T
        return {k: grads[k] for k in self.params}

    def equal(self, other: "Network") -> bool:
        return (self.architecture() == other.architecture()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def zero_gradients(net: Network) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in net.params.items()}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction; updates the network in place."""

    def __init__(self, net: Network, hyper: AdamHyper = AdamHyper()):
        self.net = net
        self.hyper = hyper
        self.m = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> Network:
        if set(grads) != set(self.net.params):
            raise ContractViolation("gradient names do not match network parameters")
        for k, g in grads.items():
            if g.shape != self.net.params[k].shape:
                raise ContractViolation(f"gradient shape mismatch for {k}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k}")
        h = self.hyper
        self.t += 1
        c1 = 1.0 - h.beta1 ** self.t
        c2 = 1.0 - h.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * (g * g)
            update = h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)
            self.net.params[k] -= update.astype(self.net.dtype)
        return self.net


def adam_update(net: Network, grads: Mapping[str, np.ndarray], optimizer: Adam | None = None,
                hyper: AdamHyper = AdamHyper()) -> Network:
    """One Adam step; pass the same ``optimizer`` across calls to keep moments."""
    optimizer = optimizer or Adam(net, hyper)
    return optimizer.step(grads)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, net: Network, metadata: Mapping | None = None) -> tuple[Path, Path]:
    """Write ``path`` (JSON manifest) and ``path`` with suffix ``.bin`` (payload)."""
    path = Path(path)
    payload_path = path.with_suffix(".bin")
    tensors, chunks, offset = [], [], 0
    dtype = net.dtype.newbyteorder("<")
    for name, arr in net.params.items():
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": dtype.str,
        "payload": payload_path.name,
        "architecture": net.architecture(),
        "tensors": tensors,
        "metadata": dict(metadata or {}),
    }
    payload_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path, payload_path


def load_checkpoint(path) -> tuple[Network, dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} manifest")
    payload = (path.parent / manifest["payload"]).read_bytes()
    dtype = np.dtype(manifest["dtype"])
    arch = manifest["architecture"]
    net = Network(arch["input_size"], arch["hidden"], arch["heads"], dtype=dtype.newbyteorder("="))
    for t in manifest["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
        net.params[t["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(t["shape"]).astype(
            dtype.newbyteorder("="))
    return net, manifest["metadata"]
