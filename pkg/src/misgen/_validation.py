"""Input validation helpers shared across modules."""

from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class GateFailure(RuntimeError):
    """A trained artifact missed a hard quality gate."""


def check_probabilities(p, name: str = "p") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ContractViolation(f"{name} is empty")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ContractViolation(f"{name} must hold probabilities in [0, 1]")
    return arr


def check_same_length(*arrays, names: tuple[str, ...] | None = None) -> None:
    lengths = [len(a) for a in arrays]
    if len(set(lengths)) > 1:
        label = ", ".join(names) if names else "arrays"
        raise ContractViolation(f"length mismatch between {label}: {lengths}")


def check_unit_interval(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ContractViolation(f"{name} must lie in [0, 1], got {value}")
    return value


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
