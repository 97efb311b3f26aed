"""Input validation helpers, in the spirit of ``sklearn.utils.validation``.

Public functions accept either paths or already-opened objects; these helpers
normalise the input and raise early with a readable message.
"""

from __future__ import annotations

import math
import os
from numbers import Real

import numpy as np

from .checkpoint_store import CheckpointIndex, open_checkpoint
from .exceptions import ShapeMismatch


def check_checkpoint(ckpt) -> CheckpointIndex:
    if isinstance(ckpt, CheckpointIndex):
        return ckpt
    if isinstance(ckpt, (str, os.PathLike)):
        return open_checkpoint(ckpt)
    raise TypeError(f"expected a checkpoint path or CheckpointIndex, got {type(ckpt).__name__}")


def check_manifest(manifest):
    from .delta_arith import DeltaManifest, load_manifest

    if isinstance(manifest, DeltaManifest):
        return manifest
    if isinstance(manifest, (str, os.PathLike)):
        return load_manifest(manifest)
    raise TypeError(f"expected a manifest path or DeltaManifest, got {type(manifest).__name__}")


def check_scalar(x, name: str, *, finite: bool = True, positive: bool = False) -> float:
    if isinstance(x, bool) or not isinstance(x, (Real, np.floating, np.integer)):
        raise TypeError(f"{name} must be a real number, got {x!r}")
    x = float(x)
    if finite and not math.isfinite(x):
        raise ValueError(f"{name} must be finite, got {x}")
    if positive and not x > 0:
        raise ValueError(f"{name} must be positive, got {x}")
    return x


def check_lambda(lam) -> float:
    return check_scalar(lam, "lambda")


def check_count(n, name: str, minimum: int = 1) -> int:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {n!r}")
    if n < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {n}")
    return int(n)


def check_same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def check_square_pair(a, b, exc=ShapeMismatch) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape != b.shape:
        raise exc(f"expected two square matrices of equal size, got {a.shape} and {b.shape}")
    return a, b
