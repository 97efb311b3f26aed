"""Parameter-delta ("skill vector") extraction, scaling, addition and application.

A delta between two compatible checkpoints is computed by widening both
operands to float64 and subtracting once, so the only rounding is the final
store. Deltas of 16-bit checkpoints are stored as F32; deltas involving F32 or
F64 tensors are stored as F64, which keeps ``apply(b, extract(a, b))`` exact.
"""

from __future__ import annotations

import datetime as _dt
import fnmatch
import json
import logging
import math
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import __version__
from .checkpoint_store import (
    CheckpointIndex,
    LazyTensor,
    checkpoint_digest,
    open_checkpoint,
    read_raw,
    read_tensor,
    write_checkpoint,
)
from .exceptions import EmptyIntersection, Incompatible, NonFiniteResult, ShapeMismatch
from .numerics import DType, frobenius_norm, narrow, ordered_map, widen
from .validation import check_checkpoint, check_lambda, check_manifest, check_scalar

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "skillvec.delta.v1"


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        if epoch
        else _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0)
    )
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def delta_dtype(a: DType, b: DType) -> DType:
    """Default storage dtype for the difference of tensors stored as ``a`` and ``b``.

    Always F64: an F32 difference is rounded whenever one operand is far
    smaller than the other (a weight crossing zero), and then ``b + (a - b)``
    no longer gives back ``a``. F64 holds the difference of any two F32/F16/BF16
    values whose exponents are within ~29 bits. Pass ``dtype="F32"`` to
    ``extract_delta`` to trade that for half the size.
    """
    DType.parse(a), DType.parse(b)
    return DType.F64


# ---------------------------------------------------------------- compatibility


@dataclass
class CompatibilityReport:
    missing_in_a: list[str] = field(default_factory=list)
    missing_in_b: list[str] = field(default_factory=list)
    shape_mismatches: list[tuple[str, tuple, tuple]] = field(default_factory=list)
    dtype_mismatches: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.missing_in_a or self.missing_in_b or self.shape_mismatches or self.dtype_mismatches)

    def first_problem(self) -> str:
        if self.missing_in_b:
            return f"tensor {self.missing_in_b[0]!r} missing from the second checkpoint"
        if self.missing_in_a:
            return f"tensor {self.missing_in_a[0]!r} missing from the first checkpoint"
        if self.shape_mismatches:
            name, sa, sb = self.shape_mismatches[0]
            return f"tensor {name!r} has shape {list(sa)} vs {list(sb)}"
        if self.dtype_mismatches:
            name, da, db = self.dtype_mismatches[0]
            return f"tensor {name!r} has dtype {da} vs {db}"
        return "compatible"


def check_compatibility(a, b) -> CompatibilityReport:
    a = check_checkpoint(a)
    b = check_checkpoint(b)
    report = CompatibilityReport(
        missing_in_a=[n for n in b.tensors if n not in a.tensors],
        missing_in_b=[n for n in a.tensors if n not in b.tensors],
    )
    for name, ma in a.tensors.items():
        mb = b.tensors.get(name)
        if mb is None:
            continue
        if ma.shape != mb.shape:
            report.shape_mismatches.append((name, ma.shape, mb.shape))
        if ma.dtype != mb.dtype:
            report.dtype_mismatches.append((name, ma.dtype.value, mb.dtype.value))
    return report


# ---------------------------------------------------------------- manifest


class _FileEntries(Mapping):
    """Read-only mapping that loads manifest entries from disk on access."""

    def __init__(self, idx: CheckpointIndex):
        self.idx = idx

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.idx.tensors:
            raise KeyError(name)
        meta = self.idx.tensors[name]
        to = np.float32 if meta.dtype is not DType.F64 else np.float64
        return read_tensor(self.idx, name, dtype=to)

    def __iter__(self) -> Iterator[str]:
        return iter(self.idx.tensors)

    def __len__(self) -> int:
        return len(self.idx.tensors)


@dataclass(eq=False)
class DeltaManifest:
    """A named set of per-parameter deltas with provenance.

    Treat instances as immutable: the digest is computed once from the entries.
    """

    name: str
    entries: Mapping[str, np.ndarray]
    minuend_digest: str = ""
    subtrahend_digest: str = ""
    lambda_history: list[float] = field(default_factory=list)
    created_at: str = field(default_factory=_now)
    excluded: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    source: CheckpointIndex | None = None

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def shape(self, name: str) -> tuple[int, ...]:
        if self.source is not None:
            return self.source.meta(name).shape
        return tuple(np.shape(self.entries[name]))

    def dtype(self, name: str) -> DType:
        if self.source is not None:
            return self.source.meta(name).dtype
        return DType.of_array(np.asarray(self.entries[name]))

    def header_metadata(self) -> dict[str, str]:
        return {
            "format": MANIFEST_FORMAT,
            "name": self.name,
            "minuend_digest": self.minuend_digest,
            "subtrahend_digest": self.subtrahend_digest,
            "lambda_history": json.dumps(self.lambda_history),
        }

    def _tensors(self) -> dict:
        if self.source is not None:
            src = self.source
            return {n: LazyTensor(m.dtype, m.shape, lambda n=n: read_raw(src, n)) for n, m in src.tensors.items()}
        return {n: np.asarray(v) for n, v in self.entries.items()}

    @cached_property
    def digest(self) -> str:
        """SHA-256 of the manifest's safetensors encoding."""
        if self.source is not None and self.source.metadata == self.header_metadata():
            return self.source.content_digest
        return checkpoint_digest(self._tensors(), self.header_metadata())

    def sidecar(self) -> dict:
        return {
            "name": self.name,
            "minuend_digest": self.minuend_digest,
            "subtrahend_digest": self.subtrahend_digest,
            "lambda_history": list(self.lambda_history),
            "created_at": self.created_at,
            "tool_version": __version__,
            "content_digest": self.digest,
            "excluded": list(self.excluded),
            "provenance": self.provenance,
        }

    def save(self, path: str | os.PathLike, threads: int | None = 1) -> str:
        """Write ``path`` (safetensors) and its ``.json`` sidecar; return the digest."""
        path = Path(path)
        digest = write_checkpoint(self._tensors(), self.header_metadata(), path, threads=threads)
        self.__dict__["digest"] = digest
        sidecar_path(path).write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return digest


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def load_manifest(path: str | os.PathLike) -> DeltaManifest:
    """Open a manifest lazily; the sidecar is optional, header metadata is the fallback."""
    idx = open_checkpoint(path)
    meta = idx.metadata or {}
    side = {}
    sp = sidecar_path(path)
    if sp.exists() and sp != Path(path):
        try:
            side = json.loads(sp.read_text())
        except json.JSONDecodeError:
            log.warning("ignoring unreadable sidecar %s", sp)
    history = side.get("lambda_history")
    if history is None:
        history = json.loads(meta.get("lambda_history", "[]"))
    return DeltaManifest(
        name=side.get("name", meta.get("name", Path(path).stem)),
        entries=_FileEntries(idx),
        minuend_digest=side.get("minuend_digest", meta.get("minuend_digest", "")),
        subtrahend_digest=side.get("subtrahend_digest", meta.get("subtrahend_digest", "")),
        lambda_history=[float(x) for x in history],
        created_at=side.get("created_at", ""),
        excluded=list(side.get("excluded", [])),
        provenance=dict(side.get("provenance", {})),
        source=idx,
    )


def zero_manifest(base, name: str = "v_0") -> DeltaManifest:
    """The all-zero delta over every tensor of ``base``."""
    base = check_checkpoint(base)
    entries = {}
    for n, m in base.tensors.items():
        dt = delta_dtype(m.dtype, m.dtype)
        entries[n] = np.zeros(m.shape, dtype=np.float64 if dt is DType.F64 else np.float32)
    return DeltaManifest(name, entries, base.content_digest, base.content_digest)


# ---------------------------------------------------------------- operations


def _excluded(name: str, patterns: Sequence[str]) -> bool:
    # "embed*" should catch "model.embed_tokens.weight": try every dotted tail
    parts = name.split(".")
    tails = [".".join(parts[i:]) for i in range(len(parts))]
    return any(fnmatch.fnmatchcase(t, p) for p in patterns for t in tails)


def extract_delta(
    minuend,
    subtrahend,
    mode: str = "strict",
    exclude: Iterable[str] = (),
    dtype: str | DType | None = None,
    name: str = "delta",
    threads: int | None = 1,
) -> DeltaManifest:
    """``minuend - subtrahend`` per tensor, widened before subtracting.

    In ``strict`` mode the checkpoints must agree on names, shapes and dtypes.
    ``intersect`` mode uses the shared names and skips shape-mismatched tensors
    with a warning. ``exclude`` takes fnmatch patterns, matched against the
    full name and against every tail after a dot.
    """
    if mode not in ("strict", "intersect"):
        raise ValueError(f"mode must be 'strict' or 'intersect', got {mode!r}")
    a = check_checkpoint(minuend)
    b = check_checkpoint(subtrahend)
    report = check_compatibility(a, b)
    if mode == "strict" and not report.empty:
        raise Incompatible(f"checkpoints are not strictly compatible: {report.first_problem()}")
    common = [n for n in a.tensors if n in b.tensors]
    if not common:
        raise EmptyIntersection("checkpoints share no tensor names")
    mismatched = {n for n, _, _ in report.shape_mismatches}
    for n in mismatched:
        log.warning("skipping %s: shape %s vs %s", n, a.tensors[n].shape, b.tensors[n].shape)
    patterns = list(exclude)
    excluded = [n for n in common if _excluded(n, patterns)]
    names = [n for n in common if n not in mismatched and n not in excluded]
    forced = DType.parse(dtype) if dtype is not None else None
    if forced is not None and forced not in (DType.F32, DType.F64):
        raise ValueError("delta storage dtype must be F32 or F64")

    def one(n: str) -> np.ndarray:
        store = forced or delta_dtype(a.tensors[n].dtype, b.tensors[n].dtype)
        diff = read_tensor(a, n) - read_tensor(b, n)
        return diff.astype(np.float64 if store is DType.F64 else np.float32)

    entries = dict(zip(names, ordered_map(one, names, threads)))
    return DeltaManifest(
        name=name,
        entries=entries,
        minuend_digest=a.content_digest,
        subtrahend_digest=b.content_digest,
        excluded=excluded,
    )


def apply_delta(
    base,
    delta,
    lam: float = 1.0,
    out_path: str | os.PathLike = None,
    fail_fast: bool = True,
    threads: int | None = 1,
) -> CheckpointIndex:
    """Write ``base + lam * delta`` to ``out_path`` in the base's dtypes.

    Each covered tensor is computed in float64 and rounded once to its stored
    dtype; elements whose scaled delta is exactly zero keep their original
    bits. Tensors the delta does not cover are copied bit for bit. ``lam`` is
    appended to the ``lambda_history`` header metadata.
    """
    if out_path is None:
        raise ValueError("out_path is required")
    lam = check_lambda(lam)
    base = check_checkpoint(base)
    delta = check_manifest(delta)
    for n in delta.names():
        if n not in base.tensors:
            raise Incompatible(f"delta tensor {n!r} is not in the base checkpoint")
        if delta.shape(n) != base.tensors[n].shape:
            raise ShapeMismatch(f"tensor {n!r}: base {list(base.tensors[n].shape)} vs delta {list(delta.shape(n))}")

    def combine(n: str) -> bytes:
        meta = base.tensors[n]
        raw = read_raw(base, n)
        b = widen(raw, meta.dtype).reshape(meta.shape)
        scaled = lam * np.asarray(delta.entries[n], dtype=np.float64)
        out = np.where(scaled == 0, b, b + scaled)
        stored = narrow(out, meta.dtype)
        if fail_fast and not np.isfinite(widen(stored, meta.dtype)).all():
            raise NonFiniteResult(f"tensor {n!r} has non-finite values after applying the delta")
        return stored.tobytes()

    tensors = {}
    for n, meta in base.tensors.items():
        load = (lambda n=n: combine(n)) if n in delta else (lambda n=n: read_raw(base, n))
        tensors[n] = LazyTensor(meta.dtype, meta.shape, load)
    metadata = dict(base.metadata or {})
    history = json.loads(metadata.get("lambda_history", "[]")) + [lam]
    metadata["lambda_history"] = json.dumps(history)
    metadata["delta_digest"] = delta.digest
    write_checkpoint(tensors, metadata, out_path, threads=threads)
    return open_checkpoint(out_path)


def add_deltas(x, y, coeffs: tuple[float, float] = (1.0, 1.0), strict: bool = True, name: str | None = None) -> DeltaManifest:
    """``coeffs[0] * x + coeffs[1] * y`` over the shared tensors."""
    x = check_manifest(x)
    y = check_manifest(y)
    c0 = check_scalar(coeffs[0], "coeffs[0]")
    c1 = check_scalar(coeffs[1], "coeffs[1]")
    xs, ys = set(x.names()), set(y.names())
    if strict and xs != ys:
        diff = sorted(xs ^ ys)
        raise Incompatible(f"manifests cover different tensors, e.g. {diff[0]!r}")
    names = [n for n in x.names() if n in ys]
    if not names:
        raise EmptyIntersection("manifests share no tensor names")
    entries = {}
    for n in names:
        if x.shape(n) != y.shape(n):
            raise ShapeMismatch(f"tensor {n!r}: {list(x.shape(n))} vs {list(y.shape(n))}")
        wide = DType.F64 in (x.dtype(n), y.dtype(n))
        out = c0 * np.asarray(x.entries[n], dtype=np.float64) + c1 * np.asarray(y.entries[n], dtype=np.float64)
        entries[n] = out.astype(np.float64 if wide else np.float32)
    return DeltaManifest(
        name=name or f"{x.name}+{y.name}",
        entries=entries,
        minuend_digest=x.digest,
        subtrahend_digest=y.digest,
        lambda_history=[c0, c1],
    )


def scale_delta(delta, c: float, name: str | None = None) -> DeltaManifest:
    delta = check_manifest(delta)
    c = check_scalar(c, "scale")
    entries = {}
    for n in delta.names():
        v = np.asarray(delta.entries[n])
        entries[n] = (c * v.astype(np.float64)).astype(v.dtype)
    return DeltaManifest(
        name=name or delta.name,
        entries=entries,
        minuend_digest=delta.minuend_digest,
        subtrahend_digest=delta.subtrahend_digest,
        lambda_history=[*delta.lambda_history, c],
        excluded=list(delta.excluded),
    )


@dataclass
class DeltaNorms:
    per_tensor: dict[str, float]
    global_norm: float


def delta_norms(delta) -> DeltaNorms:
    """Frobenius norm of every tensor and of the whole delta, accumulated in float64."""
    delta = check_manifest(delta)
    per = {n: frobenius_norm(delta.entries[n]) for n in delta.names()}
    return DeltaNorms(per, math.sqrt(math.fsum(v * v for v in per.values())))
