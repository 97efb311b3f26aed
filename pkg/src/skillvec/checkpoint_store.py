"""Reader and writer for single-file safetensors checkpoints.

Layout: an 8-byte little-endian header length ``L``, ``L`` bytes of UTF-8
JSON mapping tensor names to ``{"dtype", "shape", "data_offsets"}`` (plus an
optional ``"__metadata__"`` string map), then the data section. Offsets are
relative to the start of the data section.

Opening a file validates the header and hashes the file, but never loads
tensor payloads; :func:`read_tensor` reads one tensor's byte range on demand.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Union

import numpy as np

from .exceptions import (
    InconsistentMeta,
    IoFailure,
    MalformedHeader,
    OverlappingRanges,
    SchemaInvalid,
    TruncatedData,
    UnknownTensor,
)
from .numerics import DType, narrow, ordered_map, widen

log = logging.getLogger(__name__)

METADATA_KEY = "__metadata__"
_HASH_CHUNK = 1 << 20


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]

    def header_entry(self) -> dict:
        return {
            "dtype": self.dtype.value,
            "shape": list(self.shape),
            "data_offsets": list(self.data_offsets),
        }


@dataclass(frozen=True)
class CheckpointIndex:
    """Validated header of one checkpoint file. Payloads stay on disk."""

    path: Path
    header_len: int
    tensors: dict[str, TensorMeta]
    metadata: dict[str, str] | None
    content_digest: str
    file_size: int

    @property
    def data_start(self) -> int:
        return 8 + self.header_len

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def meta(self, name: str) -> TensorMeta:
        try:
            return self.tensors[name]
        except KeyError:
            raise UnknownTensor(f"no tensor named {name!r} in {self.path}") from None


@dataclass(frozen=True)
class LazyTensor:
    """A tensor whose payload is produced only when the writer reaches it.

    ``load`` returns either raw little-endian bytes for ``dtype`` or an array
    of float values that will be rounded to ``dtype``.
    """

    dtype: DType
    shape: tuple[int, ...]
    load: Callable[[], Union[bytes, np.ndarray]]


TensorValue = Union[np.ndarray, tuple, LazyTensor]


# ---------------------------------------------------------------- reading


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise MalformedHeader(f"duplicate header key {key!r}")
        out[key] = value
    return out


def _is_count(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def _parse_entry(name: str, entry: Any) -> TensorMeta:
    if not isinstance(entry, dict):
        raise MalformedHeader(f"header entry for {name!r} is not an object")
    missing = {"dtype", "shape", "data_offsets"} - entry.keys()
    if missing:
        raise MalformedHeader(f"header entry for {name!r} lacks {sorted(missing)}")
    dtype = DType.parse(entry["dtype"])
    shape = entry["shape"]
    offsets = entry["data_offsets"]
    if not isinstance(shape, list) or not all(_is_count(s) for s in shape):
        raise MalformedHeader(f"bad shape for {name!r}: {shape!r}")
    if not (isinstance(offsets, list) and len(offsets) == 2 and all(_is_count(o) for o in offsets)):
        raise MalformedHeader(f"bad data_offsets for {name!r}: {offsets!r}")
    begin, end = offsets
    if end < begin:
        raise MalformedHeader(f"data_offsets for {name!r} are reversed: {offsets}")
    meta = TensorMeta(name, dtype, tuple(shape), (begin, end))
    expected = dtype.width * meta.numel
    if end - begin != expected:
        raise TruncatedData(
            f"tensor {name!r} spans {end - begin} bytes but {dtype.value}{list(shape)} needs {expected}"
        )
    return meta


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(_HASH_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def open_checkpoint(path: str | os.PathLike) -> CheckpointIndex:
    """Parse and validate a checkpoint header without loading tensor data."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            prefix = fh.read(8)
            if len(prefix) < 8:
                raise MalformedHeader(f"{path}: file shorter than the 8-byte length prefix")
            (header_len,) = struct.unpack("<Q", prefix)
            if header_len > size - 8:
                raise MalformedHeader(f"{path}: header length {header_len} exceeds file size {size}")
            raw = fh.read(header_len)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not valid UTF-8 JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeader(f"{path}: header is not a JSON object")

    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise MalformedHeader(f"{path}: __metadata__ must map strings to strings")

    tensors = {name: _parse_entry(name, entry) for name, entry in header.items()}

    data_len = size - 8 - header_len
    spans = sorted(m.data_offsets for m in tensors.values() if m.nbytes)
    cursor = 0
    for begin, end in spans:
        if begin < cursor:
            raise OverlappingRanges(f"{path}: byte range [{begin}, {end}) overlaps a previous tensor")
        if begin > cursor:
            log.warning("%s: %d unused bytes at data offset %d", path, begin - cursor, cursor)
        cursor = end
    if cursor > data_len:
        raise TruncatedData(f"{path}: tensors need {cursor} data bytes but only {data_len} present")
    for meta in tensors.values():
        if meta.data_offsets[1] > data_len:
            raise TruncatedData(f"{path}: tensor {meta.name!r} ends past the data section")
    if cursor < data_len:
        log.warning("%s: %d trailing bytes after the last tensor", path, data_len - cursor)

    return CheckpointIndex(
        path=path,
        header_len=header_len,
        tensors=tensors,
        metadata=metadata,
        content_digest=_file_digest(path),
        file_size=size,
    )


def read_raw(idx: CheckpointIndex, name: str) -> bytes:
    """Stored bytes of one tensor, exactly as they appear in the file."""
    meta = idx.meta(name)
    begin, end = meta.data_offsets
    if end == begin:
        return b""
    try:
        with open(idx.path, "rb") as fh:
            fh.seek(idx.data_start + begin)
            data = fh.read(end - begin)
    except OSError as exc:
        raise IoFailure(f"cannot read {name!r} from {idx.path}: {exc}") from exc
    if len(data) != end - begin:
        raise TruncatedData(f"{idx.path}: short read for {name!r}")
    return data


def tensor_digest(idx: CheckpointIndex) -> str:
    """SHA-256 of the data section alone, so header-only edits leave it unchanged."""
    h = hashlib.sha256()
    remaining = idx.file_size - idx.data_start
    try:
        with open(idx.path, "rb") as fh:
            fh.seek(idx.data_start)
            while remaining > 0:
                chunk = fh.read(min(_HASH_CHUNK, remaining))
                if not chunk:
                    raise TruncatedData(f"{idx.path}: file shrank while hashing")
                h.update(chunk)
                remaining -= len(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot read {idx.path}: {exc}") from exc
    return h.hexdigest()


def read_tensor(idx: CheckpointIndex, name: str, dtype: type = np.float64) -> np.ndarray:
    """Load one tensor widened exactly to float64 (default) or float32.

    The tensor's stored dtype and extents are in ``idx.tensors[name]``.
    """
    meta = idx.meta(name)
    return widen(read_raw(idx, name), meta.dtype, to=dtype).reshape(meta.shape)


# ---------------------------------------------------------------- writing


class _HashingWriter:
    def __init__(self, fh=None):
        self.fh = fh
        self.sha = hashlib.sha256()

    def write(self, data: bytes) -> None:
        self.sha.update(data)
        if self.fh is not None:
            self.fh.write(data)


def _normalize(name: str, value: TensorValue) -> tuple[DType, tuple[int, ...], Any]:
    if isinstance(value, LazyTensor):
        return DType.parse(value.dtype), tuple(value.shape), value.load
    if isinstance(value, np.ndarray):
        return DType.of_array(value), tuple(value.shape), value
    if isinstance(value, tuple) and len(value) == 2:
        tag, payload = value
        tag = DType.parse(tag)
        if isinstance(payload, (bytes, bytearray, memoryview)):
            raise InconsistentMeta(f"raw bytes for {name!r} need an explicit shape: use (dtype, shape, bytes)")
        arr = np.asarray(payload)
        return tag, tuple(arr.shape), arr
    if isinstance(value, tuple) and len(value) == 3:
        tag, shape, payload = value
        return DType.parse(tag), tuple(int(s) for s in shape), payload
    raise InconsistentMeta(f"cannot interpret value for tensor {name!r}: {type(value).__name__}")


def _encode(name: str, dtype: DType, shape: tuple[int, ...], payload: Any) -> bytes:
    if callable(payload):
        payload = payload()
    if isinstance(payload, (bytes, bytearray, memoryview)):
        data = bytes(payload)
    else:
        arr = np.asarray(payload)
        if arr.size != math.prod(shape):
            raise InconsistentMeta(f"tensor {name!r}: payload shape {arr.shape} != declared {list(shape)}")
        if dtype is DType.BF16 and arr.dtype == np.uint16:
            stored = arr.astype("<u2", copy=False)
        else:
            if arr.dtype.kind != "f":
                raise InconsistentMeta(f"tensor {name!r}: expected float values, got {arr.dtype}")
            stored = narrow(arr, dtype)
        data = np.ascontiguousarray(stored).tobytes()
    expected = dtype.width * math.prod(shape)
    if len(data) != expected:
        raise InconsistentMeta(f"tensor {name!r}: {len(data)} payload bytes, {dtype.value}{list(shape)} needs {expected}")
    return data


def _header_bytes(layout: list[tuple[str, DType, tuple[int, ...]]], metadata: Mapping[str, str] | None) -> bytes:
    header: dict[str, Any] = {}
    if metadata:
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise InconsistentMeta("metadata keys and values must be strings")
        header[METADATA_KEY] = dict(metadata)
    offset = 0
    for name, dtype, shape in layout:
        if name == METADATA_KEY:
            raise InconsistentMeta(f"{METADATA_KEY!r} is reserved")
        nbytes = dtype.width * math.prod(shape)
        header[name] = {"dtype": dtype.value, "shape": list(shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _emit(tensors: Mapping[str, TensorValue], metadata: Mapping[str, str] | None, sink, threads: int | None) -> str:
    items = [(name, *_normalize(name, value)) for name, value in tensors.items()]
    header = _header_bytes([(n, d, s) for n, d, s, _ in items], metadata)
    out = _HashingWriter(sink)
    out.write(struct.pack("<Q", len(header)))
    out.write(header)
    for data in ordered_map(lambda it: _encode(*it), items, threads):
        out.write(data)
    return out.sha.hexdigest()


def write_checkpoint(
    tensors: Mapping[str, TensorValue],
    metadata: Mapping[str, str] | None,
    path: str | os.PathLike,
    threads: int | None = 1,
) -> str:
    """Write tensors to ``path`` and return the SHA-256 of the file.

    Values may be float ndarrays (dtype inferred), ``(dtype, values)`` pairs,
    ``(dtype, shape, bytes)`` triples or :class:`LazyTensor`. Offsets are
    assigned contiguously in insertion order and the header is compact JSON,
    so identical inputs always give identical bytes. The file is written to a
    temporary sibling and renamed into place.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            digest = _emit(tensors, metadata, fh, threads)
        os.replace(tmp, path)
    except OSError as exc:
        _unlink_quiet(tmp)
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    except BaseException:
        _unlink_quiet(tmp)
        raise
    return digest


def checkpoint_digest(tensors: Mapping[str, TensorValue], metadata: Mapping[str, str] | None) -> str:
    """Digest the file :func:`write_checkpoint` would produce, without writing it."""
    return _emit(tensors, metadata, None, 1)


def _unlink_quiet(path: str) -> None:
    try:
        os.unlink(path)
    except OSError:
        pass


def copy_tensors(idx: CheckpointIndex) -> dict[str, LazyTensor]:
    """Bit-exact lazy copies of every tensor, for rewriting a file."""
    return {
        name: LazyTensor(m.dtype, m.shape, lambda n=name: read_raw(idx, n))
        for name, m in idx.tensors.items()
    }


# ---------------------------------------------------------------- names


@dataclass(frozen=True)
class ParamKey:
    raw_name: str
    layer: int | None
    module_kind: str


DEFAULT_PATTERN = r"(?:.*\.)?layers\.(?P<layer>\d+)\.(?P<module>.+)\.weight"


@dataclass(frozen=True)
class NameSchema:
    """Regex with named groups ``layer`` and ``module``, matched against whole names."""

    pattern: str = DEFAULT_PATTERN
    _regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        try:
            regex = re.compile(self.pattern)
        except re.error as exc:
            raise SchemaInvalid(f"bad name pattern {self.pattern!r}: {exc}") from exc
        missing = {"layer", "module"} - set(regex.groupindex)
        if missing:
            raise SchemaInvalid(f"name pattern lacks named group(s) {sorted(missing)}")
        object.__setattr__(self, "_regex", regex)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "NameSchema":
        try:
            spec = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaInvalid(f"cannot load name schema {path}: {exc}") from exc
        if not isinstance(spec, dict) or not isinstance(spec.get("pattern"), str):
            raise SchemaInvalid(f"{path}: expected an object with a string 'pattern'")
        return cls(spec["pattern"])


DEFAULT_SCHEMA = NameSchema()


def parse_param_name(name: str, schema: NameSchema = DEFAULT_SCHEMA) -> ParamKey:
    m = schema._regex.fullmatch(name)
    if m is None:
        return ParamKey(name, None, "other")
    try:
        layer = int(m.group("layer"))
    except (TypeError, ValueError):
        return ParamKey(name, None, "other")
    return ParamKey(name, layer, m.group("module"))
