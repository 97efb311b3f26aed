"""Storage dtypes, exact widening, correctly rounded narrowing and F64 reductions.

numpy has no native bfloat16, so BF16 is handled through its bit pattern:
a BF16 value is the upper half of the F32 with the same sign and exponent,
which makes widening a shift. Narrowing from F64 goes through an F32
rounded-to-odd intermediate so the final round-to-nearest-even step is not
subject to double rounding.
"""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, TypeVar

import numpy as np

from .exceptions import UnsupportedDType

T = TypeVar("T")
R = TypeVar("R")

# Products are summed in blocks of this many elements; within a block numpy's
# pairwise summation applies, blocks are added left to right.
REDUCTION_BLOCK = 1 << 20


class DType(str, enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def width(self) -> int:
        return _WIDTH[self]

    @property
    def storage(self) -> np.dtype:
        """Little-endian numpy dtype of the raw payload."""
        return _STORAGE[self]

    @classmethod
    def parse(cls, tag: object) -> "DType":
        if isinstance(tag, DType):
            return tag
        try:
            return cls(tag)
        except ValueError:
            raise UnsupportedDType(f"unsupported dtype {tag!r}") from None

    @classmethod
    def of_array(cls, arr: np.ndarray) -> "DType":
        kind = np.dtype(arr.dtype)
        for tag, np_dtype in _NATIVE.items():
            if kind == np_dtype:
                return tag
        raise UnsupportedDType(f"no storage tag for numpy dtype {kind}")


_WIDTH = {DType.F64: 8, DType.F32: 4, DType.F16: 2, DType.BF16: 2}
_STORAGE = {
    DType.F64: np.dtype("<f8"),
    DType.F32: np.dtype("<f4"),
    DType.F16: np.dtype("<f2"),
    DType.BF16: np.dtype("<u2"),
}
_NATIVE = {
    DType.F64: np.dtype(np.float64),
    DType.F32: np.dtype(np.float32),
    DType.F16: np.dtype(np.float16),
}


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round F32 values to BF16 bit patterns, nearest-even."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    bits = values.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        sign = ((bits >> 16) & 0x8000).astype(np.uint16)
        rounded[nan] = sign[nan] | 0x7FC0
    return rounded


def _f64_to_f32_round_to_odd(values: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        nearest = values.astype(np.float32)
    back = nearest.astype(np.float64)
    inexact = (back != values) & np.isfinite(values)
    if not inexact.any():
        return nearest
    # truncate toward zero, then force the last mantissa bit on
    overshoot = inexact & (np.abs(back) > np.abs(values))
    trunc = nearest.copy()
    trunc[overshoot] = np.nextafter(nearest[overshoot], np.float32(0))
    bits = trunc.view(np.uint32)
    bits[inexact] |= 1
    return trunc


def widen(raw: bytes | np.ndarray, dtype: DType, to: type = np.float64) -> np.ndarray:
    """Decode a little-endian payload into ``to`` (float32 or float64) exactly."""
    dtype = DType.parse(dtype)
    to = np.dtype(to)
    if to not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"can only widen to float32 or float64, not {to}")
    if dtype is DType.F64 and to == np.float32:
        raise ValueError("F64 payload cannot be widened to float32")
    stored = np.frombuffer(raw, dtype=dtype.storage) if isinstance(raw, (bytes, bytearray, memoryview)) else raw
    with np.errstate(invalid="ignore"):  # signalling NaN payloads
        if dtype is DType.BF16:
            return bf16_bits_to_f32(stored).astype(to, copy=False)
        return stored.astype(to)


def narrow(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Round float values to ``dtype`` storage (nearest-even), returning the raw array.

    The result has the little-endian storage dtype of the tag, so BF16 comes
    back as uint16 bit patterns.
    """
    dtype = DType.parse(dtype)
    values = np.asarray(values)
    with np.errstate(over="ignore"):
        if dtype is DType.BF16:
            if values.dtype == np.float64:
                values = _f64_to_f32_round_to_odd(values)
            return f32_to_bf16_bits(values.astype(np.float32, copy=False))
        return values.astype(dtype.storage)


def roundtrip(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Narrow to ``dtype`` and widen back to float64."""
    return widen(narrow(values, dtype), dtype)


def ulp(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Spacing of ``dtype`` at each (representable) value, as float64."""
    dtype = DType.parse(dtype)
    v = np.abs(np.asarray(values, dtype=np.float64))
    if dtype is DType.BF16:
        mant, min_exp = 8, -126
    elif dtype is DType.F16:
        mant, min_exp = 11, -14
    elif dtype is DType.F32:
        mant, min_exp = 24, -126
    else:
        mant, min_exp = 53, -1022
    with np.errstate(divide="ignore"):
        exp = np.where(v > 0, np.floor(np.log2(np.where(v > 0, v, 1.0))), min_exp)
    exp = np.maximum(exp, min_exp)
    return np.ldexp(1.0, (exp - (mant - 1)).astype(np.int64))


def sum_products(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of elementwise products with F64 accumulation in a fixed order.

    Inputs are flattened in C order and processed in blocks of
    ``REDUCTION_BLOCK`` elements; each block uses numpy's pairwise summation
    and block sums are accumulated left to right. The result depends only on
    the input values, never on threading.
    """
    fa = np.asarray(a).reshape(-1)
    fb = np.asarray(b).reshape(-1)
    total = 0.0
    for start in range(0, fa.size, REDUCTION_BLOCK):
        xa = fa[start:start + REDUCTION_BLOCK].astype(np.float64)
        xb = fb[start:start + REDUCTION_BLOCK].astype(np.float64)
        total += float(np.add.reduce(xa * xb))
    return total


# Veltkamp splitting constant for F64: 2**27 + 1
_SPLIT = 134217729.0


def _split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = _SPLIT * x
    hi = c - (c - x)
    return hi, x - hi


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _tree_sum(x: np.ndarray) -> tuple[float, float]:
    """Pairwise sum of ``x`` as ``(hi, lo)``; every level's rounding error is kept in ``lo``."""
    lo = 0.0
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, 0.0)
        x, err = _two_sum(x[0::2], x[1::2])
        lo += float(np.add.reduce(err))
    return (float(x[0]) if x.size else 0.0), lo


def exact_dot(a: np.ndarray, b: np.ndarray) -> float:
    """``sum(a * b)`` computed as if in twice float64 precision.

    Products are split exactly (Dekker's two-product), the high parts are
    summed by an error-free pairwise tree and all rounding errors are added
    back at the end. The error is about one ulp of the result plus
    ``n * 2**-104 * sum(|a * b|)``, so cancellation in near-orthogonal pairs
    costs nothing in practice. The order of operations is fixed. Elements
    above ~1e300 overflow the split; callers rescale first.
    """
    fa = np.asarray(a).reshape(-1)
    fb = np.asarray(b).reshape(-1)
    hi = lo = 0.0
    for start in range(0, fa.size, REDUCTION_BLOCK):
        xa = fa[start:start + REDUCTION_BLOCK].astype(np.float64)
        xb = fb[start:start + REDUCTION_BLOCK].astype(np.float64)
        p = xa * xb
        ah, al = _split(xa)
        bh, bl = _split(xb)
        e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
        bh_, bl_ = _tree_sum(p)
        hi, err = _two_sum(hi, bh_)
        lo += err + bl_ + float(np.add.reduce(e))
    return hi + lo


def sum_squares(a: np.ndarray) -> float:
    return sum_products(a, a)


def frobenius_norm(a: np.ndarray) -> float:
    return math.sqrt(sum_squares(a))


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = 1) -> Iterator[R]:
    """Map ``fn`` over ``items`` with up to ``threads`` workers, yielding in input order.

    At most ``2 * threads`` results are in flight, which bounds memory when
    each result is a full tensor.
    """
    threads = resolve_threads(threads)
    if threads == 1:
        for item in items:
            yield fn(item)
        return
    window = 2 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = []
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= window:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


def resolve_threads(threads: int | None) -> int:
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return int(threads)
