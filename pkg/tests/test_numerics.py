import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillvec.numerics import (
    DType,
    exact_dot,
    frobenius_norm,
    narrow,
    ordered_map,
    roundtrip,
    sum_products,
    ulp,
    widen,
)
from skillvec.exceptions import UnsupportedDType

ALL16 = np.arange(1 << 16, dtype=np.uint16)


def _bf16_table():
    """Every finite BF16 value as an exact Fraction, with its bit pattern."""
    vals = widen(ALL16, DType.BF16)
    finite = np.isfinite(vals)
    return ALL16[finite], vals[finite]


def _nearest_even_oracle(x, bits, vals):
    """Brute-force round-to-nearest-even over the sorted finite table."""
    fx = Fraction(x)
    order = np.argsort(vals, kind="stable")
    sv = vals[order]
    i = np.searchsorted(sv, x)
    cands = [j for j in (i - 1, i, i + 1) if 0 <= j < len(sv)]
    best = None
    for j in cands:
        d = abs(Fraction(float(sv[j])) - fx)
        b = int(bits[order][j])
        key = (d, b & 1)
        if best is None or key < best[0]:
            best = (key, float(sv[j]))
    return best[1]


def test_width_is_total():
    assert [DType(t).width for t in ("F64", "F32", "F16", "BF16")] == [8, 4, 2, 2]
    with pytest.raises(UnsupportedDType):
        DType.parse("I8")


def test_known_bit_patterns():
    assert widen(np.array([0x3F80], np.uint16), DType.BF16)[0] == 1.0
    assert widen(np.array([0x3C00], np.uint16).view(np.float16), DType.F16)[0] == 1.0
    assert widen(b"\x80\x3f", DType.BF16)[0] == 1.0
    assert widen(b"\x00\x3c", DType.F16)[0] == 1.0


@pytest.mark.parametrize("tag", [DType.F16, DType.BF16])
def test_exhaustive_16bit_roundtrip(tag):
    stored = ALL16 if tag is DType.BF16 else ALL16.view(np.float16)
    wide = widen(stored, tag)
    back = narrow(wide, tag)
    back_bits = back.view(np.uint16)
    nan = np.isnan(wide)
    assert np.array_equal(back_bits[~nan], ALL16[~nan])
    assert np.isnan(widen(back, tag)[nan]).all()
    # via float32 as well
    back32 = narrow(widen(stored, tag, to=np.float32), tag).view(np.uint16)
    assert np.array_equal(back32[~nan], ALL16[~nan])


def test_bf16_widening_matches_ml_dtypes():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    with np.errstate(invalid="ignore"):  # signalling NaN patterns
        ref = ALL16.view(ml_dtypes.bfloat16).astype(np.float64)
    ours = widen(ALL16, DType.BF16)
    same = (ref == ours) | (np.isnan(ref) & np.isnan(ours))
    assert same.all()


def test_bf16_narrowing_from_f32_matches_ml_dtypes():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    rng = np.random.default_rng(3)
    x = np.concatenate([
        rng.standard_normal(20000).astype(np.float32),
        (rng.standard_normal(2000) * 1e-39).astype(np.float32),  # subnormals
        rng.integers(0, 1 << 32, 20000, dtype=np.uint64).astype(np.uint32).view(np.float32),
    ])
    x = x[np.isfinite(x)]
    ref = x.astype(ml_dtypes.bfloat16).view(np.uint16)
    assert np.array_equal(narrow(x, DType.BF16), ref)


def test_bf16_narrowing_from_f64_is_correctly_rounded():
    bits, vals = _bf16_table()
    rng = np.random.default_rng(11)
    # midpoints between neighbours, nudged by tiny F64 amounts: the cases a
    # naive F64->F32->BF16 path double-rounds
    base = np.sort(vals[(np.abs(vals) > 1e-30) & (np.abs(vals) < 1e30)])
    pick = rng.integers(0, len(base) - 1, 400)
    mids = (base[pick] + base[pick + 1]) / 2
    nudges = np.ldexp(np.abs(mids), -40) * rng.choice([-1.0, 0.0, 1.0], len(mids))
    xs = np.concatenate([mids + nudges, rng.standard_normal(200) * 10])
    got = widen(narrow(xs, DType.BF16), DType.BF16)
    for x, g in zip(xs, got):
        assert g == _nearest_even_oracle(float(x), bits, vals), x


def test_f16_narrowing_from_f64_is_correctly_rounded():
    finite = ALL16[np.isfinite(ALL16.view(np.float16))]
    vals = finite.view(np.float16).astype(np.float64)
    rng = np.random.default_rng(5)
    base = np.sort(vals)
    pick = rng.integers(0, len(base) - 1, 400)
    mids = (base[pick] + base[pick + 1]) / 2
    nudges = np.ldexp(np.abs(mids) + 1e-300, -45) * rng.choice([-1.0, 0.0, 1.0], len(mids))
    xs = mids + nudges
    got = roundtrip(xs, DType.F16)
    for x, g in zip(xs, got):
        assert g == _nearest_even_oracle(float(x), finite, vals), x


def test_ulp_values():
    assert ulp(np.array([1.0]), DType.BF16)[0] == 2.0 ** -7
    assert ulp(np.array([1.0]), DType.F32)[0] == 2.0 ** -23
    assert ulp(np.array([1.5]), DType.F16)[0] == 2.0 ** -10
    assert ulp(np.array([0.0]), DType.F16)[0] == 2.0 ** -24


def test_sum_products_matches_exact_sum():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    b = rng.standard_normal((64, 64)).astype(np.float32)
    # float32 products are exact in float64, so fsum gives the correctly rounded answer
    exact = math.fsum((a.astype(np.float64) * b).ravel().tolist())
    assert sum_products(a, b) == pytest.approx(exact, rel=1e-13, abs=1e-13)
    assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0


def test_ordered_map_preserves_order():
    items = list(range(50))
    assert list(ordered_map(lambda x: x * x, items, threads=4)) == [x * x for x in items]
    assert list(ordered_map(lambda x: x * x, items, threads=1)) == [x * x for x in items]


# products must stay clear of underflow for the split to be exact
finite = st.floats(min_value=-1e150, max_value=1e150, allow_nan=False).filter(lambda x: x == 0 or abs(x) > 1e-100)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=0, max_size=60))
def test_exact_dot_error_bound(pairs):
    a = np.array([p[0] for p in pairs], np.float64)
    b = np.array([p[1] for p in pairs], np.float64)
    terms = [Fraction(x) * Fraction(y) for x, y in zip(a.tolist(), b.tolist())]
    want = sum(terms, Fraction(0))
    scale = sum((abs(t) for t in terms), Fraction(0))
    got = exact_dot(a, b)
    tol = Fraction(math.ulp(float(want))) + len(terms) * Fraction(2) ** -104 * scale
    assert abs(Fraction(got) - want) <= tol


def test_exact_dot_survives_cancellation():
    a = np.array([1e16, 1.0, -1e16, 1e-8])
    assert exact_dot(a, np.ones(4)) == 1.0 + 1e-8
    assert sum_products(a, np.ones(4)) != 1.0 + 1e-8
