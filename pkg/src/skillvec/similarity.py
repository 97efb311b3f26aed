"""Layer-wise cosine similarity between two delta manifests, and heatmap output.

Inner products and squared norms are correctly rounded
(:func:`skillvec.numerics.exact_dot`), so near-orthogonal pairs keep full
relative precision. A grid is identical no matter how many threads
computed it.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .checkpoint_store import DEFAULT_SCHEMA, NameSchema, parse_param_name
from .exceptions import AmbiguousCell, EmptyOverlap, IoFailure, ShapeMismatch
from .numerics import exact_dot, ordered_map, sum_products
from .validation import check_manifest, check_same_shape

CSV_HEADER = "layer,module,cosine,inner,norm_a,norm_b"
NEGATIVE = (0x21, 0x66, 0xAC)
NEUTRAL = (0xF7, 0xF7, 0xF7)
POSITIVE = (0xB2, 0x18, 0x2B)


def frobenius_inner(a, b) -> float:
    """``sum(a * b)``, correctly rounded to float64."""
    a, b = check_same_shape(a, b)
    return exact_dot(a, b)


# sums below this may have lost bits to underflow
_SAFE_MIN = 2.0 ** -900


def _cosine(inner: float, na2: float, nb2: float) -> float | None:
    if na2 == 0.0 or nb2 == 0.0:
        return None
    return inner / math.sqrt(na2 * nb2)


def _in_range(*values: float) -> bool:
    # an exact zero may be an underflowed product, so it also takes the slow path
    return all(math.isfinite(v) and abs(v) >= _SAFE_MIN for v in values)


def _unit_scale(x: np.ndarray) -> np.ndarray:
    """``x`` times a power of two that brings its largest magnitude near 1 (exact)."""
    peak = float(np.max(np.abs(x)))
    return np.ldexp(x, -math.frexp(peak)[1])


def _cosine_of(a: np.ndarray, b: np.ndarray) -> tuple[float | None, float, float, float]:
    """Cosine plus the raw inner product and squared norms it came from."""
    with np.errstate(over="ignore", under="ignore"):
        na2, nb2 = sum_products(a, a), sum_products(b, b)
    if _in_range(na2, nb2, na2 * nb2):
        # exact sums: no cancellation error, and cos(a, a) is exactly 1
        inner, na2, nb2 = exact_dot(a, b), exact_dot(a, a), exact_dot(b, b)
    else:
        with np.errstate(over="ignore", under="ignore"):
            inner = sum_products(a, b)
    if _in_range(inner, na2, nb2, na2 * nb2):
        return _cosine(inner, na2, nb2), inner, na2, nb2
    if not a.any() or not b.any():
        return None, inner, na2, nb2
    # cosine is scale free, so recompute on power-of-two rescaled copies
    sa = _unit_scale(np.asarray(a, dtype=np.float64))
    sb = _unit_scale(np.asarray(b, dtype=np.float64))
    with np.errstate(under="ignore"):
        cos = _cosine(exact_dot(sa, sb), exact_dot(sa, sa), exact_dot(sb, sb))
    return cos, inner, na2, nb2


def cosine_sim(a, b) -> float | None:
    """Frobenius cosine of two equally shaped arrays; ``None`` if either is zero.

    The denominator is ``sqrt(|a|^2 * |b|^2)``, which makes ``cosine_sim(a, a)``
    exactly 1. The value is not clamped, so rounding may leave it a few ulp
    outside [-1, 1].
    """
    a, b = check_same_shape(a, b)
    return _cosine_of(a, b)[0]


@dataclass(frozen=True)
class SimilarityCell:
    layer: int
    module_kind: str
    cosine: float | None
    inner: float
    norm_a: float
    norm_b: float


@dataclass
class SimilarityGrid:
    cells: list[SimilarityCell]
    layers: list[int]
    modules: list[str]
    digest_a: str = ""
    digest_b: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {}
        for c in self.cells:
            key = (c.layer, c.module_kind)
            if key in self._index:
                raise AmbiguousCell(f"duplicate cell for layer {c.layer}, module {c.module_kind!r}")
            self._index[key] = c

    def __len__(self) -> int:
        return len(self.cells)

    def cell(self, layer: int, module_kind: str) -> SimilarityCell | None:
        return self._index.get((layer, module_kind))

    def cosines(self) -> list[float]:
        """Non-null cosines in layer-major order."""
        return [c.cosine for c in self.cells if c.cosine is not None]

    def to_matrix(self) -> np.ndarray:
        """``len(layers) x len(modules)`` array; NaN for null or absent cells."""
        out = np.full((len(self.layers), len(self.modules)), np.nan)
        li = {v: i for i, v in enumerate(self.layers)}
        mi = {v: i for i, v in enumerate(self.modules)}
        for c in self.cells:
            if c.cosine is not None:
                out[li[c.layer], mi[c.module_kind]] = c.cosine
        return out


def _cell_names(manifest, schema: NameSchema) -> dict[tuple[int, str], str]:
    cells: dict[tuple[int, str], str] = {}
    for name in manifest.names():
        if len(manifest.shape(name)) < 2:
            continue
        key = parse_param_name(name, schema)
        if key.layer is None:
            continue
        cell = (key.layer, key.module_kind)
        if cell in cells:
            raise AmbiguousCell(
                f"{cells[cell]!r} and {name!r} both map to layer {key.layer}, module {key.module_kind!r}"
            )
        cells[cell] = name
    return cells


def grid_compute(da, db, schema: NameSchema = DEFAULT_SCHEMA, threads: int | None = 1) -> SimilarityGrid:
    """One cosine per (layer, module kind) present in both manifests.

    Only rank-2-or-higher tensors whose names the schema classifies take part;
    vectors, embeddings and anything unclassified are left out. Cells are paired
    by their (layer, module kind) key, so the two manifests may use different
    name prefixes.
    """
    da = check_manifest(da)
    db = check_manifest(db)
    ca = _cell_names(da, schema)
    cb = _cell_names(db, schema)
    keys = sorted(set(ca) & set(cb))
    if not keys:
        raise EmptyOverlap("the manifests have no classified matrix in common")
    for key in keys:
        if da.shape(ca[key]) != db.shape(cb[key]):
            raise ShapeMismatch(
                f"{ca[key]!r} has shape {list(da.shape(ca[key]))} vs {list(db.shape(cb[key]))}"
            )

    def one(key):
        a = np.asarray(da.entries[ca[key]])
        b = np.asarray(db.entries[cb[key]])
        cos, inner, na2, nb2 = _cosine_of(a, b)
        return SimilarityCell(key[0], key[1], cos, inner, math.sqrt(na2), math.sqrt(nb2))

    cells = list(ordered_map(one, keys, threads))
    return SimilarityGrid(
        cells=cells,
        layers=sorted({k[0] for k in keys}),
        modules=sorted({k[1] for k in keys}),
        digest_a=da.digest,
        digest_b=db.digest,
    )


# ---------------------------------------------------------------- output


def _num(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def grid_csv(grid: SimilarityGrid) -> str:
    buf = io.StringIO()
    buf.write(f"# manifest_a={grid.digest_a}\n")
    buf.write(f"# manifest_b={grid.digest_b}\n")
    buf.write(f"# tool_version={__version__}\n")
    buf.write(CSV_HEADER + "\n")
    for c in grid.cells:
        buf.write(f"{c.layer},{c.module_kind},{_num(c.cosine)},{_num(c.inner)},{_num(c.norm_a)},{_num(c.norm_b)}\n")
    return buf.getvalue()


def color_for(value: float, color_range: tuple[float, float] = (-0.2, 0.2)) -> str:
    """Diverging blue-white-red color, white at exactly 0, clipped at the range ends."""
    lo, hi = color_range
    if value < 0:
        t, end = min(value / lo, 1.0), NEGATIVE
    else:
        t, end = min(value / hi, 1.0), POSITIVE
    rgb = (math.floor(n + (e - n) * t + 0.5) for n, e in zip(NEUTRAL, end))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


CELL = 18
LEFT = 150
TOP = 40
LEGEND_STEPS = 11


def grid_svg(grid: SimilarityGrid, color_range: tuple[float, float] = (-0.2, 0.2)) -> str:
    lo, hi = color_range
    ncol, nrow = len(grid.layers), len(grid.modules)
    width = LEFT + ncol * CELL + 90
    height = max(TOP + nrow * CELL + 40, TOP + LEGEND_STEPS * 12 + 40)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        "<metadata>",
        f"manifest_a={escape(grid.digest_a)}",
        f"manifest_b={escape(grid.digest_b)}",
        f"tool_version={__version__}",
        f"color_range={lo!r},{hi!r}",
        "</metadata>",
        "<defs>",
        '<pattern id="null-hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">',
        '<rect width="6" height="6" fill="#d9d9d9"/>',
        '<line x1="0" y1="0" x2="0" y2="6" stroke="#888888" stroke-width="2"/>',
        "</pattern>",
        "</defs>",
        f'<text x="{LEFT + ncol * CELL / 2}" y="14" text-anchor="middle">layer</text>',
        f'<text x="10" y="{TOP + nrow * CELL / 2}" text-anchor="start">module</text>',
    ]
    for j, layer in enumerate(grid.layers):
        x = LEFT + j * CELL + CELL / 2
        out.append(f'<text x="{x}" y="{TOP - 6}" text-anchor="middle">{layer}</text>')
    for i, module in enumerate(grid.modules):
        y = TOP + i * CELL + CELL / 2 + 3
        out.append(f'<text x="{LEFT - 4}" y="{y}" text-anchor="end">{escape(module)}</text>')
    for j, layer in enumerate(grid.layers):
        for i, module in enumerate(grid.modules):
            c = grid.cell(layer, module)
            if c is None:
                continue
            fill = "url(#null-hatch)" if c.cosine is None else color_for(c.cosine, color_range)
            label = "null" if c.cosine is None else repr(c.cosine)
            out.append(
                f'<rect x="{LEFT + j * CELL}" y="{TOP + i * CELL}" width="{CELL}" height="{CELL}" '
                f'fill="{fill}"><title>layer {layer} {escape(module)}: {label}</title></rect>'
            )
    lx = LEFT + ncol * CELL + 20
    for k in range(LEGEND_STEPS):
        v = hi + (lo - hi) * k / (LEGEND_STEPS - 1)
        out.append(f'<rect x="{lx}" y="{TOP + k * 12}" width="14" height="12" fill="{color_for(v, color_range)}"/>')
    out.append(f'<text x="{lx + 18}" y="{TOP + 9}">{hi!r}</text>')
    out.append(f'<text x="{lx + 18}" y="{TOP + (LEGEND_STEPS // 2) * 12 + 9}">0</text>')
    out.append(f'<text x="{lx + 18}" y="{TOP + (LEGEND_STEPS - 1) * 12 + 9}">{lo!r}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap(
    grid: SimilarityGrid,
    fmt: str,
    path: str | os.PathLike,
    color_range: tuple[float, float] = (-0.2, 0.2),
) -> Path:
    """Write ``grid`` as ``csv`` or ``svg`` to ``path``."""
    if not len(grid):
        raise EmptyOverlap("cannot render an empty grid")
    lo, hi = (float(v) for v in color_range)
    if not (lo < 0 < hi):
        raise ValueError(f"color range must straddle 0, got {color_range}")
    if fmt == "csv":
        text = grid_csv(grid)
    elif fmt == "svg":
        text = grid_svg(grid, (lo, hi))
    else:
        raise ValueError(f"format must be 'csv' or 'svg', got {fmt!r}")
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return path
