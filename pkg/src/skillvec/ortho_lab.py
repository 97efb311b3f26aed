"""Monte-Carlo laboratory for the overlap of two linear updates under isotropic inputs.

For an input row ``x`` with ``E[x^T x] = sigma^2 I`` and updates ``A``, ``B`` the
overlap ``<xA, xB> = x A B^T x^T`` has mean ``sigma^2 <A, B>_F``. This module
samples that quantity, compares it with the closed form and profiles how tightly
it concentrates as the dimension grows.

Samples are drawn at unit scale and multiplied by ``sigma^2`` afterwards, so
runs that differ only in ``sigma`` share their random stream (common random
numbers) and their estimates scale exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .exceptions import DegenerateA, DimMismatch, PowerIterationNoConvergence
from .numerics import ordered_map, sum_products
from .similarity import cosine_sim
from .validation import check_count, check_scalar, check_square_pair

DISTRIBUTIONS = ("gaussian", "rademacher_scaled")
METHODS = ("auto", "direct", "spectral")
# spectral sampling needs an O(d^3) eigendecomposition; it pays off once n >> d
SPECTRAL_MIN_RATIO = 5
CHUNK_ELEMENTS = 1 << 22

# stream ids mixed into the seed so pair construction and sampling never share draws
_PAIR_STREAM = 0
_SAMPLE_STREAM = 1


def _rng(seed: int, dim: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(dim), int(stream)]))


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class IsotropicSampler:
    """Zero-mean rows with covariance ``sigma^2 I``.

    ``gaussian`` draws N(0, sigma^2) components; ``rademacher_scaled`` draws
    ``+-sigma`` with equal probability. Both have covariance exactly
    ``sigma^2 I``.
    """

    dim: int
    sigma: float = 1.0
    distribution: str = "gaussian"
    seed: int = 0
    stream: int = _SAMPLE_STREAM

    def __post_init__(self):
        check_count(self.dim, "dim")
        check_scalar(self.sigma, "sigma", positive=True)
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}, got {self.distribution!r}")

    def rng(self) -> np.random.Generator:
        return _rng(self.seed, self.dim, self.stream)

    def with_sigma(self, sigma: float) -> "IsotropicSampler":
        return IsotropicSampler(self.dim, sigma, self.distribution, self.seed, self.stream)


def _unit_rows(rng: np.random.Generator, distribution: str, rows: int, dim: int) -> np.ndarray:
    if distribution == "gaussian":
        return rng.standard_normal((rows, dim))
    return rng.integers(0, 2, size=(rows, dim), dtype=np.int8).astype(np.float64) * 2.0 - 1.0


def _chunks(n: int, dim: int):
    rows = max(1, CHUNK_ELEMENTS // dim)
    for start in range(0, n, rows):
        yield min(rows, n - start)


def sample_isotropic(s: IsotropicSampler, n: int) -> np.ndarray:
    """``n`` rows from ``s``; the same sampler always yields the same rows."""
    n = check_count(n, "n")
    rng = s.rng()
    out = np.concatenate([_unit_rows(rng, s.distribution, r, s.dim) for r in _chunks(n, s.dim)])
    return out * s.sigma


# ---------------------------------------------------------------- update pairs


_CORRELATED = re.compile(r"correlated\(\s*([-+0-9.eE]+)\s*\)")


def parse_construction(construction: str) -> tuple[str, float | None]:
    if construction in ("independent_gaussian", "exactly_orthogonal"):
        return construction, None
    m = _CORRELATED.fullmatch(construction.strip())
    if m:
        rho = float(m.group(1))
        if not -1.0 <= rho <= 1.0:
            raise ValueError(f"correlation must lie in [-1, 1], got {rho}")
        return "correlated", rho
    raise ValueError(
        f"unknown construction {construction!r}; expected independent_gaussian, exactly_orthogonal or correlated(rho)"
    )


@dataclass(frozen=True)
class UpdatePair:
    A: np.ndarray
    B: np.ndarray
    construction: str
    frob_inner: float
    frob_norms: tuple[float, float]

    @classmethod
    def of(cls, A, B, construction: str = "custom") -> "UpdatePair":
        A, B = check_square_pair(A, B)
        return cls(A, B, construction, sum_products(A, B),
                   (math.sqrt(sum_products(A, A)), math.sqrt(sum_products(B, B))))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> np.ndarray:
        return self.A @ self.B.T

    @property
    def cosine(self) -> float | None:
        return cosine_sim(self.A, self.B)


def orthogonalize(A: np.ndarray, B0: np.ndarray) -> np.ndarray:
    """``B0`` projected onto the Frobenius complement of ``A``, rescaled to ``|B0|``."""
    na2 = sum_products(A, A)
    if na2 == 0.0:
        raise DegenerateA("cannot project against an all-zero matrix")
    B = B0
    # a second pass removes what rounding left behind in the first
    for _ in range(2):
        B = B - (sum_products(A, B) / na2) * A
    nb = math.sqrt(sum_products(B, B))
    if nb == 0.0:
        raise DegenerateA("the second matrix is parallel to the first")
    return B * (math.sqrt(sum_products(B0, B0)) / nb)


def make_pair(dim: int, construction: str = "independent_gaussian", seed: int = 0) -> UpdatePair:
    """Synthetic update pair with entries drawn from N(0, 1/dim)."""
    dim = check_count(dim, "dim", minimum=2)
    kind, rho = parse_construction(construction)
    rng = _rng(seed, dim, _PAIR_STREAM)
    scale = 1.0 / math.sqrt(dim)
    A = rng.standard_normal((dim, dim)) * scale
    B0 = rng.standard_normal((dim, dim)) * scale
    if kind == "independent_gaussian":
        B = B0
    elif kind == "exactly_orthogonal":
        B = orthogonalize(A, B0)
    else:
        na = math.sqrt(sum_products(A, A))
        nb0 = math.sqrt(sum_products(B0, B0))
        B = (rho * nb0 / na) * A + math.sqrt(1.0 - rho * rho) * B0
    return UpdatePair.of(A, B, construction)


# ---------------------------------------------------------------- overlap


def analytic_overlap(A, B, sigma: float = 1.0) -> float:
    """``sigma^2 <A, B>_F``, the mean overlap under isotropic inputs."""
    A, B = check_square_pair(A, B)
    sigma = check_scalar(sigma, "sigma", positive=True)
    return sigma * sigma * sum_products(A, B)


def resolve_method(method: str, distribution: str, n: int, dim: int) -> str:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "spectral" and distribution != "gaussian":
        raise ValueError("spectral sampling relies on rotation invariance and needs gaussian inputs")
    if method == "auto":
        return "spectral" if distribution == "gaussian" and n >= SPECTRAL_MIN_RATIO * dim else "direct"
    return method


def overlap_samples(pair: UpdatePair, s: IsotropicSampler, n: int, method: str = "auto") -> np.ndarray:
    """Unit-scale overlaps ``z A B^T z^T`` for ``n`` draws of ``z``; multiply by ``sigma^2``.

    ``direct`` forms each row and evaluates the quadratic form. ``spectral``
    writes the symmetric part of ``A B^T`` as ``Q diag(w) Q^T``; for a Gaussian
    row ``z`` the rotated row ``zQ`` is again standard Gaussian, so each overlap is
    ``sum_i w_i g_i^2`` with fresh standard normals ``g``. Both are exact in
    distribution; they consume the random stream differently.
    """
    if s.dim != pair.dim:
        raise DimMismatch(f"sampler dimension {s.dim} does not match update dimension {pair.dim}")
    n = check_count(n, "n")
    method = resolve_method(method, s.distribution, n, s.dim)
    rng = s.rng()
    M = pair.M
    if method == "spectral":
        weights = np.linalg.eigvalsh((M + M.T) * 0.5)
    parts = []
    for rows in _chunks(n, s.dim):
        z = _unit_rows(rng, s.distribution, rows, s.dim)
        if method == "spectral":
            np.square(z, out=z)
            parts.append(z @ weights)
        else:
            parts.append(np.einsum("ij,ij->i", z @ M, z))
    return np.concatenate(parts)


@dataclass(frozen=True)
class OverlapEstimate:
    mc_mean: float
    mc_stderr: float
    n_samples: int
    analytic: float
    sigma: float = 1.0

    @property
    def z_score(self) -> float:
        diff = self.mc_mean - self.analytic
        if self.mc_stderr == 0.0:
            return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
        return diff / self.mc_stderr

    def consistent(self, k: float = 4.0) -> bool:
        return abs(self.mc_mean - self.analytic) <= k * self.mc_stderr


def _estimate(unit: np.ndarray, sigma: float, analytic: float) -> OverlapEstimate:
    y = unit * (sigma * sigma)
    n = y.size
    mean = float(np.mean(y))
    std = float(np.std(y, ddof=1))
    return OverlapEstimate(mean, std / math.sqrt(n), n, analytic, sigma)


def mc_overlap(pair: UpdatePair, s: IsotropicSampler, n: int, method: str = "auto") -> OverlapEstimate:
    """Monte-Carlo mean of ``<xA, xB>`` over ``n >= 100`` isotropic rows."""
    return mc_overlap_sigmas(pair, s, n, [s.sigma], method)[0]


def mc_overlap_sigmas(
    pair: UpdatePair, s: IsotropicSampler, n: int, sigmas: Sequence[float], method: str = "auto"
) -> list[OverlapEstimate]:
    """``mc_overlap`` at several input scales from one random stream.

    Each entry equals ``mc_overlap(pair, s.with_sigma(sigma), n, method)``
    bit for bit; the unit-scale samples are simply computed once.
    """
    check_count(n, "n", minimum=100)
    sigmas = [check_scalar(x, "sigma", positive=True) for x in sigmas]
    with threadpool_limits(1):
        unit = overlap_samples(pair, s, n, method)
    return [_estimate(unit, sg, analytic_overlap(pair.A, pair.B, sg)) for sg in sigmas]


# ---------------------------------------------------------------- concentration


def spectral_norm(M, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value of ``M`` by power iteration on ``M^T M``.

    Stops when the Rayleigh quotient changes by at most ``tol`` relative.
    """
    M = np.asarray(M, dtype=np.float64)
    if not M.any():
        return 0.0
    v = _rng(seed, M.shape[1], 2).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(max_iter):
        w = M.T @ (M @ v)
        lam = float(v @ w)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            # started in the null space; the estimate is exact for that direction only
            v = _rng(seed + 1, M.shape[1], 2).standard_normal(M.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w / norm
        if abs(lam - prev) <= tol * lam:
            return math.sqrt(lam)
        prev = lam
    raise PowerIterationNoConvergence(f"no convergence within {max_iter} iterations")


def hanson_wright_bound(t: float, frob_ab: float, frob_m: float, spec_m: float, c: float = 0.125) -> float:
    """Tail bound for the normalized overlap deviating from its mean by more than ``t``.

    With ``Y = x M x^T`` for rows of sub-Gaussian norm ``sigma`` the bound is
    ``2 exp(-c min(T^2 / (sigma^4 |M|_F^2), T / (sigma^2 |M|_2)))`` at
    ``T = t |A|_F |B|_F sigma^2``; ``sigma`` cancels. ``frob_ab`` is
    ``|A|_F |B|_F``.
    """
    if frob_m == 0.0:
        return 0.0
    T = t * frob_ab
    expo = min(T * T / (frob_m * frob_m), T / spec_m)
    return min(1.0, 2.0 * math.exp(-c * expo))


@dataclass
class ConcentrationProfile:
    dims: list[int]
    construction: str
    sigma: float
    n_per_dim: int
    t_grid: list[float]
    means: list[float] = field(default_factory=list)
    stds: list[float] = field(default_factory=list)
    tail_fractions: list[list[float]] = field(default_factory=list)
    frob_m: list[float] = field(default_factory=list)
    spec_m: list[float] = field(default_factory=list)
    bounds: list[list[float]] = field(default_factory=list)

    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.stds, self.stds[1:]))

    def tail_table(self) -> list[dict]:
        rows = []
        for i, d in enumerate(self.dims):
            for j, t in enumerate(self.t_grid):
                frac, bound = self.tail_fractions[i][j], self.bounds[i][j]
                rows.append({"d": d, "t": t, "empirical": frac, "bound": bound, "exceeds_bound": frac > bound})
        return rows


def _profile_point(d: int, construction: str, sampler: IsotropicSampler, n: int, t_grid, method: str):
    pair = make_pair(d, construction, sampler.seed)
    s = IsotropicSampler(d, sampler.sigma, sampler.distribution, sampler.seed, sampler.stream)
    unit = overlap_samples(pair, s, n, method)
    na, nb = pair.frob_norms
    denom = na * nb
    centred = (unit - pair.frob_inner) / denom
    M = pair.M
    frob_m = math.sqrt(sum_products(M, M))
    spec_m = spectral_norm(M)
    return (
        float(np.mean(unit / denom)),
        float(np.std(unit / denom, ddof=1)),
        [float(np.mean(np.abs(centred) > t)) for t in t_grid],
        frob_m,
        spec_m,
        [hanson_wright_bound(t, denom, frob_m, spec_m) for t in t_grid],
    )


def concentration_sweep(
    dims: Sequence[int],
    construction: str = "independent_gaussian",
    s_template: IsotropicSampler | None = None,
    n_per_dim: int = 1000,
    t_grid: Sequence[float] = (0.1, 0.2, 0.5),
    method: str = "auto",
    threads: int | None = 1,
) -> ConcentrationProfile:
    """Spread of the normalized overlap ``<xA, xB> / (|A|_F |B|_F sigma^2)`` per dimension.

    A fresh pair is built for every dimension from the template's seed. The
    empirical tail beyond each ``t`` is compared with the Hanson-Wright bound at
    ``c = 1/8``; rows above the bound are flagged, not treated as errors.
    """
    dims = [check_count(d, "dim", minimum=2) for d in dims]
    if not dims or any(d > 4096 for d in dims):
        raise ValueError("dims must be a non-empty list within [2, 4096]")
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ValueError("dims must be strictly increasing")
    check_count(n_per_dim, "n_per_dim", minimum=1000)
    parse_construction(construction)
    s = s_template or IsotropicSampler(dims[0])
    t_grid = [check_scalar(t, "t", positive=True) for t in t_grid]
    with threadpool_limits(1):
        points = list(ordered_map(
            lambda d: _profile_point(d, construction, s, n_per_dim, t_grid, method), dims, threads
        ))
    prof = ConcentrationProfile(dims, construction, s.sigma, n_per_dim, t_grid)
    for mean, std, tails, fm, sm, bounds in points:
        prof.means.append(mean)
        prof.stds.append(std)
        prof.tail_fractions.append(tails)
        prof.frob_m.append(fm)
        prof.spec_m.append(sm)
        prof.bounds.append(bounds)
    return prof


# ---------------------------------------------------------------- reports


def experiment_record(pair: UpdatePair, est: OverlapEstimate, profile: ConcentrationProfile | None = None) -> dict:
    return {
        "construction": pair.construction,
        "d": pair.dim,
        "sigma": est.sigma,
        "n": est.n_samples,
        "mc_mean": est.mc_mean,
        "mc_stderr": est.mc_stderr,
        "analytic": est.analytic,
        "z_score": est.z_score,
        "tail_table": profile.tail_table() if profile is not None else [],
    }


REPORT_FIELDS = ("construction", "d", "sigma", "n", "mc_mean", "mc_stderr", "analytic", "z_score")


def write_report(records: list[dict], path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> None:
    """JSON report of experiment records, optionally flattened to CSV (one row per record)."""
    Path(path).write_text(json.dumps(records, indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for r in records:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in REPORT_FIELDS])
