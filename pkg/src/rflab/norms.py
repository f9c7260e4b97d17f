"""Discrete sup, C^k, Hölder and L^2 norms of grid fields."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from rflab.grid import Field, GridSpec, MetricField, VectorField, d1, d2, metric_inverse

MAX_CK_ORDER = 4
EXHAUSTIVE_MAX_N = 24
DEFAULT_SAMPLE_PAIRS = 200_000


@dataclass(frozen=True)
class HolderParams:
    """Pair-quotient parameters.

    ``min_sep``/``max_sep`` default to one grid spacing and a quarter of the
    shortest period when left as ``None``.
    """

    alpha: float = 0.5
    min_sep: float | None = None
    max_sep: float | None = None
    sample_pairs: int = DEFAULT_SAMPLE_PAIRS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.min_sep is not None and self.min_sep < 0:
            raise ValueError("min_sep must be nonnegative")
        if self.min_sep is not None and self.max_sep is not None and not self.min_sep < self.max_sep:
            raise ValueError("min_sep must be smaller than max_sep")
        if self.sample_pairs < 1:
            raise ValueError("sample_pairs must be positive")

    def resolved(self, grid: GridSpec):
        lo = min(grid.spacing) if self.min_sep is None else self.min_sep
        hi = min(grid.periods) / 4.0 if self.max_sep is None else self.max_sep
        if not lo < hi:
            raise ValueError(f"no valid pair distances: min_sep={lo} >= max_sep={hi}")
        return lo, hi


def _raise_all(values, rank, mover):
    """Apply the pointwise matrix ``mover`` to each of the trailing ``rank`` indices."""
    mover = np.asarray(mover)
    m = mover.reshape(mover.shape[:-2] + (1,) * (rank - 1) + mover.shape[-2:])
    out = values
    for k in range(rank):
        axis = values.ndim - rank + k
        moved = np.moveaxis(out, axis, -1)[..., None]
        out = np.moveaxis((m @ moved)[..., 0], -1, axis)
    return out


def pointwise_norm(values, rank, ginv=None, metric=None):
    """Pointwise tensor norm over the trailing ``rank`` axes.

    Covariant indices are raised with ``ginv``; if ``metric`` is passed instead
    the indices are treated as contravariant and lowered. With neither, the
    Euclidean (Frobenius) norm of the components is returned.
    """
    values = np.asarray(values)
    if rank == 0:
        return np.abs(values)
    mover = ginv if ginv is not None else metric
    if mover is None:
        sq = np.sum(values.reshape(values.shape[: values.ndim - rank] + (-1,)) ** 2, axis=-1)
        return np.sqrt(sq)
    if rank == 2:
        # |T|^2 = tr(M T M T^T) with two batched matmuls
        mt = mover @ values
        mtt = mover @ np.swapaxes(values, -1, -2)
        sq = np.sum(mt * np.swapaxes(mtt, -1, -2), axis=(-1, -2))
        return np.sqrt(np.maximum(sq, 0.0))
    moved = _raise_all(values, rank, mover)
    sq = np.sum((values * moved).reshape(values.shape[: values.ndim - rank] + (-1,)), axis=-1)
    return np.sqrt(np.maximum(sq, 0.0))


def _field_pointwise_norm(f: Field, g: MetricField | None):
    rank = f.field_rank
    if g is None:
        return pointwise_norm(f.values, rank)
    if g.grid != f.grid:
        raise ValueError("field and metric live on different grids")
    if isinstance(f, VectorField):
        return pointwise_norm(f.values, rank, metric=g.values)
    return pointwise_norm(f.values, rank, ginv=metric_inverse(g.values))


def sup_norm(f: Field, g: MetricField | None = None) -> float:
    """Maximum over grid points of the pointwise norm (g-norm when ``g`` is given)."""
    return float(np.max(_field_pointwise_norm(f, g)))


def _offsets(grid, lo, hi):
    h = np.asarray(grid.spacing)
    reach = [min(int(math.floor(hi / h[a] + 1e-9)), grid.resolution[a] - 1) for a in range(grid.dim)]
    out = []
    for k in itertools.product(*[range(-r, r + 1) for r in reach]):
        nz = next((x for x in k if x != 0), 0)
        if nz <= 0:  # keep one offset of each +/- pair
            continue
        d = float(np.sqrt(np.sum((np.asarray(k) * h) ** 2)))
        if lo - 1e-12 <= d <= hi + 1e-12:
            out.append((k, d))
    return out


def _flat_components(values, dim):
    return values.reshape(values.shape[:dim] + (-1,))


def holder_seminorm(f: Field, p: HolderParams | None = None) -> float:
    """Largest |f(x) - f(x')| / |x - x'|^alpha over grid-point pairs.

    Distances are measured in the flat coordinates of the single chart
    [0, L_1) x ... without wrapping around the torus. Pairs are enumerated
    exhaustively for small grids (or when there are fewer than
    ``sample_pairs`` of them) and sampled with a counter-based generator
    otherwise.
    """
    p = p or HolderParams()
    grid = f.grid
    lo, hi = p.resolved(grid)
    offsets = _offsets(grid, lo, hi)
    if not offsets:
        raise ValueError("no grid-point pairs satisfy the distance window")
    vals = _flat_components(f.values, grid.dim)
    res = grid.resolution
    counts = [int(np.prod([res[a] - abs(k[a]) for a in range(grid.dim)])) for k, _ in offsets]
    total = sum(counts)
    if max(res) <= EXHAUSTIVE_MAX_N or total <= p.sample_pairs:
        best = 0.0
        for (k, d), c in zip(offsets, counts):
            if c == 0:
                continue
            a_sl = tuple(slice(max(0, -ka), res[a] - max(0, ka)) for a, ka in enumerate(k))
            b_sl = tuple(slice(max(0, ka), res[a] - max(0, -ka)) for a, ka in enumerate(k))
            diff = vals[b_sl] - vals[a_sl]
            m = float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))
            best = max(best, m / d**p.alpha)
        return best
    rng = np.random.Generator(np.random.Philox(p.seed))
    ks = np.array([k for k, _ in offsets])
    ds = np.array([d for _, d in offsets])
    weights = np.asarray(counts, dtype=np.float64) / total
    pick = rng.choice(len(offsets), size=p.sample_pairs, p=weights)
    k = ks[pick]
    u = rng.random((p.sample_pairs, grid.dim))
    resv = np.asarray(res)
    start = np.maximum(0, -k)
    span = resv - np.abs(k)
    x = start + np.minimum((u * span).astype(np.int64), span - 1)
    y = x + k
    diff = vals[tuple(x.T)] - vals[tuple(y.T)]
    q = np.sqrt(np.sum(diff * diff, axis=-1)) / ds[pick] ** p.alpha
    return float(q.max())


def _axis_power(values, grid, axis, m):
    out = values
    for _ in range(m // 2):
        out = d2(out, grid, axis)
    if m % 2:
        out = d1(out, grid, axis)
    return out


def derivative_tensor(f: Field, order: int):
    """All ordered ``order``-th partials; derivative indices follow the field indices.

    Each partial along a sorted multi-index applies, per axis with multiplicity
    m, the 5-point second derivative m//2 times and one first derivative when m
    is odd.
    """
    grid = f.grid
    dim = grid.dim
    base = f.values
    out = np.empty(base.shape + (dim,) * order)
    cache = {}
    for idx in itertools.product(range(dim), repeat=order):
        key = tuple(sorted(idx))
        if key not in cache:
            v = base
            for a in range(dim):
                m = key.count(a)
                if m:
                    v = _axis_power(v, grid, a, m)
            cache[key] = v
        out[(Ellipsis,) + idx] = cache[key]
    return out


def ck_norm(f: Field, k: int, p: HolderParams | None = None) -> float:
    """Sum of sup norms of the derivative tensors of order 0..k, plus the
    Hölder seminorm of the order-k tensor when ``p`` is given."""
    if not 0 <= k <= MAX_CK_ORDER:
        raise ValueError(f"k must lie in [0, {MAX_CK_ORDER}], got {k}")
    grid = f.grid
    total = 0.0
    top = None
    for i in range(k + 1):
        t = derivative_tensor(f, i) if i else f.values
        total += float(np.max(pointwise_norm(t, t.ndim - grid.dim)))
        top = t
    if p is not None:
        total += holder_seminorm(Field(grid, top), p)
    return total


def _pair_density(u, v, g):
    rank = u.field_rank
    if rank == 0:
        return u.values * v.values
    if isinstance(u, VectorField):
        moved = np.einsum("...ab,...b->...a", g.values, v.values)
        return np.einsum("...a,...a->...", u.values, moved)
    moved = _raise_all(v.values, rank, metric_inverse(g.values))
    flat = (u.values * moved).reshape(u.values.shape[: u.values.ndim - rank] + (-1,))
    return np.sum(flat, axis=-1)


def l2_pairing(u: Field, v: Field, g: MetricField) -> float:
    """Riemann-sum L^2 pairing with volume form sqrt(det g) dx."""
    if u.grid != v.grid or u.grid != g.grid:
        raise ValueError("fields live on different grids")
    if u.values.shape != v.values.shape:
        raise ValueError("fields have different ranks")
    metric_inverse(g.values)  # singular-metric guard
    vol = np.sqrt(np.linalg.det(g.values)) * g.grid.cell_volume
    a = float(np.sum(_pair_density(u, v, g) * vol))
    b = float(np.sum(_pair_density(v, u, g) * vol))
    return 0.5 * (a + b)  # exactly symmetric in (u, v)


def l2_norm(u: Field, g: MetricField) -> float:
    return math.sqrt(max(l2_pairing(u, u, g), 0.0))


def volume(g: MetricField) -> float:
    return float(np.sum(np.sqrt(np.linalg.det(g.values))) * g.grid.cell_volume)
