"""Periodic grids on flat tori, tensor fields, and the finite-difference calculus.

Every field lives on a single global periodic chart of the torus. Values are
64-bit floats laid out row-major over the grid axes, then tensor indices.
Derivatives use 4th-order central stencils with periodic wraparound; the
stencil loops are served by a compiled kernel when available and by a numpy
fallback otherwise (see :func:`set_backend`).
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rflab import _kernels_py
from rflab.errors import FieldFormatError, GridError, SingularMetricError

try:
    from rflab import _kernels as _kernels_ext
except ImportError:  # pragma: no cover - depends on the build
    _kernels_ext = None

MIN_POINTS = 8
COND_LIMIT = 1e12
TRIG_INTERP_MAX = 64
MAGIC = b"RFLAB001"

_backend = _kernels_py
if _kernels_ext is not None and os.environ.get("RFLAB_BACKEND", "").lower() != "python":
    _backend = _kernels_ext


def set_backend(name):
    """Select the stencil backend: ``"cython"`` or ``"python"``."""
    global _backend
    if name == "python":
        _backend = _kernels_py
    elif name == "cython":
        if _kernels_ext is None:
            raise ImportError("compiled kernels are not built")
        _backend = _kernels_ext
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend_name():
    return "cython" if _backend is _kernels_ext else "python"


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on the torus prod_a [0, L_a)."""

    resolution: tuple[int, ...]
    periods: tuple[float, ...]

    def __post_init__(self):
        res = tuple(int(n) for n in self.resolution)
        per = tuple(float(p) for p in self.periods)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "periods", per)
        if len(res) not in (1, 2, 3):
            raise GridError(f"dimension must be 1, 2 or 3, got {len(res)}")
        if len(per) != len(res):
            raise GridError("resolution and periods have different lengths")
        if any(n < MIN_POINTS for n in res):
            raise GridError(f"every axis needs at least {MIN_POINTS} points, got {res}")
        if any(not np.isfinite(p) or p <= 0 for p in per):
            raise GridError(f"periods must be positive, got {per}")

    @classmethod
    def uniform(cls, dim, n, period=1.0):
        return cls((n,) * dim, (period,) * dim)

    @property
    def dim(self):
        return len(self.resolution)

    @property
    def shape(self):
        return self.resolution

    @property
    def spacing(self):
        return tuple(p / n for p, n in zip(self.periods, self.resolution))

    @property
    def n_points(self):
        return int(np.prod(self.resolution))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def volume(self):
        return float(np.prod(self.periods))

    def axis_coordinates(self, axis):
        return np.arange(self.resolution[axis]) * self.spacing[axis]

    def mesh(self):
        """Coordinate arrays, one per axis, each of shape ``self.shape``."""
        return np.meshgrid(*(self.axis_coordinates(a) for a in range(self.dim)), indexing="ij")

    def points(self):
        """All grid nodes as an (n_points, dim) array in row-major order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def check_axis(self, axis):
        if not isinstance(axis, (int, np.integer)) or not 0 <= axis < self.dim:
            raise GridError(f"axis {axis} out of range for a {self.dim}-dimensional grid")


class Field:
    """Immutable tensor field on a periodic grid.

    ``values`` has shape ``grid.shape + (dim,) * rank``. Subclasses fix the
    rank and add invariants; the base class accepts any rank.
    """

    rank: int | None = None

    def __init__(self, grid, values):
        arr = np.array(values, dtype=np.float64, copy=True)
        rank = arr.ndim - grid.dim
        if self.rank is not None and rank != self.rank:
            raise GridError(f"{type(self).__name__} needs rank {self.rank}, got {rank}")
        expected = grid.shape + (grid.dim,) * rank
        if rank < 0 or arr.shape != expected:
            raise GridError(f"values shape {arr.shape} does not match grid {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")
        arr = self._normalize(arr)
        arr.flags.writeable = False
        self._grid = grid
        self._values = arr

    def _normalize(self, arr):
        return arr

    @property
    def grid(self):
        return self._grid

    @property
    def values(self):
        return self._values

    @property
    def field_rank(self):
        return self._values.ndim - self._grid.dim

    def _linear(self, values):
        """Wrap ``values`` in the closest class closed under linear combinations."""
        cls = type(self)
        if cls is MetricField:
            cls = SymTensorField
        return cls(self._grid, values)

    def _check_other(self, other):
        if not isinstance(other, Field) or other.grid != self.grid:
            raise GridError("fields live on different grids")
        if other.values.shape != self.values.shape:
            raise GridError("fields have different ranks")

    def __add__(self, other):
        self._check_other(other)
        return self._linear(self._values + other.values)

    def __sub__(self, other):
        self._check_other(other)
        return self._linear(self._values - other.values)

    def __mul__(self, c):
        return self._linear(self._values * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self._linear(self._values / float(c))

    def __neg__(self):
        return self._linear(-self._values)

    def shifted(self, shift, axis):
        """Cyclic translation of the field by ``shift`` grid cells along ``axis``."""
        self._grid.check_axis(axis)
        return type(self)(self._grid, np.roll(self._values, shift, axis=axis))

    def __repr__(self):
        return f"{type(self).__name__}(grid={self._grid}, rank={self.field_rank})"


class ScalarField(Field):
    rank = 0


class VectorField(Field):
    rank = 1


class SymTensorField(Field):
    """Symmetric 2-tensor field; symmetry is enforced on construction."""

    rank = 2

    def _normalize(self, arr):
        return 0.5 * (arr + np.swapaxes(arr, -1, -2))


class MetricField(SymTensorField):
    """Pointwise positive-definite symmetric 2-tensor field."""

    def _normalize(self, arr):
        arr = super()._normalize(arr)
        check_metric(arr)
        return arr

    @classmethod
    def constant(cls, grid, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        return cls(grid, np.broadcast_to(m, grid.shape + m.shape))

    @classmethod
    def identity(cls, grid):
        return cls.constant(grid, np.eye(grid.dim))

    def inverse(self):
        return metric_inverse(self._values)

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self._values).min())


class DiffeoMap:
    """Map F(x) = x + u(x) with a periodic displacement ``u`` stored on the grid."""

    def __init__(self, grid, displacement):
        self._field = VectorField(grid, displacement)

    @classmethod
    def identity(cls, grid):
        return cls(grid, np.zeros(grid.shape + (grid.dim,)))

    @property
    def grid(self):
        return self._field.grid

    @property
    def displacement(self):
        return self._field.values

    def image_points(self):
        """F evaluated at every grid node, shape (n_points, dim), not reduced mod L."""
        return self.grid.points() + self.displacement.reshape(-1, self.grid.dim)

    def jacobian(self):
        """J[..., i, a] = dF^i/dx^a = delta_ia + d_a u^i."""
        du = gradient(self.displacement, self.grid)  # [..., a, i]
        return np.eye(self.grid.dim) + np.swapaxes(du, -1, -2)

    def jacobian_determinant(self):
        return np.linalg.det(self.jacobian())

    def is_orientation_preserving(self):
        return bool(np.all(self.jacobian_determinant() > 0))


def check_metric(values):
    """Raise :class:`SingularMetricError` unless every point is SPD and well conditioned."""
    eig = np.linalg.eigvalsh(values)
    lo = eig[..., 0]
    hi = eig[..., -1]
    if not np.all(lo > 0):
        raise SingularMetricError(f"metric not positive definite (min eigenvalue {lo.min():.3e})")
    cond = hi / lo
    if not np.all(cond <= COND_LIMIT):
        raise SingularMetricError(f"metric condition number {cond.max():.3e} exceeds {COND_LIMIT:g}")
    return eig


def metric_inverse(values):
    """Pointwise inverse of a metric array with the condition-number guard."""
    check_metric(values)
    inv = np.linalg.inv(values)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


# ---------------------------------------------------------------------------
# finite differences on raw arrays (grid axes first, tensor axes after)


def _as_3d(values, axis):
    shape = values.shape
    outer = int(np.prod(shape[:axis], dtype=np.int64))
    inner = int(np.prod(shape[axis + 1:], dtype=np.int64))
    return np.ascontiguousarray(values, dtype=np.float64).reshape(outer, shape[axis], inner)


def d1(values, grid, axis):
    """4th-order periodic first derivative of a raw array along ``axis``."""
    out = _backend.d1(_as_3d(values, axis), 1.0 / grid.spacing[axis])
    return np.asarray(out).reshape(values.shape)


def d2(values, grid, axis):
    """4th-order periodic second derivative (5-point stencil) along ``axis``."""
    h = grid.spacing[axis]
    out = _backend.d2(_as_3d(values, axis), 1.0 / (h * h))
    return np.asarray(out).reshape(values.shape)


def dd(values, grid, a, b):
    """Second derivative d_a d_b; mixed partials use one canonical composition."""
    if a == b:
        return d2(values, grid, a)
    lo, hi = min(a, b), max(a, b)
    return d1(d1(values, grid, hi), grid, lo)


def gradient(values, grid):
    """Stack of first derivatives; derivative index is inserted after the grid axes."""
    return np.stack([d1(values, grid, a) for a in range(grid.dim)], axis=grid.dim)


def hessian(values, grid):
    """Stack of second derivatives with two derivative indices after the grid axes."""
    dim = grid.dim
    out = np.empty(grid.shape + (dim, dim) + values.shape[dim:])
    for a in range(dim):
        for b in range(a, dim):
            v = dd(values, grid, a, b)
            out[(slice(None),) * dim + (a, b)] = v
            if a != b:
                out[(slice(None),) * dim + (b, a)] = v
    return out


def partial_derivative(f, axis, order=1, axis2=None):
    """Periodic 4th-order partial derivative of a field.

    ``order=1`` differentiates along ``axis``; ``order=2`` gives d_axis d_axis2
    (``axis2`` defaults to ``axis``). The result has the rank of ``f``.
    """
    grid = f.grid
    grid.check_axis(axis)
    if order == 1:
        if axis2 is not None:
            raise GridError("axis2 is only meaningful for order=2")
        out = d1(f.values, grid, axis)
    elif order == 2:
        b = axis if axis2 is None else axis2
        grid.check_axis(b)
        out = dd(f.values, grid, axis, b)
    else:
        raise GridError(f"order must be 1 or 2, got {order}")
    return f._linear(out)


# ---------------------------------------------------------------------------
# periodic interpolation


def _trig_weights(s, n):
    """Trigonometric interpolation weights for fractional index positions ``s``.

    The numerator sin(pi (s - j)) is written through the offset from the nearest
    node, which is exact in floating point, so points a hair away from a node
    keep full relative accuracy.
    """
    j = np.arange(n)
    nearest = np.rint(s)
    offset = s - nearest
    delta = offset[:, None] + (np.mod(nearest, n)[:, None] - j[None, :])
    parity = np.where((nearest[:, None] - j[None, :]) % 2 == 0, 1.0, -1.0)
    num = np.sin(np.pi * offset)[:, None] * parity
    arg = np.pi * delta / n
    if n % 2 == 0:
        den = n * np.tan(arg)
    else:
        den = n * np.sin(arg)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = num / den
    return w


def _cubic_weights(s, n):
    m = s.shape[0]
    k = np.floor(s).astype(np.int64)
    t = s - k
    w = np.zeros((m, n))
    coeffs = (
        -t * (t - 1) * (t - 2) / 6.0,
        (t + 1) * (t - 1) * (t - 2) / 2.0,
        -(t + 1) * t * (t - 2) / 2.0,
        (t + 1) * t * (t - 1) / 6.0,
    )
    rows = np.arange(m)
    for off, c in zip((-1, 0, 1, 2), coeffs):
        np.add.at(w, (rows, (k + off) % n), c)
    return w


def axis_weights(x, n, period):
    """Interpolation weight matrix (len(x), n) for coordinates ``x`` on one axis."""
    h = period / n
    s = np.mod(np.asarray(x, dtype=np.float64), period) / h
    s = np.where(s >= n, s - n, s)
    nearest = np.rint(s)
    # rounding-level offsets only: j*h/h need not be an exact integer
    on_node = np.abs(s - nearest) <= 64 * np.finfo(np.float64).eps * max(1.0, n)
    if n <= TRIG_INTERP_MAX:
        w = _trig_weights(s, n)
    else:
        w = _cubic_weights(s, n)
    if np.any(on_node):
        idx = np.nonzero(on_node)[0]
        w[idx] = 0.0
        w[idx, nearest[idx].astype(np.int64) % n] = 1.0
    return w


def interpolate_values(values, grid, points):
    """Interpolate a raw field array at an (M, dim) array of points.

    Returns an array of shape (M,) + tensor shape. Per axis the scheme is
    trigonometric for N <= 64 and periodic cubic Lagrange otherwise.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dim = grid.dim
    if points.shape[1] != dim:
        raise GridError(f"points must have {dim} coordinates")
    m = points.shape[0]
    tshape = values.shape[dim:]
    flat = values.reshape(grid.shape + (-1,))
    w0 = axis_weights(points[:, 0], grid.resolution[0], grid.periods[0])
    acc = w0 @ flat.reshape(grid.resolution[0], -1)
    for a in range(1, dim):
        wa = axis_weights(points[:, a], grid.resolution[a], grid.periods[a])
        acc = acc.reshape(m, grid.resolution[a], -1)
        acc = np.einsum("mnr,mn->mr", acc, wa)
    return acc.reshape((m,) + tshape)


def interpolate(f, point):
    """Value of field ``f`` at an arbitrary point (reduced modulo the periods)."""
    out = interpolate_values(f.values, f.grid, np.asarray(point, dtype=np.float64)[None, :])
    return out[0] if out.ndim > 1 else float(out[0])


# ---------------------------------------------------------------------------
# field container I/O


def _kind(f):
    if isinstance(f, MetricField):
        return "metric"
    return {0: "scalar", 1: "vector", 2: "symmetric" if isinstance(f, SymTensorField) else "tensor"}.get(
        f.field_rank, "tensor"
    )


def save_field(f, path):
    """Write ``f`` to ``path`` in the RFLAB001 container format."""
    header = {
        "dim": f.grid.dim,
        "resolution": list(f.grid.resolution),
        "periods": list(f.grid.periods),
        "rank": f.field_rank,
        "symmetric": isinstance(f, SymTensorField),
        "kind": _kind(f),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(f.values, dtype="<f8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def load_field(path, grid=None):
    """Read a field container; if ``grid`` is given the header must match it."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FieldFormatError(f"{path}: not an RFLAB001 container")
    (hlen,) = struct.unpack("<I", data[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start: start + hlen].decode("utf-8"))
        file_grid = GridSpec(tuple(header["resolution"]), tuple(header["periods"]))
        rank = int(header["rank"])
        symmetric = bool(header["symmetric"])
    except (ValueError, KeyError, GridError) as exc:
        raise FieldFormatError(f"{path}: bad header ({exc})") from exc
    if header.get("dim") != file_grid.dim:
        raise FieldFormatError(f"{path}: header dim disagrees with resolution")
    if grid is not None and grid != file_grid:
        raise FieldFormatError(f"{path}: file grid {file_grid} does not match expected {grid}")
    shape = file_grid.shape + (file_grid.dim,) * rank
    payload = data[start + hlen:]
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise FieldFormatError(f"{path}: payload has {len(payload)} bytes, header shape {shape} needs {expected}")
    values = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    kind = header.get("kind")
    if rank == 0:
        return ScalarField(file_grid, values)
    if rank == 1:
        return VectorField(file_grid, values)
    if rank == 2 and symmetric:
        if kind == "metric":
            return MetricField(file_grid, values)
        return SymTensorField(file_grid, values)
    return Field(file_grid, values)
