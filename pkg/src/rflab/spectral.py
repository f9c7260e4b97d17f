"""Assembled linear operators on symmetric-tensor fields: spectra, resolvents,
sector scans and the contour-integral semigroup.

Fields are flattened point-major into stacked coordinates
``(h_00, sqrt2 h_01, ..., h_11, ...)`` per grid point, so the Euclidean norm of
a stacked vector equals the pointwise Frobenius norms collected in l2, and a
self-adjoint operator under the Frobenius pairing yields a symmetric matrix.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from rflab.errors import (
    EigenSolverError,
    LinearityError,
    QuadratureError,
    ResolventError,
    SectorialityViolation,
)
from rflab.grid import Field, SymTensorField

DENSE_LIMIT = 4000
SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# stacked coordinates


def component_pairs(dim):
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def _weights(dim):
    return np.array([1.0 if i == j else SQRT2 for i, j in component_pairs(dim)])


def stack(values, grid):
    """Flatten a symmetric-tensor array (or Field) into stacked coordinates."""
    if isinstance(values, Field):
        values = values.values
    dim = grid.dim
    pairs = component_pairs(dim)
    comps = np.stack([values[..., i, j] for i, j in pairs], axis=-1) * _weights(dim)
    return comps.reshape(-1)


def unstack(vec, grid):
    """Inverse of :func:`stack`; keeps complex dtype when given complex input."""
    dim = grid.dim
    pairs = component_pairs(dim)
    comps = np.asarray(vec).reshape(grid.shape + (len(pairs),)) / _weights(dim)
    out = np.zeros(grid.shape + (dim, dim), dtype=comps.dtype)
    for c, (i, j) in enumerate(pairs):
        out[..., i, j] = comps[..., c]
        out[..., j, i] = comps[..., c]
    return out


def n_components(dim):
    return dim * (dim + 1) // 2


# ---------------------------------------------------------------------------
# assembly


@dataclass
class OperatorMatrix:
    matrix: scipy.sparse.csr_matrix
    grid: object
    symmetric: bool
    source: str = ""
    _eigs: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def n_components(self):
        return n_components(self.grid.dim)

    def toarray(self):
        return self.matrix.toarray()

    def __matmul__(self, x):
        return self.matrix @ x

    def eigenvalues(self):
        """All eigenvalues (dense path only); cached."""
        if self._eigs is None:
            if self.n_rows > DENSE_LIMIT:
                raise ValueError("full spectrum only available for dense-sized operators")
            a = self.toarray()
            self._eigs = np.linalg.eigvalsh(a).astype(complex) if self.symmetric else np.linalg.eigvals(a)
        return self._eigs


def _apply(op, vec, grid):
    out = op(SymTensorField(grid, unstack(vec, grid)))
    return stack(out.values if isinstance(out, Field) else np.asarray(out), grid)


def _probe_stride(n, radius):
    for s in range(2 * radius + 1, n + 1):
        if n % s == 0:
            return s
    return n


def assemble(op, grid, stencil_radius=None, seed=0, source="", check=True):
    """Matrix of a linear operator on symmetric-tensor fields by column probing.

    ``op`` maps a SymTensorField to a symmetric-tensor Field (or array). With
    ``stencil_radius`` the probes are grouped on sublattices whose spacing
    exceeds twice the radius, so each application recovers many columns.
    """
    dim = grid.dim
    nc = n_components(dim)
    n = grid.n_points * nc
    rows, cols, vals = [], [], []
    if stencil_radius is None:
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            col = _apply(op, e, grid)
            nz = np.nonzero(col)[0]
            rows.append(nz)
            cols.append(np.full(len(nz), j))
            vals.append(col[nz])
    else:
        r = int(stencil_radius)
        strides = [_probe_stride(grid.resolution[a], r) for a in range(dim)]
        idx = np.indices(grid.shape).reshape(dim, -1).T  # point -> multi-index
        for offset in np.ndindex(*strides):
            members = np.all(idx % strides == offset, axis=1)
            probed = np.nonzero(members)[0]
            for c in range(nc):
                e = np.zeros(n)
                e[probed * nc + c] = 1.0
                y = _apply(op, e, grid).reshape(grid.n_points, nc)
                # owner of each output point: the probed point within the sublattice cell
                owner_idx = idx - ((idx - np.asarray(offset)) % strides)
                owner_idx = np.where(
                    ((idx - np.asarray(offset)) % strides) > np.asarray(strides) // 2,
                    owner_idx + strides,
                    owner_idx,
                ) % np.asarray(grid.resolution)
                owner = np.ravel_multi_index(owner_idx.T, grid.shape)
                for comp in range(nc):
                    v = y[:, comp]
                    nz = np.nonzero(v)[0]
                    rows.append(nz * nc + comp)
                    cols.append(owner[nz] * nc + c)
                    vals.append(v[nz])
    mat = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    mat.sum_duplicates()
    diff = abs(mat - mat.T)
    scale = max(1.0, float(abs(mat).max()) if mat.nnz else 1.0)
    symmetric = (diff.max() if diff.nnz else 0.0) <= 1e-12 * scale
    result = OperatorMatrix(mat, grid, bool(symmetric), source)
    if check:
        _check_assembly(op, result, seed)
    return result


def _check_assembly(op, A, seed):
    grid = A.grid
    rng = np.random.Generator(np.random.Philox(seed))
    n = A.n_rows
    u, v = rng.standard_normal(n), rng.standard_normal(n)
    a, b = rng.standard_normal(2)
    fu, fv = _apply(op, u, grid), _apply(op, v, grid)
    fuv = _apply(op, a * u + b * v, grid)
    scale = max(np.max(np.abs(fu)), np.max(np.abs(fv)), 1e-300) * (abs(a) + abs(b))
    if np.max(np.abs(fuv - a * fu - b * fv)) > 1e-9 * scale:
        raise LinearityError("operator failed the linearity spot-check")
    row_sum = float(np.max(np.asarray(abs(A.matrix).sum(axis=1)))) if A.matrix.nnz else 0.0
    err = np.max(np.abs(A.matrix @ u - fu))
    if err > 1e-12 * max(row_sum * np.max(np.abs(u)), 1e-300):
        raise LinearityError(f"assembled matrix disagrees with the operator (error {err:.3e})")


# ---------------------------------------------------------------------------
# spectrum


@dataclass
class Spectrum:
    values: np.ndarray
    residuals: np.ndarray
    vectors: np.ndarray | None = None

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("re", "im", "residual"))
            for lam, res in zip(self.values, self.residuals):
                w.writerow((repr(float(lam.real)), repr(float(lam.imag)), repr(float(res))))
        return path


def _right_edge_bound(mat):
    diag = mat.diagonal()
    off = np.asarray(abs(mat).sum(axis=1)).ravel() - np.abs(diag)
    return float(np.max(diag.real + off))


def top_spectrum(A, m, keep_vectors=False):
    """The ``m`` eigenvalues of largest real part, sorted descending, with residuals."""
    n = A.n_rows
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}]")
    if n <= DENSE_LIMIT:
        dense = A.toarray()
        if A.symmetric:
            vals, vecs = np.linalg.eigh(dense)
            vals = vals.astype(complex)
        else:
            vals, vecs = np.linalg.eig(dense)
        order = np.argsort(-vals.real, kind="stable")[:m]
        vals, vecs = vals[order], vecs[:, order]
    else:
        sigma = _right_edge_bound(A.matrix) + 1.0
        try:
            vals, vecs = scipy.sparse.linalg.eigs(A.matrix.astype(complex), k=m, sigma=sigma, which="LM")
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            raise EigenSolverError(str(exc)) from exc
        order = np.argsort(-vals.real, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
    av = A.matrix @ vecs
    res = np.linalg.norm(av - vecs * vals, axis=0) / np.linalg.norm(vecs, axis=0)
    return Spectrum(vals, res, vecs if keep_vectors else None)


# ---------------------------------------------------------------------------
# resolvent


class _Shifted:
    """Factorization of lambda I - A, dense or sparse depending on size."""

    def __init__(self, A, lam):
        self.n = A.n_rows
        self.lam = complex(lam)
        self.dense = self.n <= DENSE_LIMIT
        if self.dense:
            self.m = self.lam * np.eye(self.n) - A.toarray()
            try:
                self.lu = scipy.linalg.lu_factor(self.m, check_finite=True)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise ResolventError(f"factorization failed at lambda={lam}") from exc
            if np.any(np.abs(np.diag(self.lu[0])) <= 1e-14 * np.max(np.abs(self.m))):
                raise ResolventError(f"lambda={lam} lies on the computed spectrum")
        else:
            self.m = (self.lam * scipy.sparse.identity(self.n, format="csc") - A.matrix.tocsc()).tocsc()
            try:
                self.lu = scipy.sparse.linalg.splu(self.m)
            except RuntimeError as exc:
                raise ResolventError(f"sparse factorization failed at lambda={lam}: {exc}") from exc

    def solve(self, b, adjoint=False):
        b = np.asarray(b, dtype=complex)
        if self.dense:
            x = scipy.linalg.lu_solve(self.lu, b, trans=2 if adjoint else 0)
        else:
            x = self.lu.solve(b, trans="H" if adjoint else "N")
        mat = self.m.conj().T if adjoint else self.m
        r = mat @ x - b
        if not np.all(np.isfinite(x)) or np.linalg.norm(r) > 1e-8 * max(np.linalg.norm(b), 1e-300):
            raise ResolventError(f"resolvent solve inaccurate at lambda={self.lam}")
        return x


def resolvent_apply(A, lam, f):
    """(lambda I - A)^{-1} f for a stacked vector (or symmetric-tensor field)."""
    if isinstance(f, Field):
        f = stack(f, A.grid)
    return _Shifted(A, lam).solve(f)


@dataclass(frozen=True)
class NormEstimate:
    """Resolvent norm: ``lower`` is certified; ``upper`` is a bound when
    ``upper_certified`` and a heuristic otherwise (nan when not computed)."""

    kind: str
    lower: float
    upper: float
    upper_certified: bool

    @property
    def value(self):
        return self.lower


def _sup_norm_stacked(x, nc):
    return float(np.max(np.linalg.norm(x.reshape(-1, nc), axis=1)))


def resolvent_norm(A, lam, norm_kind="l2", probes=100, seed=0, power_iters=200):
    """Operator norm of the resolvent at ``lam``.

    ``l2``: the largest singular value (dense SVD, or power iteration on
    R^H R for large operators). ``sup``: norm induced by the max over points of
    the pointwise Frobenius norm. The certified lower bound is the best of the
    row-aligned extreme vectors and random unimodular probes; the upper bound
    is the maximal block-row sum of 2-norms (exact inequality in the dense path).
    """
    if norm_kind not in ("l2", "sup"):
        raise ValueError("norm_kind must be 'l2' or 'sup'")
    n = A.n_rows
    nc = A.n_components
    if norm_kind == "l2":
        if n <= DENSE_LIMIT:
            m = complex(lam) * np.eye(n) - A.toarray()
            s = np.linalg.svd(m, compute_uv=False)
            if s[-1] <= 1e-14 * s[0]:
                raise ResolventError(f"lambda={lam} lies on the computed spectrum")
            v = 1.0 / s[-1]
            return NormEstimate("l2", v, v, True)
        fac = _Shifted(A, lam)
        rng = np.random.Generator(np.random.Philox(seed))
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        x /= np.linalg.norm(x)
        est = 0.0
        for _ in range(power_iters):
            y = fac.solve(x)
            z = fac.solve(y, adjoint=True)
            new = math.sqrt(np.linalg.norm(z))
            x = z / np.linalg.norm(z)
            if abs(new - est) <= 1e-12 * new:
                est = new
                break
            est = new
        lower = np.linalg.norm(fac.solve(x))
        return NormEstimate("l2", float(lower), float(est), False)

    fac = _Shifted(A, lam)
    rng = np.random.Generator(np.random.Philox(seed))
    npts = n // nc
    if n <= DENSE_LIMIT:
        r = fac.solve(np.eye(n, dtype=complex))
        blocks = r.reshape(npts, nc, npts, nc)
        row_vec_norms = np.linalg.norm(blocks, axis=3)  # |R_{(q,c),p}|_2
        row_sums = row_vec_norms.sum(axis=2)  # (q, c)
        lower = float(np.max(row_sums))
        block_norms = np.linalg.norm(np.swapaxes(blocks, 1, 2), ord=2, axis=(2, 3))
        upper = float(np.max(block_norms.sum(axis=1)))
        upper_cert = True
        sample_rows = None
    else:
        sample_rows = rng.choice(n, size=min(64, n), replace=False)
        lower = 0.0
        for row in sample_rows:
            e = np.zeros(n, dtype=complex)
            e[row] = 1.0
            rr = np.conj(fac.solve(e, adjoint=True))
            lower = max(lower, float(np.sum(np.linalg.norm(rr.reshape(npts, nc), axis=1))))
        upper, upper_cert = math.nan, False
    for _ in range(probes):
        z = rng.standard_normal((npts, nc)) + 1j * rng.standard_normal((npts, nc))
        z /= np.linalg.norm(z, axis=1)[:, None]
        lower = max(lower, _sup_norm_stacked(fac.solve(z.reshape(-1)), nc))
    return NormEstimate("sup", lower, upper, upper_cert)


# ---------------------------------------------------------------------------
# sector scan


@dataclass
class SectorReport:
    K: float
    omega: float
    norm_kind: str
    samples: list
    M_estimate: float
    violations: int

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def geometric_radii(lo_exp=0, hi_exp=4, per_decade=5):
    count = (hi_exp - lo_exp) * per_decade + 1
    return list(np.logspace(lo_exp, hi_exp, count))


def sector_scan(A, K, rays, radii, norm_kind="l2", omega=None, restrict_half_plane=True, strict=False, probes=100, seed=0):
    """Sample |lambda| * ||R_lambda|| at lambda = omega + r e^{i phi}.

    ``omega`` defaults to ``K``. With ``restrict_half_plane`` only samples with
    Re lambda > K are taken. A failed solve is counted as a violation (and
    raised as :class:`SectorialityViolation` when ``strict``).
    """
    omega = K if omega is None else omega
    samples = []
    violations = 0
    for phi in rays:
        for r in radii:
            lam = omega + r * complex(math.cos(phi), math.sin(phi))
            # rays along the boundary line must not slip in through rounding of cos(phi)
            if restrict_half_plane and not lam.real - K > 4 * np.finfo(float).eps * abs(lam):
                continue
            try:
                est = resolvent_norm(A, lam, norm_kind, probes=probes, seed=seed)
            except ResolventError as exc:
                violations += 1
                if strict:
                    raise SectorialityViolation(f"solve failed at lambda={lam}") from exc
                samples.append(
                    {"lambda_re": lam.real, "lambda_im": lam.imag, "phi": phi, "radius": r,
                     "resolvent_norm": math.nan, "upper": math.nan, "product": math.nan, "failed": True}
                )
                continue
            samples.append(
                {
                    "lambda_re": lam.real,
                    "lambda_im": lam.imag,
                    "phi": phi,
                    "radius": r,
                    "resolvent_norm": est.lower,
                    "upper": est.upper,
                    "product": abs(lam) * est.lower,
                    "failed": False,
                }
            )
    products = [s["product"] for s in samples if not s["failed"]]
    m_est = max(products) if products else math.nan
    return SectorReport(float(K), float(omega), norm_kind, samples, float(m_est), violations)


# ---------------------------------------------------------------------------
# semigroup


@dataclass(frozen=True)
class ContourSpec:
    """Contour for e^{tA} = (1/2 pi i) int e^{t lambda} R_lambda d lambda.

    ``sector_boundary``: the two rays omega + r e^{+-i theta}, truncated at
    ``truncation`` (default 50/t), integrated by Gauss-Legendre on panels that
    double in width from ``panel_base`` until the exponential varies by
    ``panel_decay`` per panel. ``circle``: trapezoid rule on |lambda - omega| =
    radius with ``nodes`` points.
    """

    shape: str = "sector_boundary"
    omega: float = 1.0
    theta: float = 3.0 * math.pi / 4.0
    radius: float | None = None
    nodes: int = 16
    panel_base: float = 0.25
    panel_decay: float = 4.0
    truncation: float | None = None

    def __post_init__(self):
        if self.shape not in ("sector_boundary", "circle"):
            raise ValueError("shape must be 'sector_boundary' or 'circle'")
        if self.nodes < 16:
            raise ValueError("at least 16 quadrature nodes are required")
        if self.shape == "sector_boundary" and not math.pi / 2 < self.theta < math.pi:
            raise ValueError("theta must lie in (pi/2, pi)")
        if self.shape == "circle" and not (self.radius and self.radius > 0):
            raise ValueError("circle contour needs a positive radius")

    def doubled(self):
        return ContourSpec(**{**asdict(self), "nodes": 2 * self.nodes})


def _panels(spec, t):
    s_max = spec.truncation if spec.truncation is not None else 50.0 / t
    width_cap = spec.panel_decay / (t * abs(math.cos(spec.theta)))
    edges = [0.0]
    width = spec.panel_base
    while edges[-1] < s_max:
        edges.append(min(edges[-1] + width, s_max))
        width = min(2.0 * width, width_cap)
    return edges


def _check_contour(A, spec):
    if A.n_rows > DENSE_LIMIT:
        return
    eigs = A.eigenvalues()
    if spec.shape == "circle":
        if np.any(np.abs(eigs - spec.omega) >= spec.radius):
            raise ValueError("circle contour does not enclose the spectrum")
        return
    rel = eigs - spec.omega
    inside = (np.abs(rel) < 1e-12) | (np.abs(np.angle(rel)) <= spec.theta)
    if np.any(inside):
        raise ValueError("spectrum is not to the left of the sector contour")


def _contour_sum(A, t, f, spec):
    f = np.asarray(f)
    n = A.n_rows
    real_problem = np.isrealobj(f) and np.isrealobj(A.matrix.data)
    dense = A.toarray() if n <= DENSE_LIMIT else None

    def resolve(lam, rhs):
        if dense is not None:
            return np.linalg.solve(lam * np.eye(n) - dense, rhs)
        return _Shifted(A, lam).solve(rhs)

    if spec.shape == "circle":
        k = np.arange(spec.nodes)
        phis = 2.0 * math.pi * k / spec.nodes
        total = np.zeros(n, dtype=complex)
        for phi in phis:
            z = spec.radius * complex(math.cos(phi), math.sin(phi))
            lam = spec.omega + z
            total += np.exp(t * lam) * z * resolve(lam, f.astype(complex))
        out = total / spec.nodes
        return out.real if real_problem else out

    x, w = np.polynomial.legendre.leggauss(spec.nodes)
    edges = _panels(spec, t)
    up = complex(math.cos(spec.theta), math.sin(spec.theta))
    down = up.conjugate()
    total = np.zeros(n, dtype=complex)
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        for xi, wi in zip(x, w):
            r = a + half * (xi + 1.0)
            lam = spec.omega + r * up
            term = np.exp(t * lam) * up * resolve(lam, f.astype(complex))
            if real_problem:
                total += (half * wi) * 2j * term.imag
            else:
                lam2 = spec.omega + r * down
                term2 = np.exp(t * lam2) * down * resolve(lam2, f.astype(complex))
                total += (half * wi) * (term - term2)
    out = total / (2j * math.pi)
    return out.real if real_problem else out


def semigroup_quadrature(A, t, f, contour=None):
    """Contour quadrature of e^{tA} f and the change under node doubling."""
    if not t > 0:
        raise ValueError("t must be positive")
    spec = contour or ContourSpec()
    if isinstance(f, Field):
        f = stack(f, A.grid)
    _check_contour(A, spec)
    base = _contour_sum(A, t, f, spec)
    fine = _contour_sum(A, t, f, spec.doubled())
    return fine, float(np.linalg.norm(fine - base))


def semigroup_apply(A, t, f, contour=None, rtol=1e-8):
    """e^{tA} f by the resolvent contour integral, with a node-doubling check."""
    value, change = semigroup_quadrature(A, t, f, contour)
    scale = max(np.linalg.norm(value), np.finfo(float).tiny)
    if change > rtol * scale:
        raise QuadratureError(f"node doubling changed the result by {change / scale:.3e} (relative)")
    return value
