"""Christoffel symbols, curvature, the DeTurck field, and flow right-hand sides.

Index conventions. ``riemann`` is stored as ``R[..., i, a, b, j]`` with
``Rc_ij = g^{ab} R_iabj``; on a round sphere ``R_1221 > 0``. All second
derivatives of the metric go through :func:`rflab.grid.dd`, so the second-order
parts of ``-2 Rc`` and ``L_W g`` cancel exactly on the grid and the
linearization of the DeTurck operator at a flat metric is the 5-point
Laplacian used by :func:`lichnerowicz`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from rflab.errors import GridError
from rflab.grid import (
    Field,
    GridSpec,
    MetricField,
    ScalarField,
    SymTensorField,
    VectorField,
    gradient,
    hessian,
    metric_inverse,
)
from rflab.norms import pointwise_norm

LIE_CONVENTIONS = ("standard", "paper")


def _contract_last_pair(t, flat_ginv):
    """t[..., i, j, a, b] g^{ab} via one batched matmul."""
    d = t.shape[-1]
    lead = t.shape[:-4]
    flat = np.ascontiguousarray(t).reshape(lead + (d * d, d * d))
    return (flat @ flat_ginv).reshape(lead + (d, d))


class Geometry:
    """Lazily evaluated metric derivatives and curvature for one metric array.

    Attribute names follow the index layout after the grid axes:
    ``dg[c,i,j] = d_c g_ij``, ``ddg[c,e,i,j] = d_c d_e g_ij``,
    ``chr1[l,p,q] = Gamma_{l,pq}``, ``chr2[k,p,q] = Gamma^k_pq``,
    ``dchr2[c,k,p,q] = d_c Gamma^k_pq``.
    """

    def __init__(self, values, grid):
        self.g = np.asarray(values, dtype=np.float64)
        self.grid = grid

    @cached_property
    def ginv(self):
        return metric_inverse(self.g)

    @cached_property
    def dg(self):
        return gradient(self.g, self.grid)

    @cached_property
    def ddg(self):
        return hessian(self.g, self.grid)

    @cached_property
    def chr1(self):
        a = np.swapaxes(self.dg, -3, -2)
        return 0.5 * (a + np.swapaxes(a, -1, -2) - self.dg)

    @cached_property
    def chr2(self):
        d = self.grid.dim
        lead = self.g.shape[:-2]
        return (self.ginv @ self.chr1.reshape(lead + (d, d * d))).reshape(lead + (d, d, d))

    @cached_property
    def dginv(self):
        gi = self.ginv[..., None, :, :]
        return -(gi @ self.dg @ gi)

    @cached_property
    def dchr1(self):
        ddg = self.ddg
        return 0.5 * (
            np.einsum("...cplq->...clpq", ddg)
            + np.einsum("...cqlp->...clpq", ddg)
            - ddg
        )

    @cached_property
    def dchr2(self):
        d = self.grid.dim
        lead = self.g.shape[:-2]
        c1 = self.chr1.reshape(lead + (1, d, d * d))
        dc1 = self.dchr1.reshape(lead + (d, d, d * d))
        out = self.dginv @ c1 + self.ginv[..., None, :, :] @ dc1
        return out.reshape(lead + (d,) * 4)

    @cached_property
    def riemann(self):
        ddg = self.ddg
        # R_{liab} in the d_a Gamma^l_{bi} - d_b Gamma^l_{ai} + ... convention
        second = 0.5 * (
            np.einsum("...aibl->...liab", ddg)
            - np.einsum("...albi->...liab", ddg)
            - np.einsum("...bial->...liab", ddg)
            + np.einsum("...blai->...liab", ddg)
        )
        d = self.grid.dim
        lead = self.g.shape[:-2]
        # p[(a,l),(b,i)] = Gamma_{m,al} Gamma^m_{bi}
        a = self.chr1.reshape(lead + (d, d * d))
        b = self.chr2.reshape(lead + (d, d * d))
        p = (np.swapaxes(a, -1, -2) @ b).reshape(lead + (d,) * 4)
        p = np.einsum("...albi->...liab", p)
        quad = -p + np.swapaxes(p, -1, -2)
        return -(second + quad)

    @cached_property
    def ricci(self):
        """Ricci tensor from contracted formulas, without forming Riemann."""
        ginv, ddg = self.ginv, self.ddg
        # -1/2 g^{ab} (d_a d_b g_ij - d_b d_i g_aj - d_a d_j g_bi + d_i d_j g_ab)
        d = self.grid.dim
        lead = self.g.shape[:-2]
        flat_ginv = ginv.reshape(lead + (d * d, 1))
        ddg_flat = ddg.reshape(lead + (d * d, d * d))
        lap = (np.swapaxes(flat_ginv, -1, -2) @ ddg_flat).reshape(lead + (d, d))
        mixed = _contract_last_pair(np.einsum("...biaj->...ijba", ddg), flat_ginv)
        trace = (ddg_flat @ flat_ginv).reshape(lead + (d, d))
        second = -0.5 * (lap - mixed - np.swapaxes(mixed, -1, -2) + trace)
        # g^{ab} Gamma_{m,bi} Gamma^m_{ja} - Gamma_{m,ij} g^{ab} Gamma^m_{ab}
        x = ginv[..., None, :, :] @ self.chr1  # x[m,a,i]
        first = np.swapaxes(np.sum(self.chr2 @ x, axis=-3), -1, -2)
        quad = first - (self.contracted[..., None, :] @ self.chr1.reshape(lead + (d, d * d))).reshape(lead + (d, d))
        rc = second + quad
        return 0.5 * (rc + np.swapaxes(rc, -1, -2))

    @cached_property
    def contracted(self):
        """V^k = g^{pq} Gamma^k_pq."""
        return np.einsum("...kl,...l->...k", self.ginv, self.contracted_lower)

    @cached_property
    def contracted_lower(self):
        return np.einsum("...pq,...lpq->...l", self.ginv, self.chr1)

    @cached_property
    def contracted_gradient(self):
        """dV[c, k] = d_c (g^{pq} Gamma^k_pq) by the chain rule."""
        ginv, ddg, dginv = self.ginv, self.ddg, self.dginv
        d = self.grid.dim
        lead = self.g.shape[:-2]
        flat_ginv = ginv.reshape(lead + (d * d, 1))
        ddg_flat = ddg.reshape(lead + (d * d, d * d))
        s = _contract_last_pair(np.einsum("...cpql->...clpq", ddg), flat_ginv) - 0.5 * (ddg_flat @ flat_ginv).reshape(
            lead + (d, d)
        )
        du = dginv.reshape(lead + (d, d * d)) @ np.swapaxes(self.chr1.reshape(lead + (d, d * d)), -1, -2) + s
        return (dginv @ self.contracted_lower[..., None, :, None])[..., 0] + du @ ginv

    @cached_property
    def scalar(self):
        return np.einsum("...ij,...ij->...", self.ginv, self.ricci)

    @cached_property
    def riemann_norm(self):
        """Pointwise |Rm|_g without forming Rm.

        In dimension at most three the Weyl part vanishes, so
        |Rm|^2 = 4|Rc|^2 - Scal^2 (dim 3), Scal^2 (dim 2) and 0 (dim 1).
        """
        d = self.grid.dim
        if d == 1:
            return np.zeros(self.grid.shape)
        scal = self.scalar
        if d == 2:
            return np.abs(scal)
        rc2 = pointwise_norm(self.ricci, 2, self.ginv) ** 2
        return np.sqrt(np.maximum(4.0 * rc2 - scal**2, 0.0))


class Reference:
    """Christoffel data of a fixed reference metric, reused across RHS calls."""

    def __init__(self, g_ref):
        geo = Geometry(g_ref.values, g_ref.grid)
        self.metric = g_ref
        self.flat = bool(np.all(geo.dg == 0.0))
        dim = g_ref.grid.dim
        if self.flat:
            self.chr2 = np.zeros(g_ref.grid.shape + (dim,) * 3)
            self.dchr2 = np.zeros(g_ref.grid.shape + (dim,) * 4)
        else:
            self.chr2 = geo.chr2
            self.dchr2 = geo.dchr2


def _as_reference(g_ref):
    return g_ref if isinstance(g_ref, Reference) else Reference(g_ref)


def _check_same_grid(*fields):
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise GridError("fields live on different grids")
    return grid


@dataclass(frozen=True)
class CurvatureBundle:
    grid: GridSpec
    riemann: np.ndarray
    ricci: SymTensorField
    scalar: ScalarField

    def riemann_norm(self, g):
        """Pointwise g-norm of the Riemann tensor."""
        return pointwise_norm(self.riemann, 4, metric_inverse(g.values))


def christoffel(g):
    """Christoffel symbols of the second kind, ``Gamma^k_pq``, shape (..., k, p, q)."""
    return Field(g.grid, Geometry(g.values, g.grid).chr2)


def riemann(g):
    geo = Geometry(g.values, g.grid)
    return CurvatureBundle(
        grid=g.grid,
        riemann=geo.riemann,
        ricci=SymTensorField(g.grid, geo.ricci),
        scalar=ScalarField(g.grid, geo.scalar),
    )


def scalar_curvature_warped(u, h):
    """Scalar curvature of e^{2u} dtheta^2 + h from data on the 2-torus factor.

    Evaluates Scal(h) - 2 Lap_h u - 2 |grad u|_h^2 with h-covariant operators.
    """
    grid = _check_same_grid(u, h)
    geo = Geometry(h.values, grid)
    du = gradient(u.values, grid)
    ddu = hessian(u.values, grid)
    hess_u = ddu - np.einsum("...cab,...c->...ab", geo.chr2, du)
    lap = np.einsum("...ab,...ab->...", geo.ginv, hess_u)
    grad_sq = np.einsum("...ab,...a,...b->...", geo.ginv, du, du)
    return ScalarField(grid, geo.scalar - 2.0 * lap - 2.0 * grad_sq)


def _deturck_arrays(geo, ref, with_gradient):
    w = geo.contracted
    if not ref.flat:
        w = w - np.einsum("...pq,...kpq->...k", geo.ginv, ref.chr2)
    if not with_gradient:
        return w, None
    dw = geo.contracted_gradient
    if not ref.flat:
        dw = dw - np.einsum("...cpq,...kpq->...ck", geo.dginv, ref.chr2) - np.einsum(
            "...pq,...ckpq->...ck", geo.ginv, ref.dchr2
        )
    return w, dw


def deturck_vector(g, g_ref, with_gradient=False):
    """DeTurck field W^k = g^{pq} (Gamma^k_pq - Gamma~^k_pq).

    With ``with_gradient=True`` also returns ``dW[c, k] = d_c W^k`` obtained by
    the chain rule from second derivatives of the metrics.
    """
    ref = _as_reference(g_ref)
    _check_same_grid(g, ref.metric)
    w, dw = _deturck_arrays(Geometry(g.values, g.grid), ref, with_gradient)
    if with_gradient:
        return VectorField(g.grid, w), Field(g.grid, dw)
    return VectorField(g.grid, w)


def _lie_arrays(w, dw, g, dg):
    d = g.shape[-1]
    lead = g.shape[:-2]
    transport = (w[..., None, :] @ dg.reshape(lead + (d, d * d))).reshape(lead + (d, d))
    stretch = dw @ g
    return transport + stretch + np.swapaxes(stretch, -1, -2)


def lie_derivative_sym(W, g, dW=None):
    """Lie derivative of the metric along W: W^k d_k g_ij + g_kj d_i W^k + g_ik d_j W^k.

    ``dW`` (``dW[c,k] = d_c W^k``) is differenced on the grid when omitted.
    """
    grid = _check_same_grid(W, g)
    dw = gradient(W.values, grid) if dW is None else np.asarray(dW.values if isinstance(dW, Field) else dW)
    return SymTensorField(grid, _lie_arrays(W.values, dw, g.values, gradient(g.values, grid)))


def _deturck_rhs_arrays(geo, ref, convention):
    w, dw = _deturck_arrays(geo, ref, True)
    lie = _lie_arrays(w, dw, geo.g, geo.dg)
    if convention == "standard":
        return -2.0 * geo.ricci + lie
    if convention == "paper":
        return -2.0 * geo.ricci - 2.0 * lie
    raise ValueError(f"lie_term_convention must be one of {LIE_CONVENTIONS}")


def ricci_deturck_rhs(g, g_ref, convention="standard"):
    """Ricci-DeTurck right-hand side.

    ``standard``: -2 Rc(g) + L_W g, the sign for which pulling back by the flow
    of -W yields a Ricci flow. ``paper``: -2 Rc(g) - 2 L_W g.
    """
    ref = _as_reference(g_ref)
    _check_same_grid(g, ref.metric)
    return SymTensorField(g.grid, _deturck_rhs_arrays(Geometry(g.values, g.grid), ref, convention))


def ricci_rhs(g):
    return SymTensorField(g.grid, -2.0 * Geometry(g.values, g.grid).ricci)


def normalized_rhs(g):
    return SymTensorField(g.grid, -2.0 * Geometry(g.values, g.grid).ricci - 4.0 * g.values)


def _lichnerowicz_arrays(g_ref, h, grid, geo=None):
    geo = geo or Geometry(g_ref, grid)
    ginv = geo.ginv
    dh = gradient(h, grid)
    ddh = hessian(h, grid)
    rough = np.einsum("...ab,...abij->...ij", ginv, ddh)
    if not np.all(geo.dg == 0.0):
        gam = geo.chr2
        dgam = geo.dchr2
        nh = dh - np.einsum("...pbi,...pj->...bij", gam, h) - np.einsum("...pbj,...ip->...bij", gam, h)
        # g^{ab} d_a (nabla_b h)_ij minus the pure second-derivative part
        t = (
            -np.einsum("...apbi,...pj->...abij", dgam, h)
            - np.einsum("...pbi,...apj->...abij", gam, dh)
            - np.einsum("...apbj,...ip->...abij", dgam, h)
            - np.einsum("...pbj,...aip->...abij", gam, dh)
            - np.einsum("...pab,...pij->...abij", gam, nh)
            - np.einsum("...pai,...bpj->...abij", gam, nh)
            - np.einsum("...paj,...bip->...abij", gam, nh)
        )
        rough = rough + np.einsum("...ab,...abij->...ij", ginv, t)
        h_up = np.einsum("...ac,...bd,...cd->...ab", ginv, ginv, h)
        h_mixed = np.einsum("...ab,...bj->...aj", ginv, h)
        rc = geo.ricci
        curv = (
            2.0 * np.einsum("...iabj,...ab->...ij", geo.riemann, h_up)
            - np.einsum("...ia,...aj->...ij", rc, h_mixed)
            - np.einsum("...aj,...ai->...ij", rc, h_mixed)
        )
        rough = rough + curv
    return rough


def lichnerowicz(g_ref, h):
    """Lichnerowicz Laplacian of ``h`` with respect to ``g_ref``.

    g^{ab} nabla_a nabla_b h_ij + 2 R_iabj h^{ab} - Rc_ia h^a_j - Rc_aj h^a_i
    """
    grid = _check_same_grid(g_ref, h)
    return SymTensorField(grid, _lichnerowicz_arrays(g_ref.values, h.values, grid))


def linearized_deturck(g_ref, g, h, eps=1e-5, convention="standard"):
    """Central-difference directional derivative of the DeTurck operator at ``g``."""
    ref = _as_reference(g_ref)
    _check_same_grid(g, h, ref.metric)
    plus = MetricField(g.grid, g.values + eps * h.values)
    minus = MetricField(g.grid, g.values - eps * h.values)
    fp = _deturck_rhs_arrays(Geometry(plus.values, g.grid), ref, convention)
    fm = _deturck_rhs_arrays(Geometry(minus.values, g.grid), ref, convention)
    return SymTensorField(g.grid, (fp - fm) / (2.0 * eps))


def strong_ellipticity_check(g_ref, g, sample_count=2000, seed=0, margin=0.0):
    """Sample the principal-symbol quotient of the linearized DeTurck operator.

    The principal symbol is g^{ab} xi_a xi_b |eta|^2, so the quotient against
    |xi|^2 |eta|^2 is evaluated at random points, unit covectors and unit
    symmetric tensors. ``elliptic`` is ``min_quotient > margin``.
    """
    _check_same_grid(g_ref, g)
    grid = g.grid
    dim = grid.dim
    rng = np.random.Generator(np.random.Philox(seed))
    ginv = metric_inverse(g.values).reshape(-1, dim, dim)
    idx = rng.integers(0, grid.n_points, size=sample_count)
    xi = rng.standard_normal((sample_count, dim))
    xi /= np.linalg.norm(xi, axis=1)[:, None]
    eta = rng.standard_normal((sample_count, dim, dim))
    eta = 0.5 * (eta + np.swapaxes(eta, 1, 2))
    eta /= np.linalg.norm(eta.reshape(sample_count, -1), axis=1)[:, None, None]
    eta_sq = np.einsum("sij,sij->s", eta, eta)
    xi_sq = np.einsum("sa,sa->s", xi, xi)
    symbol = np.einsum("sab,sa,sb->s", ginv[idx], xi, xi) * eta_sq
    q = symbol / (xi_sq * eta_sq)
    min_q = float(q.min())
    return {"min_quotient": min_q, "elliptic": bool(min_q > margin)}
