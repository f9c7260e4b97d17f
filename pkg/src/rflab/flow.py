"""Method-of-lines integration of Ricci, Ricci-DeTurck and normalized flows,
plus gauge recovery by the DeTurck diffeomorphism ODE and pullback."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rflab.curvature import LIE_CONVENTIONS, Geometry, Reference, _deturck_arrays, _deturck_rhs_arrays
from rflab.errors import GaugeFailure, PullbackError, SingularMetricError, StiffFailure
from rflab.grid import (
    DiffeoMap,
    MetricField,
    SymTensorField,
    check_metric,
    interpolate_values,
    save_field,
)
from rflab.norms import pointwise_norm

RHS_KINDS = ("ricci", "deturck", "normalized")
TERMINATIONS = ("reached_t_end", "blowup", "converged")
DIAGNOSTIC_COLUMNS = ("t", "dt", "rm_sup", "rc_sup", "dtg_sup", "min_eig")
CONVERGENCE_CONFIRMATIONS = 3
# |lambda dt| bound of classical RK4 on the negative real axis
RK4_REAL_STABILITY = 2.78
# largest symbol magnitude of the 5-point second difference, times h^2
D2_SYMBOL_MAX = 16.0 / 3.0


@dataclass(frozen=True)
class StepControl:
    dt_init: float = 1e-3
    dt_min: float = 1e-10
    safety: float = 0.9
    curvature_cap: float = 1e6
    eig_floor: float = 1e-8
    t_end: float = 1.0
    snapshot_every: int = 50
    tol: float = 1e-9
    lie_term_convention: str = "standard"

    def __post_init__(self):
        for name in ("dt_init", "dt_min", "curvature_cap", "eig_floor", "t_end", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.dt_min < self.dt_init:
            raise ValueError("dt_min must be smaller than dt_init")
        if not 0.0 < self.safety < 1.0:
            raise ValueError("safety must lie in (0, 1)")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be at least 1")
        if self.lie_term_convention not in LIE_CONVENTIONS:
            raise ValueError(f"lie_term_convention must be one of {LIE_CONVENTIONS}")


@dataclass
class FlowTrajectory:
    """Snapshots and per-step diagnostics of one flow run.

    ``diagnostics`` maps each name in :data:`DIAGNOSTIC_COLUMNS` to an array
    with one entry per visited state (the last row has ``dt = nan``).
    ``step_dts`` lists the accepted steps so a run can be replayed on the same
    time grid.
    """

    grid: object
    rhs_kind: str
    times: np.ndarray
    metrics: list
    diagnostics: dict
    termination: str
    step_dts: np.ndarray
    g_ref: MetricField | None = None
    convention: str = "standard"
    residuals: dict | None = field(default=None)

    def __post_init__(self):
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")

    @property
    def final(self):
        return self.metrics[-1]

    @property
    def final_time(self):
        return float(self.times[-1])

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DIAGNOSTIC_COLUMNS)
            cols = [self.diagnostics[c] for c in DIAGNOSTIC_COLUMNS]
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])
        return path

    def write_snapshots(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, g in enumerate(self.metrics):
            p = directory / f"snap_{i}.rfb"
            save_field(g, p)
            paths.append(p)
        return paths


@dataclass
class GaugeTrajectory:
    grid: object
    times: np.ndarray
    maps: list


def _make_rhs(kind, g_ref, convention):
    if kind == "ricci":
        return lambda geo: -2.0 * geo.ricci
    if kind == "normalized":
        return lambda geo: -2.0 * geo.ricci - 4.0 * geo.g
    ref = Reference(g_ref)
    return lambda geo: _deturck_rhs_arrays(geo, ref, convention)


def _stable_dt(control, grid, geo, rm_sup, kind):
    h2 = min(grid.spacing) ** 2
    lam = float(np.max(np.linalg.eigvalsh(geo.ginv)[..., -1]))
    c_metric = grid.dim * D2_SYMBOL_MAX * lam / RK4_REAL_STABILITY
    reaction = rm_sup + (4.0 if kind == "normalized" else 0.0)
    return control.safety * h2 / (c_metric + reaction * h2)


def evolve(rhs_kind, g0, g_ref=None, control=None, dts=None):
    """Integrate a flow with classical RK4.

    The step is ``safety * h^2 / (c + |Rm| h^2)`` with ``c`` from the RK4
    stability interval and the largest stencil eigenvalue scaled by the
    inverse metric, capped by ``dt_init``. Passing ``dts`` replays a fixed
    sequence of steps instead and the run ends when they are used up.
    """
    control = control or StepControl()
    if rhs_kind not in RHS_KINDS:
        raise ValueError(f"rhs_kind must be one of {RHS_KINDS}")
    if (rhs_kind == "deturck") != (g_ref is not None):
        raise ValueError("g_ref is required exactly when rhs_kind is 'deturck'")
    if g_ref is not None and g_ref.grid != g0.grid:
        raise ValueError("g0 and g_ref live on different grids")
    grid = g0.grid
    rhs = _make_rhs(rhs_kind, g_ref, control.lie_term_convention)
    t_end = control.t_end
    replay = None if dts is None else np.asarray(dts, dtype=np.float64)

    g = np.array(g0.values)
    t = 0.0
    step = 0
    times, metrics = [0.0], [g0]
    rows = {c: [] for c in DIAGNOSTIC_COLUMNS}
    taken = []
    confirmations = 0
    termination = None

    def evaluate(vals):
        geo = Geometry(vals, grid)
        return rhs(geo), geo

    while termination is None:
        try:
            k1, geo = evaluate(g)
            ginv = geo.ginv
            min_eig = float(np.min(np.linalg.eigvalsh(g)[..., 0]))
        except SingularMetricError:
            termination = "blowup"
            break
        rm_sup = float(np.max(geo.riemann_norm))
        rc_sup = float(np.max(pointwise_norm(geo.ricci, 2, ginv)))
        dtg_sup = float(np.max(pointwise_norm(k1, 2, ginv)))
        for c, v in zip(DIAGNOSTIC_COLUMNS, (t, math.nan, rm_sup, rc_sup, dtg_sup, min_eig)):
            rows[c].append(v)

        if not (rm_sup <= control.curvature_cap) or min_eig < control.eig_floor:
            termination = "blowup"
            break
        if step % control.snapshot_every == 0 and replay is None:
            confirmations = confirmations + 1 if dtg_sup < control.tol else 0
            if confirmations >= CONVERGENCE_CONFIRMATIONS:
                termination = "converged"
                break
        remaining = t_end - t
        if replay is not None:
            if step >= len(replay):
                termination = "reached_t_end"
                break
            dt = float(replay[step])
        else:
            if remaining <= 1e-14 * max(1.0, t_end):
                termination = "reached_t_end"
                break
            dt = min(_stable_dt(control, grid, geo, rm_sup, rhs_kind), control.dt_init)
            if dt < control.dt_min:
                raise StiffFailure(f"time step {dt:.3e} fell below dt_min at t={t:.6g}")
            if remaining < 1.0001 * dt:
                dt = remaining
        try:
            k2, _ = evaluate(g + 0.5 * dt * k1)
            k3, _ = evaluate(g + 0.5 * dt * k2)
            k4, _ = evaluate(g + dt * k3)
        except SingularMetricError:
            termination = "blowup"
            break
        g = g + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        g = 0.5 * (g + np.swapaxes(g, -1, -2))
        rows["dt"][-1] = dt
        taken.append(dt)
        t = t + dt
        step += 1
        if step % control.snapshot_every == 0:
            try:
                metrics.append(MetricField(grid, g))
            except SingularMetricError:
                termination = "blowup"
                break
            times.append(t)

    if times[-1] != t and termination != "blowup":
        metrics.append(MetricField(grid, g))
        times.append(t)
    return FlowTrajectory(
        grid=grid,
        rhs_kind=rhs_kind,
        times=np.asarray(times),
        metrics=metrics,
        diagnostics={c: np.asarray(v, dtype=np.float64) for c, v in rows.items()},
        termination=termination,
        step_dts=np.asarray(taken),
        g_ref=g_ref,
        convention=control.lie_term_convention,
    )


# ---------------------------------------------------------------------------
# gauge recovery


def _lagrange_in_time(times, values, t):
    """Cubic (or lower, with fewer nodes) Lagrange interpolation through the nearest snapshots."""
    n = len(times)
    if n == 1:
        return values[0]
    k = int(np.searchsorted(times, t, side="right")) - 1
    k = min(max(k, 0), n - 2)
    lo = min(max(k - 1, 0), max(n - 4, 0))
    idx = range(lo, min(lo + 4, n))
    out = 0.0
    for i in idx:
        w = 1.0
        for j in idx:
            if j != i:
                w *= (t - times[j]) / (times[i] - times[j])
        out = out + w * values[i]
    return out


def _check_orientation(u, grid, t):
    det = DiffeoMap(grid, u).jacobian_determinant()
    if not np.all(det > 0):
        raise GaugeFailure(f"diffeomorphism Jacobian degenerate at t={t:.6g} (min det {det.min():.3e})")


def integrate_displacement(grid, times, w_snapshots, u0=None, substeps=1, reverse=False):
    """RK4 for u' = -W(t, x + u(x)) across the given snapshot times.

    ``w_snapshots`` holds W at each time. With ``reverse=True`` the ODE is
    integrated backwards from the last time to the first.
    """
    times = np.asarray(times, dtype=np.float64)
    nodes = grid.points()
    u = np.zeros(grid.shape + (grid.dim,)) if u0 is None else np.array(u0, dtype=np.float64)

    def velocity(t, disp):
        w = _lagrange_in_time(times, w_snapshots, t)
        pts = nodes + disp.reshape(-1, grid.dim)
        return -interpolate_values(w, grid, pts).reshape(disp.shape)

    order = range(len(times) - 1)
    if reverse:
        order = reversed(order)
    out = [u]
    for k in order:
        a, b = (times[k], times[k + 1]) if not reverse else (times[k + 1], times[k])
        h = (b - a) / substeps
        for s in range(substeps):
            t0 = a + s * h
            k1 = velocity(t0, u)
            k2 = velocity(t0 + 0.5 * h, u + 0.5 * h * k1)
            k3 = velocity(t0 + 0.5 * h, u + 0.5 * h * k2)
            k4 = velocity(t0 + h, u + h * k3)
            u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_orientation(u, grid, b)
        out.append(u)
    return out


def diffeo_flow(deturck_traj, g_ref=None, control=None, substeps=1):
    """Solve the DeTurck diffeomorphism ODE dF/dt = -W(t) o F with F(0) = Id.

    W is evaluated at the stored snapshots, interpolated in time by cubic
    Lagrange polynomials and in space by :func:`rflab.grid.interpolate_values`.
    """
    if deturck_traj.rhs_kind != "deturck":
        raise ValueError("diffeo_flow needs a Ricci-DeTurck trajectory")
    g_ref = g_ref if g_ref is not None else deturck_traj.g_ref
    if deturck_traj.g_ref is not None and g_ref is not deturck_traj.g_ref:
        if not np.array_equal(g_ref.values, deturck_traj.g_ref.values):
            raise ValueError("g_ref differs from the trajectory's reference metric")
    grid = deturck_traj.grid
    ref = Reference(g_ref)
    ws = [_deturck_arrays(Geometry(g.values, grid), ref, False)[0] for g in deturck_traj.metrics]
    us = integrate_displacement(grid, deturck_traj.times, ws, substeps=substeps)
    return GaugeTrajectory(grid=grid, times=np.array(deturck_traj.times), maps=[DiffeoMap(grid, u) for u in us])


def pullback_tensor(values, F):
    """(F^* T)_ab(x) = T_ij(F(x)) J_ia J_jb for a raw symmetric-tensor array."""
    grid = F.grid
    at_image = interpolate_values(values, grid, F.image_points()).reshape(values.shape)
    jac = F.jacobian()
    out = np.swapaxes(jac, -1, -2) @ at_image @ jac
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def pullback_metric(g_hat, F):
    if g_hat.grid != F.grid:
        raise ValueError("metric and map live on different grids")
    out = pullback_tensor(g_hat.values, F)
    try:
        check_metric(out)
    except SingularMetricError as exc:
        raise PullbackError(f"pulled-back metric is not positive definite: {exc}") from exc
    return MetricField(F.grid, out)


def transported_rate(g_hat, g_hat_dot, W, F):
    """F^*(d_t g_hat - L_W g_hat): the time derivative of F^* g_hat when dF/dt = -W o F."""
    from rflab.curvature import lie_derivative_sym

    lie = lie_derivative_sym(W, g_hat).values
    return SymTensorField(F.grid, pullback_tensor(np.asarray(g_hat_dot) - lie, F))


def ricci_flow_residual(traj):
    """sup_x |d_t g + 2 Rc(g)|_g at interior snapshots, d_t by 3-point differences."""
    times = np.asarray(traj.times)
    if len(times) < 3:
        raise ValueError("need at least three snapshots for a centered time derivative")
    res_t, res = [], []
    for k in range(1, len(times) - 1):
        h1 = times[k] - times[k - 1]
        h2 = times[k + 1] - times[k]
        gm, g0, gp = (traj.metrics[i].values for i in (k - 1, k, k + 1))
        dgdt = (-h2 / (h1 * (h1 + h2))) * gm + ((h2 - h1) / (h1 * h2)) * g0 + (h1 / (h2 * (h1 + h2))) * gp
        geo = Geometry(g0, traj.grid)
        r = dgdt + 2.0 * geo.ricci
        res_t.append(times[k])
        res.append(float(np.max(pointwise_norm(r, 2, geo.ginv))))
    return np.asarray(res_t), np.asarray(res)


def recover_ricci_flow(deturck_traj, gauge_traj):
    """Pull every DeTurck snapshot back by the matching diffeomorphism."""
    if len(gauge_traj.maps) != len(deturck_traj.metrics) or not np.array_equal(
        gauge_traj.times, deturck_traj.times
    ):
        raise ValueError("trajectories are not aligned")
    metrics = [pullback_metric(g, F) for g, F in zip(deturck_traj.metrics, gauge_traj.maps)]
    traj = FlowTrajectory(
        grid=deturck_traj.grid,
        rhs_kind="ricci",
        times=np.array(deturck_traj.times),
        metrics=metrics,
        diagnostics=deturck_traj.diagnostics,
        termination=deturck_traj.termination,
        step_dts=deturck_traj.step_dts,
    )
    if len(metrics) >= 3:
        t, r = ricci_flow_residual(traj)
        traj.residuals = {"t": t, "residual": r}
    return traj


# ---------------------------------------------------------------------------
# convergence


@dataclass(frozen=True)
class ConvergenceStatus:
    converged_to_flat: bool
    decay_rate: float
    t_detect: float
    rate_defined: bool


FLAT_CURVATURE = 1e-12


def convergence_status(traj, tol=1e-6):
    """Flatness verdict and exponential decay rate of sup |Rm| over the final decade.

    The rate is minus the least-squares slope of log |Rm| against time, fitted
    on the trailing steps where |Rm| lies within a factor of ten of its final
    value.
    """
    t = np.asarray(traj.diagnostics["t"])
    rm = np.asarray(traj.diagnostics["rm_sup"])
    if len(rm) == 0:
        raise ValueError("trajectory has no diagnostics")
    if traj.termination == "blowup":
        return ConvergenceStatus(False, math.nan, float(t[-1]), False)
    if np.max(rm) < FLAT_CURVATURE:
        return ConvergenceStatus(True, 0.0, float(t[0]), False)
    converged = bool(rm[-1] < tol)
    below = np.nonzero(rm < tol)[0]
    t_detect = float(t[below[0]]) if converged and len(below) else float(t[-1])
    floor = max(rm[-1], FLAT_CURVATURE)
    start = len(rm) - 1
    while start > 0 and rm[start - 1] <= 10.0 * floor:
        start -= 1
    tail = slice(start, len(rm))
    if len(rm[tail]) < 3:
        raise ValueError("too few samples in the final decade to fit a decay rate")
    slope = np.polyfit(t[tail], np.log(rm[tail]), 1)[0]
    return ConvergenceStatus(converged, float(-slope), t_detect, True)


def flat_metric(grid, matrix=None):
    """Constant metric helper (identity when ``matrix`` is None)."""
    if matrix is None:
        return MetricField.identity(grid)
    return MetricField.constant(grid, matrix)


__all__ = [
    "StepControl",
    "FlowTrajectory",
    "GaugeTrajectory",
    "ConvergenceStatus",
    "evolve",
    "diffeo_flow",
    "integrate_displacement",
    "pullback_metric",
    "pullback_tensor",
    "transported_rate",
    "recover_ricci_flow",
    "ricci_flow_residual",
    "convergence_status",
]
