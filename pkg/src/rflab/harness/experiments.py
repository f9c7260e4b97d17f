"""Dependence, stability and ball-condition experiments."""
from __future__ import annotations

import dataclasses
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rflab.curvature import Reference, lichnerowicz, linearized_deturck, strong_ellipticity_check
from rflab.errors import ConfigError, SingularMetricError
from rflab.flow import convergence_status, diffeo_flow, evolve, recover_ricci_flow
from rflab.grid import Field, MetricField, check_metric
from rflab.harness.generators import gen_perturbation, random_direction
from rflab.norms import ck_norm
from rflab.spectral import assemble, geometric_radii, sector_scan, top_spectrum


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


class _Report:
    def to_dict(self):
        return dataclasses.asdict(self)

    def write_json(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default))
        return path


# ---------------------------------------------------------------------------
# continuous dependence


@dataclass
class DependenceReport(_Report):
    epsilons: list
    times: list
    ratios: dict
    deturck_ratios: dict
    C_per_epsilon: dict
    C_measured: float
    stability_of_C: float
    deturck_C_measured: float
    survived: dict
    alarms: list = field(default_factory=list)
    k: int = 2


def _flow_pair(g_init, g_ref, control, dts=None):
    det = evolve("deturck", g_init, g_ref, control, dts=dts)
    ricci = recover_ricci_flow(det, diffeo_flow(det, g_ref))
    return det, ricci


def run_dependence(config):
    """Perturbed-versus-base flows at several amplitudes and the norm-ratio table.

    Both flows are Ricci-DeTurck flows against the base initial metric, pulled
    back to Ricci flows; perturbed runs replay the base time steps so the
    snapshots align.
    """
    s = config.dependence
    if not s.epsilons or any(e == 0 for e in s.epsilons):
        raise ConfigError("epsilon list must be nonempty and exclude 0")
    g0 = config.initial_metric()
    holder = config.holder()
    k = config.norms.k
    # the early stop on a stationary flow is disabled so every series runs to tau
    control = dataclasses.replace(
        config.control, t_end=s.tau, snapshot_every=s.snapshot_every, tol=sys.float_info.min
    )
    base_det, base_ricci = _flow_pair(g0, g0, control)
    if base_det.termination == "blowup":
        raise ConfigError("base flow blows up before tau")
    direction = random_direction(g0.grid, s.direction_seed, s.mode_cutoff, holder, k=k + 2)
    times = [float(t) for t in base_det.times]
    ratios, det_ratios, c_eps, survived, alarms = {}, {}, {}, {}, []
    for eps in s.epsilons:
        amp = float(eps)
        for _attempt in range(s.max_retries + 1):
            try:
                g1 = MetricField(g0.grid, g0.values + amp * direction.values)
                det1, ricci1 = _flow_pair(g1, g0, control, dts=base_det.step_dts)
                ok = det1.termination != "blowup" and len(det1.metrics) == len(base_det.metrics)
            except SingularMetricError:
                ok = False
            if ok:
                break
            alarms.append({"epsilon": eps, "amplitude": amp, "event": "blowup before tau"})
            amp *= 0.5
        key = repr(float(eps))
        survived[key] = bool(ok)
        if not ok:
            continue
        denom = ck_norm(Field(g0.grid, g1.values - g0.values), k + 2, holder)
        r_series, d_series = [], []
        for a, b, da, db in zip(ricci1.metrics, base_ricci.metrics, det1.metrics, base_det.metrics):
            r_series.append(ck_norm(Field(g0.grid, a.values - b.values), k, holder) / denom)
            d_series.append(ck_norm(Field(g0.grid, da.values - db.values), k + 2, holder) / denom)
        ratios[key] = r_series
        det_ratios[key] = d_series
        c_eps[key] = max(r_series)
    cs = list(c_eps.values())
    c_meas = max(cs) if cs else math.nan
    stab = (max(cs) / min(cs)) if cs and min(cs) > 0 else math.nan
    det_c = max((max(v) for v in det_ratios.values()), default=math.nan)
    return DependenceReport(
        epsilons=[float(e) for e in s.epsilons],
        times=times,
        ratios=ratios,
        deturck_ratios=det_ratios,
        C_per_epsilon=c_eps,
        C_measured=float(c_meas),
        stability_of_C=float(stab),
        deturck_C_measured=float(det_c),
        survived=survived,
        alarms=alarms,
        k=k,
    )


# ---------------------------------------------------------------------------
# convergence stability


@dataclass
class StabilityReport(_Report):
    samples: list
    fraction_converged: float
    base_decay_rate: float
    spectral_gap: float | None = None


def flat_reference(g):
    """Constant metric equal to the grid mean of ``g``."""
    mean = np.mean(g.values.reshape(-1, g.grid.dim, g.grid.dim), axis=0)
    return MetricField.constant(g.grid, 0.5 * (mean + mean.T))


def flat_laplacian_gap(dim, n, period=1.0):
    """Largest negative eigenvalue of the flat Lichnerowicz matrix on a uniform grid."""
    from rflab.grid import GridSpec

    grid = GridSpec.uniform(dim, n, period)
    flat = MetricField.identity(grid)
    A = assemble(lambda h: lichnerowicz(flat, h), grid, stencil_radius=2)
    spec = top_spectrum(A, n_components_of(dim) + 1)
    return float(spec.values[-1].real)


def n_components_of(dim):
    return dim * (dim + 1) // 2


def run_stability(config, workers=1):
    """Perturb a flat-converging base in random directions and classify each flow."""
    s = config.stability
    g0 = config.initial_metric()
    ref = flat_reference(g0)
    control = dataclasses.replace(config.control, t_end=s.t_end)
    base = evolve("deturck", g0, ref, control)
    base_status = convergence_status(base, s.flat_tol)
    if not base_status.converged_to_flat:
        raise ConfigError(
            f"base flow does not converge to flat (termination {base.termination}, "
            f"final |Rm| {base.diagnostics['rm_sup'][-1]:.3e})"
        )
    holder = config.holder()

    def classify(i):
        seed = config.seed + i
        g1 = gen_perturbation(g0, seed, s.amplitude, s.mode_cutoff, holder)
        traj = evolve("deturck", g1, ref, control)
        st = convergence_status(traj, s.flat_tol)
        return {
            "seed": seed,
            "amplitude": s.amplitude,
            "converged_to_flat": st.converged_to_flat,
            "decay_rate": st.decay_rate if st.converged_to_flat else None,
            "final_rm_sup": float(traj.diagnostics["rm_sup"][-1]),
            "t_converged": st.t_detect,
            "termination": traj.termination,
        }

    # samples are independent; the report keeps seed order regardless of completion order
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(classify, range(s.n_samples)))
    else:
        samples = [classify(i) for i in range(s.n_samples)]
    frac = sum(1 for x in samples if x["converged_to_flat"]) / len(samples) if samples else 1.0
    gap = None
    if s.spectral_resolution:
        gap = flat_laplacian_gap(g0.grid.dim, s.spectral_resolution, min(g0.grid.periods))
    return StabilityReport(samples, frac, base_status.decay_rate, gap)


# ---------------------------------------------------------------------------
# ball conditions


@dataclass
class BallReport(_Report):
    directions: list
    r_metric: float
    r_elliptic: float
    r_perturb: float
    M_estimate: float


def _sobolev_inverse(grid):
    flat = MetricField.identity(grid)
    lap = assemble(lambda h: lichnerowicz(flat, h), grid, stencil_radius=2).toarray()
    return np.linalg.inv(np.eye(lap.shape[0]) - lap)


def _bisect(pred, hi, rel_tol):
    """Largest r in (0, hi] with pred(r), by geometric bisection from a tiny radius."""
    if pred(hi):
        return hi
    lo = hi * 1e-12
    if not pred(lo):
        return 0.0
    while hi / lo > 1.0 + rel_tol:
        mid = math.sqrt(lo * hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def estimate_M(grid, settings):
    flat = MetricField.identity(grid)
    A = assemble(lambda h: lichnerowicz(flat, h), grid, stencil_radius=2)
    rep = sector_scan(
        A,
        settings.K,
        settings.rays,
        geometric_radii(settings.radii_lo_exp, settings.radii_hi_exp, settings.radii_per_decade),
        "l2",
        restrict_half_plane=settings.restrict_half_plane,
    )
    return rep.M_estimate


def ball_radii(g0, direction, r_max, M_estimate, margin=0.5, rel_tol=1e-3, sobolev_inv=None, samples=2000, seed=0):
    """Radii along one direction where the three ball conditions hold.

    (1) g0 + r d positive definite; (2) the sampled symbol quotient exceeds
    ``margin`` times its value at g0; (3) the operator difference, measured as
    the largest singular value of (A_g - A_g0)(I - Lap)^{-1}, stays below
    1/(M + 1). The searches are nested so r_metric >= r_elliptic >= r_perturb.
    """
    grid = g0.grid
    ref = Reference(g0)
    q0 = strong_ellipticity_check(g0, g0, samples, seed)["min_quotient"]
    sob = _sobolev_inverse(grid) if sobolev_inv is None else sobolev_inv
    threshold = 1.0 / (M_estimate + 1.0)

    def metric_at(r):
        return g0.values + r * direction

    def cond1(r):
        try:
            check_metric(metric_at(r))
            return True
        except SingularMetricError:
            return False

    def cond2(r):
        if not cond1(r):
            return False
        g = MetricField(grid, metric_at(r))
        return strong_ellipticity_check(g0, g, samples, seed)["min_quotient"] > margin * q0

    def cond3(r):
        if not cond2(r):
            return False
        g = MetricField(grid, metric_at(r))

        def diff_op(h):
            return linearized_deturck(ref, g, h).values - lichnerowicz(g0, h).values

        try:
            D = assemble(diff_op, grid, stencil_radius=2, check=False).toarray()
        except SingularMetricError:
            return False
        return float(np.linalg.norm(D @ sob, 2)) < threshold

    if not np.any(direction):
        return r_max, r_max, r_max
    r1 = _bisect(cond1, r_max, rel_tol)
    r2 = _bisect(cond2, r1, rel_tol) if r1 > 0 else 0.0
    r3 = _bisect(cond3, r2, rel_tol) if r2 > 0 else 0.0
    return r1, r2, r3


def run_ball_conditions(config, directions=None):
    """Measure the three ball radii around a flat base over seeded directions."""
    s = config.ball
    g0 = config.initial_metric()
    if not np.allclose(g0.values, g0.values.reshape(-1, g0.grid.dim, g0.grid.dim)[0], rtol=0, atol=0):
        raise ConfigError("ball conditions need a flat (constant) base metric")
    M = s.M_estimate if s.M_estimate is not None else estimate_M(g0.grid, config.spectral)
    if directions is None:
        directions = [
            random_direction(g0.grid, config.seed + i, s.mode_cutoff, config.holder()).values
            for i in range(s.n_directions)
        ]
    sob = _sobolev_inverse(g0.grid)
    rows = []
    for i, d in enumerate(directions):
        r1, r2, r3 = ball_radii(
            g0, np.asarray(d), s.r_max, M, s.ellipticity_margin, s.rel_tol, sob, s.ellipticity_samples, config.seed
        )
        rows.append({"index": i, "r_metric": r1, "r_elliptic": r2, "r_perturb": r3})
    return BallReport(
        directions=rows,
        r_metric=min(r["r_metric"] for r in rows),
        r_elliptic=min(r["r_elliptic"] for r in rows),
        r_perturb=min(r["r_perturb"] for r in rows),
        M_estimate=float(M),
    )
