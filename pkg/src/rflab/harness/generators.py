"""Initial-data families: conformal, warped-product and random band-limited perturbations."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from rflab.errors import ConfigError, SingularMetricError
from rflab.grid import GridSpec, MetricField, SymTensorField, check_metric
from rflab.norms import HolderParams, ck_norm


@dataclass(frozen=True)
class Mode:
    """One term ``amplitude * cos(2 pi k.x / L + phase)``."""

    wavevector: tuple
    amplitude: float
    phase: float = 0.0

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(tuple(int(k) for k in d["wavevector"]), float(d["amplitude"]), float(d.get("phase", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid mode description {d!r}") from exc


def _as_modes(modes):
    return [m if isinstance(m, Mode) else Mode.from_dict(m) for m in modes]


def anti_alias_cutoff(grid):
    return min(grid.resolution) // 4


def mode_sum(modes, coords, periods):
    """Evaluate a trigonometric sum on coordinate arrays ``coords`` (one per axis)."""
    out = np.zeros(np.shape(coords[0]))
    for m in _as_modes(modes):
        if len(m.wavevector) != len(coords):
            raise ConfigError(f"wavevector {m.wavevector} has the wrong length for {len(coords)} axes")
        arg = sum(2.0 * math.pi * k * x / L for k, x, L in zip(m.wavevector, coords, periods))
        out = out + m.amplitude * np.cos(arg + m.phase)
    return out


def _check_cutoff(modes, resolution):
    limit = min(resolution) // 4
    for m in modes:
        if max((abs(k) for k in m.wavevector), default=0) > limit:
            raise ConfigError(f"wavevector {m.wavevector} exceeds the anti-aliasing cutoff {limit}")


def gen_conformal(grid, phi_modes):
    """g = exp(2 phi) delta with phi a trigonometric sum."""
    modes = _as_modes(phi_modes)
    _check_cutoff(modes, grid.resolution)
    phi = mode_sum(modes, grid.mesh(), grid.periods)
    return MetricField(grid, np.exp(2.0 * phi)[..., None, None] * np.eye(grid.dim))


def gen_warped_product(grid3, u_modes, h=None):
    """exp(2u(y, z)) dtheta^2 + h on T^3, theta being axis 0 and h a constant 2x2 SPD matrix."""
    if grid3.dim != 3:
        raise ConfigError("warped products live on a 3-dimensional grid")
    h = np.eye(2) if h is None else np.asarray(h, dtype=np.float64)
    if h.shape != (2, 2) or not np.allclose(h, h.T, rtol=0, atol=0):
        raise ConfigError("h must be a symmetric 2x2 matrix")
    if np.linalg.eigvalsh(h)[0] <= 0:
        raise ConfigError("h must be positive definite")
    modes = _as_modes(u_modes)
    _check_cutoff(modes, grid3.resolution[1:])
    _, y, z = grid3.mesh()
    u = mode_sum(modes, (y, z), grid3.periods[1:])
    g = np.zeros(grid3.shape + (3, 3))
    g[..., 0, 0] = np.exp(2.0 * u)
    g[..., 1:, 1:] = h
    return MetricField(grid3, g)


def warped_factor(grid3, u_modes):
    """The T^2 grid and the function u of a warped product, for curvature cross-checks."""
    grid2 = GridSpec(grid3.resolution[1:], grid3.periods[1:])
    return grid2, mode_sum(_as_modes(u_modes), grid2.mesh(), grid2.periods)


def random_direction(grid, seed, mode_cutoff, holder=None, k=4):
    """Random band-limited symmetric tensor normalized to unit discrete h^{k,alpha} norm."""
    if mode_cutoff < 1:
        raise ConfigError("mode_cutoff must be at least 1")
    if mode_cutoff > anti_alias_cutoff(grid):
        raise ConfigError(f"mode_cutoff {mode_cutoff} exceeds min resolution / 4")
    rng = np.random.Generator(np.random.Philox(seed))
    coords = grid.mesh()
    waves = list(itertools.product(range(-mode_cutoff, mode_cutoff + 1), repeat=grid.dim))
    dim = grid.dim
    t = np.zeros(grid.shape + (dim, dim))
    for i in range(dim):
        for j in range(i, dim):
            comp = np.zeros(grid.shape)
            coef = rng.standard_normal((len(waves), 2))
            for (a, b), kvec in zip(coef, waves):
                arg = sum(2.0 * math.pi * kk * x / L for kk, x, L in zip(kvec, coords, grid.periods))
                comp += a * np.cos(arg) + b * np.sin(arg)
            t[..., i, j] = comp
            t[..., j, i] = comp
    field = SymTensorField(grid, t)
    norm = ck_norm(field, k, holder or HolderParams())
    return SymTensorField(grid, t / norm)


def gen_perturbation(base, seed, amplitude, mode_cutoff, holder=None):
    """base + amplitude * (unit h^{4,alpha} random band-limited symmetric tensor)."""
    if amplitude < 0:
        raise ConfigError("amplitude must be nonnegative")
    if amplitude == 0:
        return base
    d = random_direction(base.grid, seed, mode_cutoff, holder)
    values = base.values + amplitude * d.values
    try:
        check_metric(values)
    except SingularMetricError as exc:
        raise SingularMetricError(f"perturbation of amplitude {amplitude} breaks positive definiteness") from exc
    return MetricField(base.grid, values)
