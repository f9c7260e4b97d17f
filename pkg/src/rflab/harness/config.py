"""Experiment configuration: TOML in, validated dataclasses out."""
from __future__ import annotations

import copy
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib
import tomli_w

from rflab.errors import ConfigError
from rflab.flow import RHS_KINDS, StepControl
from rflab.grid import GridSpec, MetricField
from rflab.harness import generators
from rflab.norms import HolderParams

EXPERIMENTS = ("flow", "spectrum", "resolvent", "depend", "stability", "ball")
GENERATOR_KINDS = ("flat", "conformal", "warped", "perturbed")


@dataclass
class SpectralSettings:
    K: float = 1.0
    rays: list = field(default_factory=lambda: [0.0, math.pi / 3, -math.pi / 3, 3 * math.pi / 4, -3 * math.pi / 4])
    radii_lo_exp: int = 0
    radii_hi_exp: int = 4
    radii_per_decade: int = 5
    norm_kind: str = "l2"
    probes: int = 100
    n_eigs: int = 10
    restrict_half_plane: bool = True


@dataclass
class DependenceSettings:
    epsilons: list = field(default_factory=lambda: [1e-2, 1e-3, 1e-4])
    tau: float = 0.5
    direction_seed: int = 1
    mode_cutoff: int = 2
    snapshot_every: int = 10
    max_retries: int = 4


@dataclass
class StabilitySettings:
    n_samples: int = 10
    amplitude: float = 1e-3
    mode_cutoff: int = 2
    flat_tol: float = 1e-6
    t_end: float = 5.0
    spectral_resolution: int = 8


@dataclass
class BallSettings:
    n_directions: int = 5
    r_max: float = 1e6
    ellipticity_margin: float = 0.5
    rel_tol: float = 1e-3
    mode_cutoff: int = 2
    M_estimate: float | None = None
    ellipticity_samples: int = 2000


@dataclass
class NormSettings:
    alpha: float = 0.5
    k: int = 2
    sample_pairs: int = 200_000

    def holder(self, seed=0):
        return HolderParams(alpha=self.alpha, sample_pairs=self.sample_pairs, seed=seed)


@dataclass
class ExperimentConfig:
    experiment: str
    grid: GridSpec
    generator: dict
    control: StepControl
    norms: NormSettings
    spectral: SpectralSettings
    dependence: DependenceSettings
    stability: StabilitySettings
    ball: BallSettings
    seed: int = 0
    output_dir: str = "rflab_out"
    rhs_kind: str = "deturck"
    lie_term_convention: str = "standard"

    def initial_metric(self):
        return build_metric(self.generator, self.grid)

    def holder(self):
        return self.norms.holder(self.seed)

    def to_dict(self):
        d = {
            "experiment": self.experiment,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "rhs_kind": self.rhs_kind,
            "lie_term_convention": self.lie_term_convention,
            "grid": {"resolution": list(self.grid.resolution), "periods": list(self.grid.periods)},
            "generator": copy.deepcopy(self.generator),
            "control": asdict(self.control),
            "norms": asdict(self.norms),
            "spectral": asdict(self.spectral),
            "dependence": asdict(self.dependence),
            "stability": asdict(self.stability),
            "ball": {k: v for k, v in asdict(self.ball).items() if v is not None},
        }
        return d


def build_metric(gen, grid):
    """Instantiate a generator description on ``grid``."""
    kind = gen.get("kind")
    if kind == "flat":
        matrix = gen.get("matrix")
        return MetricField.identity(grid) if matrix is None else MetricField.constant(grid, np.asarray(matrix, float))
    if kind == "conformal":
        return generators.gen_conformal(grid, gen.get("phi_modes", []))
    if kind == "warped":
        return generators.gen_warped_product(grid, gen.get("u_modes", []), gen.get("h_entries"))
    if kind == "perturbed":
        base = build_metric(gen["base"], grid)
        return generators.gen_perturbation(
            base, int(gen.get("seed", 0)), float(gen.get("amplitude", 0.0)), int(gen.get("mode_cutoff", 2))
        )
    raise ConfigError(f"generator kind must be one of {GENERATOR_KINDS}, got {kind!r}")


def _section(cls, data, name):
    data = data or {}
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def _validate_generator(gen, grid):
    if not isinstance(gen, dict) or "kind" not in gen:
        raise ConfigError("[generator] needs a 'kind'")
    kind = gen["kind"]
    if kind not in GENERATOR_KINDS:
        raise ConfigError(f"generator kind must be one of {GENERATOR_KINDS}, got {kind!r}")
    if kind == "perturbed":
        if "base" not in gen:
            raise ConfigError("perturbed generator needs a 'base' table")
        if float(gen.get("amplitude", 0.0)) < 0:
            raise ConfigError("amplitude must be nonnegative")
        if int(gen.get("mode_cutoff", 2)) > min(grid.resolution) // 4:
            raise ConfigError("mode_cutoff exceeds min resolution / 4")
        _validate_generator(gen["base"], grid)
    if kind == "warped" and grid.dim != 3:
        raise ConfigError("warped generator needs a 3-dimensional grid")


def config_from_dict(data):
    data = copy.deepcopy(data)
    known = {
        "experiment", "seed", "output_dir", "rhs_kind", "lie_term_convention", "grid", "generator",
        "control", "norms", "spectral", "dependence", "stability", "ball",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    experiment = data.get("experiment", "flow")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    g = data.get("grid", {})
    try:
        if "resolution" in g:
            grid = GridSpec(tuple(g["resolution"]), tuple(g.get("periods", [1.0] * len(g["resolution"]))))
        else:
            grid = GridSpec.uniform(int(g.get("dim", 2)), int(g.get("n", 16)), float(g.get("period", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [grid]: {exc}") from exc
    convention = data.get("lie_term_convention", "standard")
    control_data = dict(data.get("control", {}))
    control_data.setdefault("lie_term_convention", convention)
    if control_data["lie_term_convention"] != convention:
        raise ConfigError("lie_term_convention differs between top level and [control]")
    rhs_kind = data.get("rhs_kind", "deturck")
    if rhs_kind not in RHS_KINDS:
        raise ConfigError(f"rhs_kind must be one of {RHS_KINDS}")
    gen = data.get("generator", {"kind": "flat"})
    _validate_generator(gen, grid)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    cfg = ExperimentConfig(
        experiment=experiment,
        grid=grid,
        generator=gen,
        control=_section(StepControl, control_data, "control"),
        norms=_section(NormSettings, data.get("norms"), "norms"),
        spectral=_section(SpectralSettings, data.get("spectral"), "spectral"),
        dependence=_section(DependenceSettings, data.get("dependence"), "dependence"),
        stability=_section(StabilitySettings, data.get("stability"), "stability"),
        ball=_section(BallSettings, data.get("ball"), "ball"),
        seed=seed,
        output_dir=str(data.get("output_dir", "rflab_out")),
        rhs_kind=rhs_kind,
        lie_term_convention=convention,
    )
    if any(e == 0 for e in cfg.dependence.epsilons) or not cfg.dependence.epsilons:
        raise ConfigError("dependence epsilons must be a nonempty list of nonzero values")
    if cfg.spectral.norm_kind not in ("l2", "sup"):
        raise ConfigError("spectral.norm_kind must be 'l2' or 'sup'")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


_DEFAULT_SETUPS = {
    "flow": ([32, 32], {"kind": "conformal", "phi_modes": [{"wavevector": [1, 1], "amplitude": 0.1, "phase": -math.pi / 2}]}),
    "depend": ([32, 32], {"kind": "conformal", "phi_modes": [{"wavevector": [1, 1], "amplitude": 0.1, "phase": -math.pi / 2}]}),
    "stability": ([16, 16, 16], {"kind": "warped", "u_modes": [{"wavevector": [1, 0], "amplitude": 0.1, "phase": 0.0}]}),
    "spectrum": ([12, 12], {"kind": "flat"}),
    "resolvent": ([12, 12], {"kind": "flat"}),
    "ball": ([16, 16], {"kind": "flat"}),
}


def default_config_dict(experiment="flow"):
    """Fully populated defaults for one experiment (what ``rflab defaults`` prints)."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    resolution, gen = _DEFAULT_SETUPS[experiment]
    base = {
        "experiment": experiment,
        "grid": {"resolution": list(resolution), "periods": [1.0] * len(resolution)},
        "generator": copy.deepcopy(gen),
    }
    return config_from_dict(base).to_dict()


def dumps_config(data):
    return tomli_w.dumps(data)
