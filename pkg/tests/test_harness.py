import json
import math

import numpy as np
import pytest

from oracles import stencil_symbol
from rflab.errors import ConfigError, SingularMetricError
from rflab.grid import Field, GridSpec, MetricField
from rflab.harness import (
    config_from_dict,
    default_config_dict,
    gen_conformal,
    gen_perturbation,
    gen_warped_product,
    load_config,
    random_direction,
    run_ball_conditions,
    run_dependence,
    run_stability,
    warped_factor,
)
from rflab.harness.config import EXPERIMENTS, dumps_config
from rflab.harness.experiments import ball_radii, flat_reference
from rflab.norms import HolderParams, ck_norm


class TestGenerators:
    def test_conformal_values(self):
        grid = GridSpec.uniform(2, 8)
        g = gen_conformal(grid, [{"wavevector": [1, 0], "amplitude": 0.1}])
        x = grid.mesh()[0]
        assert np.allclose(g.values[..., 0, 0], np.exp(0.2 * np.cos(2 * np.pi * x)), rtol=1e-15, atol=0)
        assert np.all(g.values[..., 0, 1] == 0)

    def test_aliasing_cutoff(self):
        with pytest.raises(ConfigError):
            gen_conformal(GridSpec.uniform(2, 8), [{"wavevector": [3, 0], "amplitude": 0.1}])

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            gen_conformal(GridSpec.uniform(2, 8), [{"amplitude": 0.1}])

    def test_warped_structure(self):
        grid = GridSpec.uniform(3, 8)
        modes = [{"wavevector": [1, 1], "amplitude": 0.2, "phase": 0.3}]
        g = gen_warped_product(grid, modes, [[2.0, 0.5], [0.5, 1.0]])
        _, u = warped_factor(grid, modes)
        assert np.allclose(g.values[..., 0, 0], np.exp(2 * u)[None], rtol=1e-15, atol=0)
        assert np.all(g.values[..., 1:, 1:] == np.array([[2.0, 0.5], [0.5, 1.0]]))
        assert np.all(g.values[..., 0, 1:] == 0)

    @pytest.mark.parametrize("h", [[[1.0, 0.0], [0.0, -1.0]], [[1.0, 0.2], [0.1, 1.0]], [[1.0]]])
    def test_warped_rejects_bad_fibre(self, h):
        with pytest.raises(ConfigError):
            gen_warped_product(GridSpec.uniform(3, 8), [], h)

    def test_warped_needs_three_axes(self):
        with pytest.raises(ConfigError):
            gen_warped_product(GridSpec.uniform(2, 8), [])

    def test_random_direction_unit_norm_and_deterministic(self):
        grid = GridSpec.uniform(2, 8)
        a = random_direction(grid, 7, 2)
        b = random_direction(grid, 7, 2)
        assert np.array_equal(a.values, b.values)
        assert ck_norm(a, 4, HolderParams()) == pytest.approx(1.0, rel=1e-12)
        assert not np.array_equal(a.values, random_direction(grid, 8, 2).values)

    @pytest.mark.parametrize("cutoff", [0, 3])
    def test_random_direction_cutoff(self, cutoff):
        with pytest.raises(ConfigError):
            random_direction(GridSpec.uniform(2, 8), 0, cutoff)

    def test_perturbation(self):
        base = MetricField.identity(GridSpec.uniform(2, 8))
        assert gen_perturbation(base, 0, 0.0, 2) is base
        g = gen_perturbation(base, 3, 0.5, 2)
        delta = g.values - base.values
        assert ck_norm(Field(g.grid, delta), 4, HolderParams()) == pytest.approx(0.5, rel=1e-10)
        with pytest.raises(ConfigError):
            gen_perturbation(base, 0, -1.0, 2)
        with pytest.raises(SingularMetricError):
            gen_perturbation(base, 0, 1e6, 2)


class TestConfig:
    @pytest.mark.parametrize("experiment", EXPERIMENTS)
    def test_defaults_round_trip(self, experiment, tmp_path):
        d = default_config_dict(experiment)
        path = tmp_path / "c.toml"
        path.write_text(dumps_config(d))
        cfg = load_config(path)
        assert cfg.to_dict() == d
        assert cfg.experiment == experiment
        cfg.initial_metric()

    @pytest.mark.parametrize(
        "patch",
        [
            {"bogus": 1},
            {"experiment": "nope"},
            {"seed": -1},
            {"rhs_kind": "yamabe"},
            {"grid": {"resolution": [4, 4]}},
            {"control": {"safety": 2.0}},
            {"control": {"unknown": 1}},
            {"dependence": {"epsilons": [0.0, 1e-3]}},
            {"dependence": {"epsilons": []}},
            {"spectral": {"norm_kind": "h1"}},
            {"generator": {"kind": "swirl"}},
            {"generator": {}},
            {"generator": {"kind": "warped"}},
            {"generator": {"kind": "perturbed"}},
            {"generator": {"kind": "perturbed", "base": {"kind": "flat"}, "amplitude": -1}},
            {"generator": {"kind": "perturbed", "base": {"kind": "flat"}, "mode_cutoff": 9}},
            {"lie_term_convention": "paper", "control": {"lie_term_convention": "standard"}},
        ],
    )
    def test_rejections(self, patch):
        d = default_config_dict("flow")
        d.update(patch)
        with pytest.raises(ConfigError):
            config_from_dict(d)

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")
        (tmp_path / "bad.toml").write_text("grid = [")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.toml")

    def test_minimal_grid_shorthand(self):
        cfg = config_from_dict({"grid": {"dim": 3, "n": 8}})
        assert cfg.grid == GridSpec.uniform(3, 8)
        assert cfg.initial_metric().values.shape == (8, 8, 8, 3, 3)

    def test_perturbed_generator(self):
        d = {"grid": {"dim": 2, "n": 8}, "generator": {"kind": "perturbed", "base": {"kind": "flat"}, "amplitude": 0.1, "seed": 4}}
        g = config_from_dict(d).initial_metric()
        assert np.array_equal(g.values, gen_perturbation(MetricField.identity(g.grid), 4, 0.1, 2).values)


def small_dependence(**overrides):
    d = default_config_dict("depend")
    d["grid"] = {"resolution": [16, 16], "periods": [1.0, 1.0]}
    d["dependence"].update({"tau": 0.02, "epsilons": [1e-3, 1e-4], "snapshot_every": 5, **overrides})
    return config_from_dict(d)


class TestDependence:
    def test_report(self, tmp_path):
        rep = run_dependence(small_dependence())
        assert set(rep.ratios) == {"0.001", "0.0001"}
        assert all(rep.survived.values()) and not rep.alarms
        assert rep.times[0] == 0.0 and rep.times[-1] == pytest.approx(0.02)
        for series in rep.ratios.values():
            assert len(series) == len(rep.times)
            assert all(math.isfinite(r) and r <= rep.C_measured for r in series)
        # linear regime: the ratio does not depend on the amplitude
        assert rep.stability_of_C == pytest.approx(1.0, abs=1e-4)
        # at t = 0 the gauge-fixed difference is exactly the perturbation
        assert rep.deturck_ratios["0.001"][0] == pytest.approx(1.0, rel=1e-12)
        data = json.loads(rep.write_json(tmp_path / "d.json").read_text())
        assert data["k"] == 2

    def test_blowup_retry_records_alarms(self):
        # the direction has unit C^4 norm, so its sup norm is tiny and only a huge epsilon breaks the metric
        rep = run_dependence(small_dependence(epsilons=[1e6], max_retries=1))
        assert [a["amplitude"] for a in rep.alarms] == [1e6, 5e5]
        assert rep.survived == {"1000000.0": False}
        assert math.isnan(rep.C_measured)


@pytest.fixture(scope="module")
def stability_run():
    d = default_config_dict("stability")
    d["grid"] = {"resolution": [8, 8], "periods": [1.0, 1.0]}
    d["generator"] = {"kind": "conformal", "phi_modes": [{"wavevector": [1, 0], "amplitude": 0.05}]}
    d["stability"].update(n_samples=2, t_end=0.6, spectral_resolution=8)
    return config_from_dict(d), run_stability(config_from_dict(d))


class TestStability:

    def test_converges_at_the_spectral_gap(self, stability_run):
        _, rep = stability_run
        assert rep.fraction_converged == 1.0
        assert rep.spectral_gap == pytest.approx(stencil_symbol(1, 8), rel=1e-10)
        assert rep.base_decay_rate == pytest.approx(-rep.spectral_gap, rel=0.02)
        assert [s["seed"] for s in rep.samples] == [0, 1]

    def test_threads_do_not_change_results(self, stability_run):
        cfg, rep = stability_run
        assert run_stability(cfg, workers=2).samples == rep.samples

    def test_flat_reference_is_mean(self):
        g = gen_conformal(GridSpec.uniform(2, 8), [{"wavevector": [1, 0], "amplitude": 0.1}])
        ref = flat_reference(g)
        assert np.allclose(ref.values[0, 0], g.values.mean(axis=(0, 1)), rtol=1e-15, atol=0)

    def test_non_converging_base(self):
        d = default_config_dict("stability")
        d["grid"] = {"resolution": [8, 8], "periods": [1.0, 1.0]}
        d["generator"] = {"kind": "conformal", "phi_modes": [{"wavevector": [1, 0], "amplitude": 0.05}]}
        d["stability"].update(n_samples=1, t_end=0.01)
        with pytest.raises(ConfigError):
            run_stability(config_from_dict(d))


class TestBall:
    def config(self, **overrides):
        d = default_config_dict("ball")
        d["grid"] = {"resolution": [10, 10], "periods": [1.0, 1.0]}
        d["ball"].update(n_directions=1, M_estimate=1.0, ellipticity_samples=200, rel_tol=0.05, **overrides)
        return config_from_dict(d)

    def test_radii_ordered_and_monotone_in_M(self):
        cfg = self.config()
        rep = run_ball_conditions(cfg)
        row = rep.directions[0]
        assert row["r_metric"] >= row["r_elliptic"] >= row["r_perturb"] > 0
        g0 = cfg.initial_metric()
        d = random_direction(g0.grid, cfg.seed, 2, cfg.holder()).values
        _, _, r3 = ball_radii(g0, d, 1e6, 3.0, rel_tol=0.05, samples=200)
        assert r3 <= row["r_perturb"]

    def test_zero_direction(self):
        g0 = MetricField.identity(GridSpec.uniform(2, 8))
        assert ball_radii(g0, np.zeros(g0.values.shape), 10.0, 1.0) == (10.0, 10.0, 10.0)

    def test_negative_definite_direction(self):
        g0 = MetricField.identity(GridSpec.uniform(1, 10))
        d = np.broadcast_to(-np.eye(1), g0.values.shape)
        r1, r2, r3 = ball_radii(g0, d, 10.0, 1.0, rel_tol=1e-6, samples=100)
        assert r1 == pytest.approx(1.0, rel=1e-5)
        # quotient 1 / (1 - r) stays above half its base value up to r = 1
        assert r2 == pytest.approx(r1, rel=1e-5)
        assert 0 < r3 < r2

    def test_requires_flat_base(self):
        d = default_config_dict("ball")
        d["grid"] = {"resolution": [8, 8], "periods": [1.0, 1.0]}
        d["generator"] = {"kind": "conformal", "phi_modes": [{"wavevector": [1, 0], "amplitude": 0.05}]}
        with pytest.raises(ConfigError):
            run_ball_conditions(config_from_dict(d))
