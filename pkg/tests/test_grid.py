import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rflab import grid as gridmod
from rflab.errors import FieldFormatError, GridError, SingularMetricError
from rflab.grid import (
    DiffeoMap,
    GridSpec,
    MetricField,
    ScalarField,
    SymTensorField,
    VectorField,
    interpolate,
    interpolate_values,
    load_field,
    partial_derivative,
    save_field,
)


def sine_field(n, period=1.0, dim=1):
    grid = GridSpec.uniform(dim, n, period)
    x = grid.mesh()[0]
    return grid, ScalarField(grid, np.sin(2 * np.pi * x / period))


class TestGridSpec:
    def test_spacing_and_volume(self):
        grid = GridSpec((8, 16), (2.0, 1.0))
        assert grid.spacing == (0.25, 1.0 / 16)
        assert grid.n_points == 128
        assert grid.shape == (8, 16)

    @pytest.mark.parametrize("res,per", [((4,), (1.0,)), ((8, 8, 8, 8), (1.0,) * 4), ((8,), (0.0,)), ((8,), (-1.0,))])
    def test_rejects_bad_grids(self, res, per):
        with pytest.raises(GridError):
            GridSpec(res, per)


class TestFields:
    def test_symmetric_enforced(self):
        grid = GridSpec.uniform(2, 8)
        v = np.random.default_rng(0).standard_normal(grid.shape + (2, 2))
        t = SymTensorField(grid, v)
        assert np.array_equal(t.values, np.swapaxes(t.values, -1, -2))

    def test_non_finite_rejected(self):
        grid = GridSpec.uniform(1, 8)
        with pytest.raises(ValueError):
            ScalarField(grid, np.full(8, np.nan))

    def test_metric_must_be_positive_definite(self):
        grid = GridSpec.uniform(2, 8)
        with pytest.raises(SingularMetricError):
            MetricField.constant(grid, np.diag([1.0, -1.0]))

    def test_values_are_immutable(self):
        grid = GridSpec.uniform(1, 8)
        f = ScalarField(grid, np.zeros(8))
        with pytest.raises(ValueError):
            f.values[0] = 1.0


class TestPartialDerivative:
    def test_constant_has_zero_derivative(self):
        grid = GridSpec.uniform(2, 16)
        f = SymTensorField(grid, np.broadcast_to(np.array([[2.0, 0.3], [0.3, 1.0]]), grid.shape + (2, 2)))
        for axis in range(2):
            assert np.all(partial_derivative(f, axis).values == 0.0)
            assert np.all(partial_derivative(f, axis, order=2).values == 0.0)

    def test_field_independent_of_axis(self):
        grid = GridSpec.uniform(2, 16)
        _, y = grid.mesh()
        f = ScalarField(grid, np.cos(2 * np.pi * y))
        assert np.all(partial_derivative(f, 0).values == 0.0)

    def test_fourth_order_convergence(self):
        errors = []
        for n in (32, 64):
            grid, f = sine_field(n, period=2.0)
            x = grid.mesh()[0]
            exact = (2 * np.pi / 2.0) * np.cos(2 * np.pi * x / 2.0)
            errors.append(np.abs(partial_derivative(f, 0).values - exact).max())
        assert math.log2(errors[0] / errors[1]) >= 3.9

    def test_second_derivative_convergence(self):
        errors = []
        for n in (16, 32):
            grid, f = sine_field(n)
            x = grid.mesh()[0]
            exact = -((2 * np.pi) ** 2) * np.sin(2 * np.pi * x)
            errors.append(np.abs(partial_derivative(f, 0, order=2).values - exact).max())
        assert math.log2(errors[0] / errors[1]) >= 3.9

    def test_mixed_partials_commute_exactly(self):
        grid = GridSpec((16, 12), (1.0, 1.5))
        f = ScalarField(grid, np.random.default_rng(1).standard_normal(grid.shape))
        a = partial_derivative(f, 0, order=2, axis2=1).values
        b = partial_derivative(f, 1, order=2, axis2=0).values
        assert np.array_equal(a, b)

    def test_axis_out_of_range(self):
        grid, f = sine_field(8)
        with pytest.raises(GridError):
            partial_derivative(f, 1)

    @pytest.mark.parametrize("backend", ["python", "cython"])
    def test_backends_agree_bitwise(self, backend):
        if backend == "cython" and gridmod._kernels_ext is None:
            pytest.skip("compiled kernels not built")
        grid = GridSpec((8, 12, 16), (1.0, 2.0, 0.5))
        v = np.random.default_rng(2).standard_normal(grid.shape + (3,))
        previous = gridmod.backend_name()
        try:
            gridmod.set_backend("python")
            ref = [gridmod.d1(v, grid, a) for a in range(3)] + [gridmod.d2(v, grid, a) for a in range(3)]
            gridmod.set_backend(backend)
            out = [gridmod.d1(v, grid, a) for a in range(3)] + [gridmod.d2(v, grid, a) for a in range(3)]
        finally:
            gridmod.set_backend(previous)
        for r, o in zip(ref, out):
            assert np.array_equal(r, o)


@given(
    a=st.floats(-10, 10),
    b=st.floats(-10, 10),
    seed=st.integers(0, 2**16),
    axis=st.integers(0, 1),
    order=st.sampled_from([1, 2]),
)
def test_derivative_linearity(a, b, seed, axis, order):
    grid = GridSpec((8, 10), (1.0, 2.0))
    rng = np.random.default_rng(seed)
    f = ScalarField(grid, rng.standard_normal(grid.shape))
    g = ScalarField(grid, rng.standard_normal(grid.shape))
    lhs = partial_derivative(a * f + b * g, axis, order).values
    rhs = a * partial_derivative(f, axis, order).values + b * partial_derivative(g, axis, order).values
    scale = 1 + np.abs(rhs).max()
    assert np.abs(lhs - rhs).max() <= 1e-13 * scale


@given(shift=st.integers(-9, 9), axis=st.integers(0, 1), seed=st.integers(0, 2**16))
def test_translation_equivariance(shift, axis, seed):
    grid = GridSpec((10, 8), (1.0, 1.0))
    f = ScalarField(grid, np.random.default_rng(seed).standard_normal(grid.shape))
    for d_axis in range(2):
        lhs = partial_derivative(f.shifted(shift, axis), d_axis).values
        rhs = partial_derivative(f, d_axis).shifted(shift, axis).values
        assert np.array_equal(lhs, rhs)


class TestInterpolation:
    def test_exact_at_nodes(self):
        grid = GridSpec((12, 8), (1.0, 3.0))
        f = ScalarField(grid, np.random.default_rng(3).standard_normal(grid.shape))
        out = interpolate_values(f.values, grid, grid.points().reshape(-1, 2)).reshape(grid.shape)
        assert np.array_equal(out, f.values)

    @pytest.mark.parametrize("n", [32, 96])
    def test_midpoints(self, n):
        grid, f = sine_field(n)
        mids = (np.arange(n) + 0.5) / n
        out = interpolate_values(f.values, grid, mids[:, None])
        assert np.abs(out - np.sin(2 * np.pi * mids)).max() < 1e-5

    def test_constant_anywhere(self):
        grid = GridSpec.uniform(2, 8)
        f = SymTensorField(grid, np.broadcast_to(np.array([[2.0, 1.0], [1.0, 3.0]]), grid.shape + (2, 2)))
        assert np.allclose(interpolate(f, np.array([0.123, -7.77])), [[2.0, 1.0], [1.0, 3.0]], rtol=0, atol=1e-14)

    def test_periodic_reduction(self):
        grid, f = sine_field(16)
        assert interpolate(f, np.array([0.3])) == pytest.approx(interpolate(f, np.array([2.3])), abs=1e-14)

    def test_near_node_offsets_keep_relative_accuracy(self):
        grid, f = sine_field(32)
        for offset in (1e-6, -1e-9, 1e-11, -1e-12):
            x = np.array([[0.0 + offset], [0.5 + offset], [1.0 - abs(offset)]])
            got = interpolate_values(f.values, grid, x)
            exact = np.sin(2 * np.pi * x[:, 0])
            assert np.abs(got - exact).max() <= 1e-14 + 1e-6 * abs(offset)


class TestFieldIO:
    def test_round_trip(self, tmp_path):
        grid = GridSpec((8, 10, 12), (1.0, 2.0, 3.0))
        g = MetricField.identity(grid) + SymTensorField(grid, 0.01 * np.random.default_rng(0).random(grid.shape + (3, 3)))
        metric = MetricField(grid, g.values)
        for f in (metric, ScalarField(grid, grid.mesh()[0]), VectorField(grid, np.ones(grid.shape + (3,)))):
            save_field(f, tmp_path / "f.rfb")
            back = load_field(tmp_path / "f.rfb")
            assert type(back) is type(f)
            assert back.grid == f.grid
            assert np.array_equal(back.values, f.values)

    def test_magic_and_layout(self, tmp_path):
        grid = GridSpec.uniform(1, 8)
        save_field(ScalarField(grid, np.arange(8.0)), tmp_path / "f.rfb")
        data = (tmp_path / "f.rfb").read_bytes()
        assert data[:8] == b"RFLAB001"
        assert np.array_equal(np.frombuffer(data[-64:], "<f8"), np.arange(8.0))

    def test_truncated_payload(self, tmp_path):
        grid = GridSpec.uniform(2, 8)
        save_field(ScalarField(grid, np.zeros(grid.shape)), tmp_path / "f.rfb")
        data = (tmp_path / "f.rfb").read_bytes()
        (tmp_path / "f.rfb").write_bytes(data[:-8])
        with pytest.raises(FieldFormatError):
            load_field(tmp_path / "f.rfb")

    def test_resolution_mismatch(self, tmp_path):
        save_field(ScalarField(GridSpec.uniform(2, 8), np.zeros((8, 8))), tmp_path / "f.rfb")
        with pytest.raises(FieldFormatError):
            load_field(tmp_path / "f.rfb", grid=GridSpec.uniform(2, 16))

    def test_not_a_container(self, tmp_path):
        (tmp_path / "f.rfb").write_bytes(b"hello")
        with pytest.raises(FieldFormatError):
            load_field(tmp_path / "f.rfb")


class TestDiffeoMap:
    def test_identity(self):
        grid = GridSpec.uniform(2, 8)
        F = DiffeoMap.identity(grid)
        assert np.array_equal(F.jacobian_determinant(), np.ones(grid.shape))
        assert np.array_equal(F.image_points(), grid.points().reshape(-1, 2))

    def test_jacobian_of_shear(self):
        grid = GridSpec.uniform(2, 32)
        x, y = grid.mesh()
        u = np.zeros(grid.shape + (2,))
        u[..., 0] = 0.01 * np.sin(2 * np.pi * y)
        J = DiffeoMap(grid, u).jacobian()
        # truncation bound h^4/30 * (2 pi)^5 * 0.01 ~ 3.1e-6
        assert np.abs(J[..., 0, 1] - 0.02 * np.pi * np.cos(2 * np.pi * y)).max() < 4e-6
        assert np.abs(J[..., 1, 0]).max() == 0.0

    def test_orientation_loss_detected(self):
        grid = GridSpec.uniform(1, 16)
        x = grid.mesh()[0]
        u = 0.3 * np.sin(2 * np.pi * x)[:, None]
        assert not DiffeoMap(grid, u).is_orientation_preserving()
