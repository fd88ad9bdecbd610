"""Grid, field, norm, and operator checks."""

import math

import numpy as np
import pytest

from mfglab.grid import (Field, Grid, GridError, gradient, half_axis0_integral,
                         integrate, integrate_values, l2_norm, laplacian,
                         mixed_second_identity_check, read_fld, write_fld)
from mfglab.carleman import random_smooth_field


def test_grid_geometry():
    g = Grid(n=1, L=1.0, N=64, T=1.0, K=8)
    assert g.h == pytest.approx(2.0 / 64)
    assert g.dt == pytest.approx(1.0 / 8)
    assert g.shape == (64,)
    ax = g.axis()
    assert ax[0] == pytest.approx(-1.0)
    assert ax[-1] == pytest.approx(1.0 - g.h)


def test_grid_validation():
    with pytest.raises(GridError):
        Grid(n=3, L=1.0, N=64, T=1.0, K=8)
    with pytest.raises(GridError):
        Grid(n=1, L=1.0, N=63, T=1.0, K=8)
    with pytest.raises(GridError):
        Grid(n=1, L=1.0, N=64, T=-1.0, K=8)


def test_field_shape_mismatch():
    g = Grid(n=2, L=1.0, N=16, T=1.0, K=4)
    with pytest.raises(GridError):
        Field(g, np.zeros(16))
    with pytest.raises(GridError):
        Field(g, np.full((16, 16), np.nan))


def test_integrate_constant_and_mode():
    g = Grid(n=1, L=1.0, N=64, T=1.0, K=4)
    # domain length is 2L; a pure Fourier mode integrates to zero exactly
    assert integrate(Field.from_function(g, lambda x: np.ones_like(x))) \
        == pytest.approx(2.0)
    mode = Field.from_function(g, lambda x: np.cos(math.pi * x))
    assert integrate(mode) == pytest.approx(0.0, abs=1e-14)


def test_spectral_derivative_exact_on_modes():
    g = Grid(n=1, L=1.0, N=64, T=1.0, K=4)
    f = Field.from_function(g, lambda x: np.sin(2 * math.pi * x))
    (df,) = gradient(f, backend="spectral")
    exact = 2 * math.pi * np.cos(2 * math.pi * g.axis())
    assert np.max(np.abs(df.values - exact)) < 1e-10


def test_stencil_laplacian_second_order():
    errs = []
    for N in (32, 64):
        g = Grid(n=1, L=1.0, N=N, T=1.0, K=4)
        f = Field.from_function(g, lambda x: np.sin(math.pi * x))
        lap = laplacian(f, backend="stencil")
        exact = -math.pi**2 * np.sin(math.pi * g.axis())
        errs.append(np.max(np.abs(lap.values - exact)))
    assert errs[0] / errs[1] > 3.5  # ~ factor 4 per mesh doubling


def test_mixed_second_identity_random_fields():
    g = Grid(n=2, L=1.0, N=32, T=1.0, K=4)
    rng = np.random.default_rng(0)
    for _ in range(5):
        f = Field(g, random_smooth_field(g, rng, modes=6))
        lhs, rhs = mixed_second_identity_check(f)
        assert abs(lhs - rhs) <= 1e-10 * abs(rhs)


def test_mixed_second_identity_needs_2d():
    g = Grid(n=1, L=1.0, N=32, T=1.0, K=4)
    with pytest.raises(GridError):
        mixed_second_identity_check(Field(g, np.zeros(32)))


def test_half_axis0_integral_known_value():
    # integral of x^2 over x in [0, 1] is 1/3 (trapezoid is 2nd order)
    g = Grid(n=1, L=1.0, N=256, T=1.0, K=4)
    vals = g.axis() ** 2
    assert half_axis0_integral(vals, g) == pytest.approx(1.0 / 3.0, rel=1e-4)


def test_half_axis0_integral_requires_unit_halfwidth():
    g = Grid(n=1, L=2.0, N=64, T=1.0, K=4)
    with pytest.raises(GridError):
        half_axis0_integral(np.zeros(64), g)


def test_l2_norm_parseval():
    g = Grid(n=1, L=1.0, N=64, T=1.0, K=4)
    f = np.cos(math.pi * g.axis())
    # ||cos(pi x)||_{L2(-1,1)}^2 = 1
    assert l2_norm(f, g) == pytest.approx(1.0, rel=1e-12)


def test_fld_round_trip(tmp_path):
    g = Grid(n=2, L=1.0, N=16, T=1.0, K=4)
    rng = np.random.default_rng(3)
    f = Field(g, rng.standard_normal(g.shape))
    path = tmp_path / "snap.fld"
    write_fld(path, f, time=0.25, node_id=7)
    header, values = read_fld(path)
    assert header["node_id"] == 7 and header["time"] == 0.25
    np.testing.assert_array_equal(values, f.values)
