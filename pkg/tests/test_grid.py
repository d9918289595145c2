import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freebd.errors import ConfigurationError
from freebd.grid import Grid, divergence, gauss_legendre_01, gradient, hessian, line_quadrature, norms


def test_basic_geometry():
    g = Grid.uniform([(-1, 1), (0, 2)], (5, 9))
    assert g.dim == 2 and g.size == 45
    assert g.spacing == (0.5, 0.25)
    assert g.h == 0.5
    assert g.points.shape == (5, 9, 2)
    assert g.points[0, 0].tolist() == [-1.0, 0.0] and g.points[-1, -1].tolist() == [1.0, 2.0]
    assert g.interior.sum() == 3 * 7
    assert (g.boundary | g.interior).all()
    assert g.collar(1).sum() == 1 * 5
    assert g.refine().shape == (9, 17)


@pytest.mark.parametrize("bounds, shape", [([(1, 0)], 9), ([(0, 1)], 2), ([(0, 1)] * 3, 9)])
def test_invalid_grids(bounds, shape):
    with pytest.raises(ConfigurationError):
        Grid.uniform(bounds, shape)


def test_sample_and_check():
    g = Grid.uniform([(0, 1)], 11)
    assert np.array_equal(g.sample(2.0), np.full(11, 2.0))
    assert np.allclose(g.sample(lambda p: p[..., 0] ** 2), g.axes[0] ** 2)
    with pytest.raises(ValueError):
        g.sample(np.zeros(5))


def test_gradient_hessian_exact_on_quadratics():
    g = Grid.uniform([(-1, 1), (-1, 2)], (17, 25))
    x, y = g.points[..., 0], g.points[..., 1]
    f = 1 + 2 * x - y + 3 * x * x + x * y - 0.5 * y * y
    G = gradient(g, f)
    assert np.allclose(G[..., 0], 2 + 6 * x + y, atol=1e-12)
    assert np.allclose(G[..., 1], -1 + x - y, atol=1e-12)
    H = hessian(g, f)
    assert np.allclose(H[..., 0, 0], 6, atol=1e-9)
    assert np.allclose(H[..., 1, 1], -1, atol=1e-9)
    assert np.allclose(H[..., 0, 1], 1, atol=1e-9)
    assert np.allclose(divergence(g, G), 5, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.integers(5, 30))
def test_gradient_of_affine_is_exact(c, a, b, n):
    g = Grid.uniform([(-1, 1), (0, 3)], (n, n + 3))
    f = c + a * g.points[..., 0] + b * g.points[..., 1]
    G = gradient(g, f)
    assert np.allclose(G[..., 0], a, atol=1e-9 * (1 + abs(a) + abs(b) + abs(c)))
    assert np.allclose(G[..., 1], b, atol=1e-9 * (1 + abs(a) + abs(b) + abs(c)))


def test_gauss_legendre_exactness():
    for m in (1, 3, 5, 12):
        t, w = gauss_legendre_01(m)
        for k in range(2 * m):
            assert np.isclose(np.sum(w * t ** k), 1.0 / (k + 1), rtol=1e-13)
    assert np.isclose(line_quadrature(lambda t: np.exp(t), 8), np.e - 1, rtol=1e-14)
    with pytest.raises(ValueError):
        gauss_legendre_01(0)


def test_norms():
    g = Grid.uniform([(0, 1), (0, 1)], 33)
    x, y = g.points[..., 0], g.points[..., 1]
    f = x * x + 3 * x * y
    n = norms(g, f)
    assert np.isclose(n.sup, 4.0)
    # int (x^2 + 3xy)^2 over the unit square = 1/5 + 6/8 + 9/9
    assert np.isclose(n.l2, np.sqrt(1 / 5 + 3 / 4 + 1), rtol=1e-3)
    assert np.isclose(n.c11, 3.0)


def test_interpolator_and_dilate():
    g = Grid.uniform([(0, 1), (0, 1)], 9)
    f = g.points[..., 0] + 2 * g.points[..., 1]
    interp = g.interpolator(f)
    assert np.isclose(interp([[0.33, 0.71]])[0], 0.33 + 1.42)
    m = np.zeros(g.shape, dtype=bool)
    m[4, 4] = True
    assert g.dilate(m, 1).sum() == 9
    assert g.dilate(m, 0).sum() == 1


def test_distance_to_boundary():
    g = Grid.uniform([(-1, 1), (0, 1)], 9)
    assert np.isclose(g.distance_to_boundary(np.array([0.0, 0.25])), 0.25)
    assert not g.contains(np.array([2.0, 0.5]))
