import math

import numpy as np
import pytest

from freebd.energy import quadratic
from freebd.errors import RangeError
from freebd.freeboundary import (FreeBoundaryReport, NormalizationError, PointReport, classify, classify_all,
                                 extract, fit_halfspace, fit_polynomial, normalize, stratify, stratum_of,
                                 weiss_at, weiss_energy, weiss_monotonicity)
from freebd.grid import Grid
from freebd.linearize import linearize
from freebd.solvers import solve_quadratic_vi

import helpers

RADII = [0.15, 0.3]


def reg(y):
    return 0.5 * np.maximum(y[..., 0], 0.0) ** 2


def sing(y):
    return 0.5 * y[..., 0] ** 2


@pytest.mark.parametrize("dim, profile, expected", [
    (2, reg, helpers.WEISS_2D_REGULAR), (2, sing, helpers.WEISS_2D_SINGULAR),
    (1, reg, helpers.WEISS_1D_REGULAR), (1, sing, helpers.WEISS_1D_SINGULAR),
])
def test_weiss_closed_forms(dim, profile, expected):
    for r in (0.1, 0.2, 0.4, 1.0):
        assert weiss_energy(profile, r, dim) == pytest.approx(expected, rel=1e-8)


def test_weiss_of_rotated_halfspace_and_full_rank():
    e = np.array([math.cos(0.7), math.sin(0.7)])
    W = weiss_energy(lambda y: 0.5 * np.maximum(y @ e, 0.0) ** 2, 0.3, 2)
    assert W == pytest.approx(helpers.WEISS_2D_REGULAR, rel=1e-8)
    # |y|^2/4 has unit Laplacian: W(1) = int (|y|^2/4 + |y|^2/2) - 2 int_{dB} 1/16 = 3pi/8 - pi/4 = pi/8
    W = weiss_energy(lambda y: 0.25 * np.sum(y * y, -1), 0.5, 2)
    assert W == pytest.approx(math.pi / 8, rel=1e-8)


def test_weiss_radius_must_be_positive():
    with pytest.raises(ValueError):
        weiss_energy(reg, 0.0, 2)


def test_fits_recover_models():
    y = np.random.default_rng(1).uniform(-1, 1, size=(400, 2))
    e = np.array([math.cos(1.1), math.sin(1.1)])
    vals = 0.5 * np.maximum(y @ e, 0.0) ** 2
    res, e_fit, s = fit_halfspace(y, vals, 0.05)
    assert res < 1e-6 and np.dot(e_fit, e) > math.cos(math.radians(1))
    Q = np.array([[0.7, 0.2], [0.2, 0.3]])
    vals = 0.5 * np.einsum("...i,ij,...j->...", y, Q, y)
    res, Q_fit = fit_polynomial(y, vals)
    assert res < 1e-6 and np.allclose(Q_fit, Q, atol=1e-4)


def test_stratum_counts_small_eigenvalues():
    assert stratum_of(np.diag([1.0, 0.0])) == 1
    assert stratum_of(np.diag([0.5, 0.5])) == 0
    assert stratum_of(np.diag([1.0, 0.05])) == 1


def _classified(kind, N=65):
    g, sol, h, ex = helpers.profile2d(kind, N)
    lin = helpers.profile2d_linearized(kind, N)
    return g, sol, lin, classify_all(sol, lin, RADII)


def test_regular_profile_classification():
    g, sol, lin, rep = _classified("regular")
    assert len(rep.points) > 10
    assert all(p.label == "regular" for p in rep.points)
    for p in rep.points:
        assert abs(p.x[0]) <= 2 * g.h
        assert np.dot(p.normal, [1.0, 0.0]) >= math.cos(math.radians(5))
        for r, W in p.weiss:
            assert W == pytest.approx(helpers.WEISS_2D_REGULAR, rel=0.05)


def test_singular_profile_classification():
    g, sol, lin, rep = _classified("singular")
    assert len(rep.points) > 10
    for p in rep.points:
        assert p.label == "singular" and p.stratum == 1
        assert np.linalg.norm(p.Q - np.diag([1.0, 0.0])) <= 0.1
    s = stratify(rep)
    assert len(s["singular"]["S1"]) == len(rep.points) and not s["regular"] and not s["ambiguous"]


def test_isolated_contact_point_is_S0():
    g = Grid.uniform([(-1, 1), (-1, 1)], 65)
    P = g.points
    sol = solve_quadratic_vi(g, 1.0, 1.0, 0.0, (P[..., 0] ** 2 + P[..., 1] ** 2) / 4)
    lin = linearize(sol, 0.0, quadratic(dim=2, f=1.0))
    rep = classify_all(sol, lin, [0.15, 0.3])
    assert len(rep.points) == 1
    p = rep.points[0]
    assert np.linalg.norm(p.x) <= g.h
    assert p.label == "singular" and p.stratum == 0
    assert np.allclose(p.Q, 0.5 * np.eye(2), atol=0.05)


def test_oblique_halfspace_normal():
    g = Grid.uniform([(-1, 1), (-1, 1)], 65)
    P = g.points
    e = np.array([math.cos(math.radians(30)), math.sin(math.radians(30))])
    ex = 0.5 * np.maximum(P @ e, 0.0) ** 2
    sol = solve_quadratic_vi(g, 1.0, 1.0, 0.0, ex)
    lin = linearize(sol, 0.0, quadratic(dim=2, f=1.0))
    rep = classify_all(sol, lin, RADII)
    assert rep.points and all(p.label == "regular" for p in rep.points)
    for p in rep.points:
        assert np.dot(p.normal, e) >= math.cos(math.radians(5))


def test_anisotropic_normalisation():
    """With A0 = diag(a, 1) the solution (x1)_+^2/(2a) normalises to the standard half-space."""
    a = 2.0
    A0 = np.diag([a, 1.0])
    g = Grid.uniform([(-1, 1), (-1, 1)], 65)
    P = g.points
    ex = np.maximum(P[..., 0], 0.0) ** 2 / (2 * a)
    sol = solve_quadratic_vi(g, A0, 1.0, 0.0, ex)
    lin = linearize(sol, 0.0, quadratic(A=A0, dim=2, f=1.0))
    x0 = np.array([0.0, 0.0])
    nv = normalize(sol, lin, x0)
    y = np.array([[0.1, 0.05], [-0.1, 0.0], [0.05, -0.1]])
    # bilinear interpolation error of a quadratic is at most h^2 |D^2 w| / 8 per axis
    assert np.allclose(nv.value(y), reg(y), atol=g.h ** 2)
    p = classify(sol, lin, x0, RADII)
    assert p.label == "regular" and np.dot(p.normal, [1.0, 0.0]) > math.cos(math.radians(5))
    assert weiss_at(sol, lin, x0, 0.3) == pytest.approx(helpers.WEISS_2D_REGULAR, rel=0.05)


def test_normalisation_requires_positive_forcing():
    g, sol, h, ex = helpers.profile2d("regular", 65)
    lin = helpers.profile2d_linearized("regular", 65)
    with pytest.raises(NormalizationError):
        normalize(sol, lin, np.zeros(2), f_min=10.0)
    with pytest.raises(RangeError):
        weiss_at(sol, lin, np.array([0.0, 0.95]), 0.3)
    with pytest.raises(RangeError):
        classify(sol, lin, np.array([0.0, 0.99]), RADII)


def test_extract_1d_points():
    g, sol, _ = helpers.quad1d(513)
    pts = extract(sol)
    assert pts.shape == (2, 1)
    assert np.allclose(np.sort(pts[:, 0]), [-0.5, 0.5], atol=2 * g.h)
    assert extract(sol, margin=0.6).shape == (0, 1)


def test_1d_classification_regular():
    g, sol, _ = helpers.quad1d(513)
    lin = linearize(sol, 0.0, quadratic(dim=1, f=1.0))
    rep = classify_all(sol, lin, [0.1, 0.2])
    assert [p.label for p in rep.points] == ["regular", "regular"]
    assert sorted(float(p.normal[0]) for p in rep.points) == [-1.0, 1.0]
    for p in rep.points:
        for r, W in p.weiss:
            assert W == pytest.approx(helpers.WEISS_1D_REGULAR, rel=1e-3)


def test_stratify_mixed_synthetic_report():
    pts = [
        PointReport(np.zeros(2), "regular", {"regular": 0.0, "singular": 1.0}, normal=np.array([1.0, 0.0])),
        PointReport(np.ones(2), "singular", {"regular": 1.0, "singular": 0.0}, Q=np.diag([1.0, 0.0]), stratum=1),
        PointReport(np.ones(2), "singular", {"regular": 1.0, "singular": 0.0}, Q=np.eye(2) / 2, stratum=0),
        PointReport(np.ones(2), "singular", {"regular": 1.0, "singular": 0.0}, Q=np.diag([0.0, 1.0]), stratum=1),
        PointReport(np.ones(2), "ambiguous", {"regular": 1.0, "singular": 1.1}),
    ]
    rep = FreeBoundaryReport(2, pts)
    s = stratify(rep)
    assert len(s["regular"]) == 1 and len(s["ambiguous"]) == 1
    assert len(s["singular"]["S0"]) == 1 and len(s["singular"]["S1"]) == 2
    d = rep.as_dict()
    assert d["strata_counts"] == {"S0": 1, "S1": 2}
    assert d["points"][1]["stratum"] == 1 and "normal" in d["points"][0]


def test_weiss_monotonicity_warning():
    assert weiss_monotonicity([(0.1, 1.0), (0.2, 1.0), (0.4, 1.0)]) == []
    assert weiss_monotonicity([(0.1, 1.0), (0.2, 0.5), (0.4, 1.0)])
