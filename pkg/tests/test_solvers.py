import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freebd.energy import area, p_energy, quadratic
from freebd.errors import ConfigurationError
from freebd.grid import Grid
from freebd.solvers import (FluxStencil, complementarity_audit, initial_guess, nonlinear_residual,
                            quadratic_obstacle_residual, quadratic_operator, solve_nonlinear_vi,
                            solve_quadratic_vi)

import helpers


@pytest.mark.parametrize("b", [0.125, 0.08, 0.18])
def test_quadratic_1d_closed_form(b):
    g, sol, _ = helpers.quad1d(513, b)
    x = g.axes[0]
    assert sol.converged
    ex = helpers.quad1d_exact(x, b)
    assert np.max(np.abs(sol.u - ex)) <= 5 * g.h ** 2
    a = helpers.quad1d_edge(b)
    xa = x[sol.active & g.interior]
    assert abs(xa.min() + a) <= 2 * g.h and abs(xa.max() - a) <= 2 * g.h


def test_constraint_and_boundary_respected():
    g, sol, _ = helpers.quad1d(257)
    assert np.all(sol.u >= sol.psi - 1e-15)
    assert sol.u[0] == 0.125 and sol.u[-1] == 0.125


def test_halfspace_2d_exact():
    g, sol, h, ex = helpers.profile2d("regular", 65)
    assert sol.converged
    assert np.max(np.abs(sol.u - ex)) < 1e-10


def test_flux_operator_on_quadratics():
    g = Grid.uniform([(-1, 1), (-1, 1)], 17)
    P = g.points
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    u = P[..., 0] ** 2 + P[..., 0] * P[..., 1] - P[..., 1] ** 2
    M = quadratic_operator(g, A)
    Mu = (M @ u.ravel()).reshape(g.shape)
    # -div(A grad u) = -(2*2 + 2*0.5*1 + 1*(-2)) = -3
    assert np.allclose(Mu[g.interior], -3.0, atol=1e-10)
    st_ = FluxStencil(g)
    fl = st_.face_gradients(u)
    assert len(fl) == 2


def test_newton_matches_psor_on_quadratic_preset():
    g = Grid.uniform([(-1, 1), (-1, 1)], 33)
    P = g.points
    psi = 0.1 - P[..., 0] ** 2 - 2 * P[..., 1] ** 2
    tol = 1e-10
    ref = solve_quadratic_vi(g, 1.0, 0.0, psi, 0.0, tol=tol)
    # F = A xi.xi + 2 f z doubles the halved operator
    sol = solve_nonlinear_vi(quadratic(dim=2, f=0.0), g, psi, 0.0, tol=tol)
    assert sol.converged
    assert np.max(np.abs(sol.u - ref.u)) <= 10 * tol


def test_psor_energy_decreases():
    g = Grid.uniform([(-1, 1)], 65)
    sol = solve_quadratic_vi(g, 1.0, 1.0, 0.0, 0.125, record_energy=True)
    e = np.array(sol.energy_history)
    assert np.all(np.diff(e) <= 1e-14 * np.abs(e[:-1]).max())


def test_boundary_below_obstacle_is_rejected():
    g = Grid.uniform([(-1, 1)], 33)
    with pytest.raises(ConfigurationError, match="boundary"):
        solve_quadratic_vi(g, 1.0, 1.0, 0.5, 0.0)
    with pytest.raises(ConfigurationError, match="boundary"):
        solve_nonlinear_vi(area(dim=1), g, 0.5, 0.0)


def test_omega_validation():
    g = Grid.uniform([(-1, 1)], 33)
    with pytest.raises(ConfigurationError, match="solver.omega"):
        solve_quadratic_vi(g, 1.0, 1.0, 0.0, 0.125, omega=2.5)


def test_non_spd_matrix_field_rejected():
    g = Grid.uniform([(-1, 1), (-1, 1)], 9)
    with pytest.raises(ConfigurationError, match="problem.A"):
        solve_quadratic_vi(g, np.diag([1.0, -1.0]), 1.0, 0.0, 0.125)


def test_iteration_cap_reports_unconverged():
    g = Grid.uniform([(-1, 1)], 257)
    sol = solve_quadratic_vi(g, 1.0, 1.0, 0.0, 0.125, max_iter=3)
    assert not sol.converged and sol.iters == 3


def test_area_taut_string_contact():
    g, sol, h, lin, psi = helpers.area1d(1025)
    x = g.axes[0]
    xa = x[sol.active & g.interior]
    assert abs(xa.max() - helpers.AREA_EDGE) <= 2 * g.h
    assert abs(xa.min() + helpers.AREA_EDGE) <= 2 * g.h
    # straight segments from the tangency point to the boundary
    right = x > helpers.AREA_EDGE + 2 * g.h
    slope = -(2 * helpers.AREA_EDGE)
    line = slope * (x - 1.0)
    assert np.max(np.abs(sol.u[right] - line[right])) < 1e-4


def test_p_energy_unconstrained_is_affine():
    g = Grid.uniform([(0, 1)], 65)
    x = g.axes[0]
    sol = solve_nonlinear_vi(p_energy(3.0, dim=1), g, -10.0, lambda p: 2 * p[..., 0] - 1)
    assert sol.converged and not sol.active.any()
    assert np.max(np.abs(sol.u - (2 * x - 1))) < 1e-9


def test_complementarity_identity_quadratic():
    g, sol, h = helpers.quad1d(513)
    audit = complementarity_audit(sol, h)
    assert audit.max_zeta_minus_hplus <= 1e-8
    assert audit.max_zeta_inactive == 0.0
    assert audit.n_active > 0 and audit.n_inactive > 0


def test_nonlinear_residual_matches_flux_form():
    g = Grid.uniform([(-1, 1)], 129)
    x = g.axes[0]
    psi = 0.5 - x ** 2
    h = nonlinear_residual(area(dim=1), g, psi)
    assert np.max(np.abs(h[1:-1] - helpers.area_h(x[1:-1]))) < 1e-3
    hq = quadratic_obstacle_residual(g, 1.0, 1.0, psi)
    assert np.allclose(hq[1:-1], 3.0)


def test_rotation_equivariance():
    """Rotating the data by 90 degrees rotates the solution."""
    g = Grid.uniform([(-1, 1), (-1, 1)], 33)
    P = g.points
    psi = 0.15 - (P[..., 0] - 0.2) ** 2 - 2 * (P[..., 1] + 0.1) ** 2
    bnd = lambda p: 0.02 * p[..., 0]
    gb = g.sample(bnd)
    tol = 1e-11
    s1 = solve_quadratic_vi(g, 1.0, 0.3, psi, np.maximum(gb, psi), tol=tol)
    s2 = solve_quadratic_vi(g, 1.0, 0.3, np.rot90(psi), np.rot90(np.maximum(gb, psi)), tol=tol)
    assert np.max(np.abs(np.rot90(s1.u) - s2.u)) < 1e-8
    n1 = solve_nonlinear_vi(area(dim=2), g, psi, np.maximum(gb, psi), tol=tol)
    n2 = solve_nonlinear_vi(area(dim=2), g, np.rot90(psi), np.rot90(np.maximum(gb, psi)), tol=tol)
    assert np.max(np.abs(np.rot90(n1.u) - n2.u)) < 1e-8


def test_initial_guess_interpolates_boundary():
    g = Grid.uniform([(0, 1), (0, 1)], 9)
    bd = g.sample(lambda p: 1 + p[..., 0] + 2 * p[..., 1])
    u0 = initial_guess(g, np.full(g.shape, -5.0), bd)
    assert np.allclose(u0, bd)


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(0.0, 0.4), st.floats(-2.0, 2.0))
def test_solution_properties(c, extra, f):
    """u >= psi everywhere, u = g on the boundary, and complementarity on every interior node."""
    g = Grid.uniform([(-1, 1)], 65)
    x = g.axes[0]
    psi = c - x ** 2
    bval = max(c - 1.0, 0.0) + extra
    sol = solve_quadratic_vi(g, 1.0, f, psi, bval, tol=1e-10)
    assert sol.converged
    assert np.all(sol.u >= psi - 1e-14)
    assert sol.u[0] == bval and sol.u[-1] == bval
    I = g.interior
    R = sol.residual
    assert np.all(R[I] >= -1e-8)
    assert np.max(np.abs(np.minimum(sol.u[I] - psi[I], R[I]))) <= 1e-8


def test_no_contact_harmonic():
    g = Grid.uniform([(-1, 1), (-1, 1)], 33)
    sol = solve_quadratic_vi(g, 1.0, 0.0, -1.0, 0.0)
    assert sol.converged and not sol.active.any()
    assert np.all(sol.u == 0.0) and np.all(sol.zeta == 0.0)
    audit = complementarity_audit(sol, quadratic_obstacle_residual(g, 1.0, 0.0, -1.0))
    assert audit.max_zeta_minus_hplus == 0.0 and audit.n_active == 0


def test_p2_zero_data_gives_zero():
    g = Grid.uniform([(-1, 1)], 65)
    sol = solve_nonlinear_vi(p_energy(2.0, dim=1), g, 0.0, 0.0)
    assert sol.converged and np.max(np.abs(sol.u)) == 0.0


def test_area_multiplier_matches_h():
    g, sol, h, lin, psi = helpers.area1d(4097)
    x = g.axes[0]
    core = sol.active & ~g.dilate(~sol.active, 2) & g.collar(1)
    rel = np.abs(sol.zeta[core] - helpers.area_h(x[core])) / helpers.area_h(x[core])
    assert core.any() and rel.max() <= 0.02
