"""Frozen oracles and cached reference solves shared by the test modules.

Oracle values are closed forms derived independently of the package code; none of
them calls into freebd.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from freebd.energy import area, quadratic
from freebd.grid import Grid
from freebd.linearize import linearize
from freebd.solvers import (nonlinear_residual, quadratic_obstacle_residual, solve_nonlinear_vi,
                            solve_quadratic_vi)

# ---------------------------------------------------------------- closed forms

# 1D quadratic: -u'' + 1 = 0 off contact, psi = 0, u(+-1) = b. Contact set [-a, a], a = 1 - sqrt(2b).
def quad1d_edge(b: float) -> float:
    return 1.0 - math.sqrt(2.0 * b)


def quad1d_exact(x, b: float = 0.125):
    a = quad1d_edge(b)
    return np.maximum(np.abs(x) - a, 0.0) ** 2 / 2.0


# taut string over psi = 1/2 - x^2 with zero boundary data: the tangent from (1, 0)
# touches psi at x* solving x^2 - 2x + 1/2 = 0, i.e. x* = 1 - sqrt(2)/2
AREA_EDGE = 1.0 - math.sqrt(2.0) / 2.0


def area_h(x):
    """-(psi'/sqrt(1+psi'^2))' for psi = 1/2 - x^2, i.e. 2(1+4x^2)^{-3/2}."""
    return 2.0 * (1.0 + 4.0 * np.asarray(x) ** 2) ** -1.5


# Weiss energy W(1) = int_B (|grad v|^2 + 2v) - 2 int_{dB} v^2 of the blow-up profiles
# 2D half-space: pi/4 - 3pi/16 = pi/16; 2D x1^2/2: pi/8
# 1D half-line: 2/3 - 1/2 = 1/6; 1D x^2/2: 4/3 - 1 = 1/3
WEISS_2D_REGULAR = math.pi / 16.0
WEISS_2D_SINGULAR = math.pi / 8.0
WEISS_1D_REGULAR = 1.0 / 6.0
WEISS_1D_SINGULAR = 1.0 / 3.0


def conformal_christoffel(dphi: np.ndarray) -> np.ndarray:
    """Gamma^k_ij = delta^k_i d_j phi + delta^k_j d_i phi - delta_ij d_k phi for g = exp(2 phi) I."""
    m = dphi.shape[-1]
    E = np.eye(m)
    return (np.einsum("ki,...j->...kij", E, dphi) + np.einsum("kj,...i->...kij", E, dphi)
            - np.einsum("ij,...k->...kij", E, dphi))


def flat_area_field(xi):
    """h^{-1} xi for h = I + xi xi^T, by Sherman-Morrison."""
    xi = np.asarray(xi)
    return xi / (1.0 + np.sum(xi * xi, axis=-1))[..., None]


def observed_orders(hs, errs):
    return [math.log(errs[k - 1] / errs[k]) / math.log(hs[k - 1] / hs[k]) for k in range(1, len(errs))]


# ---------------------------------------------------------------- cached solves

@lru_cache(maxsize=None)
def quad1d(N: int, b: float = 0.125):
    g = Grid.uniform([(-1.0, 1.0)], N)
    sol = solve_quadratic_vi(g, 1.0, 1.0, 0.0, b)
    h = quadratic_obstacle_residual(g, 1.0, 1.0, 0.0)
    return g, sol, h


@lru_cache(maxsize=None)
def profile2d(kind: str, N: int):
    """2D quadratic problem (A = I, f = 1, psi = 0) whose boundary data is an exact profile."""
    g = Grid.uniform([(-1.0, 1.0), (-1.0, 1.0)], N)
    P = g.points
    if kind == "regular":
        ex = np.maximum(P[..., 0], 0.0) ** 2 / 2.0
    elif kind == "singular":
        ex = P[..., 0] ** 2 / 2.0
    else:
        raise ValueError(kind)
    sol = solve_quadratic_vi(g, 1.0, 1.0, 0.0, ex)
    h = quadratic_obstacle_residual(g, 1.0, 1.0, 0.0)
    return g, sol, h, ex


@lru_cache(maxsize=None)
def profile2d_linearized(kind: str, N: int):
    g, sol, h, ex = profile2d(kind, N)
    return linearize(sol, 0.0, quadratic(dim=2, f=1.0))


@lru_cache(maxsize=None)
def area1d(N: int):
    g = Grid.uniform([(-1.0, 1.0)], N)
    x = g.axes[0]
    psi = 0.5 - x ** 2
    spec = area(dim=1)
    sol = solve_nonlinear_vi(spec, g, psi, 0.0)
    h = nonlinear_residual(spec, g, psi)
    lin = linearize(sol, psi, spec)
    return g, sol, h, lin, psi
