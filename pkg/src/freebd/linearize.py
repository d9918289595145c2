"""Rewrite a nonlinear obstacle solution as a quadratic obstacle problem for w = u - psi.

A(x) averages the xi-Hessian of F along the segment from grad psi to grad u, so that
A grad w = a(x, u, grad u) - a(x, u, grad psi). The forcing f and the obstacle residual h
are formed with the nodal difference operators of :mod:`freebd.grid`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .energy import EnergySpec
from .errors import EvaluationError
from .grid import Grid, divergence, gauss_legendre_01, gradient
from .solvers import Solution

__all__ = ["LinearizedProblem", "linearize", "verify_pde2", "verify_H4_H5", "H4_RADIUS", "H5_RADIUS"]

DEFAULT_QUAD = 12
# neighbourhood of the contact set for the lower bound on h, in cells
H4_RADIUS = 4
# largest pair distance for the Hoelder quotient, in cells
H5_RADIUS = 8


@dataclass
class LinearizedProblem:
    grid: Grid
    A: np.ndarray
    f: np.ndarray
    h: np.ndarray
    lambda_K: float
    K: np.ndarray
    eig_min: np.ndarray
    eig_max: np.ndarray
    quad_m: int
    c0_est: float = float("nan")
    holder_est: float = float("nan")
    symmetric: bool = True

    def as_dict(self) -> dict:
        return {"lambda_K": self.lambda_K, "quad_nodes": self.quad_m, "c0_est": self.c0_est,
                "holder_est": self.holder_est, "symmetric": self.symmetric}


def _eval_checked(fn, name, x, z, xi, grid):
    val = np.asarray(fn(x, z, xi), dtype=float)
    bad = ~np.isfinite(val)
    if bad.any():
        node = tuple(int(i) for i in np.argwhere(bad)[0][: grid.dim])
        raise EvaluationError(f"{name} is not finite at node {node}", {"x": x[node].tolist()})
    return val


def contact_neighbourhood(grid: Grid, active: np.ndarray, radius_cells: float) -> np.ndarray:
    """Nodes within Euclidean distance radius_cells * h of the contact set."""
    if not active.any():
        return np.zeros(grid.shape, dtype=bool)
    dist = ndimage.distance_transform_edt(~active, sampling=grid.spacing)
    return dist <= radius_cells * grid.h * (1 + 1e-12)


def linearize(sol: Solution, psi, spec: EnergySpec, quad_m: int = DEFAULT_QUAD,
              alpha: float = 0.5) -> LinearizedProblem:
    """Matrix field, forcing and obstacle residual of the linearised problem.

    A(x) = int_0^1 hess(x, u, grad psi + t grad w) dt by ``quad_m``-point Gauss-Legendre;
    f = -div a(x, u, grad psi) + a0(x, u, grad u); h = -div a(x, psi, grad psi) + a0(x, psi, grad psi).
    lambda_K is read off node-wise eigenvalues on the interior minus a one-cell collar.
    """
    grid = sol.grid
    psi = grid.sample(psi)
    u = sol.u
    w = u - psi
    x = grid.points
    gpsi = gradient(grid, psi)
    gw = gradient(grid, w)
    gu = gradient(grid, u)

    t, wts = gauss_legendre_01(quad_m)
    A = np.zeros(grid.shape + (grid.dim, grid.dim))
    for tk, wk in zip(t, wts):
        A += wk * _eval_checked(spec.eval_hess, "hessian", x, u, gpsi + tk * gw, grid)
    symmetric = bool(np.allclose(A, np.swapaxes(A, -1, -2), rtol=1e-10, atol=1e-12))
    if spec.variational:
        A = 0.5 * (A + np.swapaxes(A, -1, -2))

    a_mix = _eval_checked(spec.eval_a, "a", x, u, gpsi, grid)
    a0_u = _eval_checked(spec.eval_a0, "a0", x, u, gu, grid)
    f = -divergence(grid, a_mix) + a0_u
    a_psi = _eval_checked(spec.eval_a, "a", x, psi, gpsi, grid)
    a0_psi = _eval_checked(spec.eval_a0, "a0", x, psi, gpsi, grid)
    h = -divergence(grid, a_psi) + a0_psi

    K = grid.collar(1)
    if symmetric:
        ev = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))
    else:
        ev = np.sort(np.linalg.eigvals(A).real, axis=-1)
    eig_min, eig_max = ev[..., 0], ev[..., -1]
    if K.any():
        lo, hi = float(eig_min[K].min()), float(eig_max[K].max())
        lam = max(hi, 1.0 / lo if lo > 0 else np.inf, 1.0)
    else:
        lam = float("nan")
    lin = LinearizedProblem(grid, A, f, h, lam, K, eig_min, eig_max, quad_m, symmetric=symmetric)
    near = contact_neighbourhood(grid, sol.active, H4_RADIUS) & K
    lin.c0_est = float(h[near].min()) if near.any() else float("nan")
    lin.holder_est = holder_quotient(grid, f, alpha, K)
    return lin


def verify_pde2(lin: LinearizedProblem, sol: Solution, psi, collar: int = 2) -> float:
    """Largest |div(A grad w) - f 1{u > psi}| on interior nodes at least ``collar`` cells
    from the boundary and from the free boundary."""
    grid = lin.grid
    w = sol.u - grid.sample(psi)
    flux = np.einsum("...ij,...j->...i", lin.A, gradient(grid, w))
    res = divergence(grid, flux) - lin.f * (~sol.active)
    keep = grid.collar(collar - 1)
    keep &= ~(grid.dilate(sol.active, collar) & grid.dilate(~sol.active, collar))
    return float(np.max(np.abs(res[keep]))) if keep.any() else 0.0


def holder_quotient(grid: Grid, f: np.ndarray, alpha: float, mask: np.ndarray | None = None,
                    radius_cells: int = H5_RADIUS) -> float:
    """max |f(x) - f(y)| / |x - y|^alpha over node pairs in ``mask`` with |x - y| <= radius_cells * h."""
    mask = np.ones(grid.shape, dtype=bool) if mask is None else mask
    hs = np.array(grid.spacing)
    rmax = radius_cells * grid.h * (1 + 1e-12)
    reach = [int(np.floor(rmax / hk)) for hk in hs]
    best = 0.0
    offsets = np.stack(np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij"), -1).reshape(-1, grid.dim)
    for off in offsets:
        # each unordered pair once
        nz = np.flatnonzero(off)
        if nz.size == 0 or off[nz[0]] < 0:
            continue
        dist = float(np.linalg.norm(off * hs))
        if dist > rmax:
            continue
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, grid.shape))
        dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, grid.shape))
        both = mask[src] & mask[dst]
        if both.any():
            best = max(best, float(np.max(np.abs(f[dst] - f[src])[both])) / dist ** alpha)
    return best


def verify_H4_H5(lin: LinearizedProblem, sol: Solution, c0: float, alpha: float = 0.5) -> dict:
    """Lower bound of h near the contact set and a discrete Hoelder quotient of f.

    The H4 neighbourhood is every node of the working region within 4h of the contact set.
    """
    grid = lin.grid
    near = contact_neighbourhood(grid, sol.active, H4_RADIUS) & lin.K
    if near.any():
        k = int(np.argmin(np.where(near, lin.h, np.inf)))
        node = np.unravel_index(k, grid.shape)
        min_h = float(lin.h[node])
        where = grid.points[node].tolist()
    else:
        min_h, where = float("nan"), None
    h4_pass = bool(near.any() and min_h >= c0)
    q = holder_quotient(grid, lin.f, alpha, lin.K)
    return {
        "h4": {"min_h": min_h, "c0": float(c0), "pass": h4_pass,
               "margin": min_h - c0 if near.any() else float("nan"), "at": where, "nodes": int(near.sum())},
        "h5": {"alpha": float(alpha), "quotient": q, "radius_cells": H5_RADIUS},
    }
