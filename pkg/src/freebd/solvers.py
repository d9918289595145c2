"""Discrete obstacle problems: projected SOR for quadratic energies and semismooth Newton
for nonlinear fields, both on the same conservative flux discretisation.

The discrete operator at an interior node is

    R(u) = -sum_k (a_k(face k+) - a_k(face k-)) / h_k + a0(x, u, C u)

where faces sit between neighbouring nodes along axis k, the face gradient uses
the normal difference plus the average of the transverse central differences of
the two adjacent nodes, and C is the central-difference gradient at the node.
For a(xi) = xi this is the standard 3-point / 5-point Laplacian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .energy import EnergySpec
from .errors import ConfigurationError, EvaluationError
from .grid import Grid

__all__ = [
    "FluxStencil", "Solution", "Audit",
    "solve_quadratic_vi", "solve_nonlinear_vi", "complementarity_audit",
    "quadratic_operator", "quadratic_obstacle_residual", "nonlinear_residual",
    "initial_guess", "active_tolerance",
]

log = logging.getLogger(__name__)

ACTIVE_SCALE = 1e-3
FD_REL_STEP = 1e-6
MAX_HALVINGS = 40
COARSEST = 65


class FluxStencil:
    """Sparse face operators for a grid.

    For each axis k the faces are the midpoints between nodes adjacent along k
    whose transverse index is interior. ``xi[k][m]`` maps nodal values to the
    m-th gradient component on k-faces, ``avg[k]`` to face averages and
    ``div[k]`` maps k-face fluxes to their divergence contribution at interior
    nodes (rows of boundary nodes are zero). ``central[m]`` is the nodal central
    difference, zero on boundary rows.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        n = grid.dim
        shape = grid.shape
        N = grid.size
        idx = np.arange(N).reshape(shape)
        h = grid.spacing
        self.xi, self.avg, self.div, self.points = [], [], [], []
        interior = grid.interior

        for k in range(n):
            sl_lo = [slice(None)] * n
            sl_hi = [slice(None)] * n
            sl_lo[k] = slice(0, shape[k] - 1)
            sl_hi[k] = slice(1, shape[k])
            for t in range(n):
                if t != k:
                    sl_lo[t] = slice(1, shape[t] - 1)
                    sl_hi[t] = slice(1, shape[t] - 1)
            lo = idx[tuple(sl_lo)].ravel()
            hi = idx[tuple(sl_hi)].ravel()
            F = lo.size
            rows = np.arange(F)
            comps = []
            for m in range(n):
                if m == k:
                    M = sp.csr_matrix((np.r_[-np.ones(F), np.ones(F)] / h[k], (np.r_[rows, rows], np.r_[lo, hi])),
                                      shape=(F, N))
                else:
                    step = int(np.prod(shape[m + 1:]))
                    cols = np.r_[lo + step, lo - step, hi + step, hi - step]
                    vals = np.r_[np.ones(F), -np.ones(F), np.ones(F), -np.ones(F)] / (4 * h[m])
                    M = sp.csr_matrix((vals, (np.tile(rows, 4), cols)), shape=(F, N))
                comps.append(M)
            self.xi.append(comps)
            self.avg.append(sp.csr_matrix((np.full(2 * F, 0.5), (np.r_[rows, rows], np.r_[lo, hi])), shape=(F, N)))
            pts = 0.5 * (grid.points.reshape(N, n)[lo] + grid.points.reshape(N, n)[hi])
            self.points.append(pts)
            # k-face (lo, hi): +1/h at node lo (its forward face), -1/h at node hi
            keep_lo = interior.ravel()[lo]
            keep_hi = interior.ravel()[hi]
            D = sp.csr_matrix(
                (np.r_[np.ones(keep_lo.sum()), -np.ones(keep_hi.sum())] / h[k],
                 (np.r_[lo[keep_lo], hi[keep_hi]], np.r_[rows[keep_lo], rows[keep_hi]])),
                shape=(N, F))
            # row i: (flux(i, i+1) - flux(i-1, i)) / h
            self.div.append(D)

        self.central = []
        flat_int = np.flatnonzero(interior.ravel())
        for m in range(n):
            step = int(np.prod(shape[m + 1:]))
            vals = np.r_[np.ones(flat_int.size), -np.ones(flat_int.size)] / (2 * h[m])
            self.central.append(sp.csr_matrix((vals, (np.r_[flat_int, flat_int], np.r_[flat_int + step, flat_int - step])),
                                              shape=(N, N)))

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(self.grid.interior.ravel())

    def face_gradients(self, u: np.ndarray) -> list[np.ndarray]:
        u = u.ravel()
        return [np.stack([M @ u for M in comps], axis=-1) for comps in self.xi]

    def node_gradient(self, u: np.ndarray) -> np.ndarray:
        u = u.ravel()
        return np.stack([C @ u for C in self.central], axis=-1)

    def divergence(self, fluxes: list[np.ndarray]) -> np.ndarray:
        """Discrete divergence at nodes (zero on boundary nodes) of per-face normal fluxes."""
        out = np.zeros(self.grid.size)
        for D, q in zip(self.div, fluxes):
            out += D @ q
        return out


# --------------------------------------------------------------------------- solution

@dataclass
class Solution:
    grid: Grid
    u: np.ndarray
    psi: np.ndarray
    active: np.ndarray
    zeta: np.ndarray
    pde_residual: np.ndarray
    residual: np.ndarray
    eps_act: np.ndarray
    iters: int
    converged: bool
    history: list[float] = field(default_factory=list)
    method: str = ""
    tol: float = 0.0
    energy_history: list[float] | None = None
    spec: EnergySpec | None = None
    # the quadratic solver works with the halved operator -div(A grad u) + f
    halved: bool = False

    @property
    def w(self) -> np.ndarray:
        return self.u - self.psi

    def summary(self) -> dict:
        return {"method": self.method, "iters": int(self.iters), "converged": bool(self.converged),
                "active_nodes": int(self.active.sum()),
                "final_update": float(self.history[-1]) if self.history else 0.0}


def initial_guess(grid: Grid, psi: np.ndarray, g: np.ndarray) -> np.ndarray:
    """max(psi, interpolation of the boundary data): linear in 1D, a Coons patch in 2D."""
    g = grid.sample(g)
    if grid.dim == 1:
        x = grid.axes[0]
        t = (x - x[0]) / (x[-1] - x[0])
        lin = (1 - t) * g[0] + t * g[-1]
    else:
        s = ((grid.axes[0] - grid.axes[0][0]) / (grid.axes[0][-1] - grid.axes[0][0]))[:, None]
        t = ((grid.axes[1] - grid.axes[1][0]) / (grid.axes[1][-1] - grid.axes[1][0]))[None, :]
        lin = ((1 - s) * g[0:1, :] + s * g[-1:, :] + (1 - t) * g[:, 0:1] + t * g[:, -1:]
               - ((1 - s) * (1 - t) * g[0, 0] + s * (1 - t) * g[-1, 0] + (1 - s) * t * g[0, -1] + s * t * g[-1, -1]))
    u = np.maximum(psi, lin)
    u[grid.boundary] = g[grid.boundary]
    return u


def _check_data(grid, psi, g):
    psi = grid.sample(psi)
    g = grid.sample(g)
    for name, arr in (("obstacle", psi), ("boundary", g)):
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError("field has non-finite values", name)
    bnd = grid.boundary
    gap = g[bnd] - psi[bnd]
    if gap.min() < -1e-14 * max(1.0, np.abs(g[bnd]).max()):
        raise ConfigurationError(f"boundary data lies below the obstacle (by {-gap.min():.3g})", "boundary")
    return psi, g


def active_tolerance(grid: Grid, h_field: np.ndarray) -> np.ndarray:
    """Contact tolerance: a small multiple of h^2 times the local size of the obstacle residual."""
    return ACTIVE_SCALE * grid.h ** 2 * np.abs(h_field)


def _sample_matrix_field(grid: Grid, A) -> np.ndarray:
    n = grid.dim
    if callable(A):
        A = A(grid.points)
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A * np.eye(n)
    A = np.broadcast_to(A, grid.shape + (n, n)).copy()
    if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=1e-12, atol=1e-14):
        raise ConfigurationError("matrix field is not symmetric", "problem.A")
    ev = np.linalg.eigvalsh(A)
    if ev[..., 0].min() <= 0:
        pos = np.unravel_index(np.argmin(ev[..., 0]), grid.shape)
        raise ConfigurationError(f"matrix field is not positive definite at node {tuple(int(i) for i in pos)}",
                                 "problem.A")
    return A


def quadratic_operator(grid: Grid, A) -> sp.csr_matrix:
    """Sparse M with (M u)_i = -div(A grad u)_i at interior nodes and zero rows on the boundary.

    Face coefficients are averages of the nodal matrix field.
    """
    A = _sample_matrix_field(grid, A)
    st = FluxStencil(grid)
    n = grid.dim
    Af = A.reshape(grid.size, n, n)
    M = sp.csr_matrix((grid.size, grid.size))
    for k in range(n):
        flux = sp.csr_matrix((st.avg[k].shape[0], grid.size))
        for m in range(n):
            coef = st.avg[k] @ Af[:, k, m]
            if np.any(coef != 0):
                flux = flux + sp.diags(coef) @ st.xi[k][m]
        M = M - st.div[k] @ flux
    return M.tocsr()


def quadratic_obstacle_residual(grid: Grid, A, f, psi) -> np.ndarray:
    """h = -div(A grad psi) + f at interior nodes (halved normalisation), zero on the boundary."""
    M = quadratic_operator(grid, A)
    h = (M @ grid.sample(psi).ravel()).reshape(grid.shape) + grid.sample(f)
    h[grid.boundary] = 0.0
    return h


def _colours(grid: Grid, M_II: sp.csr_matrix, interior_idx: np.ndarray) -> list[np.ndarray]:
    """Red-black colouring when it decouples the stencil, four colours otherwise."""
    ij = np.array(np.unravel_index(interior_idx, grid.shape))
    cands = [(ij.sum(axis=0) % 2,)]
    if grid.dim == 2:
        cands.append((2 * (ij[0] % 2) + ij[1] % 2,))
    for (lab,) in cands:
        groups = [np.flatnonzero(lab == c) for c in np.unique(lab)]
        ok = True
        for gidx in groups:
            block = M_II[gidx][:, gidx]
            if (block - sp.diags(block.diagonal())).count_nonzero():
                ok = False
                break
        if ok:
            return groups
    raise ConfigurationError("stencil is too wide for a four-colour sweep", "problem.A")


def solve_quadratic_vi(grid: Grid, A, f, psi, g, tol: float = 1e-8, max_iter: int = 200000,
                       omega: float | None = None, record_energy: bool = False) -> Solution:
    """Projected SOR for min over v >= psi, v = g on the boundary, of int(A grad v.grad v + 2 f v).

    The Euler-Lagrange residual is taken in halved form R(u) = -div(A grad u) + f,
    so the multiplier zeta equals f - div(A grad psi) on the contact set.
    """
    psi, g = _check_data(grid, psi, g)
    f = grid.sample(f)
    if omega is None:
        omega = 2.0 / (1.0 + math.sin(math.pi / (max(grid.shape) - 1)))
    if not 0 < omega < 2:
        raise ConfigurationError(f"relaxation factor must lie in (0, 2), got {omega}", "solver.omega")
    M = quadratic_operator(grid, A)
    I = np.flatnonzero(grid.interior.ravel())
    B = np.flatnonzero(grid.boundary.ravel())
    M_II = M[I][:, I].tocsr()
    u = initial_guess(grid, psi, g).ravel()
    rhs = f.ravel()[I] + M[I][:, B] @ u[B]
    d = M_II.diagonal()
    psi_I = psi.ravel()[I]
    groups = _colours(grid, M_II, I)
    rows = [M_II[gidx] for gidx in groups]
    uI = u[I].copy()
    stop_update = tol * min(grid.spacing) ** 2
    history: list[float] = []
    energies = [] if record_energy else None

    def energy(v):
        return float(0.5 * v @ (M_II @ v) + rhs @ v)

    if record_energy:
        energies.append(energy(uI))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        change = 0.0
        for gidx, Mg in zip(groups, rows):
            r = Mg @ uI + rhs[gidx]
            new = np.maximum(psi_I[gidx], uI[gidx] - omega * r / d[gidx])
            change = max(change, float(np.max(np.abs(new - uI[gidx]))))
            uI[gidx] = new
        history.append(change)
        if record_energy:
            energies.append(energy(uI))
        if change < stop_update:
            R = M_II @ uI + rhs
            if np.max(np.abs(np.minimum(uI - psi_I, R))) < tol:
                converged = True
                break
    if not converged:
        log.warning("projected SOR stopped after %d sweeps (last update %.3g)", it, history[-1] if history else 0)
    u[I] = uI
    u = u.reshape(grid.shape)
    h_field = quadratic_obstacle_residual(grid, A, f, psi)
    R_full = np.zeros(grid.size)
    R_full[I] = M_II @ uI + rhs
    sol = _finish(grid, u, psi, R_full.reshape(grid.shape), h_field, it, converged, history, "psor", tol)
    sol.energy_history = energies
    sol.halved = True
    return sol


def _finish(grid, u, psi, R, h_field, iters, converged, history, method, tol, spec=None):
    eps = active_tolerance(grid, h_field)
    w = u - psi
    active = w <= eps
    interior = grid.interior
    zeta = np.where(active & interior, R, 0.0)
    pde = np.where(~active & interior, np.abs(R), 0.0)
    return Solution(grid=grid, u=u, psi=psi, active=active, zeta=zeta, pde_residual=pde, residual=R,
                    eps_act=eps, iters=iters, converged=converged, history=history, method=method, tol=tol, spec=spec)


# --------------------------------------------------------------------------- nonlinear

class _NonlinearOperator:
    """R(u) and its Jacobian for an energy field on the flux stencil."""

    def __init__(self, spec: EnergySpec, grid: Grid):
        if spec.dim != grid.dim:
            raise ConfigurationError("energy and grid dimensions differ", "domain.dim")
        self.spec = spec
        self.grid = grid
        self.st = FluxStencil(grid)
        self.x = grid.points.reshape(grid.size, grid.dim)

    def _faces(self, u):
        st = self.st
        u = u.ravel()
        return [(st.points[k], st.avg[k] @ u, np.stack([M @ u for M in st.xi[k]], axis=-1)) for k in range(self.grid.dim)]

    def residual(self, u: np.ndarray) -> np.ndarray:
        spec = self.spec
        fluxes = []
        for k, (xf, zf, xif) in enumerate(self._faces(u)):
            a = spec.eval_a(xf, zf, xif)
            _finite(a, "a", xf)
            fluxes.append(a[:, k])
        xi_n = self.st.node_gradient(u)
        a0 = spec.eval_a0(self.x, u.ravel(), xi_n)
        _finite(a0, "a0", self.x)
        R = -self.st.divergence(fluxes) + a0
        R[~self.grid.interior.ravel()] = 0.0
        return R

    def jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        spec = self.spec
        st = self.st
        n = self.grid.dim
        J = sp.csr_matrix((self.grid.size, self.grid.size))
        for k, (xf, zf, xif) in enumerate(self._faces(u)):
            H = spec.eval_hess(xf, zf, xif)
            _finite(H, "hess", xf)
            dz = FD_REL_STEP * np.maximum(1.0, np.abs(zf))
            da_dz = (spec.eval_a(xf, zf + dz, xif)[:, k] - spec.eval_a(xf, zf, xif)[:, k]) / dz
            flux = sp.diags(da_dz) @ st.avg[k]
            for m in range(n):
                flux = flux + sp.diags(H[:, k, m]) @ st.xi[k][m]
            J = J - st.div[k] @ flux
        z = u.ravel()
        xi_n = st.node_gradient(u)
        base = spec.eval_a0(self.x, z, xi_n)
        dz = FD_REL_STEP * np.maximum(1.0, np.abs(z))
        J = J + sp.diags((spec.eval_a0(self.x, z + dz, xi_n) - base) / dz)
        for m in range(n):
            step = FD_REL_STEP * np.maximum(1.0, np.abs(xi_n[:, m]))
            e = np.zeros(n)
            e[m] = 1.0
            d = (spec.eval_a0(self.x, z, xi_n + step[:, None] * e) - base) / step
            if np.any(d != 0):
                J = J + sp.diags(d) @ st.central[m]
        return J.tocsr()


def _finite(val, name, points):
    bad = ~np.isfinite(np.asarray(val))
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise EvaluationError(f"{name} is not finite", {"x": np.asarray(points[row]).tolist()})


def nonlinear_residual(spec: EnergySpec, grid: Grid, v: np.ndarray) -> np.ndarray:
    """-div a(x, v, grad v) + a0(x, v, grad v) at interior nodes on the flux stencil, zero on the boundary."""
    return _NonlinearOperator(spec, grid).residual(grid.sample(v)).reshape(grid.shape)


def solve_nonlinear_vi(spec: EnergySpec, grid: Grid, psi, g, tol: float = 1e-7, max_iter: int = 200,
                       fallback_sweeps: int = 200, u0: np.ndarray | None = None, sequence: bool = True) -> Solution:
    """Semismooth Newton on min(u - psi, R(u)) = 0 at interior nodes.

    Armijo backtracking on the Euclidean norm of the complementarity function with at most
    40 halvings; a stalled line search hands over to nonlinear projected Gauss-Seidel for
    ``fallback_sweeps`` sweeps, after which Newton resumes once. A second stall ends the run
    unconverged unless the residual is already below ``tol``.

    Without ``u0`` and with ``sequence`` set, grids with more than ``COARSEST`` nodes per axis
    are started from the solution on the nested grid of half the resolution.
    """
    psi, g = _check_data(grid, psi, g)
    op = _NonlinearOperator(spec, grid)
    I = op.st.interior_index
    if u0 is None and sequence and _nested(grid) is not None:
        # grid sequencing: start from the interpolated solution on the nested coarse grid
        coarse = _nested(grid)
        sub = (slice(None, None, 2),) * grid.dim
        csol = solve_nonlinear_vi(spec, coarse, psi[sub], g[sub], tol=tol, max_iter=max_iter,
                                  fallback_sweeps=fallback_sweeps)
        u0 = coarse.interpolator(csol.u)(grid.points.reshape(-1, grid.dim)).reshape(grid.shape)
    u = (initial_guess(grid, psi, g) if u0 is None else np.maximum(grid.sample(u0), psi)).ravel().copy()
    u[~grid.interior.ravel()] = g.ravel()[~grid.interior.ravel()]
    psi_f = psi.ravel()
    stop_update = tol * min(grid.spacing) ** 2
    history: list[float] = []
    fallback_used = False
    converged = False
    last_update = math.inf

    # R is scaled by h^2 so both arms of the min carry units of u
    c = min(grid.spacing) ** 2

    def phi(v):
        R = op.residual(v)
        return np.minimum(v[I] - psi_f[I], c * R[I]), R

    Phi, R = phi(u)
    it = 0
    while it < max_iter:
        it += 1
        # convergence is judged on the unscaled complementarity residual
        res = float(np.max(np.abs(np.minimum(u[I] - psi_f[I], R[I])))) if I.size else 0.0
        if res < tol and last_update < stop_update:
            converged = True
            break
        J = op.jacobian(u)[I][:, I].tocsr()
        w = u[I] - psi_f[I]
        act = w <= c * R[I]
        rows = sp.diags(act.astype(float)) + sp.diags(c * (~act).astype(float)) @ J
        delta = spsolve(rows.tocsc(), -Phi)
        if not np.all(np.isfinite(delta)):
            raise EvaluationError("Newton step is not finite")
        norm0 = float(np.linalg.norm(Phi))
        t = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            trial = u.copy()
            trial[I] = u[I] + t * delta
            Phi_t, R_t = phi(trial)
            if np.linalg.norm(Phi_t) <= (1.0 - 1e-4 * t) * norm0:
                accepted = True
                break
            t *= 0.5
        if accepted:
            last_update = float(np.max(np.abs(t * delta))) if delta.size else 0.0
            u, Phi, R = trial, Phi_t, R_t
            history.append(last_update)
            continue
        if res < tol:
            # the line search cannot improve a residual that is already at roundoff level
            converged = True
            break
        if fallback_used:
            log.warning("semismooth Newton stalled twice (residual %.3g)", res)
            break
        fallback_used = True
        log.info("line search failed; switching to projected Gauss-Seidel for %d sweeps", fallback_sweeps)
        u, sweeps_hist = _projected_gauss_seidel(op, u, psi_f, fallback_sweeps, stop_update)
        history.extend(sweeps_hist)
        last_update = sweeps_hist[-1] if sweeps_hist else math.inf
        Phi, R = phi(u)
    u = np.maximum(u, psi_f)
    u[~grid.interior.ravel()] = g.ravel()[~grid.interior.ravel()]
    R = op.residual(u)
    h_field = op.residual(psi_f).reshape(grid.shape)
    sol = _finish(grid, u.reshape(grid.shape), psi, R.reshape(grid.shape), h_field, it, converged, history,
                  "ssnewton" + ("+pgs" if fallback_used else ""), tol, spec)
    return sol


def _nested(grid: Grid) -> Grid | None:
    if min(grid.shape) <= COARSEST or any((n - 1) % 2 for n in grid.shape):
        return None
    return Grid(grid.bounds, tuple((n - 1) // 2 + 1 for n in grid.shape))


def _projected_gauss_seidel(op: _NonlinearOperator, u, psi_f, sweeps, stop_update):
    """Colour-by-colour scalar Newton updates of R followed by projection onto u >= psi."""
    grid = op.grid
    I = op.st.interior_index
    ij = np.array(np.unravel_index(I, grid.shape))
    lab = (ij[0] % 2) if grid.dim == 1 else 2 * (ij[0] % 2) + ij[1] % 2
    groups = [I[lab == c] for c in np.unique(lab)]
    hist = []
    u = u.copy()
    for _ in range(sweeps):
        change = 0.0
        for gidx in groups:
            R = op.residual(u)
            d = op.jacobian(u).diagonal()
            new = np.maximum(psi_f[gidx], u[gidx] - R[gidx] / d[gidx])
            change = max(change, float(np.max(np.abs(new - u[gidx]))))
            u[gidx] = new
        hist.append(change)
        if change < stop_update:
            break
    return u, hist


# --------------------------------------------------------------------------- audit

class Audit(NamedTuple):
    max_zeta_minus_hplus: float
    max_zeta_inactive: float
    max_pde_residual: float
    n_active: int
    n_inactive: int


def complementarity_audit(sol: Solution, h_field: np.ndarray, collar: int = 2) -> Audit:
    """Compare the discrete multiplier with the positive part of the obstacle residual.

    Statistics use interior nodes at least ``collar`` cells away from the boundary and
    from the free boundary (nodes whose ``collar``-neighbourhood mixes active and inactive).
    """
    grid = sol.grid
    h_field = grid.check(h_field)
    keep = grid.collar(collar - 1)
    mixed = grid.dilate(sol.active, collar) & grid.dilate(~sol.active, collar)
    keep &= ~mixed
    act = keep & sol.active
    ina = keep & ~sol.active
    d1 = float(np.max(np.abs(sol.zeta[act] - np.maximum(h_field[act], 0.0)))) if act.any() else 0.0
    d2 = float(np.max(np.abs(sol.zeta[ina]))) if ina.any() else 0.0
    d3 = float(np.max(sol.pde_residual[ina])) if ina.any() else 0.0
    return Audit(d1, d2, d3, int(act.sum()), int(ina.sum()))
