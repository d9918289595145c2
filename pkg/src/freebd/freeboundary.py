"""Free-boundary extraction, blow-up normalisation, Weiss energy and Regular/Singular classification.

Around a free-boundary point x0 the linearised problem div(A grad w) = f 1{w > 0} is mapped to
the unit-Laplacian model by v(y) = w(x0 + A(x0)^{1/2} y) / f(x0). At a radius r the rescaled
blow-up v_r(y) = v(r y) / r^2 on the unit ball is compared with two model families:

* half-space profiles 1/2 ((y . e) - s)_+^2 (regular points),
* quadratic polynomials 1/2 y . Q y with Q >= 0 and trace Q = 1 (singular points).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .errors import RangeError
from .grid import Grid, gauss_legendre_01, gradient
from .linearize import LinearizedProblem
from .solvers import Solution

__all__ = [
    "PointReport", "FreeBoundaryReport", "Normalized",
    "extract", "normalize", "weiss_energy", "weiss_at", "classify", "classify_all", "stratify",
    "weiss_monotonicity", "CONFIDENCE", "RANK_THRESHOLD",
]

log = logging.getLogger(__name__)

CONFIDENCE = 1.2
RANK_THRESHOLD = 0.1
MIN_RADIUS_CELLS = 4


@dataclass
class PointReport:
    x: np.ndarray
    label: str
    fit_residuals: dict
    radius: float | None = None
    normal: np.ndarray | None = None
    Q: np.ndarray | None = None
    stratum: int | None = None
    weiss: list = field(default_factory=list)
    reason: str = ""

    def as_dict(self) -> dict:
        out = {"x": np.asarray(self.x).tolist(), "class": self.label,
               "fit_residuals": dict(self.fit_residuals),
               "weiss": [{"r": r, "W": W} for r, W in self.weiss]}
        if self.normal is not None:
            out["normal"] = np.asarray(self.normal).tolist()
        if self.Q is not None:
            out["Q"] = np.asarray(self.Q).tolist()
            out["stratum"] = int(self.stratum)
        if self.reason:
            out["reason"] = self.reason
        if self.radius is not None:
            out["radius"] = self.radius
        return out


@dataclass
class FreeBoundaryReport:
    dim: int
    points: list[PointReport]
    warnings: list[str] = field(default_factory=list)

    def strata(self) -> dict:
        return stratify(self)

    def as_dict(self) -> dict:
        s = stratify(self)
        return {"points": [p.as_dict() for p in self.points],
                "strata_counts": {k: len(v) for k, v in s["singular"].items()},
                "regular_count": len(s["regular"]), "ambiguous_count": len(s["ambiguous"]),
                "warnings": list(self.warnings)}


# --------------------------------------------------------------------------- extraction

def extract(sol: Solution, margin: float = 0.0) -> np.ndarray:
    """Edge crossings of the contact indicator, shape (m, dim).

    On every grid edge whose endpoints differ in contact flag the level (u - psi) - eps_act = 0
    is located by linear interpolation. Points closer than h/2 to an earlier point are dropped,
    as are points closer than ``margin`` to the domain boundary.
    """
    grid = sol.grid
    phi = sol.w - sol.eps_act
    act = sol.active
    pts = grid.points
    found = []
    for k in range(grid.dim):
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[k] = slice(0, grid.shape[k] - 1)
        hi[k] = slice(1, grid.shape[k])
        lo, hi = tuple(lo), tuple(hi)
        cross = act[lo] != act[hi]
        if not cross.any():
            continue
        pa, pb = phi[lo][cross], phi[hi][cross]
        xa, xb = pts[lo][cross], pts[hi][cross]
        denom = pa - pb
        t = np.where(denom != 0, pa / np.where(denom != 0, denom, 1.0), 0.5)
        t = np.clip(t, 0.0, 1.0)
        found.append(xa + t[:, None] * (xb - xa))
    if not found:
        return np.zeros((0, grid.dim))
    cand = np.concatenate(found)
    if margin > 0:
        cand = cand[grid.distance_to_boundary(cand) >= margin]
    return _dedupe(cand, 0.5 * grid.h)


def _dedupe(points: np.ndarray, radius: float) -> np.ndarray:
    if len(points) == 0:
        return points
    tree = cKDTree(points)
    keep = np.ones(len(points), dtype=bool)
    for i in range(len(points)):
        if not keep[i]:
            continue
        for j in tree.query_ball_point(points[i], radius):
            if j > i:
                keep[j] = False
    return points[keep]


# --------------------------------------------------------------------------- normalisation

@dataclass
class Normalized:
    """v(y) = w(x0 + S y) / f0 with S = A(x0)^{1/2}; ``grad`` returns grad_y v."""

    x0: np.ndarray
    S: np.ndarray
    f0: float
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]

    @property
    def stretch(self) -> float:
        """Largest physical displacement per unit of y."""
        return float(np.linalg.norm(self.S, 2))


class NormalizationError(RangeError):
    pass


def sqrtm_spd(A: np.ndarray) -> np.ndarray:
    ev, V = np.linalg.eigh(0.5 * (A + A.T))
    if ev.min() <= 0:
        raise NormalizationError(f"matrix is not positive definite (eigenvalue {ev.min():.3g})")
    return (V * np.sqrt(ev)) @ V.T


def normalize(sol: Solution, lin: LinearizedProblem, x0, f_min: float = 0.0) -> Normalized:
    """Affine rescaling of w about x0 to the model with unit Laplacian."""
    grid = sol.grid
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = grid.dim
    A0 = grid.interpolator(lin.A.reshape(grid.shape + (n * n,)))(x0[None])[0].reshape(n, n)
    f0 = float(grid.interpolator(lin.f)(x0[None])[0])
    if not f0 > f_min:
        raise NormalizationError(f"forcing {f0:.3g} at the point is not above {f_min:.3g}")
    S = sqrtm_spd(A0)
    w = sol.w
    wi = grid.interpolator(w)
    gi = grid.interpolator(gradient(grid, w))

    def value(y):
        y = np.asarray(y, dtype=float)
        x = x0 + y @ S.T
        return wi(x.reshape(-1, n)).reshape(y.shape[:-1]) / f0

    def grad(y):
        y = np.asarray(y, dtype=float)
        x = x0 + y @ S.T
        gx = gi(x.reshape(-1, n)).reshape(y.shape)
        return gx @ S / f0

    return Normalized(x0, S, f0, value, grad)


# --------------------------------------------------------------------------- Weiss energy

def _ball_rule(dim: int, n_radial: int = 48, n_angle: int = 720):
    """Quadrature nodes/weights on the unit ball and on the unit sphere."""
    if dim == 1:
        t, w = gauss_legendre_01(n_radial)
        y = np.concatenate([-t[::-1], t])[:, None]
        wy = np.concatenate([w[::-1], w])
        return y, wy, np.array([[-1.0], [1.0]]), np.array([1.0, 1.0])
    t, w = gauss_legendre_01(n_radial)
    th = 2 * np.pi * np.arange(n_angle) / n_angle
    dth = 2 * np.pi / n_angle
    rr, tt = np.meshgrid(t, th, indexing="ij")
    y = np.stack([rr * np.cos(tt), rr * np.sin(tt)], -1).reshape(-1, 2)
    wy = (w[:, None] * rr * dth).reshape(-1)
    s = np.stack([np.cos(th), np.sin(th)], -1)
    return y, wy, s, np.full(n_angle, dth)


def _fd_grad(v, y, step):
    n = y.shape[-1]
    out = np.zeros(y.shape)
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        out[..., k] = (v(y + e) - v(y - e)) / (2 * step)
    return out


def weiss_energy(v: Callable, r: float, dim: int, grad: Callable | None = None, center=None) -> float:
    """W(r) = r^{-n-2} int_{B_r}(|grad v|^2 + 2 v) - 2 r^{-n-3} int_{dB_r} v^2.

    ``v`` maps points of shape (..., dim) to values. Without ``grad`` the gradient is a
    central difference with step 1e-4 r. In 1D the sphere integral is the two-point sum.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    yb, wb, ys, ws = _ball_rule(dim)
    pts = c + r * yb
    g = grad(pts) if grad is not None else _fd_grad(v, pts, 1e-4 * r)
    vol = float(np.sum(wb * (np.sum(g * g, axis=-1) + 2.0 * v(pts)))) * r ** dim
    sph = float(np.sum(ws * v(c + r * ys) ** 2)) * r ** (dim - 1)
    return vol / r ** (dim + 2) - 2.0 * sph / r ** (dim + 3)


def _feasible_radius(grid: Grid, x0: np.ndarray, r: float, collar_cells: int = 1) -> bool:
    dist = float(grid.distance_to_boundary(x0[None])[0]) - collar_cells * grid.h
    return MIN_RADIUS_CELLS * grid.h * (1 - 1e-12) <= r <= 0.5 * dist


def weiss_at(sol: Solution, lin: LinearizedProblem, x0, r: float, f_min: float = 0.0) -> float:
    """Weiss energy of the normalised solution at x0; r is the physical radius of the region used.

    The ball of radius r / |A(x0)^{1/2}| in normalised coordinates maps inside the physical ball B_r(x0).
    """
    grid = sol.grid
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if grid.distance_to_boundary(x0[None])[0] - grid.h < r:
        raise RangeError(f"ball of radius {r} about {x0.tolist()} leaves the domain")
    if r < MIN_RADIUS_CELLS * grid.h * (1 - 1e-12):
        raise RangeError(f"radius {r} is below {MIN_RADIUS_CELLS} cells")
    nv = normalize(sol, lin, x0, f_min)
    return weiss_energy(nv.value, r / nv.stretch, grid.dim, grad=nv.grad)


def weiss_monotonicity(trace: Sequence[tuple[float, float]], alpha: float = 0.5) -> list[str]:
    """Warnings where W decreases by more than a fitted C r^alpha slack between consecutive radii."""
    if len(trace) < 2:
        return []
    r = np.array([t[0] for t in trace])
    W = np.array([t[1] for t in trace])
    order = np.argsort(r)
    r, W = r[order], W[order]
    X = np.stack([np.ones_like(r), r ** alpha], -1)
    coef = np.linalg.lstsq(X, W, rcond=None)[0]
    C = abs(float(coef[1]))
    out = []
    for i in range(len(r) - 1):
        drop = W[i] - W[i + 1]
        if drop > C * r[i + 1] ** alpha + 1e-12 * max(1.0, abs(W[i])):
            out.append(f"Weiss energy drops by {drop:.3g} between r={r[i]:.3g} and r={r[i + 1]:.3g}")
    return out


# --------------------------------------------------------------------------- fitting

def _sample_ball(dim: int) -> np.ndarray:
    if dim == 1:
        return np.linspace(-1.0, 1.0, 81)[:, None]
    rr = np.sqrt((np.arange(16) + 0.5) / 16)
    th = 2 * np.pi * (np.arange(48) + 0.5) / 48
    R, T = np.meshgrid(rr, th, indexing="ij")
    return np.stack([R * np.cos(T), R * np.sin(T)], -1).reshape(-1, 2)


def _unit(theta, dim):
    return np.array([np.sign(np.cos(theta)) or 1.0]) if dim == 1 else np.array([np.cos(theta), np.sin(theta)])


def fit_halfspace(y: np.ndarray, vals: np.ndarray, s_max: float):
    """Least-squares fit of 1/2((y.e) - s)_+^2; returns (rms residual, e, s)."""
    dim = y.shape[-1]

    def resid(theta, s):
        e = _unit(theta, dim)
        model = 0.5 * np.maximum(y @ e - s, 0.0) ** 2
        return float(np.sqrt(np.mean((model - vals) ** 2)))

    s_grid = np.linspace(-s_max, s_max, 9) if s_max > 0 else np.zeros(1)
    thetas = np.array([0.0, np.pi]) if dim == 1 else 2 * np.pi * np.arange(144) / 144
    best = min((resid(t, s), t, s) for t in thetas for s in s_grid)
    _, t0, s0 = best
    if dim == 2:
        obj = lambda p: resid(p[0], float(np.clip(p[1], -s_max, s_max)))
        res = minimize(obj, [t0, s0], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
        t0, s0 = float(res.x[0]), float(np.clip(res.x[1], -s_max, s_max))
    elif s_max > 0:
        res = minimize(lambda p: resid(t0, float(np.clip(p[0], -s_max, s_max))), [s0], method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-14})
        s0 = float(np.clip(res.x[0], -s_max, s_max))
    e = _unit(t0, dim)
    return resid(t0, s0), e / np.linalg.norm(e), s0


def _Q(phi, mu):
    c, s = np.cos(phi), np.sin(phi)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag([mu, 1.0 - mu]) @ R.T


def fit_polynomial(y: np.ndarray, vals: np.ndarray):
    """Least-squares fit of 1/2 y.Qy over symmetric Q >= 0 with trace 1; returns (rms residual, Q)."""
    dim = y.shape[-1]
    if dim == 1:
        Q = np.ones((1, 1))
        return float(np.sqrt(np.mean((0.5 * y[:, 0] ** 2 - vals) ** 2))), Q

    def resid(phi, mu):
        Q = _Q(phi, mu)
        model = 0.5 * np.einsum("ni,ij,nj->n", y, Q, y)
        return float(np.sqrt(np.mean((model - vals) ** 2)))

    best = min((resid(p, m), p, m) for p in np.pi * np.arange(36) / 36 for m in np.linspace(0, 1, 21))
    _, p0, m0 = best
    res = minimize(lambda q: resid(q[0], float(np.clip(q[1], 0.0, 1.0))), [p0, m0], method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
    p0, m0 = float(res.x[0]), float(np.clip(res.x[1], 0.0, 1.0))
    Q = _Q(p0, m0)
    Q = 0.5 * (Q + Q.T)
    return resid(p0, m0), Q


def stratum_of(Q: np.ndarray, threshold: float = RANK_THRESHOLD) -> int:
    ev = np.linalg.eigvalsh(Q)
    return int(np.sum(ev < threshold * ev.max()))


def classify(sol: Solution, lin: LinearizedProblem, x0, radii: Sequence[float],
             confidence: float = CONFIDENCE, f_min: float = 0.0) -> PointReport:
    """Label one free-boundary point by model competition at the smallest feasible radius.

    Feasible radii satisfy 4h <= r <= dist(x0, boundary)/2 after a one-cell collar. Weiss
    energies are recorded at every feasible radius.
    """
    grid = sol.grid
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    feas = sorted(r for r in radii if _feasible_radius(grid, x0, r))
    if not feas:
        raise RangeError(f"no feasible radius for point {x0.tolist()} among {list(radii)}")
    try:
        nv = normalize(sol, lin, x0, f_min)
    except RangeError as exc:
        return PointReport(x0, "ambiguous", {"regular": float("nan"), "singular": float("nan")},
                           reason=str(exc))
    r = feas[0]
    rho = r / nv.stretch
    y = _sample_ball(grid.dim)
    vals = nv.value(rho * y) / rho ** 2
    res_reg, e, s = fit_halfspace(y, vals, grid.h / r)
    res_sing, Q = fit_polynomial(y, vals)
    fits = {"regular": res_reg, "singular": res_sing}
    weiss = [(float(rr), weiss_energy(nv.value, rr / nv.stretch, grid.dim, grad=nv.grad)) for rr in feas]
    lo, hi = min(res_reg, res_sing), max(res_reg, res_sing)
    if hi < confidence * lo or hi == 0.0:
        return PointReport(x0, "ambiguous", fits, r, weiss=weiss,
                           reason=f"residual ratio {hi / lo if lo > 0 else float('nan'):.3g} below {confidence}")
    if res_reg < res_sing:
        # map the normalised normal back to physical coordinates
        n_phys = np.linalg.solve(nv.S, e)
        n_phys = n_phys / np.linalg.norm(n_phys)
        return PointReport(x0, "regular", fits, r, normal=n_phys, weiss=weiss)
    return PointReport(x0, "singular", fits, r, Q=Q, stratum=stratum_of(Q), weiss=weiss)


def classify_all(sol: Solution, lin: LinearizedProblem, radii: Sequence[float],
                 confidence: float = CONFIDENCE, f_min: float = 0.0, alpha: float = 0.5) -> FreeBoundaryReport:
    """Extract and classify every free-boundary point at which some radius in ``radii`` is feasible."""
    grid = sol.grid
    margin = 2.0 * min(radii) + grid.h
    pts = extract(sol, margin=margin)
    report = FreeBoundaryReport(grid.dim, [])
    for x0 in pts:
        if not any(_feasible_radius(grid, x0, r) for r in radii):
            continue
        p = classify(sol, lin, x0, radii, confidence, f_min)
        report.points.append(p)
        for msg in weiss_monotonicity(p.weiss, alpha):
            report.warnings.append(f"{np.round(p.x, 12).tolist()}: {msg}")
    return report


def stratify(report: FreeBoundaryReport) -> dict:
    """Group points: regular, singular by stratum k = 0..n-1, ambiguous."""
    sing = {f"S{k}": [] for k in range(report.dim)}
    reg, amb = [], []
    for p in report.points:
        if p.label == "regular":
            reg.append(p)
        elif p.label == "singular":
            sing[f"S{p.stratum}"].append(p)
        else:
            amb.append(p)
    return {"regular": reg, "singular": sing, "ambiguous": amb}
