"""Area of graphs in a Riemannian chart: coefficient assembly, the first-variation field,
its non-divergence form and a sampled coercivity radius.

Coordinates are (x_1..x_n, z); index n (zero-based) is the vertical direction. For a graph
with slope xi the induced matrix is

    h_ij = g_ij + xi_i g_jn + xi_j g_ni + xi_i xi_j g_nn,

and the first variation reads div(A xi + b) - f with A = g_nn h^{-1}, b^i = g_jn h^{ji} and
f built from the Christoffel symbols of g.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .energy import EnergySpec, Growth, halton_points
from .errors import CoercivityError, ConfigurationError, EvaluationError
from .grid import Grid, gradient, hessian
from .solvers import Solution

__all__ = [
    "Metric", "ChartCoefficients", "S0Result", "NondivergenceForm",
    "flat", "conformal", "from_entries", "check_metric",
    "metric_derivatives", "christoffel", "assemble", "field_from_chart", "chart_energy",
    "apply_L", "nondivergence_coefficients", "estimate_s0", "coercivity_margin", "sample_l1_box",
    "reduce_nondivergence",
]

COND_LIMIT = 1e12
XI_STEP = 1e-5


@dataclass(frozen=True)
class Metric:
    """Metric g(x, z) on B_{r0} x (-r0, r0); ``dg`` optionally returns d_l g_ij as [..., l, i, j]."""

    dim: int
    g: Callable
    r0: float = 1.0
    dg: Callable | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError("chart dimension must be 1 or 2", "metric.dim")
        if not self.r0 > 0:
            raise ConfigurationError("chart radius must be positive", "metric.r0")

    def __call__(self, x, z) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        out = np.asarray(self.g(x, z), dtype=float)
        return np.broadcast_to(out, np.broadcast_shapes(x.shape[:-1], z.shape) + (self.dim + 1,) * 2)


def flat(dim: int = 2, r0: float = 1.0) -> Metric:
    eye = np.eye(dim + 1)

    def g(x, z):
        return np.broadcast_to(eye, np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)) + eye.shape)

    def dg(x, z):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)) + (dim + 1,) * 3)

    return Metric(dim, g, r0, dg, name="flat")


def conformal(phi: Callable, dim: int = 2, r0: float = 1.0, dphi: Callable | None = None) -> Metric:
    """g = exp(2 phi(x, z)) I. ``dphi`` returns the (n+1)-gradient of phi when known."""
    eye = np.eye(dim + 1)

    def g(x, z):
        return np.exp(2.0 * np.asarray(phi(x, z), dtype=float))[..., None, None] * eye

    dg = None
    if dphi is not None:
        def dg(x, z):
            e2 = np.exp(2.0 * np.asarray(phi(x, z), dtype=float))
            d = np.asarray(dphi(x, z), dtype=float)
            return 2.0 * (e2[..., None] * d)[..., :, None, None] * eye

    return Metric(dim, g, r0, dg, name="conformal")


def from_entries(entries: dict[str, Callable], dim: int, r0: float = 1.0) -> Metric:
    """Metric from callables keyed "gIJ" (1-based, I <= J); missing entries default to the identity."""
    m = dim + 1
    allowed = {f"g{i}{j}" for i in range(1, m + 1) for j in range(i, m + 1)}
    unknown = set(entries) - allowed
    if unknown:
        raise ConfigurationError(f"unknown metric entries {sorted(unknown)}", "metric.entries")

    def g(x, z):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z))
        out = np.zeros(shape + (m, m))
        for i in range(m):
            for j in range(i, m):
                key = f"g{i + 1}{j + 1}"
                if key in entries:
                    val = np.broadcast_to(np.asarray(entries[key](x, z), dtype=float), shape)
                else:
                    val = 1.0 if i == j else 0.0
                out[..., i, j] = val
                out[..., j, i] = val
        return out

    return Metric(dim, g, r0, None, name="entries")


def metric_derivatives(metric: Metric, x, z) -> np.ndarray:
    """d_l g_ij as [..., l, i, j], from the callback or central differences with step 1e-5 r0."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if metric.dg is not None:
        return np.asarray(metric.dg(x, z), dtype=float)
    n = metric.dim
    step = 1e-5 * metric.r0
    parts = []
    for l in range(n + 1):
        if l < n:
            e = np.zeros(n)
            e[l] = step
            parts.append((metric(x + e, z) - metric(x - e, z)) / (2 * step))
        else:
            parts.append((metric(x, z + step) - metric(x, z - step)) / (2 * step))
    return np.stack(parts, axis=-3)


def check_metric(metric: Metric, n_samples: int = 1024, tol: float = 1e-12, deriv_tol: float = 1e-6) -> dict:
    """Symmetry and positivity on a sample of the chart, and the normalisation g(0) = I, dg(0) = 0."""
    n = metric.dim
    t = halton_points(n + 1, n_samples)
    x = metric.r0 * (2 * t[:, :n] - 1) / np.sqrt(n)
    z = metric.r0 * (2 * t[:, n] - 1) * 0.999
    G = metric(x, z)
    sym = float(np.max(np.abs(G - np.swapaxes(G, -1, -2))))
    eig = float(np.linalg.eigvalsh(0.5 * (G + np.swapaxes(G, -1, -2))).min())
    g0 = metric(np.zeros(n), np.array(0.0))
    dev0 = float(np.max(np.abs(g0 - np.eye(n + 1))))
    dg0 = float(np.max(np.abs(metric_derivatives(metric, np.zeros(n), np.array(0.0)))))
    return {"symmetric": sym <= tol * max(1.0, float(np.abs(G).max())), "min_eigenvalue": eig,
            "positive": eig > 0, "g0_deviation": dev0, "normalized": dev0 <= tol, "dg0": dg0,
            "flat_at_origin": dg0 <= deriv_tol}


def christoffel(metric: Metric, x, z) -> np.ndarray:
    """Gamma^k_ij as [..., k, i, j] over all n+1 chart coordinates."""
    G = metric(x, z)
    dG = metric_derivatives(metric, x, z)
    Ginv = np.linalg.inv(G)
    # T_lij = d_i g_jl + d_j g_il - d_l g_ij
    T = np.einsum("...ijl->...lij", dG) + np.einsum("...jil->...lij", dG) - dG
    return 0.5 * np.einsum("...kl,...lij->...kij", Ginv, T)


@dataclass
class ChartCoefficients:
    h: np.ndarray
    h_inv: np.ndarray
    A: np.ndarray
    b: np.ndarray
    f: np.ndarray
    Gamma: np.ndarray
    g: np.ndarray


def _induced(G, xi, n):
    gt = G[..., :n, :n]
    gc = G[..., :n, n]   # g_{i n}
    gr = G[..., n, :n]   # g_{n i}
    gnn = G[..., n, n]
    return (gt + xi[..., :, None] * gc[..., None, :] + xi[..., None, :] * gr[..., :, None]
            + xi[..., :, None] * xi[..., None, :] * gnn[..., None, None])


def assemble(metric: Metric, x, z, xi, with_f: bool = True) -> ChartCoefficients:
    """h, its inverse, A = g_nn h^{-1}, b^i = g_jn h^{ji}, the Christoffel term f, and Gamma."""
    n = metric.dim
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    xi = np.asarray(xi, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], z.shape, xi.shape[:-1])
    x = np.broadcast_to(x, shape + (n,))
    z = np.broadcast_to(z, shape)
    xi = np.broadcast_to(xi, shape + (n,))
    G = metric(x, z)
    h = _induced(G, xi, n)
    cond = np.linalg.cond(h)
    if not np.all(np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        k = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise EvaluationError(f"induced matrix is singular (condition number {np.ravel(cond)[k]:.3g})",
                              {"x": x.reshape(-1, n)[k].tolist(), "z": float(z.ravel()[k]),
                               "xi": xi.reshape(-1, n)[k].tolist()})
    hinv = np.linalg.inv(h)
    gnn = G[..., n, n]
    A = gnn[..., None, None] * hinv
    gc = G[..., :n, n]
    b = np.einsum("...j,...ji->...i", gc, hinv)
    if with_f:
        Gam = christoffel(metric, x, z)
        Gnn = Gam[..., :, n, n]          # Gamma^k_{nn}, k over n+1
        Gin = Gam[..., :, :n, n]         # Gamma^k_{i n}, [k, i]
        gjk = G[..., :n, :]              # g_{jk}, [j, k]
        gkn = G[..., :, n]               # g_{kn}, [k]
        t1 = np.einsum("...ij,...i,...k,...jk->...", hinv, xi, Gnn, gjk)
        t2 = np.einsum("...ij,...j,...i,...k,...k->...", hinv, xi, xi, Gnn, gkn)
        t3 = np.einsum("...ij,...ki,...jk->...", hinv, Gin, gjk)
        t4 = np.einsum("...ij,...j,...ki,...k->...", hinv, xi, Gin, gkn)
        f = t1 + t2 + t3 + t4
    else:
        Gam = np.zeros(shape + (n + 1,) * 3)
        f = np.zeros(shape)
    return ChartCoefficients(h, hinv, A, b, f, Gam, G)


def field_from_chart(metric: Metric):
    """The first-variation field: a = A xi + b and a0 = f, as callables of (x, z, xi)."""

    def a(x, z, xi):
        c = assemble(metric, x, z, xi, with_f=False)
        return np.einsum("...ij,...j->...i", c.A, np.broadcast_to(xi, c.b.shape)) + c.b

    def a0(x, z, xi):
        return assemble(metric, x, z, xi).f

    return a, a0


def _xi_jacobian(a, x, z, xi, n, step=XI_STEP):
    """[..., i, j] = d a_i / d xi_j by central differences."""
    xi = np.asarray(xi, dtype=float)
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        cols.append((a(x, z, xi + e) - a(x, z, xi - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def chart_energy(metric: Metric, box_radius: float | None = None) -> EnergySpec:
    """EnergySpec wrapper of the chart field.

    F is the area density sqrt(det h); a is the first-variation field, which is not the
    xi-gradient of F, so the EnergySpec is marked non-variational. The declared growth constants are
    calibrated on samples with |x| + |z| + |xi| < box_radius (default r0 / 2) with 25% headroom.
    """
    n = metric.dim
    a, a0 = field_from_chart(metric)

    def F(x, z, xi):
        return np.sqrt(np.linalg.det(assemble(metric, x, z, xi, with_f=False).h))

    def hess(x, z, xi):
        return _xi_jacobian(a, x, z, xi, n)

    s = 0.5 * metric.r0 if box_radius is None else box_radius
    x, z, xi, eta = sample_l1_box(n, s, 512)
    av, ae = a(x, z, xi), a(x, z, eta)
    a0v = a0(x, z, xi)
    Fv = F(x, z, xi)
    d = xi - eta
    dd = np.sum(d * d, -1)
    ok = dd > 1e-20
    ratio = np.sum((av - ae) * d, -1)[ok] / dd[ok]
    ev = np.linalg.eigvals(hess(x, z, xi)).real
    nu = 1.25 * max(1.0 / ratio.min(), ratio.max(), 1.0 / ev.min(), ev.max())
    Lam = 1.25 * max(float(np.abs(a0v).max()), float(np.linalg.norm(av, axis=-1).max()), 1e-12)
    growth = Growth(p=2.0, lam=float(1.0 / nu), Lam=Lam, nu=float(nu), theta=_theta(a, metric, x, z, xi), c1=0.1,
                    c2=1.25 * float(Fv.max()), c3=0.0, phi=1.25 * float(Fv.max()), phi2=Lam)
    return EnergySpec(n, F, a, a0, hess, growth, name="riemann_area", variational=False,
                      locally_coercive=True, params={"metric": metric, "box_radius": s})


def _theta(a, metric, x, z, xi):
    n = metric.dim
    step = 1e-5 * metric.r0
    sq = 0.0
    for l in range(n + 1):
        if l < n:
            e = np.zeros(n)
            e[l] = step
            d = (a(x + e, z, xi) - a(x - e, z, xi)) / (2 * step)
        else:
            d = (a(x, z + step, xi) - a(x, z - step, xi)) / (2 * step)
        sq = sq + np.sum(d * d, -1)
    return 1.25 * float(np.sqrt(np.max(sq)))


# --------------------------------------------------------------------------- operator L

@dataclass
class NondivergenceCoefficients:
    c: np.ndarray   # [..., i, j] = d a_j / d xi_i
    d: np.ndarray


def nondivergence_coefficients(metric: Metric, x, z, xi) -> NondivergenceCoefficients:
    """c^{ij} = d_{xi_i} a_j and d = div_x a + d_z a . xi - a0, all by central differences."""
    n = metric.dim
    a, a0 = field_from_chart(metric)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    xi = np.asarray(xi, dtype=float)
    c = np.swapaxes(_xi_jacobian(a, x, z, xi, n), -1, -2)
    step = 1e-5 * metric.r0
    div_x = 0.0
    for l in range(n):
        e = np.zeros(n)
        e[l] = step
        div_x = div_x + (a(x + e, z, xi)[..., l] - a(x - e, z, xi)[..., l]) / (2 * step)
    dz = (a(x, z + step, xi) - a(x, z - step, xi)) / (2 * step)
    d = div_x + np.sum(dz * xi, axis=-1) - a0(x, z, xi)
    return NondivergenceCoefficients(c, d)


def apply_L(metric: Metric, u: Callable, x, step: float = 1e-3) -> np.ndarray:
    """L u(x) = c^{ij}(x, u, grad u) d_ij u + d(x, u, grad u) for a callable u of points.

    Derivatives of u are central differences with the given step (exact on quadratics).
    """
    n = metric.dim
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u0 = u(x)
    du = np.zeros(x.shape)
    d2u = np.zeros(x.shape + (n,))
    E = np.eye(n) * step
    for i in range(n):
        du[..., i] = (u(x + E[i]) - u(x - E[i])) / (2 * step)
        for j in range(n):
            d2u[..., i, j] = (u(x + E[i] + E[j]) - u(x + E[i] - E[j]) - u(x - E[i] + E[j])
                              + u(x - E[i] - E[j])) / (4 * step * step)
    co = nondivergence_coefficients(metric, x, u0, du)
    return np.einsum("...ij,...ij->...", co.c, d2u) + co.d


# --------------------------------------------------------------------------- s0

def sample_l1_box(n: int, s: float, count: int, scramble: bool = False, seed: int | None = None):
    """Samples (x, z, xi, eta) with |x| + |z| + |xi| < s and |x| + |z| + |eta| < s.

    Halton points of the cube [-s, s]^{3n+1} are filtered by rejection.
    """
    d = 3 * n + 1
    out = []
    got = 0
    batch = max(4 * count, 4096)
    sampler = qmc.Halton(d=d, scramble=scramble, seed=seed if scramble else None)
    if not scramble:
        sampler.fast_forward(1)
    while got < count:
        t = s * (2.0 * sampler.random(batch) - 1.0)
        x, z, xi, eta = t[:, :n], t[:, n], t[:, n + 1: 2 * n + 1], t[:, 2 * n + 1:]
        base = np.abs(x).sum(-1) + np.abs(z)
        ok = (base + np.linalg.norm(xi, axis=-1) < s) & (base + np.linalg.norm(eta, axis=-1) < s)
        out.append(t[ok])
        got += int(ok.sum())
    t = np.concatenate(out)[:count]
    return t[:, :n], t[:, n], t[:, n + 1: 2 * n + 1], t[:, 2 * n + 1:]


def coercivity_margin(metric: Metric, s: float, count: int = 4096, scramble: bool = False,
                      seed: int | None = None) -> float:
    """min over sampled pairs of (a(xi) - a(eta)) . (xi - eta) / |xi - eta|^2 in the s-box."""
    a, _ = field_from_chart(metric)
    x, z, xi, eta = sample_l1_box(metric.dim, s, count, scramble, seed)
    d = xi - eta
    dd = np.sum(d * d, -1)
    ok = dd > 1e-24
    q = np.sum((a(x, z, xi) - a(x, z, eta)) * d, -1)[ok] / dd[ok]
    return float(q.min())


@dataclass
class S0Result:
    s0: float
    margin: float
    bound: float
    lip: float
    kappa: float
    gnn_min: float
    trace: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"s0": self.s0, "margin": self.margin, "bound": self.bound, "lip_hinv": self.lip,
                "kappa": self.kappa, "gnn_min": self.gnn_min,
                "trace": [{"s": s, "bound": b} for s, b in self.trace]}


def _hinv_lipschitz(metric, x, z, xi):
    """Sampled bound on the derivative of (x, z, xi) -> h^{-1}: sqrt(sum_l |d_l h^{-1}|_2^2)."""
    n = metric.dim
    step = 1e-6 * metric.r0

    def hinv(x, z, xi):
        return assemble(metric, x, z, xi, with_f=False).h_inv

    sq = 0.0
    for l in range(2 * n + 1):
        if l < n:
            e = np.zeros(n)
            e[l] = step
            d = hinv(x + e, z, xi) - hinv(x - e, z, xi)
        elif l == n:
            d = hinv(x, z + step, xi) - hinv(x, z - step, xi)
        else:
            e = np.zeros(n)
            e[l - n - 1] = step
            d = hinv(x, z, xi + e) - hinv(x, z, xi - e)
        sq = sq + (np.linalg.norm(d / (2 * step), ord=2, axis=(-2, -1))) ** 2
    return float(np.sqrt(np.max(sq)))


def estimate_s0(metric: Metric, margin: float = 0.25, n_samples: int = 4096, levels: int = 12,
                s_max: float | None = None) -> S0Result:
    """Largest s = s_max 2^{-k} with g_nn (1/2 - Lip(h^{-1}) s) - kappa(s) >= margin on samples.

    Lip(h^{-1}) is the sampled derivative bound of h^{-1} over the box |x| + |z| + |xi| < s and
    kappa(s) the sampled size of the off-diagonal term |g_jn (h^{ji}(xi) - h^{ji}(eta))(xi_i - eta_i)| / |xi - eta|^2.
    """
    if not 0 < margin < 0.5:
        raise ConfigurationError(f"margin must lie in (0, 1/2), got {margin}", "hypotheses.s0_margin")
    n = metric.dim
    s = metric.r0 if s_max is None else float(s_max)
    trace = []
    for _ in range(levels):
        x, z, xi, eta = sample_l1_box(n, s, n_samples)
        lip = _hinv_lipschitz(metric, x, z, xi)
        cx = assemble(metric, x, z, xi, with_f=False)
        ce = assemble(metric, x, z, eta, with_f=False)
        gc = cx.g[..., :n, n]
        d = xi - eta
        dd = np.sum(d * d, -1)
        ok = dd > 1e-24
        off = np.einsum("...j,...ji,...i->...", gc, cx.h_inv - ce.h_inv, d)
        kappa = float(np.max(np.abs(off[ok]) / dd[ok])) if ok.any() else 0.0
        gnn = float(cx.g[..., n, n].min())
        bound = gnn * (0.5 - lip * s) - kappa
        trace.append((s, bound))
        if bound >= margin:
            return S0Result(s, margin, bound, lip, kappa, gnn, trace)
        s *= 0.5
    raise CoercivityError(f"no coercivity radius above {2 * s:.3g} reaches margin {margin}")


# --------------------------------------------------------------------------- reduction on a grid

@dataclass
class NondivergenceForm:
    A: np.ndarray
    q: np.ndarray
    minus_L_psi: np.ndarray
    violations: list
    q_check: dict


def reduce_nondivergence(metric: Metric, psi, sol: Solution, c0: float | None = None) -> NondivergenceForm:
    """A_nd(x) = c(x, psi, grad psi) and q = -L psi - (d(u) - d(psi)) chi - (c(u) - c(psi)) : D^2 u chi.

    chi is the indicator of the non-contact set. Ellipticity of A_nd is checked at interior
    nodes; when ``c0`` is given, q >= c0/2 is checked where -L psi >= c0.
    """
    grid: Grid = sol.grid
    psi = grid.sample(psi)
    u = sol.u
    x = grid.points
    gpsi, gu = gradient(grid, psi), gradient(grid, u)
    Hpsi, Hu = hessian(grid, psi), hessian(grid, u)
    cp = nondivergence_coefficients(metric, x, psi, gpsi)
    cu = nondivergence_coefficients(metric, x, u, gu)
    L_psi = np.einsum("...ij,...ij->...", cp.c, Hpsi) + cp.d
    chi = (~sol.active).astype(float)
    q = -L_psi - (cu.d - cp.d) * chi - np.einsum("...ij,...ij->...", cu.c - cp.c, Hu) * chi
    sym = 0.5 * (cp.c + np.swapaxes(cp.c, -1, -2))
    ev = np.linalg.eigvalsh(sym)
    bad = (ev[..., 0] <= 0) & grid.interior
    violations = [{"node": [int(i) for i in idx], "eigenvalues": ev[tuple(idx)].tolist()} for idx in np.argwhere(bad)]
    q_check = {}
    if c0 is not None:
        where = (-L_psi >= c0) & grid.interior
        q_min = float(q[where].min()) if where.any() else float("nan")
        q_check = {"c0": float(c0), "q_min": q_min, "pass": bool(where.any() and q_min >= c0 / 2),
                   "nodes": int(where.sum())}
    return NondivergenceForm(cp.c, q, -L_psi, violations, q_check)
