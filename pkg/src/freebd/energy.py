"""Energy densities F(x, z, xi), their derivatives, presets and sampled structural checks.

All callbacks are vectorised: ``x`` has shape ``(..., n)``, ``z`` shape ``(...)``
and ``xi`` shape ``(..., n)``. They return F ``(...)``, a = grad_xi F ``(..., n)``,
a0 = dF/dz ``(...)`` and the xi-Hessian ``(..., n, n)`` with entry ``[i, j]`` equal
to ``d a_i / d xi_j``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import ConfigurationError, EvaluationError

__all__ = [
    "Growth", "EnergySpec", "Box", "HypothesisRecord", "HypothesisReport",
    "quadratic", "p_energy", "area", "custom_field", "make_preset", "check_hypotheses",
    "halton_points", "derivative_consistency",
]

FD_STEP = 1e-4


@dataclass(frozen=True)
class Growth:
    """Declared structural constants.

    ``phi1``/``phi2``/``phi`` stand for the integrable majorants, taken constant.
    ``p_star`` is the exponent on |z| in the upper growth bound.
    """

    p: float = 2.0
    lam: float = 1.0
    Lam: float = 1.0
    nu: float = 2.0
    theta: float = 0.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 0.0
    phi: float = 0.0
    phi1: float = 0.0
    phi2: float = 0.0
    lam1: float = 0.0
    p_star: float = 2.0

    def __post_init__(self):
        if not self.p > 1:
            raise ConfigurationError(f"exponent must exceed 1, got {self.p}", "growth.p")
        if not self.nu > 1:
            raise ConfigurationError(f"convexity constant must exceed 1, got {self.nu}", "growth.nu")
        for name in ("lam", "Lam", "c1", "c2"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"must be positive, got {getattr(self, name)}", f"growth.{name}")
        for name in ("theta", "c3", "phi", "phi1", "phi2", "lam1"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"must be non-negative, got {getattr(self, name)}", f"growth.{name}")


@dataclass(frozen=True)
class EnergySpec:
    dim: int
    eval_F: Callable
    eval_a: Callable
    eval_a0: Callable
    eval_hess: Callable
    growth: Growth
    name: str = "custom"
    # False when a is not the xi-gradient of eval_F (chart fields)
    variational: bool = True
    # coercive only on a bounded box of arguments
    locally_coercive: bool = False
    params: dict = field(default_factory=dict, compare=False)

    def evaluate(self, x, z, xi):
        """Return (F, a, a0, hess) at the given arguments, rejecting non-finite output."""
        x, z, xi = _args(self.dim, x, z, xi)
        out = (self.eval_F(x, z, xi), self.eval_a(x, z, xi), self.eval_a0(x, z, xi), self.eval_hess(x, z, xi))
        for name, val in zip(("F", "a", "a0", "hess"), out):
            _require_finite(val, name, x, z, xi)
        return out


def _args(n, x, z, xi):
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x.shape[-1:] != (n,) or xi.shape[-1:] != (n,):
        raise ValueError(f"x and xi need a trailing axis of length {n}")
    z = np.asarray(z, dtype=float)
    return x, z, xi


def _require_finite(val, name, x, z, xi):
    val = np.asarray(val)
    bad = ~np.isfinite(val)
    if bad.any():
        idx = np.argwhere(bad)[0]
        lead = tuple(idx[: x.ndim - 1])
        point = {
            "x": np.asarray(x[lead]).tolist(),
            "z": float(np.broadcast_to(z, x.shape[:-1])[lead]),
            "xi": np.asarray(xi[lead]).tolist(),
        }
        raise EvaluationError(f"{name} is not finite", point)


def _field(value, n, trailing=()):
    """Normalise a constant or a callable of points into a callable of points."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    if arr.shape not in ((), trailing):
        raise ConfigurationError(f"expected a scalar or shape {trailing}, got {arr.shape}")

    def const(x):
        return np.broadcast_to(arr, np.shape(x)[:-1] + trailing)

    return const


def _matrix_bounds(A_of_x, n, probe):
    """Extreme eigenvalues and a Lipschitz estimate of a matrix field over probe points."""
    A = np.asarray(A_of_x(probe), dtype=float)
    A = np.broadcast_to(A, probe.shape[:-1] + (n, n))
    if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=1e-12, atol=1e-14):
        raise ConfigurationError("matrix field is not symmetric", "problem.A")
    ev = np.linalg.eigvalsh(A)
    if ev.min() <= 0:
        raise ConfigurationError(f"matrix field is not positive definite (eigenvalue {ev.min():.3g})", "problem.A")
    # Frobenius norm of the spatial derivative, by central differences, with 10% headroom
    delta = 1e-5
    sq = np.zeros(len(probe))
    for k in range(n):
        e = np.zeros(n)
        e[k] = delta
        dk = (np.broadcast_to(A_of_x(probe + e), A.shape) - np.broadcast_to(A_of_x(probe - e), A.shape)) / (2 * delta)
        sq += np.sum(dk * dk, axis=(-1, -2))
    lip = 1.1 * float(np.sqrt(sq.max()))
    return float(ev.min()), float(ev.max()), lip


def _probe(n, bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    t = halton_points(n, 512)
    # extremes of smooth fields often sit on the corners of the box
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
    return lo + np.concatenate([t, corners]) * (hi - lo)


# --------------------------------------------------------------------------- presets

def quadratic(A=None, f=0.0, dim: int = 2, bounds=None, z_max: float = 1.0) -> EnergySpec:
    """F = A(x) xi.xi + 2 f(x) z.

    ``A`` and ``f`` are constants or callables of points; ``bounds`` is the box
    used to read off the growth constants and ``z_max`` bounds |z| there.
    """
    n = dim
    if A is None:
        A = np.eye(n)
    A_of_x = _field(A, n, (n, n))
    f_of_x = _field(f, n)
    bounds = bounds or [(-1.0, 1.0)] * n
    probe = _probe(n, bounds)
    lmin, lmax, lipA = _matrix_bounds(A_of_x, n, probe)
    fmax = float(np.max(np.abs(np.broadcast_to(f_of_x(probe), probe.shape[:-1]))))

    def F(x, z, xi):
        Ax = np.broadcast_to(A_of_x(x), xi.shape + (n,))
        return np.einsum("...i,...ij,...j->...", xi, Ax, xi) + 2.0 * f_of_x(x) * z

    def a(x, z, xi):
        Ax = np.broadcast_to(A_of_x(x), xi.shape + (n,))
        return 2.0 * np.einsum("...ij,...j->...i", Ax, xi)

    def a0(x, z, xi):
        return np.broadcast_to(2.0 * f_of_x(x), np.broadcast_shapes(np.shape(z), x.shape[:-1])).astype(float)

    def hess(x, z, xi):
        return np.broadcast_to(2.0 * np.asarray(A_of_x(x), dtype=float), xi.shape + (n,)).copy()

    growth = Growth(
        p=2.0, lam=2.0 * lmin, Lam=2.0 * lmax, nu=max(2.0 * lmax, 1.0 / (2.0 * lmin), 1.0 + 1e-12),
        theta=2.0 * lipA, c1=lmin, c2=lmax, c3=0.0, phi=2.0 * fmax * z_max, phi2=2.0 * fmax, p_star=2.0,
    )
    return EnergySpec(n, F, a, a0, hess, growth, name="quadratic",
                      params={"A": A_of_x, "f": f_of_x, "lambda_min": lmin, "lambda_max": lmax})


def p_energy(p: float, dim: int = 2, f=None, z_max: float = 1.0, bounds=None) -> EnergySpec:
    """F = (1 + |xi|^2)^{p/2}, plus 2 f(x) z when a source is given."""
    if not p > 1:
        raise ConfigurationError(f"exponent must exceed 1, got {p}", "problem.p")
    n = dim
    f_of_x = _field(0.0 if f is None else f, n)
    bounds = bounds or [(-1.0, 1.0)] * n
    fmax = float(np.max(np.abs(np.broadcast_to(f_of_x(_probe(n, bounds)), (512 + 2 ** n,)))))

    def F(x, z, xi):
        s = np.sum(xi * xi, axis=-1)
        return (1.0 + s) ** (p / 2) + 2.0 * f_of_x(x) * z

    def a(x, z, xi):
        s = np.sum(xi * xi, axis=-1)
        return (p * (1.0 + s) ** (p / 2 - 1))[..., None] * xi

    def a0(x, z, xi):
        return np.broadcast_to(2.0 * f_of_x(x), np.broadcast_shapes(np.shape(z), x.shape[:-1])).astype(float)

    def hess(x, z, xi):
        s = np.sum(xi * xi, axis=-1)[..., None, None]
        eye = np.eye(n)
        outer = xi[..., :, None] * xi[..., None, :]
        return p * (1.0 + s) ** (p / 2 - 1) * eye + p * (p - 2) * (1.0 + s) ** (p / 2 - 2) * outer

    # hessian eigenvalues are p(1+s)^{p/2-1} and p(p-1)(1+s)^{p/2-1}; (1+s)^{1/2} lies
    # within a factor sqrt(2) of 1+|xi|, which costs 2^{|p-2|/2} on either side, and
    # averaging the weight over a segment through 0 costs another 2^{|p-2|} max(p-1, 1/(p-1))
    slack = 2.0 ** (abs(p - 2) / 2) * 2.0 ** abs(p - 2) * max(p - 1, 1 / (p - 1))
    lo, hi = min(p, p * (p - 1)), max(p, p * (p - 1))
    nu = max(hi * slack, slack / lo, 1.0 + 1e-12)
    Lam = p * 2.0 ** (max(p - 2, 0) / 2)
    c2 = 2.0 ** max(p / 2 - 1, 0)
    growth = Growth(
        p=float(p), lam=min(1.0, p), Lam=Lam, nu=nu, theta=0.0, c1=1.0, c2=c2, c3=0.0,
        phi=c2 + 1.0 + 2.0 * fmax * z_max, phi2=Lam + 2.0 * fmax,
        p_star=float(p) if p >= n else n * p / (n - p),
    )
    return EnergySpec(n, F, a, a0, hess, growth, name="p_energy", params={"p": float(p), "f": f_of_x})


def area(dim: int = 2, xi_max: float = 1.0, f=None, z_max: float = 1.0, bounds=None) -> EnergySpec:
    """Graph area F = sqrt(1 + |xi|^2), optionally plus 2 f(x) z.

    Only coercive on bounded gradients; the declared constants hold for |xi| <= xi_max.
    """
    n = dim
    f_of_x = _field(0.0 if f is None else f, n)
    bounds = bounds or [(-1.0, 1.0)] * n
    fmax = float(np.max(np.abs(np.broadcast_to(f_of_x(_probe(n, bounds)), (512 + 2 ** n,)))))
    R = float(xi_max)

    def F(x, z, xi):
        return np.sqrt(1.0 + np.sum(xi * xi, axis=-1)) + 2.0 * f_of_x(x) * z

    def a(x, z, xi):
        return xi / np.sqrt(1.0 + np.sum(xi * xi, axis=-1))[..., None]

    def a0(x, z, xi):
        return np.broadcast_to(2.0 * f_of_x(x), np.broadcast_shapes(np.shape(z), x.shape[:-1])).astype(float)

    def hess(x, z, xi):
        s = np.sum(xi * xi, axis=-1)[..., None, None]
        outer = xi[..., :, None] * xi[..., None, :]
        return ((1.0 + s) * np.eye(n) - outer) / (1.0 + s) ** 1.5

    growth = Growth(
        p=2.0, lam=(1.0 + R * R) ** -1.5, Lam=1.0, nu=max((1.0 + R * R) ** 1.5, 1.0 + 1e-12), theta=0.0,
        c1=0.5 / max(R, 1.0), c2=0.5, c3=0.0, phi=1.0 + 2.0 * fmax * z_max, phi2=1.0 + 2.0 * fmax, p_star=2.0,
    )
    return EnergySpec(n, F, a, a0, hess, growth, name="area", locally_coercive=True,
                      params={"xi_max": R, "f": f_of_x})


def custom_field(A=None, a0=0.0, dim: int = 2, bounds=None, z_max: float = 1.0) -> EnergySpec:
    """Field a = A(x) xi with a user zeroth-order term a0(x, z).

    ``a0`` is a constant or a callable ``a0(points, z)``. The energy reported is
    F = A xi.xi / 2 + a0(x, z) z, a potential of the field only when a0 does not depend on z;
    the EnergySpec is marked variational only for callables flagged ``z_free``.
    """
    n = dim
    if A is None:
        A = np.eye(n)
    A_of_x = _field(A, n, (n, n))
    if callable(a0):
        a0_of = a0
        z_free = bool(getattr(a0, "z_free", False))
    else:
        c = float(a0)
        z_free = True

        def a0_of(x, z):
            return np.full(np.broadcast_shapes(np.shape(z), np.shape(x)[:-1]), c)

    bounds = bounds or [(-1.0, 1.0)] * n
    probe = _probe(n, bounds)
    lmin, lmax, lipA = _matrix_bounds(A_of_x, n, probe)
    zs = np.linspace(-z_max, z_max, 9)
    a0max = max(float(np.max(np.abs(a0_of(probe, np.full(len(probe), zk))))) for zk in zs)

    def _a0(x, z):
        return np.broadcast_to(np.asarray(a0_of(x, z), dtype=float),
                               np.broadcast_shapes(np.shape(z), x.shape[:-1])).astype(float)

    def F(x, z, xi):
        Ax = np.broadcast_to(A_of_x(x), xi.shape + (n,))
        return 0.5 * np.einsum("...i,...ij,...j->...", xi, Ax, xi) + _a0(x, z) * z

    def a(x, z, xi):
        Ax = np.broadcast_to(A_of_x(x), xi.shape + (n,))
        return np.einsum("...ij,...j->...i", Ax, xi)

    def a0f(x, z, xi):
        return _a0(x, z)

    def hess(x, z, xi):
        return np.broadcast_to(np.asarray(A_of_x(x), dtype=float), xi.shape + (n,)).copy()

    growth = Growth(
        p=2.0, lam=lmin, Lam=lmax, nu=max(lmax, 1.0 / lmin, 1.0 + 1e-12), theta=lipA,
        c1=0.5 * lmin, c2=0.5 * lmax + 1.0, c3=a0max, phi=a0max * z_max + a0max, phi2=a0max, p_star=2.0,
    )
    return EnergySpec(n, F, a, a0f, hess, growth, name="custom_field", variational=z_free,
                      params={"A": A_of_x, "lambda_min": lmin, "lambda_max": lmax})


def make_preset(kind: str, **params) -> EnergySpec:
    """Build a preset by name: quadratic, p_energy, area, custom_field or riemann_area."""
    if kind == "quadratic":
        return quadratic(**params)
    if kind == "p_energy":
        if "p" not in params:
            raise ConfigurationError("p_energy needs an exponent", "problem.p")
        return p_energy(**params)
    if kind == "area":
        return area(**params)
    if kind == "custom_field":
        return custom_field(**params)
    if kind == "riemann_area":
        from .riemann import chart_energy
        return chart_energy(**params)
    raise ConfigurationError(f"unknown preset {kind!r}", "problem.kind")


# --------------------------------------------------------------------------- sampling

def halton_points(d: int, count: int, scramble: bool = False, seed: int | None = None) -> np.ndarray:
    """Low-discrepancy points in [0,1)^d; the unscrambled sequence skips its origin."""
    sampler = qmc.Halton(d=d, scramble=scramble, seed=seed)
    if not scramble:
        sampler.fast_forward(1)
    return sampler.random(count)


def ball(t: np.ndarray, radius: float) -> np.ndarray:
    """Map uniform samples in [0,1)^n (n = 1 or 2) onto the closed ball of given radius."""
    n = t.shape[-1]
    if n == 1:
        return radius * (2.0 * t - 1.0)
    r = radius * np.sqrt(t[..., 0])
    th = 2.0 * np.pi * t[..., 1]
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


@dataclass(frozen=True)
class Box:
    """Sampling region: x in a rectangle, z in an interval, xi in a ball."""

    x_bounds: tuple[tuple[float, float], ...]
    z_range: tuple[float, float] = (-1.0, 1.0)
    xi_radius: float = 1.0

    @property
    def dim(self) -> int:
        return len(self.x_bounds)

    def map(self, t: np.ndarray):
        n = self.dim
        lo = np.array([b[0] for b in self.x_bounds])
        hi = np.array([b[1] for b in self.x_bounds])
        x = lo + t[:, :n] * (hi - lo)
        z = self.z_range[0] + t[:, n] * (self.z_range[1] - self.z_range[0])
        xi = ball(t[:, n + 1: 2 * n + 1], self.xi_radius)
        return x, z, xi


@dataclass
class HypothesisRecord:
    name: str
    verdict: str
    margin: float
    worst_point: dict


@dataclass
class HypothesisReport:
    records: list[HypothesisRecord]
    n_samples: int
    box: Box

    @property
    def passed(self) -> bool:
        return all(r.verdict == "pass" for r in self.records)

    def __getitem__(self, name: str) -> HypothesisRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "box": asdict(self.box),
            "checks": {r.name: {"verdict": r.verdict, "margin": r.margin, "worst_point": r.worst_point}
                       for r in self.records},
        }


def _record(name, margin, points):
    k = int(np.argmin(margin))
    worst = {key: np.asarray(val[k]).tolist() for key, val in points.items()}
    m = float(margin[k])
    return HypothesisRecord(name, "pass" if m >= 0 else "fail", m, worst)


def check_hypotheses(spec: EnergySpec, box: Box, n_samples: int = 4096) -> HypothesisReport:
    """Evaluate the structural inequalities on a deterministic Halton sample of ``box``.

    Checks H1ii (growth of a and a0), H1iii' (Lipschitz dependence of a on (x, z)),
    H2' (two-sided monotonicity of a), Fgrowth (two-sided bounds on F) and Funcvx
    (two-sided Hessian bounds). Ratio-type inequalities report normalised margins,
    the others absolute ones.
    """
    if n_samples < 1:
        raise ConfigurationError("need at least one sample", "hypotheses.samples")
    if box.dim != spec.dim:
        raise ConfigurationError("sampling box dimension does not match the energy", "hypotheses.box")
    n = spec.dim
    g = spec.growth
    p = g.p
    t = halton_points(2 * (2 * n + 1), n_samples)
    x, z, xi = box.map(t[:, : 2 * n + 1])
    y, zeta, eta = box.map(t[:, 2 * n + 1:])

    F, a, a0, H = spec.evaluate(x, z, xi)
    _, a_eta, _, _ = spec.evaluate(x, z, eta)
    _, a_y, _, _ = spec.evaluate(y, zeta, xi)

    nxi = np.linalg.norm(xi, axis=-1)
    neta = np.linalg.norm(eta, axis=-1)
    az = np.abs(z)
    records = []

    # H1ii: |a0| v |a| <= Lam(|z|^{p-1} + |xi|^{p-1}) + phi2
    bound = g.Lam * (az ** (p - 1) + nxi ** (p - 1)) + g.phi2
    lhs = np.maximum(np.abs(a0), np.linalg.norm(a, axis=-1))
    records.append(_record("H1ii", bound - lhs, {"x": x, "z": z, "xi": xi}))

    # H1iii': |a(x,z,xi) - a(y,zeta,xi)| <= Theta(|x-y| + |z-zeta|)(1 + |xi|^{p-1})
    bound = g.theta * (np.linalg.norm(x - y, axis=-1) + np.abs(z - zeta)) * (1.0 + nxi ** (p - 1))
    lhs = np.linalg.norm(a - a_y, axis=-1)
    records.append(_record("H1iii'", bound - lhs, {"x": x, "y": y, "z": z, "zeta": zeta, "xi": xi}))

    # H2': nu^{-1} <= (a(xi)-a(eta)).(xi-eta) / ((1+|xi|+|eta|)^{p-2}|xi-eta|^2) <= nu
    d = xi - eta
    dd = np.sum(d * d, axis=-1)
    keep = dd > 1e-24
    ratio = np.sum((a - a_eta) * d, axis=-1)[keep] / ((1.0 + nxi + neta)[keep] ** (p - 2) * dd[keep])
    margin = np.minimum(ratio - 1.0 / g.nu, g.nu - ratio)
    records.append(_record("H2'", margin, {"x": x[keep], "z": z[keep], "xi": xi[keep], "eta": eta[keep]}))

    # Fgrowth: c1|xi|^p - phi <= F <= c2|xi|^p + c3|z|^{p*} + phi
    lower = F - (g.c1 * nxi ** p - g.phi)
    upper = g.c2 * nxi ** p + g.c3 * az ** g.p_star + g.phi - F
    records.append(_record("Fgrowth", np.minimum(lower, upper), {"x": x, "z": z, "xi": xi}))

    # Funcvx: nu^{-1}(1+|eta|)^{p-2} <= eig(hess at eta) <= nu(1+|eta|)^{p-2}, here at xi
    Hs = 0.5 * (H + np.swapaxes(H, -1, -2))
    ev = np.linalg.eigvalsh(Hs)
    w = (1.0 + nxi) ** (p - 2)
    margin = np.minimum(ev[..., 0] / w - 1.0 / g.nu, g.nu - ev[..., -1] / w)
    records.append(_record("Funcvx", margin, {"x": x, "z": z, "xi": xi}))

    return HypothesisReport(records, n_samples, box)


def derivative_consistency(spec: EnergySpec, x, z, xi, delta: float = FD_STEP):
    """Central-difference residuals of a against F and of hess against a.

    Returns ``(err_a, err_hess)`` with the largest absolute deviation per sample.
    """
    x, z, xi = _args(spec.dim, x, z, xi)
    n = spec.dim
    fd_a = np.zeros(xi.shape)
    fd_h = np.zeros(xi.shape + (n,))
    for j in range(n):
        e = np.zeros(n)
        e[j] = delta
        fd_a[..., j] = (spec.eval_F(x, z, xi + e) - spec.eval_F(x, z, xi - e)) / (2 * delta)
        fd_h[..., :, j] = (spec.eval_a(x, z, xi + e) - spec.eval_a(x, z, xi - e)) / (2 * delta)
    err_a = np.max(np.abs(fd_a - spec.eval_a(x, z, xi)), axis=-1)
    err_h = np.max(np.abs(fd_h - spec.eval_hess(x, z, xi)), axis=(-1, -2))
    return err_a, err_h
