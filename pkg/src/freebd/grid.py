"""Uniform rectangular grids in 1D/2D and the discrete calculus used everywhere else.

Scalar fields are numpy arrays of shape ``grid.shape``; vector fields carry a
trailing axis of length ``grid.dim`` and matrix fields two trailing axes.
Axis ``k`` of a field array corresponds to coordinate ``x_k`` ("ij" indexing).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError

__all__ = [
    "Grid",
    "gradient",
    "divergence",
    "hessian",
    "line_quadrature",
    "gauss_legendre_01",
    "norms",
    "Norms",
]


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid with ``shape[k]`` nodes on ``[bounds[k][0], bounds[k][1]]``."""

    bounds: tuple[tuple[float, float], ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        bounds = tuple((float(a), float(b)) for a, b in self.bounds)
        shape = tuple(int(n) for n in self.shape)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "shape", shape)
        if len(bounds) != len(shape) or len(shape) not in (1, 2):
            raise ConfigurationError("grid must be 1D or 2D with one bound pair per axis", "domain.dim")
        for (a, b), n in zip(bounds, shape):
            if not b > a:
                raise ConfigurationError(f"bounds [{a}, {b}] are not well ordered", "domain.bounds")
            if n < 3:
                raise ConfigurationError(f"need at least 3 nodes per axis, got {n}", "domain.resolution")

    @classmethod
    def uniform(cls, bounds: Sequence[Sequence[float]], shape: Sequence[int] | int) -> "Grid":
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),) * len(bounds)
        return cls(tuple(tuple(b) for b in bounds), tuple(shape))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / (n - 1) for (a, b), n in zip(self.bounds, self.shape))

    @property
    def h(self) -> float:
        """Largest spacing; the mesh size used in tolerances."""
        return max(self.spacing)

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        out = []
        for (a, b), n in zip(self.bounds, self.shape):
            t = np.linspace(a, b, n)
            t[0], t[-1] = a, b
            out.append(t)
        return tuple(out)

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (dim,)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def interior(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[(slice(1, -1),) * self.dim] = True
        return mask

    @property
    def boundary(self) -> np.ndarray:
        return ~self.interior

    def collar(self, width: int) -> np.ndarray:
        """Nodes at least ``width + 1`` index steps away from the boundary."""
        mask = np.zeros(self.shape, dtype=bool)
        w = width + 1
        if all(n > 2 * w for n in self.shape):
            mask[(slice(w, -w),) * self.dim] = True
        return mask

    def distance_to_boundary(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo = np.array([a for a, _ in self.bounds])
        hi = np.array([b for _, b in self.bounds])
        return np.min(np.minimum(x - lo, hi - x), axis=-1)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self.distance_to_boundary(x) >= 0.0

    def check(self, values: np.ndarray, trailing: tuple[int, ...] = ()) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != self.shape + trailing:
            raise ValueError(f"field shape {values.shape} does not match grid {self.shape + trailing}")
        return values

    def sample(self, value) -> np.ndarray:
        """Turn a scalar, callable of points, or node array into a node array."""
        if callable(value):
            out = np.asarray(value(self.points), dtype=float)
            return np.broadcast_to(out, self.shape).copy()
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            return np.full(self.shape, float(arr))
        return self.check(arr)

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.bounds, tuple((n - 1) * factor + 1 for n in self.shape))

    def interpolator(self, values: np.ndarray) -> RegularGridInterpolator:
        """(Bi)linear interpolant of a node field; extra trailing axes are carried along."""
        return RegularGridInterpolator(self.axes, np.asarray(values, dtype=float), method="linear",
                                       bounds_error=False, fill_value=None)

    def dilate(self, mask: np.ndarray, cells: int) -> np.ndarray:
        """Grow ``mask`` by ``cells`` steps in the max-norm (index) metric."""
        if cells <= 0 or not mask.any():
            return mask.copy()
        structure = np.ones((3,) * self.dim, dtype=bool)
        return ndimage.binary_dilation(mask, structure=structure, iterations=cells)

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "bounds": [list(b) for b in self.bounds],
            "resolution": list(self.shape),
            "spacing": list(self.spacing),
        }


def gradient(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Central differences inside, second-order one-sided differences on the boundary."""
    f = grid.check(f)
    parts = np.gradient(f, *grid.axes, edge_order=2)
    if grid.dim == 1:
        parts = [parts]
    return np.stack(parts, axis=-1)


def divergence(grid: Grid, v: np.ndarray) -> np.ndarray:
    v = grid.check(v, (grid.dim,))
    out = np.zeros(grid.shape)
    for k in range(grid.dim):
        out += np.gradient(v[..., k], grid.axes[k], axis=k, edge_order=2)
    return out


def hessian(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Second derivatives: compact three-point differences on the diagonal,
    central-of-central for the mixed entry."""
    f = grid.check(f)
    n = grid.dim
    out = np.zeros(grid.shape + (n, n))
    for k in range(n):
        hk = grid.spacing[k]
        d2 = np.zeros(grid.shape)
        inner = [slice(None)] * n
        inner[k] = slice(1, -1)
        d2[tuple(inner)] = (np.take(f, range(2, grid.shape[k]), axis=k)
                            - 2.0 * np.take(f, range(1, grid.shape[k] - 1), axis=k)
                            + np.take(f, range(0, grid.shape[k] - 2), axis=k)) / hk**2
        # copy the nearest interior value onto the two faces normal to axis k
        for edge, src in ((0, 1), (-1, -2)):
            dst = [slice(None)] * n
            dst[k] = edge
            s = [slice(None)] * n
            s[k] = src
            d2[tuple(dst)] = d2[tuple(s)]
        out[..., k, k] = d2
    if n == 2:
        g = gradient(grid, f)
        mixed = np.gradient(g[..., 0], grid.axes[1], axis=1, edge_order=2)
        out[..., 0, 1] = out[..., 1, 0] = mixed
    return out


def gauss_legendre_01(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the m-point Gauss-Legendre rule on [0, 1]."""
    if m < 1:
        raise ValueError("quadrature needs at least one node")
    t, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (t + 1.0), 0.5 * w


def line_quadrature(phi: Callable[[float], np.ndarray], m: int = 5):
    t, w = gauss_legendre_01(m)
    total = 0.0
    for tk, wk in zip(t, w):
        total = total + wk * np.asarray(phi(tk), dtype=float)
    return total


class Norms(NamedTuple):
    sup: float
    l2: float
    c11: float


def norms(grid: Grid, f: np.ndarray, mask: np.ndarray | None = None) -> Norms:
    """Sup norm, trapezoidal L2 norm and the C^{1,1} seminorm (largest pure or mixed second difference quotient).

    ``mask`` restricts the sup norm and the seminorm to a set of nodes; the
    seminorm only uses nodes whose three-point stencil along the axis exists.
    """
    f = grid.check(f)
    sel = np.ones(grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sup = float(np.max(np.abs(f[sel]))) if sel.any() else 0.0

    sq = f * f
    for k in reversed(range(grid.dim)):
        sq = np.trapezoid(sq, grid.axes[k], axis=k)
    l2 = float(np.sqrt(sq))

    c11 = 0.0
    for k in range(grid.dim):
        n = grid.shape[k]
        d2 = (np.take(f, range(2, n), axis=k) - 2.0 * np.take(f, range(1, n - 1), axis=k)
              + np.take(f, range(0, n - 2), axis=k)) / grid.spacing[k] ** 2
        m = np.take(sel, range(1, n - 1), axis=k)
        if m.any():
            c11 = max(c11, float(np.max(np.abs(d2[m]))))
    if grid.dim == 2:
        hx, hy = grid.spacing
        mixed = (f[2:, 2:] - f[2:, :-2] - f[:-2, 2:] + f[:-2, :-2]) / (4.0 * hx * hy)
        m = sel[1:-1, 1:-1]
        if m.any():
            c11 = max(c11, float(np.max(np.abs(mixed[m]))))
    return Norms(sup, l2, c11)
