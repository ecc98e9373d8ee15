"""Discretized Pearson-regularized UOT problem.

Every integral uses the midpoint rule on the uniform cell grids of the two
densities, so that marginals, norms and objectives are all the same finite
sums and discrete duality holds to round-off.

Grid functions on a d-dimensional density grid are stored flattened in
row-major order; product-grid functions have shape ``(f.size, g.size)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (FeasibilityViolation, GridMismatch, InvalidDelta,
                     InvalidDensity, InvalidParameter)


@dataclass
class GridDensity:
    """Density sampled at the cell centres of a uniform box grid."""

    lo: tuple
    hi: tuple
    n: tuple
    values: np.ndarray
    c_lower: float

    def __post_init__(self):
        self.lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        self.hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        self.n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(self.lo) == len(self.hi) == len(self.n)):
            raise GridMismatch("lo, hi and n must have one entry per axis")
        if any(b <= a for a, b in zip(self.lo, self.hi)) or any(k < 1 for k in self.n):
            raise InvalidDensity("support volume must be positive")
        vals = np.asarray(self.values, dtype=float)
        if vals.size != int(np.prod(self.n)):
            raise GridMismatch(f"expected {int(np.prod(self.n))} values, got {vals.size}")
        self.values = vals.reshape(self.n)
        self.c_lower = float(self.c_lower)
        if not np.all(np.isfinite(self.values)):
            raise InvalidDensity("density values must be finite")
        if not self.c_lower > 0:
            raise InvalidDensity("lower bound c must be positive")
        if self.values.min() < self.c_lower:
            raise InvalidDensity(
                f"density value {self.values.min():.6g} below lower bound {self.c_lower:.6g}")

    @classmethod
    def uniform(cls, lo, hi, n, value=1.0):
        n = tuple(int(v) for v in np.atleast_1d(n))
        return cls(lo, hi, n, np.full(n, float(value)), float(value))

    @classmethod
    def from_function(cls, lo, hi, n, fn: Callable, c_lower=None):
        """Sample ``fn(points)`` (points of shape (size, d)) at cell centres."""
        proto = cls.uniform(lo, hi, n)
        vals = np.asarray(fn(proto.points), dtype=float).reshape(proto.n)
        c = vals.min() if c_lower is None else c_lower
        return cls(proto.lo, proto.hi, proto.n, vals, c)

    def with_values(self, values, c_lower=None):
        values = np.asarray(values, dtype=float)
        c = values.min() if c_lower is None else c_lower
        return GridDensity(self.lo, self.hi, self.n, values.reshape(self.n), c)

    @property
    def d(self):
        return len(self.n)

    @property
    def h(self):
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.n)

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    @property
    def size(self):
        return int(np.prod(self.n))

    @property
    def volume(self):
        # |Omega| as cell volume times cell count
        return self.cell_volume * self.size

    @property
    def flat(self):
        return self.values.ravel()

    @property
    def sup(self):
        return float(self.values.max())

    @property
    def mass(self):
        return float(self.flat.sum() * self.cell_volume)

    def centers(self, axis=0):
        a, b, k = self.lo[axis], self.hi[axis], self.n[axis]
        return a + (np.arange(k) + 0.5) * (b - a) / k

    def edges(self, axis=0):
        return np.linspace(self.lo[axis], self.hi[axis], self.n[axis] + 1)

    @property
    def points(self):
        mesh = np.meshgrid(*[self.centers(a) for a in range(self.d)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def same_grid(self, other):
        return self.lo == other.lo and self.hi == other.hi and self.n == other.n


@dataclass
class CostGrid:
    """Cost C(x_i, y_j) on the product grid, shape (f.size, g.size)."""

    values: np.ndarray
    tag: str = "values"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise GridMismatch("cost values must be a 2-D (x, y) array")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0:
            raise InvalidParameter("cost must be finite and nonnegative")

    @classmethod
    def zeros(cls, f: GridDensity, g: GridDensity):
        return cls(np.zeros((f.size, g.size)), "zero")

    @classmethod
    def squared_distance(cls, f: GridDensity, g: GridDensity):
        diff = f.points[:, None, :] - g.points[None, :, :]
        return cls((diff ** 2).sum(-1), "squared_distance")

    @classmethod
    def from_function(cls, f: GridDensity, g: GridDensity, fn: Callable, tag="function"):
        """``fn(x, y)`` receives broadcastable point arrays (Nx,1,d), (1,Ny,d)."""
        return cls(fn(f.points[:, None, :], g.points[None, :, :]), tag)

    def holder_modulus(self, f: GridDensity, g: GridDensity, gamma=1.0):
        """Largest neighbour difference divided by h**gamma over both grids."""
        C = self.values.reshape(f.n + g.n)
        hs = np.concatenate([f.h, g.h])
        worst = 0.0
        for ax in range(C.ndim):
            if C.shape[ax] > 1:
                worst = max(worst, np.abs(np.diff(C, axis=ax)).max() / hs[ax] ** gamma)
        return float(worst)


@dataclass
class ProblemSpec:
    f: GridDensity
    g: GridDensity
    C: CostGrid
    delta: float
    quadrature: str = "midpoint"

    def __post_init__(self):
        self.delta = float(self.delta)
        if not self.delta > 0:
            raise InvalidParameter("delta must be positive")
        if self.C.values.shape != (self.f.size, self.g.size):
            raise GridMismatch(
                f"cost shape {self.C.values.shape} does not match grids "
                f"({self.f.size}, {self.g.size})")
        if self.quadrature != "midpoint":
            raise InvalidParameter("only the midpoint rule is supported")

    @property
    def hx(self):
        return self.f.cell_volume

    @property
    def hy(self):
        return self.g.cell_volume

    @property
    def c(self):
        return min(self.f.c_lower, self.g.c_lower)

    @property
    def E(self):
        return max(self.f.sup, self.g.sup)

    @property
    def vol_max(self):
        return max(self.f.volume, self.g.volume)

    def check_delta(self):
        if self.delta * self.vol_max > self.c * (1 + 1e-12):
            raise InvalidDelta(
                f"delta*max(|Omega_f|,|Omega_g|) = {self.delta * self.vol_max:.6g} exceeds c = {self.c:.6g}")

    def bounds(self, literal=False):
        """Upper bounds of the constrained dual set on each grid."""
        sx = 1.0 if literal else self.delta
        ux = 1.0 - sx * self.g.volume / self.f.flat
        uy = 1.0 - sx * self.f.volume / self.g.flat
        return ux, uy


@dataclass
class Coupling:
    values: np.ndarray
    delta: float
    hx: float
    hy: float
    kx: np.ndarray = field(init=False)
    ky: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.kx = self.values.sum(axis=1) * self.hy
        self.ky = self.values.sum(axis=0) * self.hx

    @classmethod
    def constant(cls, spec: ProblemSpec, value):
        return cls(np.full((spec.f.size, spec.g.size), float(value)), spec.delta, spec.hx, spec.hy)

    def violation(self, lower=None):
        lower = self.delta if lower is None else lower
        return float(max(0.0, lower - self.values.min()))

    @property
    def mass(self):
        return float(self.values.sum() * self.hx * self.hy)


@dataclass
class DualPotentials:
    k1: np.ndarray
    k2: np.ndarray
    k1_tilde: Optional[np.ndarray] = None
    k2_tilde: Optional[np.ndarray] = None
    sigma0: Optional[float] = None

    def __post_init__(self):
        self.k1 = np.asarray(self.k1, dtype=float).ravel()
        self.k2 = np.asarray(self.k2, dtype=float).ravel()

    def feasibility_violation(self, spec: ProblemSpec):
        ux, uy = spec.bounds()
        return float(max(0.0, (self.k1 - ux).max(), (self.k2 - uy).max()))


def _as_values(mu, grid: GridDensity):
    arr = np.asarray(mu.values if isinstance(mu, GridDensity) else mu, dtype=float)
    if isinstance(mu, GridDensity) and not mu.same_grid(grid):
        raise GridMismatch("measures live on different grids")
    if arr.size != grid.size:
        raise GridMismatch(f"expected {grid.size} values, got {arr.size}")
    return arr.ravel()


def pearson_divergence(mu, nu: GridDensity):
    """F(mu|nu) = integral of (mu/nu - 1)^2 nu."""
    m = _as_values(mu, nu)
    v = nu.flat
    if np.any(v <= 0):
        raise InvalidDensity("reference density has a zero cell on its support")
    return float(((m / v - 1.0) ** 2 * v).sum() * nu.cell_volume)


def marginals(k: Coupling):
    return k.kx, k.ky


def primal_objective(k: Coupling, spec: ProblemSpec, eta=0.5, lower=None):
    """Integral of Ck + eta*||k||^2 + F(k_x|f)/2 + F(k_y|g)/2.

    ``eta=0.5`` and ``lower=delta`` give the regularized problem solved by the
    iteration; other values serve the delta/eta continuity checks.
    """
    lower = spec.delta if lower is None else lower
    viol = k.violation(lower)
    if viol > 0:
        raise FeasibilityViolation(f"coupling below lower bound by {viol:.3g}", viol)
    hxy = spec.hx * spec.hy
    return float((spec.C.values * k.values).sum() * hxy
                 + eta * (k.values ** 2).sum() * hxy
                 + 0.5 * pearson_divergence(k.kx, spec.f)
                 + 0.5 * pearson_divergence(k.ky, spec.g))


def conjugate_F(u_star, v: GridDensity, theta):
    """Conjugate of F(.|v)/2 restricted to marginals bounded below by theta."""
    if not theta > 0:
        raise InvalidParameter("theta must be positive")
    u = _as_values(u_star, v)
    vv = v.flat
    m = np.maximum(theta / vv, u + 1.0)
    return float(0.5 * (vv * (m * (2 * u + 2 - m) - 1.0)).sum() * v.cell_volume)


def conjugate_Cbar(kstar_sum, spec: ProblemSpec):
    s = np.asarray(kstar_sum, dtype=float) - spec.C.values
    m = np.maximum(spec.delta, s)
    return float(0.5 * (m * (2 * s - m)).sum() * spec.hx * spec.hy)


def dual_objective(duals: DualPotentials, spec: ProblemSpec):
    """Dual functional; its minimum equals minus the primal minimum."""
    ksum = duals.k1[:, None] + duals.k2[None, :]
    return (conjugate_Cbar(ksum, spec)
            + conjugate_F(-duals.k1, spec.f, spec.delta * spec.g.volume)
            + conjugate_F(-duals.k2, spec.g, spec.delta * spec.f.volume))


def kkt_recover_coupling(duals: DualPotentials, spec: ProblemSpec):
    vals = np.maximum(spec.delta, duals.k1[:, None] + duals.k2[None, :] - spec.C.values)
    return Coupling(vals, spec.delta, spec.hx, spec.hy)


@dataclass
class KKTReport:
    coupling: float
    marginal_x: float
    marginal_y: float
    gap: float
    primal: float
    dual: float

    @property
    def max_residual(self):
        return max(self.coupling, self.marginal_x, self.marginal_y)


def kkt_residuals(k: Coupling, duals: DualPotentials, spec: ProblemSpec):
    f, g = spec.f.flat, spec.g.flat
    r_k = np.abs(k.values - np.maximum(
        spec.delta, duals.k1[:, None] + duals.k2[None, :] - spec.C.values)).max()
    r_x = np.abs(k.kx - f * np.maximum(spec.delta * spec.g.volume / f, 1 - duals.k1)).max()
    r_y = np.abs(k.ky - g * np.maximum(spec.delta * spec.f.volume / g, 1 - duals.k2)).max()
    p = primal_objective(k, spec)
    dv = dual_objective(duals, spec)
    return KKTReport(float(r_k), float(r_x), float(r_y), abs(p + dv), p, dv)


def _R(u, v, spec):
    return np.asarray(u)[:, None] + np.asarray(v)[None, :] - spec.C.values


def G_eval(u, v, spec: ProblemSpec):
    R = _R(u, v, spec)
    m = np.maximum(spec.delta, R)
    return float(0.5 * (m * (2 * R - m)).sum() * spec.hx * spec.hy
                 + 0.5 * ((1 - u) ** 2 * spec.f.flat).sum() * spec.hx
                 + 0.5 * ((1 - v) ** 2 * spec.g.flat).sum() * spec.hy)


def G_gradients(u, v, spec: ProblemSpec):
    """L2 gradients (D1G, D2G)."""
    m = np.maximum(spec.delta, _R(u, v, spec))
    d1 = m.sum(axis=1) * spec.hy + (u - 1) * spec.f.flat
    d2 = m.sum(axis=0) * spec.hx + (v - 1) * spec.g.flat
    return d1, d2


def w_norm(u, v, spec: ProblemSpec):
    return float(0.5 * ((np.asarray(u) ** 2).sum() * spec.hx + (np.asarray(v) ** 2).sum() * spec.hy))


def G_w_eval(u, v, spec: ProblemSpec):
    return G_eval(u, v, spec) - spec.c / 4 * w_norm(u, v, spec)


def G_w_gradients(u, v, spec: ProblemSpec):
    d1, d2 = G_gradients(u, v, spec)
    return d1 - spec.c / 4 * np.asarray(u), d2 - spec.c / 4 * np.asarray(v)


def l2_norm(values, cell_volume):
    return float(np.sqrt((np.asarray(values) ** 2).sum() * cell_volume))
