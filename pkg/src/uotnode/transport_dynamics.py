"""Unbalanced transport dynamics built from the map and the smoothed duals.

Characteristics follow the displacement interpolation
T_t(x) = (1 - t/T) x + (t/T) grad phi(x); mass along a characteristic is
multiplied by the closed-form factor
(1 - (t/T) k1~(x)) / (1 - (t/T) k2~(grad phi(x))).
Densities are kept in Lagrangian form (values at the moved cell centres).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import DegenerateMap, FeasibilityViolation, InvalidParameter, OutOfRange, Unsupported
from .mollifier import mollify
from .monge_ampere import MonotoneMap
from .uot_core import Coupling, DualPotentials, GridDensity, ProblemSpec, l2_norm


class GridFunction:
    """Multilinear interpolant of cell-centre samples, constant beyond the outer centres."""

    def __init__(self, grid: GridDensity, values):
        self.grid = grid
        self.values = np.asarray(values, float).reshape(grid.n)
        self._axes = [grid.centers(a) for a in range(grid.d)]
        if all(len(ax) > 1 for ax in self._axes):
            self._interp = RegularGridInterpolator(self._axes, self.values, method="linear")
        else:
            self._interp = None

    def __call__(self, points):
        pts = _as_points(points, self.grid.d)
        clipped = np.stack([np.clip(pts[:, a], ax[0], ax[-1]) for a, ax in enumerate(self._axes)], axis=1)
        if self._interp is None:
            idx = tuple(np.clip(np.searchsorted(ax, clipped[:, a]), 0, len(ax) - 1)
                        for a, ax in enumerate(self._axes))
            return self.values[idx]
        return self._interp(clipped)


def _as_points(x, d):
    x = np.asarray(x, float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None] if d == 1 else x[None, :]
    return x


def smooth_potentials(duals: DualPotentials, spec: ProblemSpec, eps0, sigma_max=None,
                      iters=40):
    """Mollified duals with ||k~ - k||_{L2} < eps0 on each grid.

    The width is the largest one found by bisection (on a log scale) for which
    both potentials meet the bound; the convolution is renormalized at the
    support boundary.
    """
    if not eps0 > 0:
        raise InvalidParameter("eps0 must be positive")
    grids = (spec.f, spec.g)
    pots = (duals.k1, duals.k2)

    def smoothed(sig):
        return [mollify(p.reshape(gr.n), gr.h, sig, boundary="renormalize").ravel()
                if sig >= gr.h.max() else p.copy() for p, gr in zip(pots, grids)]

    def err(sig):
        return max(l2_norm(t - p, gr.cell_volume) for t, p, gr in zip(smoothed(sig), pots, grids))

    h_min = min(gr.h.min() for gr in grids)
    hi = sigma_max or max(max(np.array(gr.hi) - np.array(gr.lo)) for gr in grids)
    if err(hi) < eps0:
        lo = hi
    else:
        lo = h_min
        if err(lo) >= eps0:
            lo = 0.5 * h_min  # identity smoothing
        else:
            for _ in range(iters):
                mid = np.sqrt(lo * hi)
                if err(mid) < eps0:
                    lo = mid
                else:
                    hi = mid
    t1, t2 = smoothed(lo)
    return DualPotentials(duals.k1, duals.k2, t1, t2, float(lo))


def build_endpoint_densities(coupling: Coupling, duals: DualPotentials, spec: ProblemSpec):
    """f_bar = k_x / (1 - k1~), g_bar = k_y / (1 - k2~) as grid densities."""
    k1 = duals.k1 if duals.k1_tilde is None else duals.k1_tilde
    k2 = duals.k2 if duals.k2_tilde is None else duals.k2_tilde
    d1, d2 = 1 - k1, 1 - k2
    if d1.min() <= 0 or d2.min() <= 0:
        raise FeasibilityViolation("smoothed potential reaches 1", float(max(-d1.min(), -d2.min())))
    fbar = coupling.kx / d1
    gbar = coupling.ky / d2
    return spec.f.with_values(fbar), spec.g.with_values(gbar)


@dataclass
class DynamicsFields:
    tmap: MonotoneMap
    T: float
    k1t: GridFunction
    k2t: GridFunction

    @classmethod
    def build(cls, tmap: MonotoneMap, T, duals: DualPotentials, spec: ProblemSpec):
        if not tmap.diagonal:
            raise Unsupported("dynamics need a diagonal map (1-D or tensor product)")
        if not T > 0:
            raise InvalidParameter("time horizon must be positive")
        k1 = duals.k1 if duals.k1_tilde is None else duals.k1_tilde
        k2 = duals.k2 if duals.k2_tilde is None else duals.k2_tilde
        return cls(tmap, float(T), GridFunction(spec.f, k1), GridFunction(spec.g, k2))

    @property
    def d(self):
        return self.tmap.d

    @property
    def source(self):
        return self.tmap.source

    def forward(self, x, t):
        x = _as_points(x, self.d)
        lam = t / self.T
        return (1 - lam) * x + lam * self.tmap(x)

    def inverse(self, y, t, tol=1e-12, clip=False):
        """Per-axis bisection for T_t^{-1}(y)."""
        y = _as_points(y, self.d)
        lam = t / self.T
        out = np.empty_like(y)
        for a, am in enumerate(self.tmap.axis_maps):
            lo_a, hi_a = self.source.lo[a], self.source.hi[a]
            fa = lambda x: (1 - lam) * x + lam * am(x)
            ylo, yhi = fa(lo_a), fa(hi_a)
            width = hi_a - lo_a
            ya = y[:, a]
            if clip:
                ya = np.clip(ya, ylo, yhi)
            elif np.any((ya < ylo - tol * width) | (ya > yhi + tol * width)):
                raise OutOfRange(f"query outside T_t(Omega_f) along axis {a} at t={t}")
            lo = np.full(len(ya), lo_a)
            hi = np.full(len(ya), hi_a)
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                below = fa(mid) < ya
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
                if np.max(hi - lo) <= tol * width:
                    break
            out[:, a] = 0.5 * (lo + hi)
        return out

    def jacobian_det(self, x, t):
        x = _as_points(x, self.d)
        lam = t / self.T
        return np.prod((1 - lam) + lam * self.tmap.axis_derivative(x), axis=1)

    def velocity_at_label(self, x):
        x = _as_points(x, self.d)
        return (self.tmap(x) - x) / self.T

    def growth_at_label(self, x, t):
        x = _as_points(x, self.d)
        lam = t / self.T
        a = self.k1t(x)
        b = self.k2t(self.tmap(x))
        return (-a / (1 - lam * a) + b / (1 - lam * b)) / self.T

    def mass_factor_at_label(self, x, t):
        x = _as_points(x, self.d)
        lam = t / self.T
        return (1 - lam * self.k1t(x)) / (1 - lam * self.k2t(self.tmap(x)))


def interp_map(tmap: MonotoneMap, t, T):
    """Samples of T_t on the source grid and a callable inverse."""
    if not 0 <= t <= T:
        raise InvalidParameter("t must lie in [0, T]")
    lam = t / T
    fwd = (1 - lam) * tmap.source.points + lam * tmap.T_values

    def inverse(y, tol=1e-12):
        dummy = DynamicsFields(tmap, T, None, None)
        return dummy.inverse(y, t, tol)

    return fwd, inverse


def velocity(fields: DynamicsFields, x, t, clip=False):
    """xi_t(x) = (grad phi(y) - y)/T with y = T_t^{-1}(x)."""
    return fields.velocity_at_label(fields.inverse(x, t, clip=clip))


def growth(fields: DynamicsFields, x, t, clip=False):
    return fields.growth_at_label(fields.inverse(x, t, clip=clip), t)


def mass_factor(fields: DynamicsFields, x, t):
    """exp of the growth accumulated up to t along the characteristic starting at x."""
    return fields.mass_factor_at_label(x, t)


@dataclass
class EvolvedDensity:
    times: np.ndarray
    labels: np.ndarray  # (size, d) starting points
    positions: np.ndarray  # (nt, size, d)
    density: np.ndarray  # (nt, size)
    mass_factors: np.ndarray  # (nt, size)
    weights: np.ndarray  # (nt, size) lumped cell masses
    source: GridDensity

    @property
    def masses(self):
        return self.weights.sum(axis=1)

    def at(self, i):
        return self.positions[i], self.density[i]

    def to_grid(self, i, grid: GridDensity):
        """Eulerian resampling of snapshot i onto grid centres (zero outside)."""
        pos = self.positions[i]
        dens = self.density[i].reshape(self.source.n)
        axes = []
        for a in range(self.source.d):
            sl = [0] * self.source.d
            sl[a] = slice(None)
            axes.append(pos[:, a].reshape(self.source.n)[tuple(sl)])
        pts = grid.points
        if all(len(ax) > 1 for ax in axes):
            f = RegularGridInterpolator(axes, dens, method="linear")
            clipped = np.stack([np.clip(pts[:, a], ax[0], ax[-1]) for a, ax in enumerate(axes)], axis=1)
            vals = f(clipped)
        else:
            vals = np.full(len(pts), dens.ravel()[0])
        # extend to the outer half cells of the moved support
        lo = np.array([ax[0] for ax in axes])
        hi = np.array([ax[-1] for ax in axes])
        half = np.array([(ax[-1] - ax[0]) / max(len(ax) - 1, 1) / 2 for ax in axes])
        inside = np.all((pts >= lo - half - 1e-12) & (pts <= hi + half + 1e-12), axis=1)
        return np.where(inside, vals, 0.0)

    def trajectory_rows(self):
        """Tidy rows (t, label..., x..., mu, mass_factor)."""
        rows = []
        for i, t in enumerate(self.times):
            for j in range(len(self.labels)):
                rows.append((t, *self.labels[j], *self.positions[i, j], self.density[i, j],
                             self.mass_factors[i, j]))
        return rows


def evolve(fields: DynamicsFields, fbar: GridDensity, times: Sequence[float]):
    """mu_t(T_t(x)) = f_bar(x) * mass_factor(x, t) / det DT_t(x)."""
    times = np.asarray(times, float)
    x = fields.source.points
    pos, dens, mfs, wts = [], [], [], []
    for t in times:
        det = fields.jacobian_det(x, t)
        if det.min() <= 0:
            raise DegenerateMap(f"singular interpolated map at t={t}")
        mf = fields.mass_factor_at_label(x, t)
        pos.append(fields.forward(x, t))
        dens.append(fbar.flat * mf / det)
        mfs.append(mf)
        wts.append(fbar.flat * mf * fbar.cell_volume)
    return EvolvedDensity(times, x, np.array(pos), np.array(dens), np.array(mfs), np.array(wts),
                          fbar)


def continuity_residual(evolved: EvolvedDensity, fields: DynamicsFields, tests):
    """Weak-form residual of d/dt mu + div(xi mu) = zeta mu per test function.

    ``tests`` is a sequence of (phi, grad_phi) callables on (P, d) arrays.  The
    time derivative uses centred differences, so at least 3 stamps are needed.
    Returns the max over interior stamps for each test function.
    """
    t = evolved.times
    if len(t) < 3:
        raise InvalidParameter("need at least 3 time stamps")
    out = []
    for phi, grad in tests:
        moments = np.array([(phi(evolved.positions[i]) * evolved.weights[i]).sum()
                            for i in range(len(t))])
        worst = 0.0
        for i in range(1, len(t) - 1):
            y = evolved.positions[i]
            dmom = (moments[i + 1] - moments[i - 1]) / (t[i + 1] - t[i - 1])
            xi = velocity(fields, y, t[i])
            ze = growth(fields, y, t[i])
            w = evolved.weights[i]
            rhs = ((grad(y) * xi).sum(axis=1) * w).sum() + (phi(y) * ze * w).sum()
            worst = max(worst, abs(dmom - rhs))
        out.append(worst)
    return np.array(out)
