"""Monotone transport maps between grid marginals.

In 1-D the optimal map is the monotone rearrangement T = G^{-1} o F of the
cumulative functions.  For separable densities in d >= 2 the per-axis maps
are stacked into a diagonal map, which is the gradient of a separable convex
potential.  General d >= 2 solvers plug in through :class:`ExternalMaSolver`.
"""
from __future__ import annotations

from dataclasses import dataclass
import json
from pathlib import Path
import subprocess
from typing import Optional

import numpy as np

from .errors import GridMismatch, InvalidDensity, MassMismatch, SpecError, Unsupported
from .uot_core import GridDensity


@dataclass
class AxisMap:
    """Monotone rearrangement between two piecewise-constant 1-D densities."""

    src_edges: np.ndarray
    src_cdf: np.ndarray
    tgt_edges: np.ndarray
    tgt_cdf: np.ndarray

    @classmethod
    def build(cls, src_vals, src_edges, tgt_vals, tgt_edges):
        src_vals = np.asarray(src_vals, float)
        tgt_vals = np.asarray(tgt_vals, float)
        if np.any(src_vals < 0) or np.any(tgt_vals < 0):
            raise InvalidDensity("negative density gives a non-monotone cumulative function")
        Fs = np.concatenate([[0.0], np.cumsum(src_vals * np.diff(src_edges))])
        Ft = np.concatenate([[0.0], np.cumsum(tgt_vals * np.diff(tgt_edges))])
        return cls(np.asarray(src_edges, float), Fs / Fs[-1], np.asarray(tgt_edges, float), Ft / Ft[-1])

    def cdf(self, x):
        return np.interp(x, self.src_edges, self.src_cdf)

    def inverse_target_cdf(self, p):
        # left endpoint of flat pieces
        p = np.clip(p, 0.0, 1.0)
        j = np.clip(np.searchsorted(self.tgt_cdf, p, side="left"), 1, len(self.tgt_cdf) - 1)
        F0, F1 = self.tgt_cdf[j - 1], self.tgt_cdf[j]
        e0, e1 = self.tgt_edges[j - 1], self.tgt_edges[j]
        with np.errstate(invalid="ignore", divide="ignore"):
            lam = np.where(F1 > F0, (p - F0) / (F1 - F0), 0.0)
        return e0 + lam * (e1 - e0)

    def __call__(self, x):
        return self.inverse_target_cdf(self.cdf(x))


@dataclass
class MonotoneMap:
    """Sampled transport map on the source grid.

    ``T_values`` has shape (size, d) and ``det_values`` shape (size,), both in
    the row-major order of ``source``.  ``axis_maps`` is set for diagonal maps
    and lets the map be evaluated anywhere in the source box.
    """

    source: GridDensity
    target: Optional[GridDensity]
    T_values: np.ndarray
    det_values: np.ndarray
    axis_maps: Optional[list] = None
    deriv_values: Optional[list] = None

    @property
    def d(self):
        return self.source.d

    @property
    def diagonal(self):
        return self.axis_maps is not None

    def __call__(self, points):
        if not self.diagonal:
            raise Unsupported("off-sample evaluation needs a diagonal (per-axis) map")
        pts = np.atleast_2d(np.asarray(points, float))
        return np.stack([m(pts[:, a]) for a, m in enumerate(self.axis_maps)], axis=1)

    def axis_derivative(self, points):
        """Per-axis derivative T_a'(x_a) by finite differences of the sampled map,
        interpolated linearly between cell centres."""
        pts = np.atleast_2d(np.asarray(points, float))
        out = np.empty_like(pts)
        for a in range(self.d):
            out[:, a] = np.interp(pts[:, a], self.source.centers(a), self.deriv_values[a])
        return out

    def to_dict(self):
        from .io import density_to_dict
        return {"grid": density_to_dict(self.source),
                "T_values": self.T_values.tolist(),
                "det_values": self.det_values.tolist()}


def _fd_derivative(x, T):
    if len(x) == 1:
        return np.ones(1)
    return np.gradient(T, x, edge_order=1)


def _check_mass(kx: GridDensity, ky: GridDensity, tol=1e-10):
    if abs(kx.mass - ky.mass) > tol * max(1.0, kx.mass):
        raise MassMismatch(f"marginal masses differ: {kx.mass:.12g} vs {ky.mass:.12g}")


def solve_1d(kx: GridDensity, ky: GridDensity, check_mass=True):
    if kx.d != 1 or ky.d != 1:
        raise GridMismatch("solve_1d needs one-dimensional marginals")
    if check_mass:
        _check_mass(kx, ky)
    am = AxisMap.build(kx.flat, kx.edges(0), ky.flat, ky.edges(0))
    x = kx.centers(0)
    T = am(x)
    dT = _fd_derivative(x, T)
    return MonotoneMap(kx, ky, T[:, None], dT, [am], [dT])


def _separable_factors(rho: GridDensity, tol=1e-10):
    vals = rho.values
    total = vals.sum()
    factors = []
    for a in range(rho.d):
        other = tuple(b for b in range(rho.d) if b != a)
        factors.append(vals.sum(axis=other) if other else vals.copy())
    recon = factors[0]
    for fac in factors[1:]:
        recon = np.multiply.outer(recon, fac)
    recon = recon / total ** (rho.d - 1)
    if np.abs(recon - vals).max() > tol * max(1.0, np.abs(vals).max()):
        raise Unsupported("density is not separable; use an external Monge-Ampere solver")
    return factors


def solve_tensor(kx: GridDensity, ky: GridDensity, check_mass=True):
    if kx.d != ky.d:
        raise GridMismatch("source and target dimensions differ")
    if check_mass:
        _check_mass(kx, ky)
    fx, fy = _separable_factors(kx), _separable_factors(ky)
    maps, derivs = [], []
    for a in range(kx.d):
        am = AxisMap.build(fx[a], kx.edges(a), fy[a], ky.edges(a))
        x = kx.centers(a)
        maps.append(am)
        derivs.append(_fd_derivative(x, am(x)))
    pts = kx.points
    T = np.stack([m(pts[:, a]) for a, m in enumerate(maps)], axis=1)
    mesh = np.meshgrid(*derivs, indexing="ij")
    det = np.prod([m.ravel() for m in mesh], axis=0)
    return MonotoneMap(kx, ky, T, det, maps, derivs)


def _lookup(rho: GridDensity, points):
    """Piecewise-constant evaluation of a grid density; zero outside its box."""
    pts = np.atleast_2d(points)
    idx = []
    inside = np.ones(len(pts), bool)
    for a in range(rho.d):
        e = rho.edges(a)
        i = np.searchsorted(e, pts[:, a], side="right") - 1
        # the right boundary belongs to the last cell
        i = np.where(np.isclose(pts[:, a], e[-1], rtol=0, atol=1e-12 * (e[-1] - e[0])), rho.n[a] - 1, i)
        inside &= (i >= 0) & (i < rho.n[a])
        idx.append(np.clip(i, 0, rho.n[a] - 1))
    out = rho.values[tuple(idx)]
    return np.where(inside, out, 0.0)


@dataclass
class MaResidual:
    sup: float
    l1: float
    h: float
    order: int = 1


def ma_residual(tmap: MonotoneMap, kx: GridDensity, ky: GridDensity):
    """|k_y(T(x)) det DT(x) - k_x(x)| at the source cell centres."""
    res = np.abs(_lookup(ky, tmap.T_values) * tmap.det_values - kx.flat)
    return MaResidual(float(res.max()), float(res.sum() * kx.cell_volume), float(kx.h.max()))


def pushforward_error(tmap: MonotoneMap, kx: GridDensity, ky: GridDensity, test_fn):
    """Difference between the integral of test_fn(T(x)) k_x and of test_fn(y) k_y."""
    lhs = (test_fn(tmap.T_values) * kx.flat).sum() * kx.cell_volume
    rhs = (test_fn(ky.points) * ky.flat).sum() * ky.cell_volume
    return float(abs(lhs - rhs))


def write_map_json(tmap: MonotoneMap, path):
    Path(path).write_text(json.dumps(tmap.to_dict()))


def read_map_json(path, source=None):
    from .io import density_from_dict
    doc = json.loads(Path(path).read_text())
    grid = density_from_dict(doc["grid"])
    T = np.asarray(doc["T_values"], float).reshape(grid.size, grid.d)
    det = np.asarray(doc["det_values"], float).ravel()
    if det.size != grid.size:
        raise GridMismatch("det_values size does not match the grid")
    return MonotoneMap(source or grid, None, T, det)


class ExternalMaSolver:
    """Plug point for general Monge-Ampere solvers.

    Subclasses implement :meth:`solve`.  :class:`FileExchangeMaSolver` runs an
    external command with the contract::

        <command> source.json target.json map.json

    where the inputs are density documents and the output is a map document
    ``{grid, T_values, det_values}``.
    """

    def solve(self, kx: GridDensity, ky: GridDensity) -> MonotoneMap:
        raise NotImplementedError


class FileExchangeMaSolver(ExternalMaSolver):
    def __init__(self, command, workdir):
        self.command = list(command) if not isinstance(command, str) else command.split()
        self.workdir = Path(workdir)

    def solve(self, kx, ky):
        from .io import write_density_json
        self.workdir.mkdir(parents=True, exist_ok=True)
        src, tgt, out = (self.workdir / n for n in ("source.json", "target.json", "map.json"))
        write_density_json(kx, src)
        write_density_json(ky, tgt)
        proc = subprocess.run(self.command + [str(src), str(tgt), str(out)],
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise SpecError(f"external Monge-Ampere solver failed: {proc.stderr.strip()}")
        tmap = read_map_json(out, source=kx)
        tmap.target = ky
        return tmap


def solve_map(kx: GridDensity, ky: GridDensity, external: Optional[ExternalMaSolver] = None):
    """Dispatch: external solver if given, else 1-D or tensor-product solve."""
    if external is not None:
        return external.solve(kx, ky)
    if kx.d == 1:
        return solve_1d(kx, ky)
    return solve_tensor(kx, ky)
