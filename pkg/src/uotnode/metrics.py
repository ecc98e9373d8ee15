"""Bounded-Lipschitz distance, norms and rate fits.

d_bL between two discrete measures is the linear program

    max  sum_i phi_i (mu_i - nu_i)
    s.t. |phi_i| <= a,  |phi_i - phi_j| <= b |p_i - p_j|,  a + b <= 1,

solved with HiGHS through scipy.  On a line the Lipschitz constraints between
sorted neighbours imply all the others.  In higher dimension every pair is
constrained up to ``cap`` points; beyond that a lower bound is returned from
1-D programs on random projections (any 1-Lipschitz test function of x . theta
with |theta| = 1 is admissible).
"""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from .errors import GridMismatch, InternalError, InvalidSeries
from .uot_core import GridDensity


@dataclass
class DiscreteMeasure:
    points: np.ndarray  # (P, d)
    weights: np.ndarray  # (P,)

    def __post_init__(self):
        pts = np.asarray(self.points, float)
        if pts.ndim == 1:
            pts = pts[:, None]
        self.points = pts
        self.weights = np.asarray(self.weights, float).ravel()
        if len(self.weights) != len(pts):
            raise GridMismatch("points and weights differ in length")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(pts))):
            raise GridMismatch("non-finite points or weights")

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def mass(self):
        return float(self.weights.sum())

    @classmethod
    def from_density(cls, rho: GridDensity, values=None):
        """Cell-mass lumping at the cell centres."""
        vals = rho.flat if values is None else np.asarray(values, float).ravel()
        return cls(rho.points, vals * rho.cell_volume)


@dataclass
class DblResult:
    value: float
    witness: np.ndarray
    points: np.ndarray
    a: float
    b: float
    lower_bound: bool = False
    info: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


def _merge(mu: DiscreteMeasure, nu: DiscreteMeasure, decimals=14):
    if mu.d != nu.d:
        raise GridMismatch("measures live in different dimensions")
    pts = np.vstack([mu.points, nu.points])
    w = np.concatenate([mu.weights, -nu.weights])
    key = np.round(pts, decimals)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    diff = np.bincount(inv.ravel(), weights=w, minlength=len(uniq))
    return uniq, diff


def _pairs(pts, sorted_line):
    P = len(pts)
    if sorted_line:
        i = np.arange(P - 1)
        return i, i + 1, np.abs(pts[1:, 0] - pts[:-1, 0])
    i, j = np.triu_indices(P, 1)
    return i, j, np.linalg.norm(pts[i] - pts[j], axis=1)


def _solve_lp(pts, diff, sorted_line):
    P = len(pts)
    if P == 0 or not np.any(diff):
        return 0.0, np.zeros(P), 0.0, 0.0
    i, j, dist = _pairs(pts, sorted_line)
    E = len(i)
    # variables: phi (P), a, b
    rows, cols, vals = [], [], []
    r = 0
    # phi_i - a <= 0 and -phi_i - a <= 0
    for sgn in (1.0, -1.0):
        idx = np.arange(P)
        rows += [r + idx, r + idx]
        cols += [idx, np.full(P, P)]
        vals += [np.full(P, sgn), np.full(P, -1.0)]
        r += P
    # +-(phi_i - phi_j) - b dist <= 0
    for sgn in (1.0, -1.0):
        e = np.arange(E)
        rows += [r + e, r + e, r + e]
        cols += [i, j, np.full(E, P + 1)]
        vals += [np.full(E, sgn), np.full(E, -sgn), -dist]
        r += E
    rows.append(np.array([r]))
    cols.append(np.array([P]))
    vals.append(np.array([1.0]))
    rows.append(np.array([r]))
    cols.append(np.array([P + 1]))
    vals.append(np.array([1.0]))
    r += 1
    A = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(r, P + 2)).tocsr()
    ub = np.zeros(r)
    ub[-1] = 1.0
    cost = np.concatenate([-diff, [0.0, 0.0]])
    bounds = [(-1, 1)] * P + [(0, 1), (0, 1)]
    # default HiGHS tolerances (1e-7) drop mass differences of that size
    res = linprog(cost, A_ub=A, b_ub=ub, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise InternalError(f"d_bL linear program failed: {res.message}")
    x = res.x
    # phi = 0 is feasible, so negative values are solver round-off
    return max(0.0, float(-res.fun)), x[:P], float(x[P]), float(x[P + 1])


def dbl_distance(mu: DiscreteMeasure, nu: DiscreteMeasure, cap=500, n_directions=64, seed=0):
    """Bounded-Lipschitz distance with the optimal test function as witness."""
    pts, diff = _merge(mu, nu)
    if pts.shape[1] == 1:
        order = np.argsort(pts[:, 0])
        val, phi, a, b = _solve_lp(pts[order], diff[order], True)
        witness = np.empty_like(phi)
        witness[order] = phi
        return DblResult(val, witness, pts, a, b)
    if len(pts) <= cap:
        val, phi, a, b = _solve_lp(pts, diff, False)
        return DblResult(val, phi, pts, a, b)
    rng = np.random.default_rng(seed)
    best = (-np.inf, None, 0.0, 0.0, None)
    for _ in range(n_directions):
        theta = rng.normal(size=pts.shape[1])
        theta /= np.linalg.norm(theta)
        proj = DiscreteMeasure((pts @ theta)[:, None], diff)
        line, w = _merge(proj, DiscreteMeasure(np.zeros((0, 1)), np.zeros(0)))
        val, phi, a, b = _solve_lp(line, w, True)
        if val > best[0]:
            best = (val, phi, a, b, (theta, line))
    val, phi, a, b, (theta, line) = best
    witness = np.interp(pts @ theta, line[:, 0], phi)
    return DblResult(val, witness, pts, a, b, lower_bound=True,
                     info={"directions": n_directions, "theta": theta.tolist()})


def witness_slack(result: DblResult):
    """Smallest slack over all constraints of the program (negative = violated)."""
    pts, phi = result.points, result.witness
    s = [result.a - np.abs(phi).max(initial=0.0), 1 - result.a - result.b]
    if len(pts) > 1:
        i, j = np.triu_indices(len(pts), 1)
        s.append(np.min(result.b * np.linalg.norm(pts[i] - pts[j], axis=1) - np.abs(phi[i] - phi[j])))
    return float(min(s))


def total_variation(mu: DiscreteMeasure, nu: DiscreteMeasure):
    _, diff = _merge(mu, nu)
    return float(np.abs(diff).sum())


def l1_distance(a, b, cell_volume):
    return float(np.abs(np.asarray(a) - np.asarray(b)).sum() * cell_volume)


def l2_distance(a, b, cell_volume):
    return float(np.sqrt(((np.asarray(a) - np.asarray(b)) ** 2).sum() * cell_volume))


@dataclass
class RateFit:
    ratio: float
    r2: float
    intercept: float


def rate_fit(series):
    """Per-step ratio exp(slope) of a least-squares line through log(series)."""
    y = np.asarray(series, float).ravel()
    if len(y) < 5:
        raise InvalidSeries("need at least 5 points")
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise InvalidSeries("series entries must be positive and finite")
    n = np.arange(len(y), dtype=float)
    ly = np.log(y)
    slope, icpt = np.polyfit(n, ly, 1)
    resid = ly - (slope * n + icpt)
    ss = ((ly - ly.mean()) ** 2).sum()
    r2 = 1.0 if ss == 0 else 1 - (resid ** 2).sum() / ss
    return RateFit(float(np.exp(slope)), float(r2), float(icpt))
