"""Explicit neural-ODE parameters for a time-dependent vector field.

Pipeline: mollify the field, expand it in weighted Hermite polynomials with
de la Vallee-Poussin (Fejer-type) factors, rewrite every Hermite polynomial
as a sum of ridge monomials (x . v_m)^k, and replace each ridge monomial by a
Riemann sum of shifted approximate-identity kernels built from the
activation.  The result is the one-hidden-layer field
sum_i W_i(t) Sigma(A_i x + b_i).

W_i(t) is stored factored as (Hermite coefficient at t) x (static factor),
since the Hermite coefficient is the only time-dependent ingredient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
import itertools
import json
from math import comb, factorial, lgamma, log, pi
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import hermite as npherm

from .errors import BoxExit, InternalError, InvalidParameter, OutOfBox, SpecError, Unresolved, Unsupported
from .mollifier import mollify

# ---------------------------------------------------------------- Hermite


def hermite_poly(n, x):
    """Physicists' Hermite polynomial H_n (or the product over a multi-index)."""
    x = np.asarray(x, float)
    nvec = np.atleast_1d(n)
    if nvec.size > 1 or x.ndim == 2:
        x2 = np.atleast_2d(x) if x.ndim else x.reshape(1, 1)
        return np.prod([hermite_poly(int(k), x2[:, a]) for a, k in enumerate(nvec)], axis=0)
    n = int(nvec[0])
    h0 = np.ones_like(x)
    if n == 0:
        return h0
    h1 = 2 * x
    for i in range(1, n):
        h0, h1 = h1, 2 * x * h1 - 2 * i * h0
    return h1


def hermite_norm(n):
    """sqrt(n! 2^|n| pi^(d/2)) for a multi-index n."""
    nvec = np.atleast_1d(n)
    return float(np.exp(0.5 * sum(k * log(2) + lgamma(k + 1) + 0.5 * log(pi) for k in nvec)))


def hermite_normalized_table(kmax, x):
    """Rows H_k(x)/sqrt(k! 2^k sqrt(pi)) for k = 0..kmax via the stable recurrence."""
    x = np.asarray(x, float)
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = pi ** -0.25
    if kmax >= 1:
        out[1] = np.sqrt(2.0) * x * out[0]
    for k in range(1, kmax):
        out[k + 1] = np.sqrt(2.0 / (k + 1)) * x * out[k] - np.sqrt(k / (k + 1)) * out[k - 1]
    return out


def fejer_factor(nvec, nn):
    return float(np.prod([2 - k / nn for k in np.atleast_1d(nvec) if k > nn]))


def gauss_hermite_gram(kmax, nodes=None):
    """Gram matrix of the normalized Hermite polynomials under Gauss-Hermite quadrature."""
    nodes = nodes or kmax + 2
    x, w = npherm.hermgauss(nodes)
    tab = hermite_normalized_table(kmax, x)
    return (tab * w) @ tab.T


@dataclass
class HermiteExpansion:
    """Coefficients c[t, k_1..k_d, j] for indices 0..kmax per axis."""

    nn: int
    coeffs: np.ndarray
    times: np.ndarray

    @property
    def d(self):
        return self.coeffs.ndim - 2

    @property
    def kmax(self):
        return self.coeffs.shape[1] - 1

    @property
    def ncomp(self):
        return self.coeffs.shape[-1]

    def indices(self):
        return list(itertools.product(range(self.kmax + 1), repeat=self.d))

    def fejer_weights(self):
        shape = (self.kmax + 1,) * self.d
        w = np.empty(shape)
        for idx in self.indices():
            w[idx] = fejer_factor(idx, self.nn)
        return w

    def coefficients_at(self, t):
        """Linear interpolation of the coefficient table in time."""
        return _interp_time(self.times, self.coeffs, t)

    def evaluate(self, points, t=None, coeffs=None):
        """Fejer-weighted partial sum at points (P, d); returns (P, ncomp)."""
        pts = np.atleast_2d(np.asarray(points, float))
        c = self.coefficients_at(t) if coeffs is None else coeffs
        c = c * self.fejer_weights()[..., None]
        tabs = [hermite_normalized_table(self.kmax, pts[:, a]) for a in range(self.d)]
        # contract one axis at a time
        out = np.tensordot(tabs[0], c, axes=([0], [0]))
        for a in range(1, self.d):
            out = np.einsum("kp,pk...->p...", tabs[a], out)
        return out.reshape(len(pts), self.ncomp)


def _interp_time(times, table, t):
    times = np.asarray(times, float)
    if len(times) == 1:
        return table[0]
    t = float(np.clip(t, times[0], times[-1]))
    i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    lam = (t - times[i]) / (times[i + 1] - times[i])
    return (1 - lam) * table[i] + lam * table[i + 1]


def _axis_nodes(M, n):
    return np.linspace(-M, M, n)


def _trap_weights(x):
    w = np.full(len(x), x[1] - x[0])
    w[0] = w[-1] = 0.5 * (x[1] - x[0])
    return w


def hermite_coeffs(samples, M, nn, times=None, kmax=None):
    """Weighted Hermite coefficients of grid samples on [-M, M]^d.

    ``samples`` has shape (nt, n_1, ..., n_d, ncomp) on the uniform nodes
    linspace(-M, M, n_a).  The integrals use the trapezoid rule, which needs
    enough nodes per oscillation of the highest Hermite function; otherwise
    :class:`Unresolved` is raised.
    """
    samples = np.asarray(samples, float)
    d = samples.ndim - 2
    kmax = 2 * nn - 1 if kmax is None else kmax
    if nn < 1:
        raise InvalidParameter("Hermite index bound must be >= 1")
    coeffs = samples
    for a in range(d):
        x = _axis_nodes(M, samples.shape[1 + a])
        h = x[1] - x[0]
        if h > pi / (4 * np.sqrt(2 * kmax + 1)):
            raise Unresolved(f"quadrature spacing {h:.3g} too coarse for Hermite degree {kmax}")
        B = hermite_normalized_table(kmax, x) * np.exp(-x ** 2) * _trap_weights(x)
        coeffs = _contract_axis(coeffs, B, 1 + a)
    nt = samples.shape[0]
    times = np.arange(nt, dtype=float) if times is None else np.asarray(times, float)
    return HermiteExpansion(nn, coeffs, times)


def _contract_axis(arr, B, axis):
    out = np.tensordot(arr, B, axes=([axis], [1]))
    return np.moveaxis(out, -1, axis)


# ---------------------------------------------------------------- ridge


def _multi_indices(total, d):
    """All nonnegative integer d-tuples with sum == total."""
    if d == 1:
        return [(total,)]
    return [(k,) + rest for k in range(total, -1, -1) for rest in _multi_indices(total - k, d - 1)]


def ridge_count(mdeg, d):
    return comb(mdeg + d - 1, d - 1)


@dataclass
class RidgeBasis:
    mdeg: int
    d: int
    u: np.ndarray
    v: np.ndarray
    alphas: list
    matrix: np.ndarray

    @property
    def count(self):
        return len(self.v)

    def evaluate(self, points):
        """(x . v_m)^mdeg for each direction, shape (P, count)."""
        return (np.atleast_2d(points) @ self.v.T) ** self.mdeg


@lru_cache(maxsize=None)
def ridge_decompose(mdeg, d):
    if mdeg < 0 or d < 1:
        raise InvalidParameter("need mdeg >= 0 and d >= 1")
    if d == 1:
        u = np.zeros((1, 0))
    else:
        u = np.array([p for p in itertools.product(range(mdeg + 1), repeat=d - 1) if sum(p) <= mdeg],
                     dtype=float)
    v = np.hstack([np.ones((len(u), 1)), u])
    alphas = _multi_indices(mdeg, d)
    mat = np.empty((len(alphas), len(v)))
    for r, al in enumerate(alphas):
        multinom = factorial(mdeg) / np.prod([factorial(k) for k in al])
        mat[r] = multinom * np.prod(v ** np.array(al), axis=1)
    if mat.shape[0] != mat.shape[1] or np.linalg.matrix_rank(mat) < mat.shape[0]:
        raise InternalError(f"ridge system for degree {mdeg}, d={d} is rank deficient "
                            f"(shape {mat.shape}, rank {np.linalg.matrix_rank(mat)})")
    return RidgeBasis(mdeg, d, u, v, alphas, mat)


def hermite_monomials(nvec):
    """Monomial coefficients of H_n as a dense d-dim array c[a_1, ..., a_d]."""
    nvec = tuple(int(k) for k in np.atleast_1d(nvec))
    c = np.array(1.0)
    for k in nvec:
        c = np.multiply.outer(c, npherm.herm2poly(np.eye(k + 1)[k]))
    return c


def express(nvec):
    """h[mdeg] (length N_mdeg) with H_n(x) = sum_mdeg sum_m h[mdeg][m] (x . v_m)^mdeg."""
    nvec = tuple(int(k) for k in np.atleast_1d(nvec))
    d = len(nvec)
    mono = hermite_monomials(nvec)
    out = {}
    for mdeg in range(sum(nvec) + 1):
        basis = ridge_decompose(mdeg, d)
        rhs = np.array([mono[al] if all(a < s for a, s in zip(al, mono.shape)) else 0.0
                        for al in basis.alphas])
        out[mdeg] = np.linalg.solve(basis.matrix, rhs) if d > 1 else rhs / basis.matrix[0, 0]
    return out


# ---------------------------------------------------------------- nAI kernels


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = {"relu": _relu, "sigmoid": _sigmoid}


@dataclass
class NaiKernel:
    name: str
    Np: int
    Wp: np.ndarray
    Ap: np.ndarray
    bp: np.ndarray
    sigma_fn: Callable = field(repr=False, default=None)

    def __call__(self, x):
        x = np.asarray(x, float)
        return sum(w * self.sigma_fn(a * x + b) for w, a, b in zip(self.Wp, self.Ap, self.bp))

    def scaled(self, x, width):
        return self(np.asarray(x) / width) / width

    def to_dict(self):
        return {"name": self.name, "Np": self.Np, "Wp": self.Wp.tolist(),
                "Ap": self.Ap.tolist(), "bp": self.bp.tolist()}


def nai_kernel(activation="relu", a=1.0, Wp=None, Ap=None, bp=None):
    """Kernel combination for a shipped activation or a validated user descriptor."""
    if Wp is not None:
        if activation not in ACTIVATIONS:
            raise Unsupported(f"unknown activation {activation!r}")
        k = NaiKernel(activation, len(Wp), np.asarray(Wp, float), np.asarray(Ap, float),
                      np.asarray(bp, float), ACTIVATIONS[activation])
        ax = check_nai_axioms(k)
        if abs(ax["integral"] - 1) > 1e-8 or not np.isfinite(ax["l1"]):
            raise Unsupported("descriptor does not form an approximate identity")
        return k
    if activation == "relu":
        return NaiKernel("relu", 3, np.array([1.0, -2.0, 1.0]), np.ones(3),
                         np.array([1.0, 0.0, -1.0]), _relu)
    if activation == "sigmoid":
        return NaiKernel("sigmoid", 2, np.array([1.0, -1.0]) / (2 * a), np.ones(2),
                         np.array([a, -a]), _sigmoid)
    raise Unsupported(f"unsupported activation {activation!r}")


def check_nai_axioms(kernel: NaiKernel, R=60.0, n=600001, rho=0.5, width=0.01):
    """Integral, L1 norm and the tail mass of Gamma_width outside |x| > rho."""
    x = np.linspace(-R, R, n)
    g = kernel(x)
    w = _trap_weights(x)
    xs = x * width
    tail = np.abs(kernel(x[np.abs(xs) > rho])).dot(w[np.abs(xs) > rho])
    return {"integral": float(g.dot(w)), "l1": float(np.abs(g).dot(w)), "tail": float(tail)}


# ---------------------------------------------------------------- network


@dataclass
class NeuralFieldParams:
    """Units i = 1..N with W_i(t) = diag(coeffs[t, n_i, :] * static_i),
    A_i (N, d, d) and b_i (N, d)."""

    kernel: NaiKernel
    M: float
    sigma: float
    sigma_mollifier: float
    nn: int
    times: np.ndarray
    coeffs: np.ndarray  # (nt, n_index, ncomp)
    static: np.ndarray  # (N,)
    coef_index: np.ndarray  # (N,)
    A: np.ndarray  # (N, d, d)
    b: np.ndarray  # (N, d)
    l_m: dict
    unit_keys: Optional[np.ndarray] = None  # (N, 5) = (flat n, mdeg, m, i, l)
    time_interp: str = "linear"
    _groups: Optional[tuple] = field(default=None, repr=False)

    @property
    def N(self):
        return len(self.static)

    @property
    def d(self):
        return self.A.shape[1]

    @property
    def ncomp(self):
        return self.coeffs.shape[-1]

    def coefficients_at(self, t):
        if self.time_interp == "constant":
            i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1))
            return self.coeffs[i]
        return _interp_time(self.times, self.coeffs, t)

    def W_diag(self, t):
        """Diagonal entries of every W_i(t), shape (N, ncomp)."""
        return self.coefficients_at(t)[self.coef_index] * self.static[:, None]

    def W_matrix(self, i, t):
        return np.diag(self.W_diag(t)[i])

    def groups(self):
        if self._groups is None:
            key = np.hstack([self.A.reshape(self.N, -1), self.b])
            uniq, inv = np.unique(key, axis=0, return_inverse=True)
            d = self.d
            self._groups = (uniq[:, :d * d].reshape(-1, d, d), uniq[:, d * d:], inv.ravel())
        return self._groups

    def expected_N(self):
        return count_units(self.nn, self.d, self.kernel.Np, self.l_m,
                           kmax=int(round(self.coeffs.shape[1] ** (1 / self.d))) - 1)

    def to_dict(self, expand_w=False):
        doc = {
            "activation": self.kernel.to_dict(), "N": self.N, "M": self.M, "sigma": self.sigma,
            "sigma_mollifier": self.sigma_mollifier, "nn": self.nn, "d": self.d,
            "times": self.times.tolist(), "time_interp": self.time_interp,
            "l_m": {str(k): v for k, v in self.l_m.items()},
            "coefficients": self.coeffs.tolist(),
            "units": {"static": self.static.tolist(), "coef_index": self.coef_index.tolist(),
                      "A": self.A.tolist(), "b": self.b.tolist()},
        }
        if expand_w:
            doc["units"]["W_diag"] = [self.W_diag(t).tolist() for t in self.times]
        return doc


def count_units(nn, d, Np, l_m, kmax=None):
    """N' * sum over n <= kmax (per axis) of sum_{mdeg <= |n|} N_mdeg * l_mdeg."""
    kmax = 2 * nn - 1 if kmax is None else kmax
    total = 0
    for idx in itertools.product(range(kmax + 1), repeat=d):
        for mdeg in range(sum(idx) + 1):
            total += ridge_count(mdeg, d) * l_m[mdeg]
    return Np * total


def params_from_dict(doc):
    act = doc["activation"]
    if act["name"] not in ACTIVATIONS:
        raise Unsupported(f"unknown activation {act['name']!r}")
    kernel = NaiKernel(act["name"], act["Np"], np.array(act["Wp"]), np.array(act["Ap"]),
                       np.array(act["bp"]), ACTIVATIONS[act["name"]])
    u = doc["units"]
    p = NeuralFieldParams(kernel, doc["M"], doc["sigma"], doc["sigma_mollifier"], doc["nn"],
                          np.array(doc["times"], float), np.array(doc["coefficients"], float),
                          np.array(u["static"], float), np.array(u["coef_index"], int),
                          np.array(u["A"], float), np.array(u["b"], float),
                          {int(k): int(v) for k, v in doc["l_m"].items()},
                          time_interp=doc.get("time_interp", "linear"))
    if p.N != doc["N"] or p.N != p.expected_N():
        raise SpecError(f"unit count {p.N} does not match the counting formula {p.expected_N()}")
    if "W_diag" in u:
        for t, W in zip(p.times, u["W_diag"]):
            if np.asarray(W).shape != (p.N, p.ncomp):
                raise SpecError("W_diag entries must be diagonals of shape (N, d)")
    return p


def write_params_json(params: NeuralFieldParams, path, expand_w=False):
    Path(path).write_text(json.dumps(params.to_dict(expand_w)))


def read_params_json(path):
    return params_from_dict(json.loads(Path(path).read_text()))


def assemble(expansion: HermiteExpansion, kernel: NaiKernel, sigma, M, l_m,
             sigma_mollifier=None):
    """Units for every (n, mdeg, m, i, l).

    The partition for direction v_m covers [-M |v_m|_1, M |v_m|_1] so that
    x . v_m stays inside it for x in [-M, M]^d (this is [-M, M] when d = 1).
    """
    d = expansion.d
    if isinstance(l_m, int):
        l_m = {k: l_m for k in range(d * expansion.kmax + 1)}
    indices = expansion.indices()
    statics, cidx, As, bs, keys = [], [], [], [], []
    for flat, nvec in enumerate(indices):
        fej = fejer_factor(nvec, expansion.nn)
        norm = hermite_norm(nvec)
        hs = express(nvec)
        for mdeg in range(sum(nvec) + 1):
            basis = ridge_decompose(mdeg, d)
            L = l_m[mdeg]
            for m in range(basis.count):
                v = basis.v[m]
                R = M * np.abs(v).sum()
                z = np.linspace(-R, R, L + 1)
                wl = 0.5 * (z[1:] + z[:-1])
                dz = np.diff(z)
                for i in range(kernel.Np):
                    base = fej * hs[mdeg][m] * kernel.Wp[i] / (sigma * norm)
                    statics.append(base * dz * wl ** mdeg)
                    cidx.append(np.full(L, flat))
                    As.append(np.broadcast_to(kernel.Ap[i] / sigma * v, (L, d, d)))
                    bs.append(np.broadcast_to((kernel.bp[i] - kernel.Ap[i] * wl / sigma)[:, None], (L, d)))
                    keys.append(np.column_stack([np.full(L, flat), np.full(L, mdeg), np.full(L, m),
                                                 np.full(L, i), np.arange(L)]))
    coeffs = expansion.coeffs.reshape(expansion.coeffs.shape[0], -1, expansion.ncomp)
    return NeuralFieldParams(kernel, float(M), float(sigma),
                             float(sigma if sigma_mollifier is None else sigma_mollifier),
                             expansion.nn, expansion.times.copy(), coeffs,
                             np.concatenate(statics), np.concatenate(cidx),
                             np.concatenate(As), np.concatenate(bs), dict(l_m),
                             np.concatenate(keys))


def eval_network(params: NeuralFieldParams, x, t, chunk=4096, check_box=True):
    """sum_i W_i(t) Sigma(A_i x + b_i) at points x of shape (P, d)."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None] if params.d == 1 else x[None, :]
    if check_box and np.any(np.abs(x) > params.M * (1 + 1e-12)):
        raise OutOfBox(f"evaluation point outside [-{params.M}, {params.M}]^d")
    Ag, bg, inv = params.groups()
    W = params.W_diag(t)
    Wg = np.stack([np.bincount(inv, weights=W[:, j], minlength=len(Ag)) for j in range(params.ncomp)],
                  axis=1)
    keep = np.any(Wg != 0, axis=1)
    Ag, bg, Wg = Ag[keep], bg[keep], Wg[keep]
    sig = params.kernel.sigma_fn
    out = np.zeros((len(x), params.ncomp))
    gchunk = max(1, chunk * 64 // max(len(x), 1))
    for s in range(0, len(Ag), gchunk):
        pre = np.einsum("gjk,pk->gpj", Ag[s:s + gchunk], x) + bg[s:s + gchunk, None, :]
        out += np.einsum("gj,gpj->pj", Wg[s:s + gchunk], sig(pre))
    return out


# ---------------------------------------------------------------- compile


@dataclass
class CompileReport:
    budget: float
    M: float
    sigma: float
    nn: int
    l: int
    N: int
    mollify: float
    truncate: float
    quadratize: float
    total_l2: float
    total_linf: float
    per_time_l2: np.ndarray
    attempts: list

    def as_dict(self):
        out = {k: getattr(self, k) for k in ("budget", "M", "sigma", "nn", "l", "N", "mollify",
                                              "truncate", "quadratize", "total_l2", "total_linf")}
        out["per_time_l2"] = self.per_time_l2.tolist()
        return out


@dataclass
class CompileResult:
    params: NeuralFieldParams
    report: CompileReport


def _grid_points(M, n, d):
    ax = _axis_nodes(M, n)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), ax


def _l2(diff, ax, d):
    w = _trap_weights(ax)
    W = w
    for _ in range(d - 1):
        W = np.multiply.outer(W, w)
    sq = (diff ** 2).sum(-1).reshape((len(ax),) * d)
    return float(np.sqrt((sq * W).sum()))


def sample_field(reference: Callable, M, times, d=1, ncomp=None, n_grid=None):
    n_grid = n_grid or (4001 if d == 1 else 161)
    pts, ax = _grid_points(M, n_grid, d)
    vals = np.stack([np.asarray(reference(pts, t), float).reshape(len(pts), -1) for t in times])
    ncomp = vals.shape[-1]
    return vals.reshape((len(times),) + (n_grid,) * d + (ncomp,)), pts, ax


def compile_field(reference: Callable, M, times, budget, d=1, activation="relu",
                  n_grid=None, sigma0=0.5, sigma_min=None,
                  nn_schedule=(2, 4, 6, 8, 12, 16, 20, 24, 32), cells_per_width=(1, 2, 4, 8),
                  time_interp="linear"):
    """Choose (sigma, nn, l) by doubling searches on the three stage errors,
    measured in L2([-M, M]^d) at every time stamp.

    Mollification must stay within budget/3.  Budget it leaves unused passes
    on: truncation gets half of what remains and quadratization the rest, so
    the total meets the budget by the triangle inequality.

    ``reference(points, t)`` returns field values (P, ncomp), zero outside the
    field's support.  Raises :class:`Unresolved` when the schedules run out.
    """
    if not budget > 0:
        raise InvalidParameter("budget must be positive")
    times = np.asarray(times, float)
    ref, pts, ax = sample_field(reference, M, times, d, n_grid=n_grid)
    h = ax[1] - ax[0]
    ncomp = ref.shape[-1]
    kernel = nai_kernel(activation)
    stage = budget / 3
    sigma_min = sigma_min or 4 * h
    attempts = []
    sigma = min(sigma0, 0.999)
    flat_ref = ref.reshape(len(times), -1, ncomp)
    while sigma >= sigma_min:
        moll = np.stack([np.stack([mollify(ref[k, ..., j], [h] * d, sigma) for j in range(ncomp)], -1)
                         for k in range(len(times))])
        flat_moll = moll.reshape(len(times), -1, ncomp)
        e_moll = max(_l2(flat_moll[k] - flat_ref[k], ax, d) for k in range(len(times)))
        rec = {"sigma": sigma, "mollify": e_moll}
        attempts.append(rec)
        if e_moll > stage:
            sigma /= 2
            continue
        stage_tr = (budget - e_moll) / 2
        expansion, poly, e_tr = None, None, np.inf
        for nn in nn_schedule:
            try:
                exp_try = hermite_coeffs(moll, M, nn, times)
            except Unresolved:
                break
            P = np.stack([exp_try.evaluate(pts, coeffs=exp_try.coeffs[k]) for k in range(len(times))])
            e_tr = max(_l2(P[k] - flat_moll[k], ax, d) for k in range(len(times)))
            rec.setdefault("truncate", []).append((nn, e_tr))
            if e_tr <= stage_tr:
                expansion, poly = exp_try, P
                break
        if expansion is None:
            raise Unresolved(f"Hermite truncation error {e_tr:.3g} above {stage_tr:.3g} "
                             f"at sigma={sigma:.3g} for all nn in {tuple(nn_schedule)}")
        for k_cells in cells_per_width:
            l = int(np.ceil(2 * M * k_cells / sigma))
            params = assemble(expansion, kernel, sigma, M, l)
            params.time_interp = time_interp
            net = np.stack([eval_network(params, pts, t) for t in times])
            e_q = max(_l2(net[k] - poly[k], ax, d) for k in range(len(times)))
            rec.setdefault("quadratize", []).append((l, e_q))
            if e_q <= budget - e_moll - e_tr:
                per_t = np.array([_l2(net[k] - flat_ref[k], ax, d) for k in range(len(times))])
                linf = float(np.abs(net - flat_ref).max())
                report = CompileReport(budget, float(M), sigma, expansion.nn, l, params.N, e_moll,
                                       e_tr, e_q, float(per_t.max()), linf, per_t, attempts)
                return CompileResult(params, report)
        sigma /= 2
    raise Unresolved(f"no mollifier width >= {sigma_min:.3g} meets the stage budgets for {budget:.3g}")


def field_error(params: NeuralFieldParams, reference: Callable, times, n_grid=None):
    """L2 and Linf distances on [-M, M]^d at the given times."""
    d = params.d
    n_grid = n_grid or (2001 if d == 1 else 121)
    pts, ax = _grid_points(params.M, n_grid, d)
    l2, linf = [], []
    for t in times:
        diff = eval_network(params, pts, t) - np.asarray(reference(pts, t)).reshape(len(pts), -1)
        l2.append(_l2(diff, ax, d))
        linf.append(float(np.abs(diff).max()))
    return {"l2": np.array(l2), "linf": np.array(linf)}


def neural_ode_flow(params: NeuralFieldParams, x0, T, steps, growth: Optional[Callable] = None):
    """RK4 for x' = network(x, t) on [0, T]; optional log-mass integration
    of growth(x, t) along the trajectories.  Returns (times, traj, log_mass)."""
    x = np.array(x0, float)
    if x.ndim == 1:
        x = x[:, None] if params.d == 1 else x[None, :]
    dt = T / steps
    times = np.linspace(0, T, steps + 1)
    traj = [x.copy()]
    logm = np.zeros(len(x))
    logs = [logm.copy()]

    def F(y, t):
        if np.any(np.abs(y) > params.M):
            raise BoxExit(f"trajectory left [-M, M]^d at t={t:.6g}", t)
        return eval_network(params, y, t, check_box=False)

    def Gr(y, t):
        return np.zeros(len(y)) if growth is None else np.asarray(growth(y, t), float).ravel()

    for k in range(steps):
        t = times[k]
        k1 = F(x, t); g1 = Gr(x, t)
        x2 = x + 0.5 * dt * k1; k2 = F(x2, t + dt / 2); g2 = Gr(x2, t + dt / 2)
        x3 = x + 0.5 * dt * k2; k3 = F(x3, t + dt / 2); g3 = Gr(x3, t + dt / 2)
        x4 = x + dt * k3; k4 = F(x4, t + dt); g4 = Gr(x4, t + dt)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        logm = logm + dt / 6 * (g1 + 2 * g2 + 2 * g3 + g4)
        if np.any(np.abs(x) > params.M):
            raise BoxExit(f"trajectory left [-M, M]^d at t={times[k + 1]:.6g}", times[k + 1])
        traj.append(x.copy())
        logs.append(logm.copy())
    return times, np.array(traj), np.array(logs)


def network_lipschitz(params: NeuralFieldParams, times, n_grid=2001):
    """Finite-difference Lipschitz estimate of the network on [-M, M] (d = 1)."""
    if params.d != 1:
        raise Unsupported("Lipschitz estimate implemented for d = 1")
    x = np.linspace(-params.M, params.M, n_grid)[:, None]
    worst = 0.0
    for t in times:
        v = eval_network(params, x, t)[:, 0]
        worst = max(worst, float(np.abs(np.diff(v) / np.diff(x[:, 0])).max()))
    return worst


def gronwall_envelope(eps, lip, t):
    t = np.asarray(t, float)
    if lip <= 0:
        return eps * t
    return eps * (np.exp(lip * t) - 1) / lip


def rescaled_budget(eps1, min_det, lfrak, T):
    """eps1' = eps1 min{1, min det Hess phi} / (e^L (e^{T L} - 1))."""
    return eps1 * min(1.0, min_det) / (np.exp(lfrak) * (np.exp(T * lfrak) - 1))


def choose_M(source_lo, source_hi, target_points, T, eps1p, sup_xi, step=0.5):
    """Smallest multiple of ``step`` with M > max|x| + T(eps1' + sup|xi|) and
    source and mapped points inside [-M+1, M-1]^d."""
    corners = np.abs(np.array([source_lo, source_hi])).max()
    need_a = corners + T * (eps1p + sup_xi)
    need_b = max(corners, float(np.abs(target_points).max())) + 1
    M = step * np.ceil(max(need_a, need_b) / step)
    if M <= need_a:
        M += step
    return float(M)
