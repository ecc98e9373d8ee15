"""Six-sequence accelerated proximal iteration for the dual problem.

Each step takes a gradient of G_w = G - (c/4) w at the extrapolated point,
a clamped proximal update of the dual pair, and a momentum average.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import warnings

import numpy as np

from .errors import InvalidParameter, NumericalBlowup
from .uot_core import (Coupling, DualPotentials, ProblemSpec, G_eval, G_gradients,
                       G_w_gradients, kkt_recover_coupling, kkt_residuals, w_norm)


@dataclass(frozen=True)
class SolverParams:
    alpha: float
    q: float
    s: float
    r: float
    delta: float
    c: float
    L_max: int = 300
    tol: float = 0.0
    paper_literal_bound: bool = False
    printed_gradient: bool = False


def compute_params(spec: ProblemSpec, L_max=300, tol=0.0, paper_literal_bound=False,
                   printed_gradient=False):
    spec.check_delta()
    c, E = spec.c, spec.E
    alpha = np.sqrt(2 * (spec.vol_max ** 2 + (E - c / 4) ** 2))
    q = 2 * np.sqrt(alpha / c)
    s = 0.5 * np.sqrt(alpha * c)
    r = q / (1 + q)
    return SolverParams(float(alpha), float(q), float(s), float(r), spec.delta, c,
                        int(L_max), float(tol), paper_literal_bound, printed_gradient)


@dataclass
class SolverState:
    X: np.ndarray
    X0: np.ndarray
    Xs: np.ndarray
    Y: np.ndarray
    Y0: np.ndarray
    Ys: np.ndarray
    n: int = 0

    @classmethod
    def zeros(cls, spec: ProblemSpec):
        nx, ny = spec.f.size, spec.g.size
        return cls(*(np.zeros(k) for k in (nx, nx, nx, ny, ny, ny)))


def step(state: SolverState, spec: ProblemSpec, params: SolverParams):
    c4, s, r, q = params.c / 4, params.s, params.r, params.q
    if params.printed_gradient:
        X, Y = G_gradients(state.Xs, state.Ys, spec)
    else:
        X, Y = G_w_gradients(state.Xs, state.Ys, spec)
    ux, uy = spec.bounds(literal=params.paper_literal_bound)
    X0 = np.minimum((s * state.X0 - ((1 + r) * X - r * state.X)) / (c4 + s), ux)
    Y0 = np.minimum((s * state.Y0 - ((1 + r) * Y - r * state.Y)) / (c4 + s), uy)
    Xs = (q * state.Xs + X0) / (1 + q)
    Ys = (q * state.Ys + Y0) / (1 + q)
    new = SolverState(X, X0, Xs, Y, Y0, Ys, state.n + 1)
    for name in ("X", "X0", "Xs", "Y", "Y0", "Ys"):
        if not np.all(np.isfinite(getattr(new, name))):
            raise NumericalBlowup(f"non-finite {name} at iterate {new.n}", new.n)
    return new


@dataclass
class RunResult:
    duals: DualPotentials
    coupling: Coupling
    diagnostics: dict
    state: SolverState
    params: SolverParams
    history: list = field(default_factory=list, repr=False)
    flags: list = field(default_factory=list)

    @property
    def iterations(self):
        return self.state.n


def run(spec: ProblemSpec, params: SolverParams = None, L=None, early_stop=False,
        keep_history=False):
    """Run L+1 steps from zero and return (X0^{L+1}, Y0^{L+1}) with diagnostics.

    With ``early_stop`` the loop ends once the duality gap is below
    ``params.tol * (1 + |primal|)``.
    """
    params = params or compute_params(spec)
    L = params.L_max if L is None else int(L)
    if L < 0:
        raise InvalidParameter("L must be nonnegative")
    state = SolverState.zeros(spec)
    diag = {k: [] for k in ("n", "step_norm", "step_norm_x", "step_norm_y", "gap",
                            "kkt_res", "primal", "dual")}
    history = []
    flags = []
    for _ in range(L + 1):
        new = step(state, spec, params)
        dx = np.sqrt(((new.X0 - state.X0) ** 2).sum() * spec.hx)
        dy = np.sqrt(((new.Y0 - state.Y0) ** 2).sum() * spec.hy)
        duals = DualPotentials(new.X0, new.Y0)
        k = kkt_recover_coupling(duals, spec)
        rep = kkt_residuals(k, duals, spec)
        diag["n"].append(new.n)
        diag["step_norm"].append(float(np.hypot(dx, dy)))
        diag["step_norm_x"].append(float(dx))
        diag["step_norm_y"].append(float(dy))
        diag["gap"].append(rep.gap)
        diag["kkt_res"].append(rep.max_residual)
        diag["primal"].append(rep.primal)
        diag["dual"].append(rep.dual)
        if keep_history:
            history.append((new.X0.copy(), new.Y0.copy()))
        state = new
        if early_stop and params.tol > 0 and rep.gap < params.tol * (1 + abs(rep.primal)):
            break
    diag = {k: np.array(v) for k, v in diag.items()}
    gaps = diag["gap"]
    tol_gap = 1e-8 * (1 + np.abs(diag["primal"]))
    half = len(gaps) // 2
    if half and np.any(np.diff(gaps[half:]) > tol_gap[half + 1:]):
        flags.append("non_monotone_gap")
        warnings.warn("duality gap not monotone over the second half of the run", RuntimeWarning)
    duals = DualPotentials(state.X0, state.Y0)
    return RunResult(duals, kkt_recover_coupling(duals, spec), diag, state, params, history, flags)


@dataclass
class Certificate:
    bounds: np.ndarray
    G0: float
    G_hat: float
    w_upper: float


def error_certificate(result: RunResult, params: SolverParams, spec: ProblemSpec,
                      G_hat=None):
    """B(m) bounding ||k* - (X0^{m+1}, Y0^{m+1})||^2 for m = 0 .. iterations-1.

    G(k*) is unknown; G_hat = (mass f + mass g)/2 - min primal is a weak
    duality lower bound for it, and w(k*) is replaced by an upper bound that
    uses the c-strong convexity of G around the returned duals.
    """
    c = spec.c
    G0 = G_eval(np.zeros(spec.f.size), np.zeros(spec.g.size), spec)
    if G_hat is None:
        G_hat = 0.5 * (spec.f.mass + spec.g.mass) - float(np.min(result.diagnostics["primal"]))
    k1, k2 = result.duals.k1, result.duals.k2
    rho = np.sqrt(max(0.0, 2.0 / c * (G_eval(k1, k2, spec) - G_hat)))
    w_up = 0.5 * (np.sqrt(2 * w_norm(k1, k2, spec)) + rho) ** 2
    m = np.arange(result.iterations)
    B = 4 * params.r ** m / c * (params.q * max(0.0, G0 - G_hat) + params.s * w_up)
    return Certificate(B, float(G0), float(G_hat), float(w_up))


def with_overrides(params: SolverParams, **kw):
    return replace(params, **kw)
