"""End-to-end run: solve, smooth, map, dynamics, compile, neural flow, metrics.

Every stage error is re-raised with a ``stage`` attribute so the command line
can report where a run stopped.  The bundle writer produces the same bytes for
the same configuration (no timestamps, sorted keys, repr floats).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidParameter, SpecError, Unsupported, UOTError
from .metrics import DiscreteMeasure, dbl_distance
from .monge_ampere import ExternalMaSolver, FileExchangeMaSolver, MonotoneMap, solve_map, write_map_json
from .neural_field import (CompileResult, choose_M, compile_field, eval_network, gronwall_envelope,
                           network_lipschitz, neural_ode_flow, rescaled_budget, write_params_json)
from .sinkhorn import RunResult, compute_params, error_certificate, run
from .transport_dynamics import (DynamicsFields, EvolvedDensity, build_endpoint_densities, evolve,
                                 smooth_potentials, velocity)
from .uot_core import DualPotentials, GridDensity, ProblemSpec, kkt_recover_coupling
from .io import write_density_json, write_potentials_json


@dataclass
class RunConfig:
    spec: Optional[str] = None
    out: str = "uot_out"
    delta: Optional[float] = None
    L: int = 300
    eps0: float = 0.01
    eps1: float = 0.1
    T: float = 1.0
    n_times: int = 65
    compile_stamps: int = 5
    flow_steps: int = 64
    activation: str = "relu"
    paper_literal_bound: bool = False
    tensor_ma: bool = True
    external_ma: Optional[str] = None
    dbl_cap: int = 500
    seed: Optional[int] = None

    def validate(self):
        for name in ("eps0", "eps1", "T"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive")
        if self.L < 1:
            raise InvalidParameter("L must be at least 1")
        if self.n_times < 3 or self.compile_stamps < 2 or self.flow_steps < 2 or self.flow_steps % 2:
            raise InvalidParameter("need n_times >= 3, compile_stamps >= 2 and an even flow_steps")
        if self.spec is not None and not Path(self.spec).exists():
            raise SpecError(f"file not found: {self.spec}")
        return self


def _staged(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except UOTError as exc:
        exc.stage = stage
        raise


def extended_velocity(fields: DynamicsFields, x, t):
    """xi_t on the moved support, continued to the whole box as a C^1 field.

    Outside the support each component is continued linearly along its own
    axis with the one-sided edge slope, and every component is multiplied by
    the cosine taper (1 + cos(pi s))/2 in the distance s to the support,
    which vanishes together with its derivative at s = 0 and s = 1.
    """
    x = np.atleast_2d(x)
    lam = t / fields.T
    v = velocity(fields, x, t, clip=True)
    taper = np.ones(len(x))
    for a, am in enumerate(fields.tmap.axis_maps):
        lo, hi = fields.source.lo[a], fields.source.hi[a]
        ends = np.array([lo, hi])
        Tend = am(ends)
        ylo, yhi = (1 - lam) * ends + lam * Tend
        probe = np.zeros((2, fields.d))
        probe[:, a] = ends
        dT = fields.tmap.axis_derivative(probe)[:, a]
        slope = (dT - 1) / fields.T / ((1 - lam) + lam * dT)
        below = np.minimum(0.0, x[:, a] - ylo)
        above = np.maximum(0.0, x[:, a] - yhi)
        v[:, a] += slope[0] * below + slope[1] * above
        s = np.clip(-below + above, 0.0, 1.0)
        taper *= 0.5 * (1 + np.cos(np.pi * s))
    return v * taper[:, None]


def _lip_along_axes(vals, grid: GridDensity, pos):
    """Largest difference quotient along grid axes of values at moved points."""
    v = np.asarray(vals).reshape(grid.n + (-1,))
    p = pos.reshape(grid.n + (grid.d,))
    worst = 0.0
    for a in range(grid.d):
        if grid.n[a] < 2:
            continue
        dv = np.linalg.norm(np.diff(v, axis=a), axis=-1)
        dp = np.linalg.norm(np.diff(p, axis=a), axis=-1)
        worst = max(worst, float((dv / dp).max()))
    return worst


def estimate_lfrak(fields: DynamicsFields, duals: DualPotentials, spec: ProblemSpec, times):
    """max(Lip xi, Lip zeta, 1 + delta max|Omega| (|k1|_inf + |k2|_inf) / (2E))."""
    x = fields.source.points
    lip_xi = lip_ze = 0.0
    for t in times:
        pos = fields.forward(x, t)
        xi = fields.velocity_at_label(x)
        ze = fields.growth_at_label(x, t)
        lip_xi = max(lip_xi, _lip_along_axes(xi, fields.source, pos))
        lip_ze = max(lip_ze, _lip_along_axes(ze[:, None], fields.source, pos))
    third = 1 + spec.delta * spec.vol_max * (np.abs(duals.k1).max() + np.abs(duals.k2).max()) / (2 * spec.E)
    return {"lip_xi": lip_xi, "lip_zeta": lip_ze, "third": float(third),
            "lfrak": float(max(lip_xi, lip_ze, third))}


def reference_dynamics(spec: ProblemSpec, duals: DualPotentials, T, external=None):
    """Exact (unsmoothed) dynamics from a given pair of duals."""
    coupling = kkt_recover_coupling(duals, spec)
    plain = DualPotentials(duals.k1, duals.k2)
    fbar, gbar = build_endpoint_densities(coupling, plain, spec)
    kx = spec.f.with_values(coupling.kx)
    ky = spec.g.with_values(coupling.ky)
    tmap = solve_map(kx, ky, external)
    fields = DynamicsFields.build(tmap, T, plain, spec)
    return fields, fbar, gbar


def measures_at(evolved: EvolvedDensity, index):
    return DiscreteMeasure(evolved.positions[index], evolved.weights[index])


@dataclass
class PipelineResult:
    config: RunConfig
    spec: ProblemSpec
    solve: RunResult
    certificate: object
    duals: DualPotentials
    fbar: GridDensity
    gbar: GridDensity
    tmap: MonotoneMap
    fields: DynamicsFields
    evolved: EvolvedDensity
    compiled: CompileResult
    flow_times: np.ndarray
    flow: np.ndarray
    flow_weights: np.ndarray
    report: dict = field(default_factory=dict)

    def neural_measure(self, t):
        k = int(np.argmin(np.abs(self.flow_times - t)))
        return DiscreteMeasure(self.flow[k], self.flow_weights[k])


def run_pipeline(spec: ProblemSpec, cfg: RunConfig, reference_duals: Optional[DualPotentials] = None):
    cfg.validate()
    if cfg.delta is not None:
        spec = ProblemSpec(spec.f, spec.g, spec.C, cfg.delta)
    external = FileExchangeMaSolver(cfg.external_ma, Path(cfg.out) / "ma_exchange") if cfg.external_ma else None
    if spec.f.d > 1 and not cfg.tensor_ma and external is None:
        raise Unsupported("d >= 2 needs the tensor map or an external Monge-Ampere solver")

    params = _staged("solve", compute_params, spec, L_max=cfg.L,
                     paper_literal_bound=cfg.paper_literal_bound)
    res = _staged("solve", run, spec, params)
    cert = _staged("solve", error_certificate, res, params, spec)

    duals = _staged("smooth", smooth_potentials, res.duals, spec, cfg.eps0)
    fbar, gbar = _staged("dynamics", build_endpoint_densities, res.coupling, duals, spec)
    kx = spec.f.with_values(res.coupling.kx)
    ky = spec.g.with_values(res.coupling.ky)
    tmap = _staged("map", solve_map, kx, ky, external)
    fields = _staged("dynamics", DynamicsFields.build, tmap, cfg.T, duals, spec)
    times = np.linspace(0, cfg.T, cfg.n_times)
    evolved = _staged("dynamics", evolve, fields, fbar, times)

    # compile the extended velocity field
    lf = estimate_lfrak(fields, duals, spec, times)
    min_det = float(tmap.det_values.min())
    eps1p = rescaled_budget(cfg.eps1, min_det, lf["lfrak"], cfg.T)
    sup_xi = float(np.abs(fields.velocity_at_label(fields.source.points)).max())
    M = choose_M(spec.f.lo, spec.f.hi, tmap.T_values, cfg.T, eps1p, sup_xi)
    stamps = np.linspace(0, cfg.T, cfg.compile_stamps)
    compiled = _staged("compile", compile_field, lambda p, t: extended_velocity(fields, p, t), M, stamps,
                       cfg.eps1, d=spec.f.d, activation=cfg.activation,
                       n_grid=None if spec.f.d == 1 else 81)

    x0 = fields.source.points
    flow_times, flow, _ = _staged("flow", neural_ode_flow, compiled.params, x0, cfg.T, cfg.flow_steps)
    mf = np.stack([fields.mass_factor_at_label(x0, t) for t in flow_times])
    flow_weights = fbar.flat * mf * fbar.cell_volume

    # characteristics error against the exact interpolation and its envelope
    exact = np.stack([fields.forward(x0, t) for t in flow_times])
    char_err = np.linalg.norm(flow - exact, axis=2).max(axis=1)
    net_err = 0.0
    for k, t in enumerate(flow_times):
        ref = velocity(fields, exact[k], t, clip=True)
        net_err = max(net_err, float(np.linalg.norm(eval_network(compiled.params, exact[k], t) - ref,
                                                    axis=1).max()))
    lip_net = network_lipschitz(compiled.params, stamps) if spec.f.d == 1 else lf["lfrak"]
    envelope = gronwall_envelope(net_err, lip_net, flow_times)

    out = PipelineResult(cfg, spec, res, cert, duals, fbar, gbar, tmap, fields, evolved, compiled,
                         flow_times, flow, flow_weights)
    ref_duals = reference_duals or res.duals
    ref_fields, ref_fbar, _ = _staged("metrics", reference_dynamics, spec, ref_duals, cfg.T, external)
    dbl_t = [0.0, cfg.T / 2, cfg.T]
    ref_ev = _staged("metrics", evolve, ref_fields, ref_fbar, dbl_t)
    dbl = []
    for k, t in enumerate(dbl_t):
        r = _staged("metrics", dbl_distance, out.neural_measure(t), measures_at(ref_ev, k), cap=cfg.dbl_cap)
        dbl.append({"t": t, "dbl": r.value, "lower_bound": r.lower_bound})

    diag = res.diagnostics
    out.report = {
        "solve": {"iterations": res.iterations, "gap": float(diag["gap"][-1]),
                  "kkt_res": float(diag["kkt_res"][-1]), "primal": float(diag["primal"][-1]),
                  "dual": float(diag["dual"][-1]), "flags": res.flags,
                  "params": {k: v for k, v in asdict(params).items()}},
        "certificate": {"G0": cert.G0, "G_hat": cert.G_hat, "w_upper": cert.w_upper,
                        "final_bound": float(cert.bounds[-1]) if len(cert.bounds) else None},
        "smooth": {"sigma0": duals.sigma0, "eps0": cfg.eps0},
        "dynamics": {"masses": evolved.masses.tolist(), "mass_gbar": gbar.mass,
                     "endpoint_l1": float(np.abs(evolved.to_grid(-1, gbar) - gbar.flat).sum() * gbar.cell_volume),
                     "min_det": min_det},
        "compile": dict(compiled.report.as_dict(), eps1_rescaled=float(eps1p), **lf),
        "flow": {"char_sup_error": char_err.tolist(), "net_sup_error": net_err, "net_lipschitz": lip_net,
                 "envelope": envelope.tolist(),
                 "within_envelope": bool(np.all(char_err <= envelope * (1 + 1e-6) + 1e-12))},
        "metrics": {"dbl": dbl, "reference": "given duals" if reference_duals is not None else "solver duals"},
    }
    return out


def _num(v):
    return repr(float(v))


def write_bundle(result: PipelineResult, out_dir):
    """Write every artifact of a pipeline run into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = result.duals
    write_potentials_json(d, result.spec, out / "duals.json")
    k = result.solve.coupling
    (out / "coupling.json").write_text(json.dumps(
        {"shape": list(k.values.shape), "values": k.values.ravel().tolist()}, sort_keys=True))
    write_iterations_csv(result.solve, out / "iterations.csv", result.certificate.bounds)
    write_certificate_csv(result.certificate.bounds, out / "certificate.csv")
    write_map_json(result.tmap, out / "map.json")
    write_density_json(result.fbar, out / "fbar.json")
    write_density_json(result.gbar, out / "gbar.json")
    write_trajectories_csv(result.evolved, out / "trajectories.csv")
    write_params_json(result.compiled.params, out / "neural_params.json")
    with open(out / "neural_flow.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        dim = result.flow.shape[2]
        w.writerow(["t", "label"] + [f"x{a}" for a in range(dim)] + ["weight"])
        for i, t in enumerate(result.flow_times):
            for j in range(result.flow.shape[1]):
                w.writerow([_num(t), j] + [_num(v) for v in result.flow[i, j]] + [_num(result.flow_weights[i, j])])
    (out / "report.json").write_text(json.dumps(result.report, sort_keys=True, indent=1, default=float))
    return out


def write_iterations_csv(res: RunResult, path, bounds=None):
    """One row per step; ``certificate`` is B(n-1), the bound for the iterate after step n."""
    keys = ["n", "step_norm", "step_norm_x", "step_norm_y", "gap", "kkt_res", "primal", "dual"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + (["certificate"] if bounds is not None else []))
        for i, row in enumerate(zip(*(res.diagnostics[k] for k in keys))):
            extra = []
            if bounds is not None:
                extra = [_num(bounds[i]) if i < len(bounds) else ""]
            w.writerow([int(row[0])] + [_num(v) for v in row[1:]] + extra)


def write_certificate_csv(bounds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "bound"])
        for m, b in enumerate(bounds):
            w.writerow([m, _num(b)])


def write_trajectories_csv(ev: EvolvedDensity, path):
    d = ev.labels.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"label{a}" for a in range(d)] + [f"x{a}" for a in range(d)] + ["mu", "mass_factor"])
        for row in ev.trajectory_rows():
            w.writerow([_num(v) for v in row])
