"""Command line front end.

    uotnode solve     --spec spec.json --out DIR
    uotnode dynamics  --spec spec.json --out DIR
    uotnode compile   --spec spec.json --out DIR --eps1 0.05
    uotnode metrics   --a mu.json --b nu.json   |   --series values.txt
    uotnode pipeline  --spec spec.json --out DIR [--config run.cfg]

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
from dataclasses import fields as dc_fields
import json
import os
from pathlib import Path
import sys

import numpy as np

from .errors import InvalidParameter, SpecError, UOTError
from .io import read_density, read_spec, write_density_json, write_potentials_json
from .metrics import DiscreteMeasure, dbl_distance, rate_fit
from .monge_ampere import solve_map, write_map_json
from .neural_field import choose_M, compile_field, rescaled_budget, write_params_json
from .pipeline import (RunConfig, _staged, estimate_lfrak, extended_velocity, run_pipeline, write_bundle,
                       write_certificate_csv, write_iterations_csv, write_trajectories_csv)
from .sinkhorn import compute_params, error_certificate, run
from .transport_dynamics import DynamicsFields, build_endpoint_densities, evolve, smooth_potentials


def read_config(path):
    """Flat ``key = value`` file; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise SpecError(f"config file not found: {path}")
    known = {f.name: f for f in dc_fields(RunConfig)}
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{path}:{ln}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise SpecError(f"{path}:{ln}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


_BOOL = {"paper_literal_bound", "tensor_ma"}
_INT = {"L", "n_times", "compile_stamps", "flow_steps", "dbl_cap", "seed"}
_FLOAT = {"delta", "eps0", "eps1", "T"}


def _coerce(key, val):
    try:
        if key in _BOOL:
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if key in _INT:
            return int(val)
        if key in _FLOAT:
            return float(val)
    except ValueError as exc:
        raise SpecError(f"bad value for {key}: {val!r}") from exc
    return val


def build_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for f in dc_fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "out" not in values and os.environ.get("UOTNODE_OUT"):
        values["out"] = os.environ["UOTNODE_OUT"]
    return RunConfig(**values).validate()


def _load(cfg):
    if cfg.spec is None:
        raise SpecError("no spec file given (--spec or 'spec = ...' in the config)")
    return read_spec(cfg.spec, cfg.delta)


def _dump(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1, default=float))


def _solve_stage(spec, cfg):
    params = _staged("solve", compute_params, spec, L_max=cfg.L, paper_literal_bound=cfg.paper_literal_bound)
    res = _staged("solve", run, spec, params)
    cert = _staged("solve", error_certificate, res, params, spec)
    return params, res, cert


def cmd_solve(args):
    cfg = build_config(args)
    spec = _load(cfg)
    params, res, cert = _solve_stage(spec, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_potentials_json(res.duals, spec, out / "duals.json")
    _dump(out / "coupling.json", {"shape": list(res.coupling.values.shape),
                                  "values": res.coupling.values.ravel().tolist()})
    write_iterations_csv(res, out / "iterations.csv", cert.bounds)
    write_certificate_csv(cert.bounds, out / "certificate.csv")
    d = res.diagnostics
    gap, primal = float(d["gap"][-1]), float(d["primal"][-1])
    converged = gap <= args.gap_tol * (1 + abs(primal))
    report = {"iterations": res.iterations, "gap": gap, "kkt_res": float(d["kkt_res"][-1]),
              "primal": primal, "dual": float(d["dual"][-1]), "converged": converged,
              "flags": res.flags, "certificate_final": float(cert.bounds[-1])}
    _dump(out / "report.json", report)
    print(f"iterations={res.iterations} gap={gap:.3e} kkt={report['kkt_res']:.3e} converged={converged}")
    return 0 if converged else 3


def _dynamics(spec, cfg):
    params, res, cert = _solve_stage(spec, cfg)
    duals = _staged("smooth", smooth_potentials, res.duals, spec, cfg.eps0)
    fbar, gbar = _staged("dynamics", build_endpoint_densities, res.coupling, duals, spec)
    kx = spec.f.with_values(res.coupling.kx)
    ky = spec.g.with_values(res.coupling.ky)
    tmap = _staged("map", solve_map, kx, ky)
    fields = _staged("dynamics", DynamicsFields.build, tmap, cfg.T, duals, spec)
    times = np.linspace(0, cfg.T, cfg.n_times)
    ev = _staged("dynamics", evolve, fields, fbar, times)
    return res, duals, fbar, gbar, tmap, fields, ev


def cmd_dynamics(args):
    cfg = build_config(args)
    spec = _load(cfg)
    res, duals, fbar, gbar, tmap, fields, ev = _dynamics(spec, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_map_json(tmap, out / "map.json")
    write_density_json(fbar, out / "fbar.json")
    write_density_json(gbar, out / "gbar.json")
    write_trajectories_csv(ev, out / "trajectories.csv")
    with open(out / "eulerian.csv", "w") as fh:
        d = gbar.d
        fh.write(",".join(["t"] + [f"x{a}" for a in range(d)] + ["mu"]) + "\n")
        for i, t in enumerate(ev.times):
            vals = ev.to_grid(i, gbar)
            for p, v in zip(gbar.points, vals):
                fh.write(",".join(repr(float(s)) for s in (t, *p, v)) + "\n")
    l1 = float(np.abs(ev.to_grid(-1, gbar) - gbar.flat).sum() * gbar.cell_volume)
    _dump(out / "report.json", {"sigma0": duals.sigma0, "masses": ev.masses.tolist(),
                                "mass_gbar": gbar.mass, "endpoint_l1": l1})
    print(f"sigma0={duals.sigma0:.4g} endpoint_l1={l1:.3e} mass_T={ev.masses[-1]:.6g}")
    return 0


def cmd_compile(args):
    cfg = build_config(args)
    spec = _load(cfg)
    res, duals, fbar, gbar, tmap, fields, ev = _dynamics(spec, cfg)
    lf = estimate_lfrak(fields, duals, spec, ev.times)
    eps1p = rescaled_budget(cfg.eps1, float(tmap.det_values.min()), lf["lfrak"], cfg.T)
    sup_xi = float(np.abs(fields.velocity_at_label(fields.source.points)).max())
    M = choose_M(spec.f.lo, spec.f.hi, tmap.T_values, cfg.T, eps1p, sup_xi)
    stamps = np.linspace(0, cfg.T, cfg.compile_stamps)
    comp = _staged("compile", compile_field, lambda p, t: extended_velocity(fields, p, t), M, stamps,
                   cfg.eps1, d=spec.f.d, activation=cfg.activation,
                   n_grid=None if spec.f.d == 1 else 81)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_params_json(comp.params, out / "neural_params.json")
    rep = dict(comp.report.as_dict(), eps1_rescaled=float(eps1p), **lf)
    _dump(out / "compile_report.json", rep)
    print(f"N={comp.params.N} sigma={rep['sigma']:.4g} nn={rep['nn']} l={rep['l']} "
          f"error_l2={rep['total_l2']:.3e} budget={cfg.eps1:g}")
    return 0


def cmd_metrics(args):
    if args.series:
        path = Path(args.series)
        if not path.exists():
            raise SpecError(f"file not found: {path}")
        vals = [float(s) for s in path.read_text().split()]
        fit = rate_fit(vals)
        print(json.dumps({"ratio": fit.ratio, "r2": fit.r2}))
        return 0
    if not (args.a and args.b):
        raise InvalidParameter("metrics needs --a and --b density files, or --series")
    mu = DiscreteMeasure.from_density(read_density(args.a))
    nu = DiscreteMeasure.from_density(read_density(args.b))
    r = dbl_distance(mu, nu, cap=args.dbl_cap or 500)
    print(json.dumps({"dbl": r.value, "a": r.a, "b": r.b, "lower_bound": r.lower_bound}))
    return 0


def cmd_pipeline(args):
    cfg = build_config(args)
    spec = _load(cfg)
    result = run_pipeline(spec, cfg)
    write_bundle(result, cfg.out)
    rep = result.report
    print(f"gap={rep['solve']['gap']:.3e} endpoint_l1={rep['dynamics']['endpoint_l1']:.3e} "
          f"field_l2={rep['compile']['total_l2']:.3e} dbl_T={rep['metrics']['dbl'][-1]['dbl']:.3e}")
    return 0


def _common(p, compile_opts=False):
    p.add_argument("--config", help="flat key = value run configuration")
    p.add_argument("--spec", help="problem spec JSON")
    p.add_argument("--out", help="output directory (env UOTNODE_OUT as fallback)")
    p.add_argument("--delta", type=float)
    p.add_argument("--L", "--iters", dest="L", type=int, help="iterations (L+1 steps are taken)")
    p.add_argument("--paper-literal-bound", dest="paper_literal_bound", action="store_const", const=True,
                   help="clamp with 1 - |Omega|/density instead of the delta-scaled bound")
    p.add_argument("--seed", type=int, help="reserved; every stage is deterministic")
    p.add_argument("--eps0", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--n-times", dest="n_times", type=int)
    if compile_opts:
        p.add_argument("--eps1", type=float)
        p.add_argument("--compile-stamps", dest="compile_stamps", type=int)
        p.add_argument("--activation", choices=["relu", "sigmoid"])
        p.add_argument("--flow-steps", dest="flow_steps", type=int)
        p.add_argument("--dbl-cap", dest="dbl_cap", type=int)
        p.add_argument("--external-ma", dest="external_ma")


def make_parser():
    ap = argparse.ArgumentParser(prog="uotnode", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("solve", help="run the dual iteration")
    _common(p)
    p.add_argument("--gap-tol", dest="gap_tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("dynamics", help="solve, map and evolve densities")
    _common(p)
    p.set_defaults(func=cmd_dynamics)
    p = sub.add_parser("compile", help="compile the velocity field to network parameters")
    _common(p, compile_opts=True)
    p.set_defaults(func=cmd_compile)
    p = sub.add_parser("metrics", help="bounded-Lipschitz distance or rate fit")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--series")
    p.add_argument("--dbl-cap", dest="dbl_cap", type=int)
    p.set_defaults(func=cmd_metrics)
    p = sub.add_parser("pipeline", help="full run with artifact bundle")
    _common(p, compile_opts=True)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except UOTError as exc:
        stage = getattr(exc, "stage", None)
        tag = f"[{stage}] " if stage else ""
        print(f"error: {tag}{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
