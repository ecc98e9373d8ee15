"""Solve the dual iteration on two small problems and compare with the a-priori certificate.

Run: python3 demos/01_solve_and_certify.py
"""
from pathlib import Path

import numpy as np

from uotnode import compute_params, error_certificate, read_spec, run
from uotnode.metrics import rate_fit

SPECS = Path(__file__).parent / "specs"

for name in ("uniform", "tilted"):
    spec = read_spec(SPECS / f"{name}.json")
    params = compute_params(spec, L_max=200)
    res = run(spec, params)
    cert = error_certificate(res, params, spec)
    d = res.diagnostics
    steps = d["step_norm"][d["step_norm"] > 1e-13]
    print(f"== {name}: {spec.f.size} x {spec.g.size} cells, delta={spec.delta}")
    print(f"   alpha={params.alpha:.5f} q={params.q:.5f} s={params.s:.5f} r={params.r:.5f}")
    print(f"   gap={d['gap'][-1]:.2e}  kkt={d['kkt_res'][-1]:.2e}  primal={d['primal'][-1]:.8f}")
    if len(steps) >= 5:
        print(f"   fitted step ratio {rate_fit(steps).ratio:.3f} vs sqrt(r) {np.sqrt(params.r):.3f}")
    print(f"   certificate B(0)={cert.bounds[0]:.3e}  B(50)={cert.bounds[50]:.3e}")
    print(f"   k1 range [{res.duals.k1.min():.4f}, {res.duals.k1.max():.4f}]")
