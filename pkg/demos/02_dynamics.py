"""Endpoint densities, the monotone map and the mass-changing interpolation on the tilted problem.

Run: python3 demos/02_dynamics.py
"""
from pathlib import Path

import numpy as np

from uotnode import read_spec, run
from uotnode.monge_ampere import solve_map
from uotnode.transport_dynamics import DynamicsFields, build_endpoint_densities, evolve, smooth_potentials

spec = read_spec(Path(__file__).parent / "specs" / "tilted.json")
res = run(spec)
duals = smooth_potentials(res.duals, spec, eps0=0.01)
fbar, gbar = build_endpoint_densities(res.coupling, duals, spec)
tmap = solve_map(spec.f.with_values(res.coupling.kx), spec.g.with_values(res.coupling.ky))
fields = DynamicsFields.build(tmap, 1.0, duals, spec)
ev = evolve(fields, fbar, np.linspace(0, 1, 5))

print(f"mollifier width {duals.sigma0:.4f}")
print(f"mass f={spec.f.mass:.4f} g={spec.g.mass:.4f} fbar={fbar.mass:.4f} gbar={gbar.mass:.4f}")
for t, m in zip(ev.times, ev.masses):
    print(f"t={t:.2f}  mass={m:.6f}")
l1 = np.abs(ev.to_grid(-1, gbar) - gbar.flat).sum() * gbar.cell_volume
print(f"endpoint L1 error {l1:.2e} (grid spacing {gbar.h[0]:.4f})")
x = spec.f.points[::16]
print("label  T(x)  velocity")
for xi, Ti, vi in zip(x[:, 0], tmap(x)[:, 0], fields.velocity_at_label(x)[:, 0]):
    print(f"{xi:.3f}  {Ti:.4f}  {vi:+.4f}")
