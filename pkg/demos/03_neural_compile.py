"""Full pipeline on the dilation problem: compile the velocity into a shallow network and fly it.

Run: python3 demos/03_neural_compile.py [out_dir]
"""
import sys
from pathlib import Path

from uotnode import read_spec
from uotnode.pipeline import RunConfig, run_pipeline, write_bundle

spec = read_spec(Path(__file__).parent / "specs" / "dilation.json")
for eps1 in (0.1, 0.05):
    r = run_pipeline(spec, RunConfig(eps1=eps1))
    c, fl = r.report["compile"], r.report["flow"]
    print(f"== eps1={eps1}: M={c['M']} sigma={c['sigma']} nn={c['nn']} l={c['l']} N={c['N']}")
    print(f"   stage errors: mollify {c['mollify']:.3e} truncate {c['truncate']:.3e} "
          f"quadratize {c['quadratize']:.3e} total L2 {c['total_l2']:.3e}")
    print(f"   characteristic error at T {fl['char_sup_error'][-1]:.2e}, envelope {fl['envelope'][-1]:.2e}")
    for d in r.report["metrics"]["dbl"]:
        print(f"   d_bL at t={d['t']:.2f}: {d['dbl']:.3e}")
if len(sys.argv) > 1:
    print("bundle written to", write_bundle(r, sys.argv[1]))
