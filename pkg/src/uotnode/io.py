"""File formats: density/cost JSON, CSV fallback, problem spec JSON.

Floats are written with ``repr`` precision so every reader reproduces the
written array bit for bit.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import GridMismatch, InvalidParameter, SpecError
from .uot_core import CostGrid, GridDensity, ProblemSpec


def density_to_dict(rho: GridDensity):
    return {
        "dimension": rho.d,
        "axes": [{"lo": a, "hi": b, "n": k} for a, b, k in zip(rho.lo, rho.hi, rho.n)],
        "values": [float(v) for v in rho.flat],
        "c_lower": rho.c_lower,
    }


def density_from_dict(doc):
    try:
        axes = doc["axes"]
        if int(doc.get("dimension", len(axes))) != len(axes):
            raise GridMismatch("dimension does not match number of axes")
        return GridDensity([a["lo"] for a in axes], [a["hi"] for a in axes],
                           [a["n"] for a in axes], np.array(doc["values"], dtype=float),
                           doc["c_lower"])
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed density document: {exc}") from exc


def potential_to_dict(grid: GridDensity, values):
    """Potential samples in the density layout (no positivity floor)."""
    doc = density_to_dict(grid)
    doc["values"] = [float(v) for v in np.asarray(values).ravel()]
    doc["c_lower"] = None
    return doc


def write_potentials_json(duals, spec, path):
    doc = {"k1": potential_to_dict(spec.f, duals.k1), "k2": potential_to_dict(spec.g, duals.k2)}
    if duals.k1_tilde is not None:
        doc["k1_tilde"] = potential_to_dict(spec.f, duals.k1_tilde)
        doc["k2_tilde"] = potential_to_dict(spec.g, duals.k2_tilde)
        doc["sigma0"] = duals.sigma0
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def read_potentials_json(path):
    from .uot_core import DualPotentials
    try:
        doc = json.loads(Path(path).read_text())
        get = lambda k: np.array(doc[k]["values"], float) if k in doc else None
        return DualPotentials(get("k1"), get("k2"), get("k1_tilde"), get("k2_tilde"), doc.get("sigma0"))
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed potentials document: {exc}") from exc


def write_density_json(rho: GridDensity, path):
    Path(path).write_text(json.dumps(density_to_dict(rho)))


def read_density_json(path):
    return density_from_dict(json.loads(Path(path).read_text()))


def write_density_csv(rho: GridDensity, path):
    axes = "|".join(f"{a!r}:{b!r}:{k}" for a, b, k in zip(rho.lo, rho.hi, rho.n))
    with open(path, "w", newline="") as fh:
        fh.write(f"# dimension={rho.d}; axes={axes}; c_lower={rho.c_lower!r}\n")
        for v in rho.flat:
            fh.write(repr(float(v)) + "\n")


def read_density_csv(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise SpecError("CSV density needs a '# dimension=...; axes=...; c_lower=...' header")
        meta = dict(part.strip().split("=", 1) for part in header[1:].split(";"))
        axes = [tuple(s.split(":")) for s in meta["axes"].split("|")]
        rows = [r[0] for r in csv.reader(fh) if r]
    lo = [float(a[0]) for a in axes]
    hi = [float(a[1]) for a in axes]
    n = [int(a[2]) for a in axes]
    if int(meta["dimension"]) != len(n):
        raise GridMismatch("dimension does not match number of axes")
    return GridDensity(lo, hi, n, np.array([float(r) for r in rows]), float(meta["c_lower"]))


def read_density(path):
    path = Path(path)
    if not path.exists():
        raise SpecError(f"file not found: {path}")
    if path.suffix.lower() == ".csv":
        return read_density_csv(path)
    return read_density_json(path)


def write_density(rho, path):
    if Path(path).suffix.lower() == ".csv":
        write_density_csv(rho, path)
    else:
        write_density_json(rho, path)


def cost_from_dict(doc, f, g):
    kind = doc.get("kind", "zero")
    if kind == "zero":
        return CostGrid.zeros(f, g)
    if kind == "squared_distance":
        return CostGrid.squared_distance(f, g)
    if kind == "values":
        return CostGrid(np.array(doc["values"], dtype=float).reshape(f.size, g.size), "values")
    raise InvalidParameter(f"unknown cost kind {kind!r}")


def cost_to_dict(C: CostGrid):
    if C.tag in ("zero", "squared_distance"):
        return {"kind": C.tag}
    return {"kind": "values", "values": [float(v) for v in C.values.ravel()]}


def spec_to_dict(spec: ProblemSpec):
    return {"f": density_to_dict(spec.f), "g": density_to_dict(spec.g),
            "cost": cost_to_dict(spec.C), "delta": spec.delta}


def spec_from_dict(doc, delta=None):
    try:
        f = density_from_dict(doc["f"])
        g = density_from_dict(doc["g"])
        C = cost_from_dict(doc.get("cost", {"kind": "zero"}), f, g)
        return ProblemSpec(f, g, C, doc["delta"] if delta is None else delta)
    except KeyError as exc:
        raise SpecError(f"spec document misses field {exc}") from exc


def write_spec(spec, path):
    Path(path).write_text(json.dumps(spec_to_dict(spec)))


def read_spec(path, delta=None):
    path = Path(path)
    if not path.exists():
        raise SpecError(f"file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec is not valid JSON: {exc}") from exc
    return spec_from_dict(doc, delta)
