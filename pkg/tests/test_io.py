import json

import numpy as np
import pytest

from conftest import make_spec
from uotnode.errors import GridMismatch, SpecError
from uotnode.io import (density_from_dict, density_to_dict, read_density, read_spec, spec_from_dict,
                        spec_to_dict, write_density, write_spec)
from uotnode.uot_core import GridDensity


@pytest.mark.parametrize("suffix", [".json", ".csv"])
def test_density_roundtrip_bitwise(tmp_path, suffix):
    rho = GridDensity.from_function([0, -1], [1, 1], [5, 3], lambda p: 1 + np.sin(p[:, 0] + 2 * p[:, 1]) / 3)
    path = tmp_path / f"rho{suffix}"
    write_density(rho, path)
    back = read_density(path)
    assert back.same_grid(rho)
    assert np.array_equal(back.values, rho.values)
    assert back.c_lower == rho.c_lower


def test_missing_density_file(tmp_path):
    with pytest.raises(SpecError):
        read_density(tmp_path / "none.json")


def test_density_dimension_mismatch():
    doc = density_to_dict(GridDensity.uniform(0, 1, 4))
    doc["dimension"] = 2
    with pytest.raises(GridMismatch):
        density_from_dict(doc)


def test_spec_roundtrip(tmp_path):
    spec = make_spec("quadratic", n=8)
    path = tmp_path / "spec.json"
    write_spec(spec, path)
    back = read_spec(path)
    assert back.delta == spec.delta
    assert np.array_equal(back.C.values, spec.C.values)
    assert np.array_equal(back.f.values, spec.f.values)


def test_spec_values_cost_and_delta_override():
    spec = make_spec("steep", n=4)
    doc = spec_to_dict(spec)
    assert doc["cost"]["kind"] == "values"
    back = spec_from_dict(json.loads(json.dumps(doc)), delta=0.002)
    assert back.delta == 0.002
    assert np.array_equal(back.C.values, spec.C.values)


def test_bad_spec_documents(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SpecError):
        read_spec(bad)
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"f": density_to_dict(GridDensity.uniform(0, 1, 2))}))
    with pytest.raises(SpecError):
        read_spec(partial)
