import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_spec
from oracles import hermite_oracle
from uotnode.metrics import DiscreteMeasure, dbl_distance, rate_fit, total_variation, witness_slack
from uotnode.mollifier import mollify
from uotnode.monge_ampere import solve_1d
from uotnode.neural_field import express, hermite_poly, ridge_decompose
from uotnode.transport_dynamics import DynamicsFields
from uotnode.uot_core import (Coupling, DualPotentials, GridDensity, dual_objective, kkt_recover_coupling,
                              kkt_residuals, pearson_divergence, primal_objective)

N = 8
SPEC_KINDS = ["uniform", "asymmetric", "quadratic", "tilted", "steep"]
small = settings(max_examples=40, deadline=None)
thorough = settings(max_examples=300, deadline=None)
pos = st.floats(0.2, 3.0)


@small
@given(st.sampled_from(SPEC_KINDS), arrays(float, (N, N), elements=st.floats(0.01, 2.0)),
       arrays(float, N, elements=st.floats(-2, 0.9)), arrays(float, N, elements=st.floats(-2, 0.9)))
def test_weak_duality(kind, k, u, v):
    spec = make_spec(kind, n=N)
    val = primal_objective(Coupling(k, spec.delta, spec.hx, spec.hy), spec)
    assert val + dual_objective(DualPotentials(u, v), spec) >= -1e-10


@small
@given(st.sampled_from(SPEC_KINDS), arrays(float, N, elements=st.floats(-2, 0.9)),
       arrays(float, N, elements=st.floats(-2, 0.9)))
def test_kkt_coupling_is_feasible(kind, u, v):
    spec = make_spec(kind, n=N)
    duals = DualPotentials(u, v)
    k = kkt_recover_coupling(duals, spec)
    assert k.values.min() >= spec.delta
    assert kkt_residuals(k, duals, spec).coupling == 0


@small
@given(arrays(float, 12, elements=pos), arrays(float, 12, elements=st.floats(0, 3)))
def test_pearson_nonnegative(nu, mu):
    g = GridDensity(0, 1, 12, nu, nu.min())
    assert pearson_divergence(mu, g) >= 0
    assert pearson_divergence(nu, g) == 0


@small
@given(arrays(float, 30, elements=st.floats(0, 5)), st.floats(0.05, 0.2))
def test_mollifier_mass_and_sign(vals, sigma):
    h = 1 / 30
    padded = np.concatenate([np.zeros(10), vals, np.zeros(10)])
    out = mollify(padded, h, sigma)
    assert out.min() >= 0
    assert abs(out.sum() - padded.sum()) <= 1e-10 * (1 + padded.sum())


@small
@given(st.floats(-3, 3), st.floats(0.03, 0.3))
def test_mollifier_keeps_constants(c, sigma):
    out = mollify(np.full(40, c), 1 / 40, sigma, boundary="renormalize")
    assert np.allclose(out, c, atol=1e-12)


def measures(d):
    pts = arrays(float, (6, d), elements=st.floats(-2, 2))
    w = arrays(float, 6, elements=st.floats(0, 2))
    return st.builds(DiscreteMeasure, pts, w)


@thorough
@given(st.integers(1, 2).flatmap(lambda d: st.tuples(measures(d), measures(d), measures(d))))
def test_dbl_metric(triple):
    a, b, c = triple
    ab = dbl_distance(a, b)
    assert ab.value >= -1e-12
    assert witness_slack(ab) >= -1e-9
    assert abs(ab.value - dbl_distance(b, a).value) <= 1e-9
    assert ab.value <= dbl_distance(a, c).value + dbl_distance(c, b).value + 1e-9
    assert ab.value <= total_variation(a, b) + 1e-9
    assert dbl_distance(a, a).value <= 1e-12


@small
@given(st.integers(0, 3), st.integers(0, 3), arrays(float, (5, 2), elements=st.floats(-2, 2)))
def test_ridge_exactness(n1, n2, x):
    h = express((n1, n2))
    val = sum((ridge_decompose(m, 2).evaluate(x) * h[m]).sum(axis=1) for m in h)
    ref = hermite_poly((n1, n2), x)
    assert np.allclose(val, ref, atol=1e-8 * (1 + np.abs(ref).max()))


@small
@given(st.integers(0, 20), arrays(float, 5, elements=st.floats(-4, 4)))
def test_hermite_recurrence(n, x):
    ref = hermite_oracle(n, x)
    assert np.allclose(hermite_poly(n, x), ref, rtol=1e-10, atol=1e-10 * (1 + np.abs(ref).max()))


@small
@given(st.floats(0.1, 0.99), st.floats(0.1, 10), st.integers(5, 40))
def test_rate_fit_geometric(r, c, n):
    assert abs(rate_fit(c * r ** np.arange(n)).ratio - r) <= 1e-9


@small
@given(arrays(float, 16, elements=pos), arrays(float, 16, elements=pos), st.floats(0, 1))
def test_map_monotone_and_invertible(a, b, t):
    kx = GridDensity(0, 1, 16, a, a.min())
    ky = GridDensity(0, 1, 16, b * a.sum() / b.sum(), (b * a.sum() / b.sum()).min())
    tmap = solve_1d(kx, ky)
    assert np.all(np.diff(tmap.T_values[:, 0]) > 0)
    fields = DynamicsFields(tmap, 1.0, None, None)
    x = kx.points
    assert np.allclose(fields.inverse(fields.forward(x, t), t), x, atol=1e-9)
