import warnings

import numpy as np
import pytest

from conftest import make_spec
from oracles import duals_from_primal, oracle_for_spec
from uotnode.errors import InvalidDelta, InvalidParameter, NumericalBlowup
from uotnode.metrics import rate_fit
from uotnode.sinkhorn import (SolverState, compute_params, error_certificate, run, step,
                              with_overrides)
from uotnode.uot_core import l2_norm


def test_params_uniform_case():
    # alpha = sqrt(2 (1 + (1 - 1/4)^2)), q = 2 sqrt(alpha), s = sqrt(alpha)/2
    p = compute_params(make_spec("uniform"))
    alpha = np.sqrt(2 * (1 + 0.75 ** 2))
    assert p.alpha == pytest.approx(alpha)
    assert p.alpha == pytest.approx(1.76777, abs=1e-5)
    assert p.q == pytest.approx(2.65915, abs=1e-5)
    assert p.s == pytest.approx(0.66479, abs=1e-5)
    assert p.r == pytest.approx(0.72671, abs=1e-5)


def test_params_reject_large_delta():
    with pytest.raises(InvalidDelta):
        compute_params(make_spec("uniform", delta=2.0))


def test_uniform_fixed_point():
    res = run(make_spec("uniform"), L=300)
    assert np.abs(res.duals.k1 - 1 / 3).max() < 1e-6
    assert np.abs(res.duals.k2 - 1 / 3).max() < 1e-6
    assert np.abs(res.coupling.values - 2 / 3).max() < 1e-6
    assert res.iterations == 301


def test_asymmetric_mass_solution():
    # f = 1, g = 2, C = 0: k1 = 1/5, k2 = 3/5, k = 4/5
    res = run(make_spec("asymmetric", n=16), L=300)
    assert np.allclose(res.duals.k1, 0.2, atol=1e-8)
    assert np.allclose(res.duals.k2, 0.6, atol=1e-8)
    assert np.allclose(res.coupling.values, 0.8, atol=1e-8)


def test_agrees_with_primal_oracle():
    spec = make_spec("quadratic", n=16)
    res = run(spec, L=400)
    k, val, _ = oracle_for_spec(spec, tol=1e-12)
    o1, o2 = duals_from_primal(k, spec)
    assert np.abs(res.duals.k1 - o1).max() < 1e-8
    assert np.abs(res.duals.k2 - o2).max() < 1e-8
    assert res.diagnostics["primal"][-1] == pytest.approx(val, abs=1e-10)


def test_iterates_respect_bounds():
    spec = make_spec("quadratic", n=16)
    res = run(spec, L=50)
    assert res.duals.feasibility_violation(spec) == 0.0


def test_zero_iterations_is_one_step():
    res = run(make_spec("uniform", n=8), L=0)
    assert res.iterations == 1


def test_negative_L_rejected():
    with pytest.raises(InvalidParameter):
        run(make_spec("uniform", n=8), L=-1)


def test_early_stop():
    spec = make_spec("uniform", n=16)
    p = compute_params(spec, L_max=300, tol=1e-12)
    res = run(spec, p, early_stop=True)
    assert res.iterations < 300


def test_blowup_detected():
    spec = make_spec("uniform", n=8)
    p = compute_params(spec)
    state = SolverState.zeros(spec)
    state.Xs[0] = np.nan
    with pytest.raises(NumericalBlowup) as info:
        step(state, spec, p)
    assert info.value.iteration == 1


def test_step_norm_rate():
    res = run(make_spec("quadratic", n=16), L=120)
    p = res.params
    series = res.diagnostics["step_norm_x"]
    series = series[(series > 1e-13)][2:]
    assert rate_fit(series).ratio <= np.sqrt(p.r) + 0.05


def test_printed_gradient_flag_changes_fixed_point():
    # taking the plain gradient of G does not reach the uniform optimum 1/3
    spec = make_spec("uniform", n=16)
    p = with_overrides(compute_params(spec), printed_gradient=True)
    res = run(spec, p, L=300)
    assert np.abs(res.duals.k1 - 1 / 3).max() > 1e-3


def test_certificate_bounds_measured_error():
    spec = make_spec("quadratic", n=8)
    k, _, _ = oracle_for_spec(spec, tol=1e-12)
    o1, o2 = duals_from_primal(k, spec)
    res = run(spec, L=60, keep_history=True)
    cert = error_certificate(res, res.params, spec)
    assert len(res.history) == len(cert.bounds)
    for m, (X0, Y0) in enumerate(res.history):
        err2 = l2_norm(X0 - o1, spec.hx) ** 2 + l2_norm(Y0 - o2, spec.hy) ** 2
        assert err2 <= cert.bounds[m] * (1 + 1e-9)
    assert np.all(np.diff(cert.bounds) < 0)


def test_gap_monotone_flag_absent_on_uniform():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = run(make_spec("uniform", n=16), L=100)
    assert res.flags == []
