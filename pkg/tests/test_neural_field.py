import numpy as np
import pytest

from oracles import hermite_oracle
from uotnode.errors import BoxExit, InternalError, OutOfBox, SpecError, Unresolved, Unsupported
from uotnode.neural_field import (HermiteExpansion, assemble, check_nai_axioms, choose_M, compile_field,
                                  count_units, eval_network, express, field_error, gauss_hermite_gram,
                                  gronwall_envelope, hermite_coeffs, hermite_norm,
                                  hermite_normalized_table, hermite_poly, nai_kernel, network_lipschitz,
                                  neural_ode_flow, params_from_dict, read_params_json, rescaled_budget,
                                  ridge_count, ridge_decompose, sample_field, write_params_json)


def test_low_order_hermite():
    x = np.linspace(-2, 2, 9)
    assert np.allclose(hermite_poly(0, x), 1)
    assert np.allclose(hermite_poly(1, x), 2 * x)
    assert np.allclose(hermite_poly(2, x), 4 * x ** 2 - 2)


@pytest.mark.parametrize("n", range(12))
def test_recurrence_matches_explicit_sum(n):
    x = np.linspace(-3, 3, 13)
    assert np.allclose(hermite_poly(n, x), hermite_oracle(n, x), rtol=1e-12, atol=1e-9)


def test_multi_index_product():
    x = np.array([[0.3, -0.7], [1.1, 0.2]])
    assert np.allclose(hermite_poly((2, 1), x), hermite_poly(2, x[:, 0]) * hermite_poly(1, x[:, 1]))


def test_normalized_table_matches_poly():
    x = np.linspace(-2, 2, 7)
    tab = hermite_normalized_table(6, x)
    for n in range(7):
        assert np.allclose(tab[n], hermite_poly(n, x) / hermite_norm(n))


@pytest.mark.parametrize("nn", [2, 8, 16, 32])
def test_orthonormality(nn):
    K = 2 * nn - 1
    assert np.abs(gauss_hermite_gram(K) - np.eye(K + 1)).max() <= 1e-8


def test_coefficients_of_basis_element():
    M = 7.0
    x = np.linspace(-M, M, 4001)
    field = (hermite_poly(2, x) / hermite_norm(2))[None, :, None]
    exp = hermite_coeffs(field, M, nn=3)
    c = exp.coeffs[0, :, 0]
    assert c[2] == pytest.approx(1.0, abs=1e-8)
    assert np.abs(np.delete(c, 2)).max() <= 1e-8


def test_fejer_weights():
    exp = HermiteExpansion(4, np.zeros((1, 8, 8, 1)), np.zeros(1))
    w = exp.fejer_weights()
    assert np.all(w[:5, :5] == 1)
    assert w[6, 2] == pytest.approx(2 - 6 / 4)
    assert w[7, 5] == pytest.approx((2 - 7 / 4) * (2 - 5 / 4))


def test_under_resolved_quadrature():
    with pytest.raises(Unresolved):
        hermite_coeffs(np.zeros((1, 21, 1)), 3.0, nn=16)


def test_ridge_d1_trivial():
    b = ridge_decompose(3, 1)
    assert b.count == 1 and np.allclose(b.v, [[1.0]])
    h = express((3,))
    assert np.allclose(h[3], [8.0]) and np.allclose(h[1], [-12.0])
    assert np.allclose(h[0], [0.0]) and np.allclose(h[2], [0.0])


def test_ridge_d2_degree_one():
    b = ridge_decompose(1, 2)
    assert np.allclose(b.v, [[1, 0], [1, 1]])
    # y = (x . (1,1)) - (x . (1,0))
    coef = np.linalg.solve(b.matrix, [0.0, 1.0])
    assert np.allclose(coef, [-1.0, 1.0])


def test_ridge_counts():
    for m in range(6):
        for d in (1, 2, 3):
            assert ridge_decompose(m, d).count == ridge_count(m, d)


def test_express_4xy():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (100, 2))
    h = express((1, 1))
    val = sum((ridge_decompose(m, 2).evaluate(x) * h[m]).sum(axis=1) for m in h)
    assert np.abs(val - 4 * x[:, 0] * x[:, 1]).max() <= 1e-10


def test_ridge_exactness_all_indices():
    nn, d, M = 2, 2, 2.0
    rng = np.random.default_rng(1)
    x = rng.uniform(-M, M, (50, d))
    for n1 in range(2 * nn):
        for n2 in range(2 * nn):
            h = express((n1, n2))
            val = sum((ridge_decompose(m, d).evaluate(x) * h[m]).sum(axis=1) for m in h)
            assert np.abs(val - hermite_poly((n1, n2), x)).max() <= 1e-8


def test_ridge_negative_degree():
    with pytest.raises(Exception):
        ridge_decompose(-1, 2)


def test_relu_kernel_is_triangle():
    k = nai_kernel("relu")
    x = np.linspace(-3, 3, 61)
    assert np.allclose(k(x), np.maximum(0, 1 - np.abs(x)))
    assert k.Np == 3


@pytest.mark.parametrize("name", ["relu", "sigmoid"])
def test_nai_axioms(name):
    ax = check_nai_axioms(nai_kernel(name))
    assert abs(ax["integral"] - 1) <= 1e-10
    assert ax["l1"] < 2
    tails = [check_nai_axioms(nai_kernel(name), width=w, rho=0.5)["tail"] for w in (0.5, 0.1, 0.02)]
    assert tails[0] >= tails[1] >= tails[2]
    assert tails[2] <= 1e-10


def test_custom_descriptor():
    k = nai_kernel("relu", Wp=[1, -2, 1], Ap=[1, 1, 1], bp=[1, 0, -1])
    assert k.Np == 3
    with pytest.raises(Unsupported):
        nai_kernel("relu", Wp=[1, -1, 1], Ap=[1, 1, 1], bp=[1, 0, -1])
    with pytest.raises(Unsupported):
        nai_kernel("tanh")


def single_unit_expansion(c=0.7):
    return HermiteExpansion(1, np.full((1, 1, 1), c), np.zeros(1))


def test_single_unit_network():
    c, sigma, M, l0 = 0.7, 0.3, 2.0, 16
    p = assemble(single_unit_expansion(c), nai_kernel("relu"), sigma, M, l0)
    assert p.N == 3 * l0
    z = np.linspace(-M, M, l0 + 1)
    w, dz = 0.5 * (z[1:] + z[:-1]), np.diff(z)
    x = np.linspace(-M, M, 41)
    tri = lambda s: np.maximum(0, 1 - np.abs(s))
    hand = c * np.pi ** -0.25 * (dz[None, :] / sigma * tri((x[:, None] - w[None, :]) / sigma)).sum(axis=1)
    assert np.allclose(eval_network(p, x[:, None], 0.0)[:, 0], hand, atol=1e-13)


def test_counting_formula_d1():
    exp = HermiteExpansion(2, np.zeros((1, 4, 1)), np.zeros(1))
    p = assemble(exp, nai_kernel("relu"), 0.5, 2.0, 7)
    assert p.N == 30 * 7 == count_units(2, 1, 3, p.l_m) == p.expected_N()


def test_diagonal_weights_and_rows():
    rng = np.random.default_rng(4)
    exp = HermiteExpansion(1, rng.normal(size=(2, 2, 2, 2)), np.array([0.0, 1.0]))
    p = assemble(exp, nai_kernel("sigmoid"), 0.5, 1.5, 3)
    for i in rng.integers(0, p.N, 10):
        W = p.W_matrix(i, 0.3)
        assert np.all(W[~np.eye(2, dtype=bool)] == 0)
        assert np.allclose(p.A[i][0], p.A[i][1])
    assert p.N == p.expected_N()


def test_zero_field_network():
    p = assemble(HermiteExpansion(2, np.zeros((2, 4, 1)), np.array([0.0, 1.0])), nai_kernel("relu"), 0.5, 2.0, 4)
    assert np.all(p.W_diag(0.5) == 0)
    assert np.all(eval_network(p, np.linspace(-2, 2, 11)[:, None], 0.2) == 0)
    t, traj, _ = neural_ode_flow(p, np.array([[0.1], [0.5]]), 1.0, 8)
    assert np.all(traj == traj[0])


def test_out_of_box():
    p = assemble(single_unit_expansion(), nai_kernel("relu"), 0.5, 1.0, 4)
    with pytest.raises(OutOfBox):
        eval_network(p, np.array([[1.5]]), 0.0)


def test_box_exit_reports_time():
    p = assemble(single_unit_expansion(5.0), nai_kernel("relu"), 0.5, 1.0, 8)
    with pytest.raises(BoxExit) as info:
        neural_ode_flow(p, np.array([[0.0]]), 5.0, 50)
    assert 0 < info.value.time <= 5.0


def jump_dilation(a=0.2):
    return lambda p, t: (a * p[:, 0] * (np.abs(p[:, 0]) <= 1))[:, None]


def test_compile_dilation_jump_field():
    res = compile_field(jump_dilation(), 2.0, [0.0, 1.0], 0.1)
    assert res.report.total_l2 <= 0.1
    err = field_error(res.params, jump_dilation(), [0.5])
    assert err["l2"][0] <= 0.1
    assert res.report.mollify <= 0.1 / 3


def test_compile_fails_loudly():
    with pytest.raises(Unresolved):
        compile_field(jump_dilation(0.5), 2.0, [0.0], 0.05)


def kink(p, t):
    return (np.clip(1 - np.abs(p[:, 0]), 0, None) * (0.3 + 0.1 * t))[:, None]


def test_budget_response():
    a = compile_field(kink, 3.0, [0.0, 1.0], 0.1).report
    b = compile_field(kink, 3.0, [0.0, 1.0], 0.05).report
    assert b.total_l2 <= 0.05
    assert b.total_l2 <= a.total_l2 / 2 or (b.nn, b.l, 1 / b.sigma) > (a.nn, a.l, 1 / a.sigma)


def test_coefficient_bound_in_time():
    res = compile_field(kink, 3.0, [0.0, 0.5, 1.0], 0.05)
    ref, pts, ax = sample_field(kink, 3.0, [0.0, 0.5, 1.0])
    h = ax[1] - ax[0]
    norms = np.sqrt((ref[..., 0] ** 2).sum(axis=1) * h)
    coef = np.abs(res.params.coeffs[..., 0]).max(axis=1)
    assert np.all(coef <= 0.05 / 3 + norms + 1e-12)


def test_time_interpolation_flag():
    res = compile_field(kink, 3.0, [0.0, 1.0], 0.1, time_interp="constant")
    x = np.array([[0.0]])
    assert np.allclose(eval_network(res.params, x, 0.7), eval_network(res.params, x, 0.0))


def test_params_json_roundtrip(tmp_path):
    res = compile_field(kink, 3.0, [0.0, 1.0], 0.1)
    write_params_json(res.params, tmp_path / "p.json", expand_w=True)
    back = read_params_json(tmp_path / "p.json")
    x = np.linspace(-3, 3, 21)[:, None]
    assert np.array_equal(eval_network(back, x, 0.4), eval_network(res.params, x, 0.4))
    doc = res.params.to_dict()
    doc["N"] += 1
    with pytest.raises(SpecError):
        params_from_dict(doc)


def test_flow_tracks_characteristics():
    a = 0.3

    def field(p, t):
        x = p[:, 0]
        s = np.clip(np.abs(x) - 1.3, 0, 1)
        return (a * x / (1 + a * t) * 0.5 * (1 + np.cos(np.pi * s)))[:, None]

    res = compile_field(field, 2.5, np.linspace(0, 1, 5), 0.05)
    x0 = np.linspace(-0.5, 0.5, 11)[:, None]
    times, traj, _ = neural_ode_flow(res.params, x0, 1.0, 40)
    exact = x0[None, :, :] * (1 + a * times)[:, None, None]
    err = np.abs(traj - exact).max(axis=(1, 2))
    net_err = max(np.abs(eval_network(res.params, exact[k], t) - field(exact[k], t)).max()
                  for k, t in enumerate(times))
    env = gronwall_envelope(net_err, network_lipschitz(res.params, [0.0, 1.0]), times)
    assert np.all(err <= env + 1e-10)
    assert err[-1] < 0.05


def test_budget_helpers():
    assert gronwall_envelope(0.1, 0.0, 2.0) == pytest.approx(0.2)
    assert gronwall_envelope(0.1, 1.0, 1.0) == pytest.approx(0.1 * (np.e - 1))
    assert rescaled_budget(0.1, 2.0, 1.0, 1.0) == pytest.approx(0.1 / (np.e * (np.e - 1)))
    M = choose_M([0.0], [1.0], np.array([[2.0]]), 1.0, 0.01, 1.0)
    assert M == 3.0 or M > 2.01
    assert M % 0.5 == 0
