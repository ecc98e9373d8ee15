import numpy as np
import pytest

from uotnode.errors import GridMismatch, InvalidSeries
from uotnode.metrics import (DiscreteMeasure, dbl_distance, l1_distance, l2_distance, rate_fit,
                             total_variation, witness_slack)


def dirac(x, m=1.0):
    return DiscreteMeasure(np.atleast_2d(np.asarray(x, float)), [m])


def test_identical_measures():
    rng = np.random.default_rng(0)
    mu = DiscreteMeasure(rng.uniform(size=(20, 2)), rng.uniform(size=20))
    assert dbl_distance(mu, mu).value == pytest.approx(0, abs=1e-14)


@pytest.mark.parametrize("h", [0.1, 0.5, 1.0, 2.0, 3.0, 10.0])
def test_two_diracs(h):
    # a single test function with phi(0) = a = -phi(h) and 2a <= b h, a + b <= 1
    r = dbl_distance(dirac([0.0]), dirac([h]))
    assert r.value == pytest.approx(2 * h / (2 + h), abs=1e-10)


def test_two_diracs_distance_two_is_one():
    assert dbl_distance(dirac([0.0, 0.0]), dirac([2.0, 0.0])).value == pytest.approx(1.0, abs=1e-10)


def test_mass_difference():
    # equal location: only the sup bound is active
    assert dbl_distance(dirac([0.3], 1.0), dirac([0.3], 0.4)).value == pytest.approx(0.6, abs=1e-12)


def random_measure(rng, n, d):
    return DiscreteMeasure(rng.uniform(-1, 1, (n, d)), rng.uniform(0, 1, n))


@pytest.mark.parametrize("d", [1, 2])
def test_metric_properties(d):
    rng = np.random.default_rng(d)
    a, b, c = (random_measure(rng, 15, d) for _ in range(3))
    ab, ba = dbl_distance(a, b).value, dbl_distance(b, a).value
    assert ab == pytest.approx(ba, abs=1e-10)
    assert ab <= dbl_distance(a, c).value + dbl_distance(c, b).value + 1e-10
    assert ab <= total_variation(a, b) + 1e-10


@pytest.mark.parametrize("d", [1, 2])
def test_witness_feasible(d):
    rng = np.random.default_rng(10 + d)
    r = dbl_distance(random_measure(rng, 30, d), random_measure(rng, 30, d))
    assert witness_slack(r) >= -1e-10
    assert not r.lower_bound


def test_projection_fallback_is_lower_bound():
    rng = np.random.default_rng(3)
    mu, nu = random_measure(rng, 40, 2), random_measure(rng, 40, 2)
    exact = dbl_distance(mu, nu)
    low = dbl_distance(mu, nu, cap=10)
    assert low.lower_bound and "theta" in low.info
    assert low.value <= exact.value + 1e-10
    assert low.value > 0


def test_dimension_mismatch():
    with pytest.raises(GridMismatch):
        dbl_distance(dirac([0.0]), dirac([0.0, 1.0]))
    with pytest.raises(GridMismatch):
        DiscreteMeasure(np.zeros((3, 1)), np.ones(2))


def test_norms():
    a, b = np.array([1.0, 2.0]), np.array([0.0, 2.0])
    assert l1_distance(a, b, 0.5) == 0.5
    assert l2_distance(a, b, 0.25) == 0.5


def test_rate_fit_exact():
    fit = rate_fit(3.0 * 0.7 ** np.arange(20))
    assert fit.ratio == pytest.approx(0.7, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0)


def test_rate_fit_noisy():
    rng = np.random.default_rng(7)
    y = 0.8 ** np.arange(40) * (1 + rng.uniform(-0.05, 0.05, 40))
    assert abs(rate_fit(y).ratio - 0.8) <= 0.03


@pytest.mark.parametrize("bad", [[1.0, 0.5, 0.2, 0.1], [1.0, 0.5, 0.0, 0.1, 0.05],
                                 [1.0, -0.5, 0.2, 0.1, 0.05], [1, np.nan, 1, 1, 1]])
def test_rate_fit_invalid(bad):
    with pytest.raises(InvalidSeries):
        rate_fit(bad)


def test_tiny_mass_difference_is_seen():
    # below the default solver tolerance; must not vanish in one direction only
    a = DiscreteMeasure(np.zeros((1, 1)), [6e-8])
    b = DiscreteMeasure(np.ones((1, 1)), [0.0])
    assert dbl_distance(a, b).value == pytest.approx(6e-8, rel=1e-6)
    assert dbl_distance(b, a).value == pytest.approx(6e-8, rel=1e-6)


def test_near_duplicate_points_witness():
    mu = DiscreteMeasure(np.array([[1.0, 1.0]]), [5.0])
    nu = DiscreteMeasure(np.array([[6e-8, 0.0], [0.0, 0.0]]), [1.0, 5.0])
    assert witness_slack(dbl_distance(mu, nu)) >= -1e-9
