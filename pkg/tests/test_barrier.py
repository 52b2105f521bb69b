import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from stochabs.barrier import (AffineController, BarrierCertificate, Polynomial, check_cbc,
                              decrease_gap, expected_barrier, expected_polynomial, kushner_bound,
                              normal_moment, published_room_certificate, quadratic_noise_floor,
                              search_quadratic_cbc, search_vertex_cbc)
from stochabs.model import Box, LinearDtScs, Region, UnsupportedModel

X0 = Box([19.5], [20.0])
XU = Region([Box([1.0], [17.0]), Box([23.0], [50.0])])
X = Box([17.0], [23.0])


def test_normal_moments_match_scipy():
    for k in range(13):
        assert normal_moment(k) == pytest.approx(norm.moment(k), rel=1e-12, abs=1e-12)
    assert [normal_moment(k) for k in (2, 4, 6)] == [1.0, 3.0, 15.0]


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=7), st.floats(-5, 5), st.floats(0.01, 2.0))
@settings(max_examples=60, deadline=None)
def test_expected_polynomial_matches_gauss_hermite(coeffs, mu, sigma):
    poly = Polynomial.univariate(coeffs)
    # probabilists' Gauss-Hermite with 8 nodes is exact to degree 15
    z, w = np.polynomial.hermite_e.hermegauss(8)
    ref = float(np.sum(w * poly((mu + sigma * z)[:, None]))) / math.sqrt(2 * math.pi)
    got = float(expected_polynomial(poly, np.array([[mu]]), np.array([sigma]))[0])
    assert got == pytest.approx(ref, rel=1e-9, abs=1e-9 * (1 + abs(ref)))


def test_expected_barrier_room(room):
    poly = Polynomial.univariate([0.0, 0.0, 1.0])
    x, u = np.array([20.0]), np.array([0.3])
    mu = room.mean(x, u)[0]
    assert expected_barrier(poly, room, x, u) == pytest.approx(mu**2 + 0.36)


def test_degree_limit():
    with pytest.raises(UnsupportedModel):
        Polynomial.univariate([0] * 7 + [1.0])
    with pytest.raises(UnsupportedModel):
        expected_barrier(lambda x: x, LinearDtScs([[1.0]], [[0.0]], [0.0], [[1.0]], [1.0]), [0.0], [0.0])


def test_vertex_polynomial():
    p = Polynomial.vertex([2.0, -1.0], degree=4, scale=0.5, offset=1.0)
    x = np.array([[3.0, 0.0], [2.0, -1.0]])
    np.testing.assert_allclose(p(x), [0.5 * (1 + 1) + 1.0, 1.0])


def test_kushner_published_constants():
    b = kushner_bound(0.13, 4.4, 0.99, 0.0099, 10)
    expected = 1 - (1 - 0.13 / 4.4) * (1 - 0.0099 / 4.4) ** 10
    assert b.branch == "kushner1_first"
    assert b.value == pytest.approx(expected, rel=1e-14)
    assert 0.050 <= b.value <= 0.052
    assert b.candidates["kushner2"] == pytest.approx((0.13 + 0.099) / 4.4)


def test_kushner_edge_cases():
    assert kushner_bound(1.0, 4.0, 1.0, 0.0, math.inf).value == 0.25
    with pytest.raises(UnsupportedModel):
        kushner_bound(1.0, 4.0, 0.9, 0.1, math.inf)
    assert kushner_bound(1.0, 4.0, 0.9, 10.0, 5).value == 1.0  # vacuous, clamped
    with pytest.raises(ValueError):
        kushner_bound(4.0, 1.0, 0.9, 0.0, 5)
    with pytest.raises(ValueError):
        BarrierCertificate(Polynomial.constant(0.0), 1.0, 0.5, 0.9, 0.0)


@given(st.floats(0, 1), st.floats(1.01, 10), st.floats(0.05, 1.0), st.floats(0, 0.5),
       st.integers(0, 50))
@settings(max_examples=200, deadline=None)
def test_kushner_bound_is_probability_and_monotone(eta, beta, kappa, c, T):
    b = kushner_bound(eta, beta, kappa, c, T).value
    assert 0.0 <= b <= 1.0
    assert kushner_bound(eta, beta, kappa, c, T + 1).value >= b - 1e-12


def test_kappa_one_decrease_is_supermartingale():
    model = LinearDtScs([[0.5]], [[0.0]], [0.0], [[1.0]], [0.1])
    poly = Polynomial.univariate([0.0, 0.0, 1.0])
    cert = BarrierCertificate(poly, 0.1, 1.0, 1.0, 0.0, AffineController([[0.0]], [0.0]))
    pts = np.linspace(-1, 1, 11)[:, None]
    gap = decrease_gap(cert, model, pts)
    np.testing.assert_allclose(gap, 0.25 * pts[:, 0] ** 2 + 0.01 - pts[:, 0] ** 2, atol=1e-15)


def test_published_certificate_grid_check(room):
    cert = published_room_certificate()
    rep = check_cbc(cert, room, X0, XU, X, 1e-3)
    assert rep.conditions["init"]["holds"] and rep.conditions["unsafe"]["holds"]
    # the published certificate violates the expectation condition near its vertex
    assert not rep.conditions["decrease"]["holds"]
    assert rep.conditions["decrease"]["margin"] < -0.9
    assert "scope=grid-only" in rep.to_text()


def test_lipschitz_margin_is_more_conservative(room):
    cert = published_room_certificate()
    plain = check_cbc(cert, room, X0, XU, X, 1e-2)
    tight = check_cbc(cert, room, X0, XU, X, 1e-2, lipschitz_margin=(10.0, 10.0, 10.0))
    for k in plain.conditions:
        assert tight.conditions[k]["margin"] <= plain.conditions[k]["margin"]
    assert tight.continuum_certified


def test_quadratic_search_respects_noise_floor(room):
    res = search_quadratic_cbc(room, X0, XU, X, gains=[-0.02, -0.01, 0.0], horizon=10,
                               resolution=0.05, input_box=Box([0.0], [0.6]))
    assert res is not None
    assert res.bound.value >= quadratic_noise_floor(room, X0, XU, 10) - 1e-12


@pytest.mark.slow
def test_quartic_search_certifies_below_target(room):
    res = search_vertex_cbc(room, X0, XU, X, degree=4, centers=[[20.0]], gains=[-0.02],
                            horizon=10, resolution=0.01, input_box=Box([0.0], [0.6]),
                            verify_resolution=1e-3)
    assert res.bound.value < 0.06
    assert check_cbc(res.certificate, room, X0, XU, X, 1e-3).passed
