import numpy as np
import pytest
from scipy.stats import binomtest, kstest

from stochabs.barrier import BarrierCertificate, Polynomial, AffineController, published_room_certificate
from stochabs.bounds import grid_ssf_params
from stochabs.grid import build_grid
from stochabs.model import Box, LinearDtScs, Region
from stochabs.sim import (InsufficientSamples, clopper_pearson, coupled_grid_run,
                          empirical_probability, noise_block, simulate, trajectory_generator,
                          validate_bound, validate_kushner, validate_pro2)
from stochabs.spec import HorizonSpec


def test_noise_stream_test_vector():
    g = trajectory_generator(0, 0)
    np.testing.assert_array_equal(g.standard_normal(4), [0.15929546600623282, -1.7741885208017214,
                                                         1.3265118818830892, 1.2048090979493156])


def test_noise_is_normal():
    W, _ = noise_block(7, range(100), 1000, 1)
    assert kstest(W.ravel(), "norm").pvalue > 0.01


def test_deterministic_across_threads_and_chunks(room):
    a = simulate(room, 0.3, 20.0, 30, 500, seed=5)
    b = simulate(room, 0.3, 20.0, 30, 500, seed=5, threads=4, chunk=64)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.to_csv() == b.to_csv()
    c = simulate(room, 0.3, 20.0, 30, 500, seed=6)
    assert not np.array_equal(a.states, c.states)


def test_noise_free_trajectories_identical():
    m = LinearDtScs([[0.5]], [[1.0]], [0.0], [[1.0]], [0.0])
    b = simulate(m, 0.0, 4.0, 10, 5, seed=1)
    assert np.all(b.states == b.states[0])


def test_heating_off_decays_to_minus_one(room):
    b = simulate(room, 0.0, 15.0, 100, 10, seed=0)
    assert np.all(np.abs(b.states[:, -1, 0] + 1.0) < 5 * 0.6 / np.sqrt(1 - 0.36))
    assert abs(b.states[:, 50:, 0].mean() + 1.0) < 0.3


def test_clopper_pearson_matches_scipy():
    for k, n in [(0, 10), (3, 10), (10, 10), (4980, 10000)]:
        ci = clopper_pearson(k, n, 0.99)
        ref = binomtest(k, n).proportion_ci(confidence_level=0.99, method="exact")
        assert ci.lower == pytest.approx(ref.low, abs=1e-12)
        assert ci.upper == pytest.approx(ref.high, abs=1e-12)
        assert ci.lower <= ci.p_hat <= ci.upper
    assert clopper_pearson(10, 10).upper == 1.0


def test_fair_coin_width():
    rng = np.random.default_rng(0)
    k = int((rng.random(10_000) < 0.5).sum())
    ci = clopper_pearson(k, 10_000)
    assert 0.49 <= ci.p_hat <= 0.51
    assert 0.02 < ci.upper - ci.lower < 0.03


def test_empirical_probability_always_true(room):
    b = simulate(room, 0.3, 20.0, 5, 50, seed=2)
    spec = HorizonSpec("safety", 5, safe=Box([-1e9], [1e9]))
    ci = empirical_probability(b, spec)
    assert ci.p_hat == 1.0 and ci.upper == 1.0


def test_kushner_validation_published_certificate(room):
    rep = validate_kushner(room, published_room_certificate(), Box([19.5], [20.0]),
                           Region([Box([1.0], [17.0]), Box([23.0], [50.0])]), 10, 2000, seed=2024)
    assert rep.passed and rep.bound == pytest.approx(0.05116, abs=1e-4)


def test_kushner_trivially_safe():
    m = LinearDtScs([[0.5]], [[0.0]], [0.0], [[1.0]], [0.0])
    cert = BarrierCertificate(Polynomial.univariate([0, 0, 1.0]), 1.0, 100.0, 0.5, 0.0,
                              AffineController([[0.0]], [0.0]))
    rep = validate_bound("kushner", model=m, cert=cert, X0=Box([-1.0], [1.0]),
                         Xu=Box([10.0], [11.0]), horizon=20, n_traj=100, seed=0)
    assert rep.empirical.successes == 0 and rep.passed


def test_refuses_insufficient_samples(room):
    with pytest.raises(InsufficientSamples) as exc:
        validate_kushner(room, published_room_certificate(), Box([19.5], [20.0]), Box([23.0], [50.0]),
                         10, 100, seed=0, resolution=0.001)
    assert exc.value.required > 100


def test_pro2_coupled_fine_grid(room):
    grid = build_grid(Box([19.0], [21.0]), 4000)
    inputs = np.array([[0.3]])
    ssf = grid_ssf_params(room, grid, inputs)
    X, Xh = coupled_grid_run(room, grid, 0.3, 20.0, 100, 2000, seed=11)
    rep = validate_pro2(X, Xh, room.C, room.C, ssf, 0.0, 0.0, 0.5)
    assert rep.passed
    assert rep.empirical.p_hat < 0.1 * max(rep.bound, 1e-3)
