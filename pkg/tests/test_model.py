import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochabs.model import Box, LinearDtScs, Region, kernel_mean_std, room_model, step


def test_step_running_example_zero_noise(room):
    assert step(room, [15.0], [0.0], [0.0]) == pytest.approx([8.6], abs=1e-12)


def test_step_running_example_full_heater(room):
    # a = 1 - 0.4 - 0.5 = 0.1; 0.1*20 + 25 - 0.4 + 0.6
    assert step(room, [20.0], [1.0], [1.0]) == pytest.approx([27.2], abs=1e-12)


def test_identity_dynamics_without_noise():
    m = LinearDtScs(np.eye(2), np.zeros((2, 1)), np.zeros(2), np.eye(2), np.zeros(2))
    x = np.array([3.0, -1.5])
    assert np.array_equal(step(m, x, [0.7], [5.0, -9.0]), x)


def test_kernel_mean_std(room):
    mean, std = kernel_mean_std(room, [15.0], [0.0])
    assert mean == pytest.approx([8.6])
    assert std == pytest.approx([0.6])


def test_zero_noise_std():
    m = LinearDtScs([[0.5]], [[1.0]], [0.0], [[1.0]], [0.0])
    assert kernel_mean_std(m, [1.0], [0.0])[1] == pytest.approx([0.0])


def test_network_room_mean():
    # room i of the two-room network with the neighbour at 20 C and the heater off:
    # 0.4*20 + 0.1*20 - 0.4
    m = LinearDtScs([[0.4]], [[25.0]], [-0.4], [[1.0]], [0.3])
    mean, std = kernel_mean_std(m, [20.0], [0.0])
    assert float(mean[0] + 0.1 * 20.0) == pytest.approx(9.6)
    assert std == pytest.approx([0.3])


def test_dimension_mismatch_raises(room):
    with pytest.raises(ValueError):
        step(room, [1.0, 2.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        LinearDtScs(np.eye(2), np.zeros((3, 1)), np.zeros(2), np.eye(2), np.zeros(2))


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        LinearDtScs([[1.0]], [[1.0]], [0.0], [[1.0]], [-0.1])


def test_box_and_region():
    b = Box([0.0, 0.0], [1.0, 2.0])
    assert b.volume == pytest.approx(2.0)
    assert b.contains([[1.0, 2.0], [1.1, 0.0]]).tolist() == [True, False]
    r = Region.of(([1.0], [17.0]), ([23.0], [50.0]))
    assert r.contains([[5.0], [20.0], [23.0]]).tolist() == [True, False, True]
    with pytest.raises(ValueError):
        Box([1.0], [0.0])


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(x=finite, u=st.floats(0, 0.6), w=finite)
def test_step_zero_noise_equals_mean(x, u, w):
    m = room_model()
    mean, std = kernel_mean_std(m, [x], [u])
    assert np.array_equal(step(m, [x], [u], [0.0]), mean)
    assert step(m, [x], [u], [w]) == pytest.approx(mean + std * w)


@settings(max_examples=60, deadline=None)
@given(x1=st.lists(finite, min_size=2, max_size=2), x2=st.lists(finite, min_size=2, max_size=2),
       u=finite)
def test_linearity_without_gain(x1, x2, u):
    m = LinearDtScs([[0.4, 0.1], [0.1, 0.4]], [[25.0], [3.0]], [-0.4, 1.0], np.eye(2), [0.3, 0.3])
    x1, x2 = np.array(x1), np.array(x2)
    z = np.zeros(2)
    lhs = step(m, x1 + x2, [u], z) - step(m, x2, [u], z)
    rhs = step(m, x1, [0.0], z) - step(m, z, [0.0], z)
    assert lhs == pytest.approx(rhs, abs=1e-9)
