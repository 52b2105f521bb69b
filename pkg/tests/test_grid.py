import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochabs.grid import build_grid, grid_delta, quantize
from stochabs.model import Box


def running_grid():
    return build_grid(Box([19.0], [21.0]), 400)


def test_running_grid():
    g = running_grid()
    assert g.n_cells == 400
    assert grid_delta(g) == pytest.approx(0.005)
    assert g.representatives[:2, 0] == pytest.approx([19.0025, 19.0075])


def test_one_cell_grid():
    g = build_grid(Box([0.0], [1.0]), 1)
    assert g.representatives[0, 0] == 0.5 and grid_delta(g) == 1.0


def test_two_d_grid():
    g = build_grid(Box([0.0, 0.0], [1.0, 1.0]), (2, 3))
    assert g.n_cells == 6 and g.delta == pytest.approx(0.5)
    assert grid_delta(build_grid(Box([0.0, 0.0], [2.0, 1.0]), (4, 4))) == pytest.approx(0.5)


def test_row_major_flattening():
    g = build_grid(Box([0.0, 0.0], [1.0, 1.0]), (2, 3))
    # last dimension fastest
    assert g.index([[0.1, 0.9]])[0] == 2
    assert g.index([[0.9, 0.1]])[0] == 3


def test_degenerate_domain_rejected():
    with pytest.raises(ValueError):
        build_grid(Box([0.0], [0.0]), 3)
    with pytest.raises(ValueError):
        build_grid(Box([0.0], [1.0]), 0)


def test_quantize_boundary_and_outside():
    g = running_grid()
    idx, rep = quantize(g, 20.0)
    assert rep[0] == pytest.approx(20.0025)
    assert quantize(g, 21.0)[0] == 399  # last cell is closed
    assert quantize(g, 25.0)[0] == g.n_cells
    r = g.representatives[17]
    assert np.array_equal(quantize(g, r)[1], r)


def test_cells_tile_domain():
    g = build_grid(Box([0.0, -1.0], [2.0, 3.0]), (7, 5))
    vol = sum(g.cell_bounds(i).volume for i in range(g.n_cells))
    assert vol == pytest.approx(g.domain.volume, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(19.0, 21.0), y=st.floats(-3.0, 2.0))
def test_quantization_error_bound(x, y):
    g = build_grid(Box([19.0, -3.0], [21.0, 2.0]), (400, 13))
    idx, rep = quantize(g, [x, y])
    assert idx < g.n_cells
    assert np.max(np.abs(rep - [x, y])) <= g.delta / 2 + 1e-12
    assert g.cell_bounds(idx).contains([x, y])
    assert quantize(g, rep)[0] == idx


def test_lattice_representative_matches_inside():
    g = running_grid()
    x = np.array([[19.3], [20.0], [20.999]])
    assert g.lattice_representative(x) == pytest.approx(g.representatives[g.index(x)])
    assert g.lattice_representative(np.array([[18.9999]]))[0, 0] == pytest.approx(18.9975)
