import numpy as np
import pytest

from src.errors import PreconditionError
from src.grid.grid_core import (
    GridFunction,
    NodeField,
    SetIndicator,
    constant,
    cutoff_eta,
    dyadic_cube,
    dyadic_root,
    gaussian,
    indicator_from_predicate,
    make_grid,
    radial_power,
    sample_function,
)


@pytest.fixture
def line():
    # 1D grid, h = 1/8, extended box out to radius 2
    return make_grid(1, 16, 1.0)


@pytest.fixture
def square():
    return make_grid(2, 8, 1.0)


##################################
# --- Grid Spec Tests ---
##################################


def test_make_grid_geometry(line):
    # Spacing, extended index range and array shape follow from n_cells and the radii.
    assert line.h == pytest.approx(0.125)
    assert line.n_ext == 16
    assert line.shape == (33,)
    assert len(line.box_nodes()) == 17


def test_make_grid_default_exterior_radius_is_twice_half_width():
    spec = make_grid(2, 16, 3.0)
    assert spec.exterior_radius == 6.0
    assert spec.shape == (33, 33)


@pytest.mark.parametrize(
    "dim, n_cells, half_width, exterior_radius",
    [
        (3, 16, 1.0, None),
        (1, 12, 1.0, None),
        (1, 4, 1.0, None),
        (1, 16, 0.0, None),
        (1, 16, 1.0, 1.5),
    ],
)
def test_make_grid_rejects_invalid_parameters(dim, n_cells, half_width, exterior_radius):
    with pytest.raises(PreconditionError):
        make_grid(dim, n_cells, half_width, exterior_radius)


def test_nodes_in_ball_is_strict(line):
    # |x| < 1 keeps nodes -7..7; the nodes at +-1 are on the sphere and excluded.
    nodes = line.nodes_in_ball(1.0)
    assert nodes[:, 0].tolist() == list(range(-7, 8))


def test_nodes_in_cube_in_2d(square):
    nodes = square.nodes_in_cube(0.5)
    assert len(nodes) == 9
    assert np.abs(nodes).max() == 1


##################################
# --- Grid Function Tests ---
##################################


def test_grid_function_copies_and_freezes_values(line):
    raw = np.zeros(line.shape)
    u = GridFunction(line, raw, 0.0)
    raw[0] = 5.0
    assert u.values[0] == 0.0
    with pytest.raises(ValueError):
        u.values[0] = 1.0


def test_grid_function_rejects_bad_shape_and_nan(line):
    with pytest.raises(PreconditionError):
        GridFunction(line, np.zeros(5), 0.0)
    values = np.zeros(line.shape)
    values[3] = np.nan
    with pytest.raises(PreconditionError):
        GridFunction(line, values, 0.0)


def test_grid_function_arithmetic_tracks_exterior(line):
    u = sample_function(line, constant(2.0))
    v = sample_function(line, gaussian())
    w = u * 3.0 - v
    assert w.exterior == 6.0
    np.testing.assert_allclose(w.values, 6.0 - v.values)
    assert (-u).exterior == -2.0


def test_sup_norm_includes_exterior(line):
    u = GridFunction(line, np.zeros(line.shape), -4.0)
    assert u.sup_norm() == 4.0


def test_with_values_at_and_values_at(line):
    u = GridFunction(line, np.zeros(line.shape), 0.0)
    nodes = np.array([[-1], [2]])
    updated = u.with_values_at(nodes, [1.5, -2.5])
    np.testing.assert_array_equal(updated.values_at(nodes), [1.5, -2.5])
    assert u.values_at(nodes).tolist() == [0.0, 0.0]


def test_node_field_scatter(line):
    field = NodeField(line, np.array([[0], [1]]), np.array([3.0, 4.0]))
    u = field.to_grid_function()
    assert u.values_at(np.array([[0], [1], [2]])).tolist() == [3.0, 4.0, 0.0]
    assert u.exterior == 0.0
    np.testing.assert_allclose(field.coordinates(), [[0.0], [0.125]])


##################################
# --- Descriptor Tests ---
##################################


def test_sample_function_values(line):
    u = sample_function(line, gaussian(2.0))
    assert u.values_at(np.array([[0]]))[0] == 1.0
    assert u.values_at(np.array([[8]]))[0] == pytest.approx(np.exp(-2.0))
    assert u.exterior == 0.0


def test_radial_power_limits(line):
    assert sample_function(line, radial_power(0.0)).exterior == 1.0
    with pytest.raises(PreconditionError):
        radial_power(-1.0)


def test_cutoff_eta_profile():
    spec = make_grid(1, 32, 2.0)
    eta = cutoff_eta(spec)
    r = np.abs(spec.node_coordinates()[..., 0])
    assert np.all(eta.values[r <= 0.75] == 1.0)
    assert np.all(eta.values[r >= 1.0] == 0.0)
    middle = eta.values[(r > 0.75) & (r < 1.0)]
    assert np.all((middle > 0.0) & (middle < 1.0))


def test_cutoff_eta_needs_unit_ball():
    with pytest.raises(PreconditionError):
        cutoff_eta(make_grid(1, 16, 0.5))


##################################
# --- Indicator Tests ---
##################################


def test_indicator_measure_counts_cells(square):
    # centres at +-0.125 on each axis
    ind = indicator_from_predicate(square, lambda c: np.abs(c).max(axis=-1) < 0.25)
    assert ind.cell_count == 4
    assert ind.measure == pytest.approx(4 * 0.25**2)


def test_node_average_of_single_cell(line):
    cells = np.zeros(line.cell_shape, dtype=bool)
    # cell 8 covers [0, 1/8]
    cells[8] = True
    average = SetIndicator(line, cells).node_average()
    assert average.values_at(np.array([[0], [1]])).tolist() == [0.5, 0.5]
    assert average.values.sum() == 1.0


def test_indicator_shape_mismatch(line):
    with pytest.raises(PreconditionError):
        SetIndicator(line, np.zeros(3, dtype=bool))


##################################
# --- Dyadic Cube Tests ---
##################################


def test_dyadic_cube_alignment(line):
    cube = dyadic_cube(line, (0.0,), 0.5)
    assert cube.origin == (4,)
    assert cube.width == 8
    assert cube.level == 1
    assert cube.center == (0.0,)
    assert cube.measure == pytest.approx(1.0)


def test_dyadic_cube_rejects_misaligned(line):
    with pytest.raises(PreconditionError):
        dyadic_cube(line, (0.01,), 0.5)
    with pytest.raises(PreconditionError):
        dyadic_cube(line, (0.0,), 0.3)
    with pytest.raises(PreconditionError):
        dyadic_cube(line, (0.75,), 0.5)


def test_children_are_lexicographic(square):
    root = dyadic_root(square)
    children = list(root.children())
    assert [c.origin for c in children] == [(0, 0), (0, 4), (4, 0), (4, 4)]
    assert all(c.level == 1 and c.width == 4 for c in children)
    assert all(root.contains(c) for c in children)
    assert not children[0].contains(root)


def test_single_cell_has_no_children(line):
    cube = dyadic_cube(line, (0.0625,), 0.0625)
    assert cube.width == 1
    assert list(cube.children()) == []
