import numpy as np
import pytest

from src.errors import PreconditionError
from src.experiments.instances import (
    SET_FAMILIES,
    eligible_cells,
    instance_rng,
    localization_functions,
    random_exterior_data,
    random_rhs,
    random_set,
    set_sizes,
    smooth_bump,
)
from src.grid.grid_core import make_grid


@pytest.fixture
def square():
    return make_grid(2, 32, 1.0)


##################################
# --- Set Tests ---
##################################


def test_instance_rng_is_reproducible():
    assert instance_rng(3, 7).random() == instance_rng(3, 7).random()
    assert instance_rng(3, 7).random() != instance_rng(3, 8).random()


def test_eligible_cells_in_1d():
    assert eligible_cells(make_grid(1, 16, 1.0)).sum() == 8


def test_set_sizes_are_log_spaced():
    assert set_sizes(100, 5) == [1, 3, 10, 32, 100]
    with pytest.raises(PreconditionError):
        set_sizes(0, 3)


@pytest.mark.parametrize("family", SET_FAMILIES)
def test_random_sets_stay_in_half_ball(square, family):
    eligible = eligible_cells(square)
    for index in range(5):
        E = random_set(square, instance_rng(0, index), family, 20)
        assert E.cell_count >= 1
        assert not np.any(E.cells & ~eligible)


def test_random_cells_hits_target(square):
    E = random_set(square, instance_rng(1, 0), "random-cells", 37)
    assert E.cell_count == 37


def test_random_set_unknown_family(square):
    with pytest.raises(PreconditionError, match="unknown set family"):
        random_set(square, instance_rng(0, 0), "spirals", 5)


##################################
# --- Data Tests ---
##################################


@pytest.mark.parametrize("sign, low", [("nonnegative", 0.0), ("mixed", -1.0)])
def test_random_rhs_range(square, sign, low):
    f = random_rhs(square, square.nodes_in_ball(1.0), instance_rng(2, 0), sign)
    assert np.all((f >= low) & (f <= 1.0))


def test_random_rhs_does_not_depend_on_resolution():
    coarse = make_grid(1, 32, 1.0)
    fine = make_grid(1, 64, 1.0)
    nodes = coarse.nodes_in_ball(1.0)
    a = random_rhs(coarse, nodes, instance_rng(4, 2))
    b = random_rhs(fine, 2 * nodes, instance_rng(4, 2))
    np.testing.assert_array_equal(a, b)


def test_random_rhs_unknown_sign(square):
    with pytest.raises(PreconditionError):
        random_rhs(square, square.nodes_in_ball(1.0), instance_rng(0, 0), "positive")


def test_random_exterior_data_range(square):
    g = random_exterior_data(square, instance_rng(5, 0), 0.0, 2.0)
    assert np.all((g.values >= 0.0) & (g.values <= 2.0))
    assert 0.0 <= g.exterior <= 2.0


##################################
# --- Test Function Tests ---
##################################


def test_smooth_bump():
    x = np.array([[0.0], [0.5], [1.0], [2.0]])
    values = smooth_bump(x, (0.0,), 1.0)
    assert values[0] == 1.0
    assert 0.0 < values[1] < 1.0
    assert values[2] == 0.0 and values[3] == 0.0


@pytest.mark.parametrize("dim", [1, 2])
def test_localization_functions(dim):
    spec = make_grid(dim, 32, 2.0)
    functions = localization_functions(spec)
    assert set(functions) == {"interior-bump", "constant-one", "exterior-bumps", "gaussian-exterior"}
    radius = spec.node_radius()
    assert np.all(functions["interior-bump"].values[radius >= 0.75] == 0.0)
    assert np.all(functions["exterior-bumps"].values[radius <= 1.0] == 0.0)
    assert functions["exterior-bumps"].values.max() > 0.0
    assert functions["exterior-bumps"].values.min() < 0.0
    assert functions["constant-one"].exterior == 1.0


def test_localization_functions_need_room():
    with pytest.raises(PreconditionError, match="exterior bumps"):
        localization_functions(make_grid(1, 32, 1.0))
