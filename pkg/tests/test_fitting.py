import numpy as np
import pytest

from src.errors import PreconditionError
from src.experiments.fitting import (
    fit_powerlaw,
    fit_tail,
    layer_cake_norm,
    lepsilon_norm,
    lp_norm,
)
from src.grid.grid_core import constant, make_grid, sample_function


##################################
# --- Power Law Tests ---
##################################


def test_fit_powerlaw_exact():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    fit = fit_powerlaw(zip(x, 3.0 * x**2))
    assert fit.exponent == pytest.approx(2.0)
    assert fit.constant == pytest.approx(3.0)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.sample_count == 4


@pytest.mark.parametrize(
    "pairs",
    [
        [(1.0, 1.0), (2.0, 2.0)],
        [(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)],
        [(2.0, 1.0), (2.0, 2.0), (2.0, 3.0)],
        [(1.0, np.nan), (2.0, 1.0), (3.0, 1.0)],
    ],
)
def test_fit_powerlaw_rejects(pairs):
    with pytest.raises(PreconditionError):
        fit_powerlaw(pairs)


##################################
# --- Norm Tests ---
##################################


def test_lp_norm():
    assert lp_norm(np.ones(4), 2.0, 0.25) == pytest.approx(1.0)
    assert lp_norm(np.array([4.0]), 0.5, 1.0) == pytest.approx(4.0)
    with pytest.raises(PreconditionError):
        lp_norm(np.ones(2), 0.0, 1.0)


@pytest.mark.parametrize("eps", [0.1, 0.5, 1.0, 2.0])
def test_layer_cake_matches_direct_sum(eps):
    values = np.random.default_rng(0).normal(size=500)
    direct = lp_norm(values, eps, 0.01)
    assert layer_cake_norm(values, eps, 0.01) == pytest.approx(direct, rel=1e-10)


def test_layer_cake_of_nothing():
    assert layer_cake_norm(np.array([]), 0.5, 1.0) == 0.0


def test_lepsilon_norm_over_half_ball():
    # nodes -3..3 lie in B_{1/2} when h = 1/8
    spec = make_grid(1, 16, 1.0)
    u = sample_function(spec, constant(1.0))
    assert lepsilon_norm(u, 0.5) == pytest.approx((7 * 0.125) ** 2)


##################################
# --- Tail Tests ---
##################################


def test_fit_tail_recovers_exponent():
    # the j-th largest value (j >= 2) is (j-1)^(-1/2), so m(t) = t^-2 exactly
    values = np.concatenate(([2.0], np.arange(1, 201) ** -0.5))
    fit = fit_tail(values, 1.0)
    assert not fit.degenerate
    assert fit.exponent == pytest.approx(2.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.t_max == 2.0


def test_fit_tail_is_scale_invariant():
    values = np.random.default_rng(1).exponential(size=400)
    assert fit_tail(values, 0.01).exponent == pytest.approx(fit_tail(7.0 * values, 0.01).exponent, rel=1e-10)


def test_fit_tail_degenerate_cases():
    assert fit_tail(np.array([1.0, 0.5, 0.0, -1.0]), 1.0).degenerate
    tied = fit_tail(np.ones(50), 1.0)
    assert tied.degenerate
    assert tied.exponent == float("inf")
