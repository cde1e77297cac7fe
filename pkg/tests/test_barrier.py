import numpy as np
import pytest

from src.errors import BarrierError, PreconditionError
from src.grid.grid_core import make_grid
from src.operators.kernel_weights import build_weights
from src.operators.nonlocal_ops import EllipticityParams
from src.solver import barrier
from src.solver.barrier import (
    BarrierCertificate,
    barrier_candidate,
    barrier_construct,
    smooth_min,
    support_radius,
)


@pytest.fixture
def params():
    return EllipticityParams(1.0, 1.0, 2.0)


@pytest.fixture
def wide_line():
    return make_grid(1, 64, 8.0)


##################################
# --- Candidate Tests ---
##################################


def test_smooth_min_bounds():
    a = np.linspace(0.0, 2.0, 21)
    b = np.ones_like(a)
    blended = smooth_min(a, b, 0.5)
    assert np.all(blended <= np.minimum(a, b))
    assert np.all(blended >= np.minimum(a, b) - 0.5 / 4.0)
    # far from the corner the blend is exact
    assert blended[0] == 0.0 and blended[-1] == 1.0


def test_candidate_shape(wide_line):
    phi = barrier_candidate(wide_line, 2.0)
    radius = wide_line.node_radius()
    assert phi.exterior == 0.0
    assert np.all(phi.values >= 0.0)
    assert np.all(phi.values[radius >= support_radius(1)] == 0.0)
    centre = phi.values_at(np.array([[0]]))[0]
    assert centre == phi.values.max()
    # radially nonincreasing
    right = phi.values[wide_line.n_ext:]
    assert np.all(np.diff(right) <= 1e-15)


@pytest.mark.parametrize("q", [2.0, 4.0, 8.0])
def test_candidate_is_exact_away_from_the_cap_on_a_coarse_grid(wide_line, q):
    # h = 0.25: the blend must not reach the floor cube
    phi = barrier_candidate(wide_line, q)
    at_six = phi.values_at(np.array([[24]]))[0]
    assert at_six == pytest.approx(6.0 ** -q - 8.0 ** -q, rel=1e-12)
    assert phi.values_at(np.array([[0]]))[0] <= 0.5 ** -q


def test_support_radius():
    assert support_radius(1) == 8.0
    assert support_radius(2) == pytest.approx(8.0 * np.sqrt(2.0))


##################################
# --- Construction Tests ---
##################################


def test_construct_needs_large_box(params):
    with pytest.raises(PreconditionError, match="must contain"):
        barrier_construct(make_grid(1, 32, 4.0), params)


def test_construct_rejects_foreign_weights(wide_line, params):
    w = build_weights(wide_line, 1.5)
    with pytest.raises(PreconditionError, match="do not match"):
        barrier_construct(wide_line, params, w)


def test_construct_reports_every_failed_exponent(wide_line, params, mocker):
    def failing(spec, p, w, q):
        return BarrierCertificate(
            phi=None, psi=None, c_phi=1.0, min_slack=-q, support_ok=True,
            exponent=q, scale=1.0, pucci=None,
        )

    mocker.patch.object(barrier, "_certify", side_effect=failing)
    with pytest.raises(BarrierError) as info:
        barrier_construct(wide_line, params, exponents=(2.0, 1.0))
    assert info.value.slack_by_exponent == {1.0: -1.0, 2.0: -2.0}


def test_construct_returns_first_passing_exponent(wide_line, params, mocker):
    def passing_from_two(spec, p, w, q):
        return BarrierCertificate(
            phi=None, psi=None, c_phi=0.1, min_slack=0.0 if q >= 2.0 else -1.0,
            support_ok=True, exponent=q, scale=1.0, pucci=None,
        )

    mocker.patch.object(barrier, "_certify", side_effect=passing_from_two)
    certificate = barrier_construct(wide_line, params, exponents=(1.0, 2.0, 3.0))
    assert certificate.exponent == 2.0
    assert certificate.slack_by_exponent == {1.0: -1.0, 2.0: 0.0}


def test_certificate_psi_is_bounded(wide_line, params):
    w = build_weights(wide_line, params.sigma)
    certificate = barrier._certify(wide_line, params, w, 4.0)
    radius = wide_line.node_radius()
    assert np.all((certificate.psi.values >= 0.0) & (certificate.psi.values <= 1.0))
    assert np.all(certificate.psi.values[radius >= 1.0] == 0.0)
    assert certificate.support_ok
    assert certificate.c_phi > 0.0


@pytest.mark.parametrize("q", [6.0, 8.0])
def test_certificate_floor_is_positive_for_steep_exponents(wide_line, params, q):
    w = build_weights(wide_line, params.sigma)
    certificate = barrier._certify(wide_line, params, w, q)
    expected = (6.0 ** -q - 8.0 ** -q) / certificate.scale
    assert certificate.c_phi == pytest.approx(expected, rel=1e-12)


@pytest.mark.slow
def test_barrier_certified_in_1d():
    spec = make_grid(1, 512, 8.0)
    certificate = barrier_construct(spec, EllipticityParams(1.0, 1.0, 2.0))
    assert certificate.passed
    assert certificate.c_phi > 0.0
    assert certificate.min_slack >= -1e-8
