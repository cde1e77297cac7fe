import numpy as np
import pytest

from src.errors import PreconditionError
from src.experiments.oracles import gaussian_dsigma_closed_form
from src.grid.grid_core import (
    GridFunction,
    bump,
    constant,
    gaussian,
    make_grid,
    sample_function,
    tabulated,
)
from src.operators.coefficients import coefficient_field
from src.operators.kernel_weights import build_weights
from src.operators.nonlocal_ops import (
    MINUS,
    PLUS,
    EllipticityParams,
    constant_field,
    eval_LA,
    eval_pucci,
    eval_sigma_hessian,
    nuclear_norm,
    pucci_from_eigenvalues,
    rescale,
    sym_eigh,
)


@pytest.fixture
def params():
    return EllipticityParams(1.0, 1.0, 2.0)


@pytest.fixture
def square():
    return make_grid(2, 16, 1.0)


def _shifted_gaussian(centre, a=4.0):
    centre = np.asarray(centre, dtype=float)
    return tabulated("shifted gaussian", lambda x: np.exp(-a * np.sum((x - centre) ** 2, axis=-1)))


##################################
# --- Ellipticity Tests ---
##################################


@pytest.mark.parametrize("lam, Lam", [(0.0, 1.0), (2.0, 1.0), (1.0, np.inf)])
def test_ellipticity_params_reject(lam, Lam):
    with pytest.raises(PreconditionError):
        EllipticityParams(1.0, lam, Lam)


def test_ellipticity_params_reject_sigma():
    with pytest.raises(PreconditionError, match=r"sigma must lie in \(0,2\)"):
        EllipticityParams(2.5, 1.0, 2.0)


##################################
# --- Eigen Helper Tests ---
##################################


def test_sym_eigh_sign_convention():
    m = np.array([[[2.0, 1.0], [1.0, 2.0]], [[0.0, -3.0], [-3.0, 0.0]]])
    eigenvalues, eigenvectors = sym_eigh(m)
    assert np.all(np.diff(eigenvalues, axis=-1) >= 0)
    first_rows = np.where(np.abs(eigenvectors[:, 0, :]) > 1e-14, eigenvectors[:, 0, :], 1.0)
    assert np.all(first_rows > 0)
    rebuilt = np.einsum("mik,mk,mjk->mij", eigenvectors, eigenvalues, eigenvectors)
    np.testing.assert_allclose(rebuilt, m, atol=1e-14)


def test_pucci_from_eigenvalues(params):
    e = np.array([-1.0, 3.0])
    assert pucci_from_eigenvalues(e, params, PLUS) == pytest.approx(2.0 * 3.0 - 1.0)
    assert pucci_from_eigenvalues(e, params, MINUS) == pytest.approx(3.0 - 2.0)
    with pytest.raises(PreconditionError):
        pucci_from_eigenvalues(e, params, "sideways")


def test_nuclear_norm():
    assert nuclear_norm(np.diag([-2.0, 3.0])) == pytest.approx(5.0)


##################################
# --- Evaluation Tests ---
##################################


@pytest.mark.parametrize("n_cells", [512, 1024])
def test_gaussian_matches_closed_form(n_cells):
    # D^1 of exp(-x^2) at the origin is -4 sqrt(pi).
    spec = make_grid(1, n_cells, 8.0, 16.0)
    u = sample_function(spec, gaussian())
    value = eval_sigma_hessian(u, build_weights(spec, 1.0), np.array([[0]])).matrices[0, 0, 0]
    exact = gaussian_dsigma_closed_form(1.0)
    assert exact == pytest.approx(-4.0 * np.sqrt(np.pi))
    assert abs(value - exact) < 0.01 * abs(exact)


def test_gaussian_error_shrinks_under_refinement():
    exact = gaussian_dsigma_closed_form(1.0)
    errors = []
    for n_cells in (512, 1024):
        spec = make_grid(1, n_cells, 8.0, 16.0)
        u = sample_function(spec, gaussian())
        hessian = eval_sigma_hessian(u, build_weights(spec, 1.0), np.array([[0]]))
        errors.append(abs(hessian.matrices[0, 0, 0] - exact))
    assert errors[1] < 0.6 * errors[0]


def test_constant_function_has_zero_hessian(square):
    u = sample_function(square, constant(3.5))
    hessian = eval_sigma_hessian(u, build_weights(square, 1.2))
    assert np.all(hessian.matrices == 0.0)


def test_radial_function_hessian_is_isotropic_at_origin(square):
    u = sample_function(square, gaussian())
    m = eval_sigma_hessian(u, build_weights(square, 1.0), np.array([[0, 0]])).matrices[0]
    assert m[0, 0] == pytest.approx(m[1, 1], rel=1e-12)
    assert abs(m[0, 1]) < 1e-12 * abs(m[0, 0])
    assert m[0, 0] < 0


def test_hessian_is_linear(square):
    w = build_weights(square, 0.8)
    u = sample_function(square, gaussian())
    v = sample_function(square, bump())
    combined = eval_sigma_hessian(u * 2.0 - v, w).matrices
    separate = 2.0 * eval_sigma_hessian(u, w).matrices - eval_sigma_hessian(v, w).matrices
    np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-12 * np.abs(separate).max())


def test_operator_is_additive(square, params):
    w = build_weights(square, 1.1)
    nodes = square.nodes_in_ball(1.0)
    A = coefficient_field(square, nodes, params, "random-rotation", np.random.default_rng(9))
    u = sample_function(square, gaussian())
    v = sample_function(square, _shifted_gaussian([0.4, 0.0])) * -2.0
    combined = eval_LA(u + v, A, w).values
    separate = eval_LA(u, A, w).values + eval_LA(v, A, w).values
    np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-12 * np.abs(separate).max())


def test_hessian_rejects_foreign_weights(square):
    u = sample_function(square, gaussian())
    with pytest.raises(PreconditionError):
        eval_sigma_hessian(u, build_weights(make_grid(2, 8, 1.0), 1.0))


def test_identity_coefficients_give_the_trace(square):
    w = build_weights(square, 1.0)
    u = sample_function(square, bump())
    nodes = square.nodes_in_ball(1.0)
    identity = constant_field(square, nodes, np.eye(2))
    np.testing.assert_allclose(
        eval_LA(u, identity, w).values,
        eval_sigma_hessian(u, w, nodes).trace().values,
        rtol=1e-12,
    )


def test_pucci_sandwich_and_duality(square, params):
    w = build_weights(square, params.sigma)
    u = sample_function(square, bump())
    nodes = square.nodes_in_ball(1.0)
    A = coefficient_field(square, nodes, params, "random-rotation", np.random.default_rng(7))
    la = eval_LA(u, A, w).values
    upper = eval_pucci(u, w, params, PLUS, nodes).values
    lower = eval_pucci(u, w, params, MINUS, nodes).values
    slack = 1e-10 * np.abs(upper).max()
    assert np.all(lower - slack <= la)
    assert np.all(la <= upper + slack)
    np.testing.assert_allclose(eval_pucci(-u, w, params, PLUS, nodes).values, -lower, atol=slack)


def test_hessian_rotates_with_the_function(square):
    # v(x) = u(Rx) for a quarter turn R has D^sigma v(x) = R^T D^sigma u(Rx) R.
    w = build_weights(square, 1.3)
    u = sample_function(square, _shifted_gaussian([0.3, -0.1]))
    v = GridFunction(square, np.rot90(u.values, -1), u.exterior)
    R = np.array([[0, -1], [1, 0]])
    nodes = square.box_nodes()
    rotated = eval_sigma_hessian(v, w, nodes).matrices
    original = eval_sigma_hessian(u, w, nodes @ R.T).matrices
    expected = np.einsum("ji,mjk,kl->mil", R, original, R)
    np.testing.assert_allclose(rotated, expected, rtol=1e-10, atol=1e-10 * np.abs(expected).max())


def test_pucci_is_sub_and_superadditive(square, params):
    w = build_weights(square, params.sigma)
    nodes = square.nodes_in_ball(1.0)
    u = sample_function(square, _shifted_gaussian([0.2, 0.1]))
    v = sample_function(square, bump()) * -1.5
    slack = 1e-10 * np.abs(eval_pucci(u, w, params, PLUS, nodes).values).max()
    plus = [eval_pucci(f, w, params, PLUS, nodes).values for f in (u + v, u, v)]
    minus = [eval_pucci(f, w, params, MINUS, nodes).values for f in (u + v, u, v)]
    assert np.all(plus[0] <= plus[1] + plus[2] + slack)
    assert np.all(minus[0] >= minus[1] + minus[2] - slack)


@pytest.mark.slow
def test_pucci_sandwich_over_many_random_pairs(square, params):
    w = build_weights(square, params.sigma)
    nodes = square.nodes_in_ball(1.0)
    rng = np.random.default_rng(21)
    pairs = 0
    for _ in range(60):
        u = sample_function(square, _shifted_gaussian(rng.uniform(-0.5, 0.5, 2), rng.uniform(1.0, 8.0)))
        u = u * rng.normal()
        hessian = eval_sigma_hessian(u, w, nodes).matrices
        angle = rng.uniform(0.0, np.pi, len(nodes))
        rotation = np.stack(
            [np.stack([np.cos(angle), -np.sin(angle)], -1), np.stack([np.sin(angle), np.cos(angle)], -1)], -2
        )
        eigenvalues = rng.uniform(params.lam, params.Lam, (len(nodes), 2))
        A = np.einsum("mik,mk,mjk->mij", rotation, eigenvalues, rotation)
        la = np.einsum("mij,mji->m", A, hessian)
        upper = eval_pucci(u, w, params, PLUS, nodes).values
        lower = eval_pucci(u, w, params, MINUS, nodes).values
        slack = 1e-10 * max(np.abs(upper).max(), np.abs(lower).max())
        assert np.all(lower - slack <= la) and np.all(la <= upper + slack)
        pairs += len(nodes)
    assert pairs >= 10_000


##################################
# --- Rescaling Tests ---
##################################


def test_rescale_commutes_with_hessian():
    # Node j of the rescaled grid carries exactly the stencil of node x0 + j.
    spec = make_grid(1, 32, 1.0, 4.0)
    sigma = 1.0
    u = sample_function(spec, bump())
    x0 = np.array([4])
    scaled = rescale(u, x0, 0.5, sigma)
    assert scaled.spec.h == pytest.approx(2.0 * spec.h)
    assert scaled.spec.n_ext == spec.n_ext

    new_nodes = np.arange(-8, 9).reshape(-1, 1)
    new = eval_sigma_hessian(scaled, build_weights(scaled.spec, sigma), new_nodes).matrices
    old = eval_sigma_hessian(u, build_weights(spec, sigma), new_nodes + x0).matrices
    np.testing.assert_allclose(new, old, rtol=1e-9, atol=1e-9 * np.abs(old).max())


def test_rescale_scales_values():
    spec = make_grid(1, 16, 1.0, 4.0)
    u = sample_function(spec, constant(1.0))
    scaled = rescale(u, np.array([0]), 0.25, 1.5)
    assert scaled.exterior == pytest.approx(0.25**-1.5)
    assert np.allclose(scaled.values, 0.25**-1.5)


@pytest.mark.parametrize(
    "x0, l",
    [
        (np.array([0]), 0.3),
        (np.array([0]), 2.0),
        (np.array([0.5]), 0.5),
        (np.array([40]), 0.5),
    ],
)
def test_rescale_rejects_bad_arguments(x0, l):
    spec = make_grid(1, 16, 1.0, 4.0)
    u = sample_function(spec, bump())
    with pytest.raises(PreconditionError):
        rescale(u, x0, l, 1.0)


def test_rescale_keeps_values_that_do_not_decay():
    # u = 1 far to the left of the box; shifting left keeps every nonzero value.
    spec = make_grid(1, 32, 1.0, 4.0)
    sigma = 1.5
    u = sample_function(spec, tabulated("left step", lambda x: (x[..., 0] < -3.0).astype(float)))
    x0 = np.array([-4])
    scaled = rescale(u, x0, 0.5, sigma)
    assert scaled.spec.n_ext == spec.n_ext
    assert scaled.values.sum() == pytest.approx(u.values.sum() * 0.5**-sigma)

    new_nodes = np.arange(-8, 9).reshape(-1, 1)
    new = eval_sigma_hessian(scaled, build_weights(scaled.spec, sigma), new_nodes).matrices
    old = eval_sigma_hessian(u, build_weights(spec, sigma), new_nodes + x0).matrices
    assert np.abs(old).max() > 0.0
    np.testing.assert_allclose(new, old, rtol=1e-9, atol=1e-12 * np.abs(old).max())


def test_rescale_refuses_to_drop_values():
    spec = make_grid(1, 32, 1.0, 4.0)
    u = sample_function(spec, tabulated("left step", lambda x: (x[..., 0] < -3.0).astype(float)))
    with pytest.raises(PreconditionError, match="differs from the exterior"):
        rescale(u, np.array([4]), 0.5, 1.5)


def test_rescale_in_2d_pads_with_the_exterior():
    spec = make_grid(2, 8, 1.0)
    u = sample_function(spec, constant(2.0))
    scaled = rescale(u, np.array([2, -3]), 0.5, 1.0)
    assert scaled.spec.shape == spec.shape
    np.testing.assert_array_equal(scaled.values, 4.0)
