import numpy as np
import pytest

from src.errors import MonotonicityError, PreconditionError
from src.experiments.oracles import ball_solution, gaussian_trace_dsigma
from src.grid.grid_core import GridFunction, bump, constant, gaussian, make_grid, sample_function
from src.operators.coefficients import coefficient_field
from src.operators.kernel_weights import build_weights
from src.operators.nonlocal_ops import (
    EllipticityParams,
    constant_field,
    eval_LA,
    rescale,
    rescale_field,
)
from src.solver.dirichlet_solver import (
    assemble,
    comparison_check,
    domain_from_nodes,
    solve,
    solve_domain,
    solve_report,
    values_on_domain,
)


@pytest.fixture
def params():
    return EllipticityParams(1.0, 1.0, 2.0)


def _identity_system(dim, n_cells, sigma, lam=1.0):
    spec = make_grid(dim, n_cells, 1.0)
    w = build_weights(spec, sigma)
    domain = solve_domain(spec, "ball", 1.0)
    A = constant_field(spec, domain.nodes, lam * np.eye(dim))
    return spec, assemble(A, w, domain)


def _ball_error(n_cells, sigma):
    spec, system = _identity_system(1, n_cells, sigma)
    u = solve(system, 1.0)
    nodes = system.domain.nodes
    exact = ball_solution(nodes * spec.h, 1, sigma, 1.0)
    return np.abs(u.values_at(nodes) - exact).max() / exact.max()


##################################
# --- Domain Tests ---
##################################


def test_solve_domain_kinds():
    spec = make_grid(2, 16, 1.0)
    ball = solve_domain(spec, "ball", 0.5)
    cube = solve_domain(spec, "cube", 0.5)
    assert ball.size < cube.size
    assert cube.size == 7 * 7
    assert ball.mask().sum() == ball.size


@pytest.mark.parametrize("kind, radius", [("annulus", 0.5), ("ball", 0.0), ("ball", 2.0)])
def test_solve_domain_rejects(kind, radius):
    with pytest.raises(PreconditionError):
        solve_domain(make_grid(1, 16, 1.0), kind, radius)


def test_domain_from_nodes():
    spec = make_grid(1, 16, 1.0)
    domain = domain_from_nodes(spec, np.array([[0], [3]]))
    assert domain.kind == "nodes"
    assert domain.radius == pytest.approx(3 * spec.h)
    with pytest.raises(PreconditionError):
        domain_from_nodes(spec, np.zeros((0, 1)))


def test_values_on_domain():
    spec = make_grid(1, 16, 1.0)
    domain = solve_domain(spec)
    assert values_on_domain(None, domain).tolist() == [0.0] * domain.size
    assert np.all(values_on_domain(2.0, domain) == 2.0)
    with pytest.raises(PreconditionError):
        values_on_domain(np.ones(3), domain)


##################################
# --- Assembly Tests ---
##################################


@pytest.mark.parametrize("dim", [1, 2])
def test_assembled_matrix_is_certified(dim, params):
    spec = make_grid(dim, 16, 1.0)
    w = build_weights(spec, params.sigma)
    domain = solve_domain(spec)
    A = coefficient_field(spec, domain.nodes, params, "random-rotation", np.random.default_rng(2))
    system = assemble(A, w, domain, params)
    assert system.certificate.passed
    assert system.certificate.min_offdiagonal >= 0.0
    assert np.all(np.diag(system.matrix) < 0)


def test_matrix_reproduces_direct_evaluation(params):
    spec = make_grid(2, 16, 1.0)
    w = build_weights(spec, 1.3)
    domain = solve_domain(spec)
    A = coefficient_field(spec, domain.nodes, params, "checkerboard")
    system = assemble(A, w, domain)
    u = sample_function(spec, bump()) + sample_function(spec, constant(0.5))
    direct = eval_LA(u, A, w).values
    np.testing.assert_allclose(system.apply(u), direct, rtol=1e-10, atol=1e-10 * np.abs(direct).max())


def test_assemble_rejects_non_monotone_coefficients():
    spec = make_grid(1, 16, 1.0)
    w = build_weights(spec, 1.0)
    domain = solve_domain(spec)
    A = constant_field(spec, domain.nodes, -np.eye(1))
    with pytest.raises(MonotonicityError, match="negative stencil weight"):
        assemble(A, w, domain)


def test_assemble_checks_admissibility(params):
    spec = make_grid(1, 16, 1.0)
    w = build_weights(spec, 1.0)
    domain = solve_domain(spec)
    A = constant_field(spec, domain.nodes, 5.0 * np.eye(1))
    with pytest.raises(PreconditionError):
        assemble(A, w, domain, params)


def test_assemble_rejects_mismatched_nodes():
    spec = make_grid(1, 16, 1.0)
    w = build_weights(spec, 1.0)
    domain = solve_domain(spec)
    A = constant_field(spec, domain.nodes[:-1], np.eye(1))
    with pytest.raises(PreconditionError, match="exactly the domain nodes"):
        assemble(A, w, domain)


##################################
# --- Solve Tests ---
##################################


def test_solve_residual_is_small():
    _, system = _identity_system(2, 16, 1.5)
    result = solve_report(system, 1.0)
    assert result.residual <= 1e-9 * result.scale
    assert result.u.exterior == 0.0


def test_constant_exterior_data_is_reproduced():
    spec, system = _identity_system(1, 32, 1.0)
    g = sample_function(spec, constant(2.0))
    u = solve(system, 0.0, g)
    np.testing.assert_allclose(u.values_at(system.domain.nodes), 2.0, rtol=1e-10)


def test_positive_source_gives_positive_solution():
    _, system = _identity_system(2, 16, 1.0)
    u = solve(system, 1.0)
    assert np.all(u.values_at(system.domain.nodes) > 0)


@pytest.mark.parametrize("sigma", [1.0, 1.5])
def test_ball_solution_error_decreases(sigma):
    assert _ball_error(128, sigma) < _ball_error(32, sigma)


def test_ball_solution_is_accurate_on_a_moderate_grid():
    assert _ball_error(128, 1.5) < 0.01


@pytest.mark.slow
@pytest.mark.parametrize("sigma", [1.0, 1.5, 1.9])
def test_ball_solution_matches_closed_form(sigma):
    assert _ball_error(512, sigma) < 0.02


def _gaussian_error(n_cells, sigma):
    # exp(-|x|^2) solves L_I u = -f with f = -trace D^sigma u, given u outside the ball.
    spec = make_grid(1, n_cells, 1.0, 4.0)
    w = build_weights(spec, sigma)
    domain = solve_domain(spec, "ball", 1.0)
    system = assemble(constant_field(spec, domain.nodes, np.eye(1)), w, domain)
    exact = sample_function(spec, gaussian())
    f = -gaussian_trace_dsigma(domain.nodes * spec.h, 1, sigma)
    u = solve(system, f, exact)
    return np.abs(u.values - exact.values).max()


@pytest.mark.parametrize("sigma", [0.7, 1.5])
def test_manufactured_solution_converges(sigma):
    coarse, fine = _gaussian_error(16, sigma), _gaussian_error(64, sigma)
    assert fine < 0.1 * coarse
    assert fine < 1e-3


def test_solve_is_linear_in_the_data(params):
    spec = make_grid(2, 16, 1.0)
    w = build_weights(spec, 1.2)
    domain = solve_domain(spec, "cube", 0.5)
    A = coefficient_field(spec, domain.nodes, params, "random-rotation", np.random.default_rng(5))
    system = assemble(A, w, domain, params)
    rng = np.random.default_rng(6)
    f1, f2 = rng.normal(size=domain.size), rng.normal(size=domain.size)
    g1 = GridFunction(spec, rng.normal(size=spec.shape), 0.3)
    g2 = GridFunction(spec, rng.normal(size=spec.shape), -0.1)
    combined = solve(system, 2.0 * f1 - f2, g1 * 2.0 - g2)
    separate = solve(system, f1, g1) * 2.0 - solve(system, f2, g2)
    np.testing.assert_allclose(combined.values, separate.values, atol=1e-10 * np.abs(separate.values).max())


def test_solution_is_covariant_under_rescaling(params):
    # Solving the zoomed problem gives l^-sigma u(x0 + l x) node for node.
    spec = make_grid(1, 32, 1.0, 4.0)
    domain = solve_domain(spec, "ball", 0.5)
    A = coefficient_field(spec, domain.nodes, params, "random-rotation", np.random.default_rng(3))
    f = 1.0 + domain.nodes[:, 0] * spec.h
    u = solve(assemble(A, build_weights(spec, params.sigma), domain, params), f)

    x0, l = np.array([2]), 0.5
    expected = rescale(u, x0, l, params.sigma)
    new_spec = expected.spec
    new_domain = domain_from_nodes(new_spec, domain.nodes - x0)
    new_A = rescale_field(A, x0, new_spec)
    new_system = assemble(new_A, build_weights(new_spec, params.sigma), new_domain, params)
    new_u = solve(new_system, f)
    np.testing.assert_allclose(new_u.values, expected.values, rtol=1e-9, atol=1e-12 * expected.sup_norm())


##################################
# --- Comparison Tests ---
##################################


def test_comparison_holds(params):
    spec = make_grid(1, 32, 1.0)
    w = build_weights(spec, params.sigma)
    domain = solve_domain(spec)
    A = coefficient_field(spec, domain.nodes, params, "random-rotation", np.random.default_rng(4))
    system = assemble(A, w, domain, params)
    g1 = sample_function(spec, constant(0.5))
    report = comparison_check(system, 2.0, g1, 1.0, None)
    assert report.passed
    assert report.max_violation == 0.0


def test_comparison_rejects_unordered_data():
    spec, system = _identity_system(1, 16, 1.0)
    with pytest.raises(PreconditionError, match="f1 >= f2"):
        comparison_check(system, 0.0, None, 1.0, None)
    g2 = GridFunction(spec, np.zeros(spec.shape), 1.0)
    with pytest.raises(PreconditionError, match="g1 >= g2"):
        comparison_check(system, 1.0, None, 1.0, g2)


@pytest.mark.slow
@pytest.mark.parametrize("dim, n_cells", [(1, 32), (2, 16)])
def test_comparison_holds_for_random_ordered_data(dim, n_cells, params):
    spec = make_grid(dim, n_cells, 1.0)
    w = build_weights(spec, 1.4)
    domain = solve_domain(spec)
    A = coefficient_field(spec, domain.nodes, params, "random-rotation", np.random.default_rng(11))
    system = assemble(A, w, domain, params)
    rng = np.random.default_rng(12)
    for _ in range(100):
        f2 = rng.normal(size=domain.size)
        f1 = f2 + rng.exponential(size=domain.size)
        g2 = GridFunction(spec, rng.normal(size=spec.shape), rng.normal())
        g1 = GridFunction(spec, g2.values + rng.exponential(size=spec.shape), g2.exterior + rng.exponential())
        assert comparison_check(system, f1, g1, f2, g2).passed
