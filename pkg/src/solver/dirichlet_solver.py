"""
Dense monotone discretisation of the exterior Dirichlet problem

    L_A u = -f  on the domain nodes,    u = g  everywhere else.

Row x of the matrix holds 2<A(x), W_{z-x}> for every other domain node z and
-2<A(x), sum_k W_k + T> on the diagonal, so the matrix applied to u restricted
to the domain, plus the contribution of g, is exactly eval_LA.
"""

import timeit
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg

from src.errors import (
    MonotonicityError,
    PreconditionError,
    SingularSystemError,
    SolverResidualError,
)
from src.grid.grid_core import GridFunction, GridSpec, NodeField
from src.operators.kernel_weights import KernelWeights
from src.operators.nonlocal_ops import EllipticityParams, MatrixField, eval_LA
from utils.file_utils import setup_logger, log_stage_timing

logger = setup_logger(__name__)

######################
#     CONFIGURATION
######################

RESIDUAL_TOL = 1e-9
COMPARISON_TOL = 1e-10
# row block size is chosen so that block_rows * unknowns stays below this
ASSEMBLY_BLOCK_ELEMENTS = 2_000_000
EXPECTED_SECONDS_PER_ROW = 1e-3
DOMAIN_KINDS = ("ball", "cube")

NodeData = Union[GridFunction, NodeField, np.ndarray, float]


#####################
#     DOMAINS
#####################


@dataclass(frozen=True, eq=False)
class SolveDomain:
    """The unknown nodes. `kind` is "ball", "cube" or "nodes" for an explicit list."""

    spec: GridSpec
    kind: str
    radius: float
    nodes: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)

    def mask(self) -> np.ndarray:
        mask = np.zeros(self.spec.shape, dtype=bool)
        mask[self.spec.positions(self.nodes)] = True
        return mask

    def describe(self) -> str:
        return f"{self.kind}(radius={self.radius!r}, nodes={self.size})"


def solve_domain(spec: GridSpec, kind: str = "ball", radius: float = 1.0) -> SolveDomain:
    """
    Nodes strictly inside B_radius or Q(0; radius).

    Raises:
        PreconditionError: For an unknown kind or a domain leaving the box.
    """
    if kind not in DOMAIN_KINDS:
        raise PreconditionError(f"unknown domain kind {kind!r}; expected one of {DOMAIN_KINDS}")
    if not 0 < radius <= spec.half_width:
        raise PreconditionError(
            f"domain radius {radius} must lie in (0, half_width = {spec.half_width}]"
        )
    nodes = spec.nodes_in_ball(radius) if kind == "ball" else spec.nodes_in_cube(radius)
    if len(nodes) == 0:
        raise PreconditionError(f"{kind} of radius {radius} contains no grid node")
    return SolveDomain(spec, kind, float(radius), nodes)


def domain_from_nodes(spec: GridSpec, nodes: np.ndarray) -> SolveDomain:
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1, spec.dim)
    if len(nodes) == 0 or np.abs(nodes).max() > spec.n_ext:
        raise PreconditionError("domain nodes must be a nonempty subset of the extended box")
    radius = float(np.abs(nodes).max() * spec.h)
    return SolveDomain(spec, "nodes", radius, nodes)


#####################
#     OPERATOR
#####################


@dataclass(frozen=True)
class MonotonicityCertificate:
    min_offdiagonal: float
    min_margin: float

    @property
    def passed(self) -> bool:
        return self.min_offdiagonal >= 0.0 and self.min_margin > 0.0


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    spec: GridSpec
    domain: SolveDomain
    coefficients: MatrixField
    weights: KernelWeights
    matrix: np.ndarray
    certificate: MonotonicityCertificate

    @property
    def domain_mask(self) -> np.ndarray:
        return self.domain.mask()

    @cached_property
    def factorization(self) -> Tuple[np.ndarray, np.ndarray]:
        lu, piv = linalg.lu_factor(self.matrix, check_finite=False)
        pivots = np.abs(np.diag(lu))
        if np.any(pivots == 0.0):
            raise SingularSystemError(
                f"zero pivot at row {int(np.argmin(pivots))} of the {self.domain.size}-unknown system"
            )
        return lu, piv

    def boundary_map(self, g: Optional[GridFunction]) -> np.ndarray:
        """Contribution of the values outside the domain to each row."""
        if g is None:
            return np.zeros(self.domain.size)
        outside = g.with_values_at(self.domain.nodes, 0.0)
        if outside.exterior == 0.0 and not np.any(outside.values):
            return np.zeros(self.domain.size)
        return eval_LA(outside, self.coefficients, self.weights).values

    def apply(self, u: GridFunction) -> np.ndarray:
        """L_A u on the domain through the matrix."""
        return self.matrix @ u.values_at(self.domain.nodes) + self.boundary_map(u)


def assemble(
    A: MatrixField, w: KernelWeights, domain: SolveDomain, p: Optional[EllipticityParams] = None
) -> OperatorMatrix:
    """
    Build and certify the dense operator matrix.

    Args:
        A: Coefficients given on exactly the domain nodes.
        w: Kernel weights for the grid.
        domain: The unknown nodes.
        p: When given, A is checked against [lam, Lam] before assembly.

    Raises:
        PreconditionError: If A is not admissible or does not match the domain.
        MonotonicityError: If a stencil weight is negative or a row is not
            strictly diagonally dominant.
    """
    spec = domain.spec
    if A.spec != spec or w.spec != spec:
        raise PreconditionError("coefficients, weights and domain live on different grids")
    if not np.array_equal(A.nodes, domain.nodes):
        raise PreconditionError("coefficients must be given on exactly the domain nodes")
    if p is not None:
        A.validate(p)
    extent = int((domain.nodes.max(axis=0) - domain.nodes.min(axis=0)).max())
    if extent > w.max_offset:
        raise PreconditionError(
            f"domain spans {extent} nodes but the weights only reach {w.max_offset}"
        )

    start_time = timeit.default_timer()
    nodes = domain.nodes
    m = len(nodes)
    matrix = np.zeros((m, m))
    block = max(1, ASSEMBLY_BLOCK_ELEMENTS // m)
    shift = w.max_offset

    for start in range(0, m, block):
        stop = min(m, start + block)
        diff = nodes[None, :, :] - nodes[start:stop, None, :]
        index = w.offset_table[tuple(np.moveaxis(diff + shift, -1, 0))]
        pairing = np.einsum(
            "bij,bmij->bm", A.matrices[start:stop], w.weights[np.maximum(index, 0)]
        )
        pairing[index < 0] = 0.0
        matrix[start:stop] = 2.0 * pairing

    diagonal = -2.0 * np.einsum("mij,ij->m", A.matrices, w.weight_sum + w.tail)
    matrix[np.arange(m), np.arange(m)] = diagonal

    offdiagonal = matrix - np.diag(diagonal)
    min_off = float(offdiagonal.min()) if m > 1 else 0.0
    margins = -diagonal - offdiagonal.sum(axis=1)
    certificate = MonotonicityCertificate(min_off, float(margins.min()))

    if min_off < 0.0:
        row = int(np.argmin(offdiagonal.min(axis=1)))
        raise MonotonicityError(row, min_off, "negative stencil weight")
    if certificate.min_margin <= 0.0:
        row = int(np.argmin(margins))
        raise MonotonicityError(row, float(margins[row]), "row is not strictly diagonally dominant")

    log_stage_timing(
        logger, "assembly rows", m, timeit.default_timer() - start_time, EXPECTED_SECONDS_PER_ROW
    )
    logger.debug(
        f"Monotone structure certified: min off-diagonal {min_off:.3e}, "
        f"min row margin {certificate.min_margin:.3e}"
    )
    return OperatorMatrix(spec, domain, A, w, matrix, certificate)


#####################
#     SOLVE
#####################


def values_on_domain(data: Optional[NodeData], domain: SolveDomain) -> np.ndarray:
    if data is None:
        return np.zeros(domain.size)
    if isinstance(data, GridFunction):
        return data.values_at(domain.nodes)
    if isinstance(data, NodeField):
        if not np.array_equal(data.nodes, domain.nodes):
            raise PreconditionError("node field is not given on the domain nodes")
        return data.values
    values = np.asarray(data, dtype=float)
    if values.ndim == 0:
        return np.full(domain.size, float(values))
    if values.shape != (domain.size,):
        raise PreconditionError(f"expected {domain.size} domain values, got shape {values.shape}")
    return values


@dataclass(frozen=True, eq=False)
class SolveResult:
    u: GridFunction
    residual: float
    scale: float


def solve_report(
    sys: OperatorMatrix, f: Optional[NodeData], g: Optional[GridFunction] = None
) -> SolveResult:
    """
    Solve L_A u = -f on the domain with u = g outside and check the residual.

    Raises:
        SingularSystemError: On a zero pivot.
        SolverResidualError: If |L_A u + f| exceeds 1e-9 times the problem scale.
    """
    spec = sys.spec
    if g is None:
        g = GridFunction(spec, np.zeros(spec.shape), 0.0)
    elif g.spec != spec:
        raise PreconditionError("exterior data lives on a different grid")

    rhs = values_on_domain(f, sys.domain)
    boundary = sys.boundary_map(g)
    inside = linalg.lu_solve(sys.factorization, -rhs - boundary, check_finite=False)

    residual_vector = sys.matrix @ inside + boundary + rhs
    residual = float(np.max(np.abs(residual_vector), initial=0.0))
    row_norm = float(np.abs(sys.matrix).sum(axis=1).max())
    scale = max(
        float(np.max(np.abs(rhs), initial=0.0)),
        float(np.max(np.abs(boundary), initial=0.0)),
        row_norm * float(np.max(np.abs(inside), initial=0.0)),
        np.finfo(float).tiny,
    )
    if residual > RESIDUAL_TOL * scale:
        logger.error(f"Residual {residual:.3e} exceeds tolerance at scale {scale:.3e}")
        raise SolverResidualError(
            f"residual {residual:.3e} exceeds {RESIDUAL_TOL:g} * scale {scale:.3e}"
        )
    return SolveResult(g.with_values_at(sys.domain.nodes, inside), residual, scale)


def solve(sys: OperatorMatrix, f: Optional[NodeData], g: Optional[GridFunction] = None) -> GridFunction:
    return solve_report(sys, f, g).u


@dataclass(frozen=True)
class ComparisonReport:
    max_violation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance


def comparison_check(
    sys: OperatorMatrix,
    f1: NodeData,
    g1: Optional[GridFunction],
    f2: NodeData,
    g2: Optional[GridFunction],
    tol: float = COMPARISON_TOL,
) -> ComparisonReport:
    """
    Solve both problems and confirm u1 >= u2 everywhere.

    Raises:
        PreconditionError: If f1 >= f2 on the domain or g1 >= g2 outside fails.
        MonotonicityError: If u1 < u2 somewhere beyond tol times the solution scale.
    """
    zero = GridFunction(sys.spec, np.zeros(sys.spec.shape), 0.0)
    g1 = zero if g1 is None else g1
    g2 = zero if g2 is None else g2
    if np.any(values_on_domain(f1, sys.domain) < values_on_domain(f2, sys.domain)):
        raise PreconditionError("comparison needs f1 >= f2 on the domain")
    outside = ~sys.domain_mask
    if np.any(g1.values[outside] < g2.values[outside]) or g1.exterior < g2.exterior:
        raise PreconditionError("comparison needs g1 >= g2 outside the domain")

    u1 = solve(sys, f1, g1)
    u2 = solve(sys, f2, g2)
    gap = u2.values - u1.values
    violation = max(0.0, float(gap.max()), u2.exterior - u1.exterior)
    scale = max(u1.sup_norm(), u2.sup_norm(), np.finfo(float).tiny)
    report = ComparisonReport(violation, tol * scale)
    if not report.passed:
        row = int(np.argmax(gap))
        logger.error(f"Comparison violated by {violation:.3e} at flat node {row}")
        raise MonotonicityError(row, violation, "comparison principle violated")
    return report
