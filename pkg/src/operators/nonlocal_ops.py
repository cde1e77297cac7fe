"""
Evaluation of the sigma-order Hessian and the operators built from it.

D^sigma u(x) = sum over offsets of delta u(x, k h) W_k + (2c - 2u(x)) T, where
c is the exterior constant. Offsets are visited in pairs ±k, in the fixed
(|k|^2, lexicographic) order, chunk by chunk, so evaluation is bit-reproducible.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from src.errors import PreconditionError
from src.grid.grid_core import GridFunction, GridSpec, NodeField
from src.operators.kernel_weights import KernelWeights, validate_sigma
from utils.file_utils import setup_logger

logger = setup_logger(__name__)

######################
#     CONFIGURATION
######################

# elements gathered per chunk (nodes x offsets)
GATHER_CHUNK = 4_000_000
EIGEN_SIGN_TOL = 1e-14
ELLIPTICITY_TOL = 1e-12
PLUS, MINUS = "plus", "minus"


@dataclass(frozen=True)
class EllipticityParams:
    sigma: float
    lam: float
    Lam: float

    def __post_init__(self):
        validate_sigma(self.sigma)
        if not (np.isfinite(self.lam) and np.isfinite(self.Lam)) or not 0.0 < self.lam <= self.Lam:
            raise PreconditionError(
                f"ellipticity needs 0 < lambda <= Lambda < inf, got {self.lam}, {self.Lam}"
            )


######################
#     EIGEN CONTRACT
######################


def sym_eigh(matrices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched symmetric eigendecomposition with a deterministic convention:
    eigenvalues ascending, each eigenvector's first nonzero component positive.
    """
    matrices = np.asarray(matrices, dtype=float)
    eigenvalues, eigenvectors = np.linalg.eigh(matrices)
    significant = np.abs(eigenvectors) > EIGEN_SIGN_TOL
    first = np.argmax(significant, axis=-2)
    lead = np.take_along_axis(eigenvectors, first[..., None, :], axis=-2)
    signs = np.where(lead < 0, -1.0, 1.0)
    return eigenvalues, eigenvectors * signs


def nuclear_norm(m: np.ndarray) -> np.ndarray:
    """Sum of absolute eigenvalues; works on one matrix or a stack."""
    return np.sum(np.abs(np.linalg.eigvalsh(np.asarray(m, dtype=float))), axis=-1)


def pucci_from_eigenvalues(eigenvalues: np.ndarray, p: EllipticityParams, side: str) -> np.ndarray:
    """M+ = Lam sum e+ + lam sum e-, M- = lam sum e+ + Lam sum e-."""
    positive = np.sum(np.clip(eigenvalues, 0.0, None), axis=-1)
    negative = np.sum(np.clip(eigenvalues, None, 0.0), axis=-1)
    if side == PLUS:
        return p.Lam * positive + p.lam * negative
    if side == MINUS:
        return p.lam * positive + p.Lam * negative
    raise PreconditionError(f"side must be '{PLUS}' or '{MINUS}', got {side!r}")


######################
#     FIELDS
######################


@dataclass(frozen=True, eq=False)
class SigmaHessian:
    """D^sigma u at a list of nodes: matrices (m, dim, dim)."""

    spec: GridSpec
    nodes: np.ndarray
    matrices: np.ndarray

    @cached_property
    def eigen(self) -> Tuple[np.ndarray, np.ndarray]:
        return sym_eigh(self.matrices)

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigen[0]

    def trace(self) -> NodeField:
        return NodeField(self.spec, self.nodes, np.trace(self.matrices, axis1=1, axis2=2))

    def nuclear(self) -> NodeField:
        return NodeField(self.spec, self.nodes, np.sum(np.abs(self.eigenvalues), axis=-1))


@dataclass(frozen=True, eq=False)
class MatrixField:
    """A symmetric coefficient matrix A(x) per node."""

    spec: GridSpec
    nodes: np.ndarray
    matrices: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, self.spec.dim)
        matrices = np.asarray(self.matrices, dtype=float)
        if matrices.shape != (len(nodes), self.spec.dim, self.spec.dim):
            raise PreconditionError("matrix field needs one dim x dim matrix per node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "matrices", matrices)

    def eigenvalue_range(self) -> Tuple[float, float]:
        eigenvalues = np.linalg.eigvalsh(self.matrices)
        return float(eigenvalues.min()), float(eigenvalues.max())

    def validate(self, p: EllipticityParams, tol: float = ELLIPTICITY_TOL) -> "MatrixField":
        """
        Raises:
            PreconditionError: If some A(x) is not symmetric or has an eigenvalue outside [lam, Lam].
        """
        asymmetry = np.abs(self.matrices - np.swapaxes(self.matrices, 1, 2)).max(initial=0.0)
        if asymmetry > tol * max(1.0, p.Lam):
            raise PreconditionError(f"coefficient field is not symmetric (defect {asymmetry:.2e})")
        eigenvalues = np.linalg.eigvalsh(self.matrices)
        low = eigenvalues.min(axis=1) < p.lam * (1.0 - tol)
        high = eigenvalues.max(axis=1) > p.Lam * (1.0 + tol)
        if np.any(low | high):
            row = int(np.argmax(low | high))
            raise PreconditionError(
                f"coefficient at node {tuple(self.nodes[row])} has eigenvalues "
                f"{eigenvalues[row]} outside [{p.lam}, {p.Lam}]"
            )
        return self


def constant_field(spec: GridSpec, nodes: np.ndarray, matrix: np.ndarray) -> MatrixField:
    nodes = np.asarray(nodes).reshape(-1, spec.dim)
    matrix = np.asarray(matrix, dtype=float).reshape(spec.dim, spec.dim)
    return MatrixField(spec, nodes, np.broadcast_to(matrix, (len(nodes), spec.dim, spec.dim)).copy())


#########################
#     EVALUATION
#########################


def _padded_flat(u: GridFunction, pad: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    padded = np.pad(u.values, pad, mode="constant", constant_values=u.exterior)
    return padded.ravel(), padded.shape


def eval_sigma_hessian(
    u: GridFunction, w: KernelWeights, nodes: Optional[np.ndarray] = None
) -> SigmaHessian:
    """
    D^sigma u at the given nodes (default: every box node).

    Raises:
        PreconditionError: If u and w live on different grids or a node leaves the extended box.
    """
    if u.spec != w.spec:
        raise PreconditionError("grid function and weights were built for different grids")
    spec = u.spec
    nodes = spec.box_nodes() if nodes is None else np.asarray(nodes, dtype=np.int64).reshape(-1, spec.dim)
    if len(nodes) and np.abs(nodes).max() > spec.n_ext:
        raise PreconditionError("evaluation nodes must lie in the extended box")

    pad = w.max_offset
    flat, padded_shape = _padded_flat(u, pad)
    strides = np.array([int(np.prod(padded_shape[d + 1:])) for d in range(spec.dim)])
    centre = (nodes + spec.n_ext + pad) @ strides
    shifts = w.half_offsets @ strides
    u_centre = flat[centre]

    # only the upper triangle is summed; the lower one is copied from it
    upper = np.triu_indices(spec.dim)
    half_weights = w.half_weights[:, upper[0], upper[1]]
    result = np.zeros((len(nodes), len(upper[0])))
    chunk = max(1, GATHER_CHUNK // max(1, len(nodes)))
    for start in range(0, len(shifts), chunk):
        step = shifts[start:start + chunk]
        delta = flat[centre[:, None] + step[None, :]] + flat[centre[:, None] - step[None, :]]
        delta -= 2.0 * u_centre[:, None]
        result += delta @ (2.0 * half_weights[start:start + chunk])

    result += (2.0 * u.exterior - 2.0 * u_centre)[:, None] * w.tail[upper][None, :]

    matrices = np.empty((len(nodes), spec.dim, spec.dim))
    matrices[:, upper[0], upper[1]] = result
    matrices[:, upper[1], upper[0]] = result
    return SigmaHessian(spec, nodes, matrices)


def eval_LA(u: GridFunction, A: MatrixField, w: KernelWeights) -> NodeField:
    """L_A u at the nodes of A: the Frobenius pairing of A(x) with D^sigma u(x)."""
    if A.spec != u.spec:
        raise PreconditionError("coefficient field and grid function live on different grids")
    hessian = eval_sigma_hessian(u, w, A.nodes)
    return NodeField(u.spec, A.nodes, np.einsum("mij,mij->m", A.matrices, hessian.matrices))


def eval_pucci(
    u: GridFunction,
    w: KernelWeights,
    p: EllipticityParams,
    side: str,
    nodes: Optional[np.ndarray] = None,
) -> NodeField:
    """Extremal operator M+ or M- at the given nodes."""
    hessian = eval_sigma_hessian(u, w, nodes)
    return NodeField(u.spec, hessian.nodes, pucci_from_eigenvalues(hessian.eigenvalues, p, side))


#########################
#     RESCALING
#########################


def rescale(u: GridFunction, x0: np.ndarray, l: float, sigma: float) -> GridFunction:
    """
    u~(x) = l^-sigma u(x0 + l x) on a grid of spacing h / l.

    Node j of the new grid sits over node x0 + j of the old one, so no
    interpolation is needed. The new grid keeps the same N, so its extended
    box reaches |x0|_inf nodes past the old one on one side; those nodes take
    the exterior constant, which becomes l^-sigma c. Old nodes left outside
    the new box must already equal c, so D^sigma u~(j) = D^sigma u(x0 + j) holds
    exactly at every new node.

    Raises:
        PreconditionError: If l is not 2^-k, x0 is not a box node, or an old
            value outside the new extended box differs from the exterior.
    """
    sigma = validate_sigma(sigma)
    spec = u.spec
    exponent = -np.log2(l) if l > 0 else np.nan
    if not np.isfinite(exponent) or exponent < 0 or abs(exponent - round(exponent)) > 1e-12:
        raise PreconditionError(f"scale l must be 2^-k with k >= 0, got {l}")
    x0 = np.asarray(x0)
    if not np.issubdtype(x0.dtype, np.integer):
        raise PreconditionError("x0 must be given as an integer node index")
    x0 = x0.reshape(spec.dim)
    if np.abs(x0).max() > spec.half_cells:
        raise PreconditionError(f"x0 {tuple(x0)} is outside the box")

    n_ext = spec.n_ext
    shift = int(np.abs(x0).max())
    padded = np.pad(u.values, shift, mode="constant", constant_values=u.exterior)
    window = tuple(slice(shift + int(c), shift + int(c) + 2 * n_ext + 1) for c in x0)

    # old nodes the window drops
    dropped = np.ones(padded.shape, dtype=bool)
    dropped[window] = False
    dropped_values = padded[dropped]
    if np.any(dropped_values != u.exterior):
        worst = np.abs(dropped_values - u.exterior).max()
        raise PreconditionError(
            f"u differs from the exterior by {worst:.3e} outside the extended box around x0 {tuple(x0)}"
        )

    new_spec = GridSpec(spec.dim, spec.n_cells, spec.half_width / l, spec.exterior_radius / l)
    factor = l ** (-sigma)
    logger.debug(f"Rescaled around {tuple(x0)} with l={l}: new grid {new_spec.header()}")
    return GridFunction(new_spec, factor * padded[window], factor * u.exterior)


def rescale_field(A: MatrixField, x0: np.ndarray, new_spec: GridSpec) -> MatrixField:
    """A~(x) = A(x0 + l x): same matrices, nodes shifted by -x0 onto the rescaled grid."""
    return MatrixField(new_spec, A.nodes - np.asarray(x0).reshape(1, -1), A.matrices)
