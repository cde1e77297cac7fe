"""
Coefficient fields built from the eigen-structure of D^sigma u.

All constructions work in the eigenbasis from sym_eigh, so they are
deterministic across runs. Batched helpers take stacks (m, dim, dim).
"""

from typing import Optional, Tuple, Union

import numpy as np

from src.errors import PreconditionError
from src.grid.grid_core import GridFunction, GridSpec, NodeField
from src.operators.kernel_weights import KernelWeights
from src.operators.nonlocal_ops import (
    MINUS,
    PLUS,
    EllipticityParams,
    MatrixField,
    eval_sigma_hessian,
    pucci_from_eigenvalues,
    sym_eigh,
)
from utils.file_utils import setup_logger

logger = setup_logger(__name__)

# --- Constants ---

TARGET_TOL = 1e-12
ONESIDED_TOL = 1e-10
ONESIDED_MARGIN = 1.5
COARSE_LATTICE = 0.125
FAMILIES = ("constant", "checkerboard", "random-rotation")


def _conjugate(eigenvectors: np.ndarray, diagonal: np.ndarray) -> np.ndarray:
    """Q diag(a) Q^T for stacks."""
    return np.einsum("...ik,...k,...jk->...ij", eigenvectors, diagonal, eigenvectors)


#########################
#     LEMMA-TYPE CHOICES
#########################


def construct_tilde_A(m: np.ndarray, p: EllipticityParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    A~ = Q diag(a) Q^T with a = 2*Lam on negative eigenvalues and lam/2 on the rest.

    Returns:
        (A~, A~ : m). The value equals 2 Lam sum e- + (lam/2) sum e+.
    """
    eigenvalues, eigenvectors = sym_eigh(m)
    diagonal = np.where(eigenvalues < 0, 2.0 * p.Lam, p.lam / 2.0)
    value = 2.0 * p.Lam * np.sum(np.clip(eigenvalues, None, 0.0), axis=-1) + (
        p.lam / 2.0
    ) * np.sum(np.clip(eigenvalues, 0.0, None), axis=-1)
    return _conjugate(eigenvectors, diagonal), value


def lemma_constant(p: EllipticityParams) -> float:
    """min{Lam, lam/2}: the lower bound on the gain of A~ over any admissible A."""
    return min(p.Lam, p.lam / 2.0)


def extremal_realizers(m: np.ndarray, p: EllipticityParams) -> Tuple[np.ndarray, np.ndarray]:
    """(A+, A-) with A+ : m = M+ and A- : m = M-."""
    eigenvalues, eigenvectors = sym_eigh(m)
    plus = np.where(eigenvalues > 0, p.Lam, p.lam)
    minus = np.where(eigenvalues < 0, p.Lam, p.lam)
    return _conjugate(eigenvectors, plus), _conjugate(eigenvectors, minus)


def realize_target_A(
    m: np.ndarray, p: EllipticityParams, target: Union[float, np.ndarray], tol: float = TARGET_TOL
) -> np.ndarray:
    """
    Admissible A with A : m = target, interpolating A = t A+ + (1 - t) A-.

    Works on one matrix or a stack with one target each.

    Raises:
        PreconditionError: If target falls outside [M-(m), M+(m)] by more than tol (relative).
    """
    m = np.asarray(m, dtype=float)
    eigenvalues, _ = sym_eigh(m)
    upper = pucci_from_eigenvalues(eigenvalues, p, PLUS)
    lower = pucci_from_eigenvalues(eigenvalues, p, MINUS)
    target = np.asarray(target, dtype=float)

    slack = tol * np.maximum(1.0, np.maximum(np.abs(upper), np.abs(lower)))
    outside = (target < lower - slack) | (target > upper + slack)
    if np.any(outside):
        index = int(np.argmax(np.ravel(outside)))
        raise PreconditionError(
            f"target {np.ravel(target * np.ones_like(upper))[index]:.6g} is outside "
            f"[M-, M+] = [{np.ravel(lower)[index]:.6g}, {np.ravel(upper)[index]:.6g}]"
        )

    spread = upper - lower
    safe_spread = np.where(spread > 0, spread, 1.0)
    t = np.where(spread > 0, np.clip((target - lower) / safe_spread, 0.0, 1.0), 0.0)
    a_plus, a_minus = extremal_realizers(m, p)
    t = np.asarray(t)[..., None, None]
    return t * a_plus + (1.0 - t) * a_minus


def _node_values(f: Union[GridFunction, NodeField, np.ndarray, float], nodes: np.ndarray):
    if isinstance(f, GridFunction):
        return f.values_at(nodes)
    if isinstance(f, NodeField):
        if not np.array_equal(f.nodes, nodes):
            raise PreconditionError("node field is not given on the evaluation nodes")
        return f.values
    return np.broadcast_to(np.asarray(f, dtype=float), (len(nodes),))


def construct_onesided_A(
    u: GridFunction,
    f,
    p: EllipticityParams,
    w: KernelWeights,
    nodes: Optional[np.ndarray] = None,
    f_minus=None,
) -> MatrixField:
    """
    Coefficients A(x) with -2 f-(x) <= L_A u(x) <= 2 f+(x) on the given nodes.

    Args:
        u: The function squeezed between the two extremal inequalities.
        f: Upper bound f+ >= 0 (grid function, node field, array or scalar).
        p: Ellipticity parameters.
        w: Kernel weights for u's grid.
        nodes: Nodes of the solve domain. Defaults to the nodes of B_1.
        f_minus: Lower bound f- >= 0. Defaults to f.

    Raises:
        PreconditionError: If M+ u >= -f- or M- u <= f+ fails at some node.
    """
    spec = u.spec
    nodes = spec.nodes_in_ball(1.0) if nodes is None else np.asarray(nodes).reshape(-1, spec.dim)
    f_plus = _node_values(f, nodes)
    f_minus = f_plus if f_minus is None else _node_values(f_minus, nodes)
    if np.any(f_plus < 0) or np.any(f_minus < 0):
        raise PreconditionError("one-sided bounds f+ and f- must be nonnegative")

    hessian = eval_sigma_hessian(u, w, nodes)
    upper = pucci_from_eigenvalues(hessian.eigenvalues, p, PLUS)
    lower = pucci_from_eigenvalues(hessian.eigenvalues, p, MINUS)
    slack = ONESIDED_TOL * np.maximum(1.0, np.abs(hessian.matrices).max(axis=(1, 2)) * p.Lam)

    for values, bad, inequality in (
        (upper, upper < -f_minus - slack, "M+ u >= -f-"),
        (lower, lower > f_plus + slack, "M- u <= f+"),
    ):
        if np.any(bad):
            row = int(np.argmax(bad))
            raise PreconditionError(
                f"{inequality} fails at node {tuple(nodes[row])}: "
                f"operator {values[row]:.6g}, f+ {f_plus[row]:.6g}, f- {f_minus[row]:.6g}"
            )

    lo = np.maximum(lower, -ONESIDED_MARGIN * f_minus)
    hi = np.minimum(upper, ONESIDED_MARGIN * f_plus)
    target = np.minimum(np.maximum(0.0, lo), hi)
    # lo > hi only within the tolerance above
    target = np.where(lo > hi, 0.5 * (lo + hi), target)
    target = np.clip(target, lower, upper)

    matrices = realize_target_A(hessian.matrices, p, target, tol=ONESIDED_TOL)
    logger.debug(f"One-sided coefficients built on {len(nodes)} nodes")
    return MatrixField(spec, nodes, matrices)


#########################
#     FAMILIES
#########################


def _rotation(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)


def _diagonal_pair(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    out = np.zeros(first.shape + (2, 2))
    out[..., 0, 0] = first
    out[..., 1, 1] = second
    return out


def coefficient_field(
    spec: GridSpec,
    nodes: np.ndarray,
    p: EllipticityParams,
    family: str,
    rng: Optional[np.random.Generator] = None,
) -> MatrixField:
    """
    Admissible coefficient families.

    constant: one random eigenbasis and eigenvalues in [lam, Lam] for every node.
    checkerboard: each node owns the side-h cell centred on it, and these
        cells alternate between diag(lam, Lam) and diag(Lam, lam) by the
        parity of the node's index sum (lam and Lam in 1D). The pattern is
        the finest the grid can carry and so refines with n_cells.
    random-rotation: space is cut into blocks of a fixed 0.125 lattice and
        each block draws one rotation R; every node inside the block gets
        R diag(lam, Lam) R^T. The field is therefore constant on blocks of
        many grid cells and does not change with n_cells (in 1D each block
        draws one value in [lam, Lam]).
    """
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1, spec.dim)
    rng = np.random.default_rng(0) if rng is None else rng
    m = len(nodes)

    if family == "constant":
        eigenvalues = rng.uniform(p.lam, p.Lam, size=spec.dim)
        if spec.dim == 1:
            matrix = eigenvalues.reshape(1, 1)
        else:
            rotation = _rotation(rng.uniform(0.0, np.pi))
            matrix = rotation @ np.diag(eigenvalues) @ rotation.T
        matrices = np.broadcast_to(matrix, (m, spec.dim, spec.dim)).copy()

    elif family == "checkerboard":
        even = np.sum(nodes, axis=1) % 2 == 0
        if spec.dim == 1:
            matrices = np.where(even, p.lam, p.Lam).reshape(m, 1, 1)
        else:
            matrices = np.where(
                even[:, None, None],
                _diagonal_pair(np.full(m, p.lam), np.full(m, p.Lam)),
                _diagonal_pair(np.full(m, p.Lam), np.full(m, p.lam)),
            )

    elif family == "random-rotation":
        lattice_cells = int(np.ceil(2.0 * spec.exterior_radius / COARSE_LATTICE)) + 1
        cell = np.floor((nodes * spec.h + spec.exterior_radius) / COARSE_LATTICE).astype(np.int64)
        cell = np.clip(cell, 0, lattice_cells - 1)
        if spec.dim == 1:
            draws = rng.uniform(p.lam, p.Lam, size=lattice_cells)
            matrices = draws[cell[:, 0]].reshape(m, 1, 1)
        else:
            angles = rng.uniform(0.0, np.pi, size=(lattice_cells, lattice_cells))
            rotation = _rotation(angles[cell[:, 0], cell[:, 1]])
            base = _diagonal_pair(np.full(m, p.lam), np.full(m, p.Lam))
            matrices = rotation @ base @ np.swapaxes(rotation, 1, 2)
            matrices = 0.5 * (matrices + np.swapaxes(matrices, 1, 2))

    else:
        raise PreconditionError(f"unknown coefficient family {family!r}; expected one of {FAMILIES}")

    return MatrixField(spec, nodes, matrices).validate(p)
