"""
Quadrature weights for the sigma-order Hessian.

For every nonzero grid offset k the weight W_k is the integral of
(2 - sigma) y_i y_j |y|^(-dim-sigma-2) over the grid cell centred at k*h,
and the tail T integrates the same kernel outside the cube |y|_inf > (N + 1/2) h.
The origin cell is excluded. Everything is computed at h = 1 and scaled by
h^-sigma, since the kernel is homogeneous of degree -dim-sigma.

Weights are computed for one offset of each pair ±k and mirrored, so W_k = W_-k
holds bit for bit. By default the axis offsets ±e_a then absorb a second-moment
correction: the lattice sums sum_k W_k[a, a] k_c k_d equal the kernel's moments
over the cube |y|_inf < (N + 1/2). In 1D every quadratic is then integrated
exactly; in 2D the diagonal entries of the Hessian are.
"""

import timeit
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, special

from src.errors import PreconditionError
from src.grid.grid_core import GridSpec
from utils.file_utils import setup_logger, log_stage_timing, sha256_bytes

logger = setup_logger(__name__)

######################
#     CONFIGURATION
######################

# Gauss-Legendre points per axis, by offset ring max|k|
NEAR_RING, NEAR_POINTS = 2, 16
MID_RING, MID_POINTS = 8, 8
FAR_POINTS = 4

TAIL_DOMINANCE_RATIO = 0.5
EXPECTED_SECONDS_PER_OFFSET = 1e-4


def validate_sigma(sigma: float) -> float:
    if not np.isfinite(sigma) or not 0.0 < sigma < 2.0:
        raise PreconditionError("sigma must lie in (0,2)")
    return float(sigma)


@dataclass(frozen=True, eq=False)
class KernelWeights:
    """
    Offsets and their weight matrices, sorted by (|k|^2, lexicographic k).

    Attributes:
        spec: Grid the weights were built for.
        sigma: Order of the operator.
        offsets: (K, dim) integer offsets, every nonzero k with |k|_inf <= n_ext.
        weights: (K, dim, dim) symmetric positive semidefinite matrices.
        tail: (dim, dim) far-field matrix, a multiple of the identity.
        tail_dominant: True when trace(T) > 0.5 * sum of trace(W_k).
        moment_corrected: True when the second-moment correction was applied.
    """

    spec: GridSpec
    sigma: float
    offsets: np.ndarray
    weights: np.ndarray
    tail: np.ndarray
    tail_dominant: bool = False
    moment_corrected: bool = False

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def max_offset(self) -> int:
        return self.spec.n_ext

    @cached_property
    def half_mask(self) -> np.ndarray:
        """Offsets whose first nonzero component is positive; one of each pair ±k."""
        return half_offset_mask(self.offsets)

    @cached_property
    def half_offsets(self) -> np.ndarray:
        return self.offsets[self.half_mask]

    @cached_property
    def half_weights(self) -> np.ndarray:
        return self.weights[self.half_mask]

    @cached_property
    def weight_sum(self) -> np.ndarray:
        """Sum of W_k over all offsets."""
        return self.weights.sum(axis=0)

    @cached_property
    def offset_table(self) -> np.ndarray:
        """Dense lookup from offset k (shifted by max_offset) to its row in `offsets`; -1 at 0."""
        return _offset_table(self.offsets, self.max_offset)

    def checksum(self) -> str:
        return sha256_bytes(
            np.ascontiguousarray(self.offsets, dtype=np.int64).tobytes(),
            np.ascontiguousarray(self.weights, dtype=np.float64).tobytes(),
            np.ascontiguousarray(self.tail, dtype=np.float64).tobytes(),
        )


#########################
#     HELPER FUNCTIONS
#########################


def enumerate_offsets(dim: int, max_offset: int) -> np.ndarray:
    """All nonzero integer offsets in [-N, N]^dim, sorted by (|k|^2, lexicographic)."""
    axis = np.arange(-max_offset, max_offset + 1)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    offsets = np.stack(mesh, axis=-1).reshape(-1, dim)
    offsets = offsets[np.any(offsets != 0, axis=1)]
    norm2 = np.sum(offsets**2, axis=1)
    # np.lexsort sorts by the last key first
    order = np.lexsort(tuple(offsets[:, d] for d in reversed(range(dim))) + (norm2,))
    return offsets[order]


def half_offset_mask(offsets: np.ndarray) -> np.ndarray:
    first = np.where(offsets[:, 0] != 0, offsets[:, 0], offsets[:, -1])
    return first > 0


def _offset_table(offsets: np.ndarray, max_offset: int) -> np.ndarray:
    dim = offsets.shape[1]
    table = np.full((2 * max_offset + 1,) * dim, -1, dtype=np.int64)
    table[tuple((offsets + max_offset).T)] = np.arange(len(offsets))
    return table


def _mirror_rows(offsets: np.ndarray, max_offset: int) -> np.ndarray:
    """Row of -k for every row k."""
    table = _offset_table(offsets, max_offset)
    return table[tuple((max_offset - offsets).T)]


def _unit_weights_1d(offsets: np.ndarray, sigma: float) -> np.ndarray:
    """Closed form (2-sigma) * int_a^b |y|^(-1-sigma) dy over the cell, at h = 1."""
    k = np.abs(offsets[:, 0]).astype(float)
    a, b = k - 0.5, k + 0.5
    values = (2.0 - sigma) * (a ** (-sigma) - b ** (-sigma)) / sigma
    return values.reshape(-1, 1, 1)


def _unit_weights_2d(offsets: np.ndarray, sigma: float) -> np.ndarray:
    """Tensor Gauss-Legendre over each unit cell, more points near the origin."""
    weights = np.empty((len(offsets), 2, 2))
    ring = np.abs(offsets).max(axis=1)
    groups = (
        (ring <= NEAR_RING, NEAR_POINTS),
        ((ring > NEAR_RING) & (ring <= MID_RING), MID_POINTS),
        (ring > MID_RING, FAR_POINTS),
    )
    for mask, points in groups:
        if not np.any(mask):
            continue
        nodes, gauss_w = special.roots_legendre(points)
        # map [-1, 1] onto a unit cell [-1/2, 1/2]
        nodes, gauss_w = nodes / 2.0, gauss_w / 2.0
        t0 = offsets[mask, 0, None, None] + nodes[None, :, None]
        t1 = offsets[mask, 1, None, None] + nodes[None, None, :]
        w2d = gauss_w[:, None] * gauss_w[None, :]
        r2 = t0**2 + t1**2
        kernel = (2.0 - sigma) * r2 ** (-(4.0 + sigma) / 2.0) * w2d
        weights[mask, 0, 0] = np.sum(kernel * t0 * t0, axis=(1, 2))
        weights[mask, 1, 1] = np.sum(kernel * t1 * t1, axis=(1, 2))
        off_diagonal = np.sum(kernel * t0 * t1, axis=(1, 2))
        weights[mask, 0, 1] = off_diagonal
        weights[mask, 1, 0] = off_diagonal
    # y_0 * y_1 vanishes identically on the axes
    on_axis = np.any(offsets == 0, axis=1)
    weights[on_axis, 0, 1] = 0.0
    weights[on_axis, 1, 0] = 0.0
    return weights


def _unit_weights(offsets: np.ndarray, max_offset: int, sigma: float) -> np.ndarray:
    """Integrate the half offsets only and copy W_k onto -k."""
    half = half_offset_mask(offsets)
    compute = _unit_weights_1d if offsets.shape[1] == 1 else _unit_weights_2d
    weights = np.empty((len(offsets), offsets.shape[1], offsets.shape[1]))
    weights[half] = compute(offsets[half], sigma)
    mirror = _mirror_rows(offsets, max_offset)
    weights[~half] = weights[mirror[~half]]
    return weights


def _cos_power_integral(sigma: float) -> float:
    value, _ = integrate.quad(lambda theta: np.cos(theta) ** sigma, 0.0, np.pi / 4.0)
    return value


def cube_exterior_trace(dim: int, sigma: float, inner: float) -> float:
    """
    (2-sigma) * int over |y|_inf > inner of |y|^(-dim-sigma) dy.

    With inner = (N + 1/2) h this is trace(T); with inner = h/2 it is the
    total trace the weights and tail must add up to.
    """
    if dim == 1:
        return (2.0 - sigma) * 2.0 * inner ** (-sigma) / sigma
    return (2.0 - sigma) * inner ** (-sigma) * (8.0 / sigma) * _cos_power_integral(sigma)


def tail_tensor(dim: int, sigma: float, inner: float) -> np.ndarray:
    """Tail matrix: by symmetry of the cube exterior it is trace/dim times I."""
    return cube_exterior_trace(dim, sigma, inner) / dim * np.eye(dim)


def cube_second_moments(dim: int, sigma: float, outer: float) -> tuple[float, float]:
    """
    Moments (2-sigma) * int y_a y_b y_c y_d |y|^(-dim-sigma-2) over |y|_inf < outer.

    Returns (aaaa, aabb); in 1D the second entry is 0. The moments are finite
    because the integrand is |y|^(2-dim-sigma) near the origin.
    """
    if dim == 1:
        return 2.0 * outer ** (2.0 - sigma), 0.0
    # polar coordinates with the radius cut at outer / cos(theta) on [0, pi/4], eightfold symmetry
    quarter = np.pi / 4.0
    along, _ = integrate.quad(lambda t: np.cos(t) ** (2.0 + sigma), 0.0, quarter)
    across, _ = integrate.quad(lambda t: np.sin(t) ** 4 * np.cos(t) ** (sigma - 2.0), 0.0, quarter)
    mixed, _ = integrate.quad(lambda t: np.sin(t) ** 2 * np.cos(t) ** sigma, 0.0, quarter)
    return 4.0 * (along + across) * outer ** (2.0 - sigma), 8.0 * mixed * outer ** (2.0 - sigma)


def lattice_second_moments(offsets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """M[a, b, c, d] = sum_k W_k[a, b] k_c k_d."""
    k = offsets.astype(float)
    return np.einsum("kab,kc,kd->abcd", weights, k, k)


def _moment_corrections(offsets: np.ndarray, unit: np.ndarray, sigma: float, max_offset: int) -> dict:
    """
    Matrices added to W_k (and W_-k) on the axis offsets k = ±e_a so the
    lattice moments sum_k W_k[a, a] k_c k_d match the continuum ones over the
    cube |y|_inf < N + 1/2.

    In 2D only the diagonal entries are matched. For semidefinite weights
    symmetric under swapping the axes, sum_k (W_k[0, 0] k_1^2 - W_k[0, 1] k_0 k_1)
    is at least 0, and the cell-averaged weights already exceed the kernel's
    value 0; the off-diagonal moment therefore keeps its lattice value.
    """
    dim = offsets.shape[1]
    aaaa, aabb = cube_second_moments(dim, sigma, max_offset + 0.5)
    moments = lattice_second_moments(offsets, unit)
    if dim == 1:
        return {(1,): np.array([[-(moments[0, 0, 0, 0] - aaaa) / 2.0]])}

    # symmetric lattice: both axes carry the same defects
    p = -(moments[0, 0, 0, 0] - aaaa) / 2.0
    q = -(moments[0, 0, 1, 1] - aabb) / 2.0
    return {
        (1, 0): np.array([[p, 0.0], [0.0, q]]),
        (0, 1): np.array([[q, 0.0], [0.0, p]]),
    }


def _apply_moment_corrections(
    offsets: np.ndarray, unit: np.ndarray, sigma: float, max_offset: int
) -> tuple[np.ndarray, bool]:
    corrections = _moment_corrections(offsets, unit, sigma, max_offset)
    table = _offset_table(offsets, max_offset)
    corrected = unit.copy()
    for offset, delta in corrections.items():
        for sign in (1, -1):
            row = table[tuple(max_offset + sign * np.array(offset))]
            corrected[row] = corrected[row] + delta
    rows = [table[tuple(max_offset + np.array(offset))] for offset in corrections]
    if np.linalg.eigvalsh(corrected[rows]).min() < 0.0:
        logger.warning(
            f"Second-moment correction would make a weight indefinite at sigma={sigma}; "
            "keeping the uncorrected weights"
        )
        return unit, False
    return corrected, True


#########################
#     MAIN FUNCTION
#########################


def build_weights(spec: GridSpec, sigma: float, moment_correction: bool = True) -> KernelWeights:
    """
    Build the quadrature weights and tail for a grid and order sigma.

    Args:
        spec: Grid the operator acts on.
        sigma: Order in (0, 2).
        moment_correction: Adjust the axis weights so the diagonal second
            moments are exact. Skipped with a warning if a weight would lose
            positive semidefiniteness.

    Raises:
        PreconditionError: If sigma lies outside (0, 2).
    """
    sigma = validate_sigma(sigma)
    start_time = timeit.default_timer()

    offsets = enumerate_offsets(spec.dim, spec.n_ext)
    unit = _unit_weights(offsets, spec.n_ext, sigma)
    corrected = False
    if moment_correction:
        unit, corrected = _apply_moment_corrections(offsets, unit, sigma, spec.n_ext)

    scale = spec.h ** (-sigma)
    weights = unit * scale
    tail = tail_tensor(spec.dim, sigma, (spec.n_ext + 0.5) * spec.h)

    weight_trace = float(np.trace(weights, axis1=1, axis2=2).sum())
    tail_dominant = bool(np.trace(tail) > TAIL_DOMINANCE_RATIO * weight_trace)
    if tail_dominant:
        logger.warning(
            f"Tail dominates the weights (trace T = {np.trace(tail):.4e}, "
            f"sum trace W = {weight_trace:.4e}); increase exterior_radius"
        )

    offsets.setflags(write=False)
    weights.setflags(write=False)
    tail.setflags(write=False)

    log_stage_timing(
        logger,
        f"kernel weights dim={spec.dim} sigma={sigma}",
        len(offsets),
        timeit.default_timer() - start_time,
        EXPECTED_SECONDS_PER_OFFSET,
    )
    return KernelWeights(spec, sigma, offsets, weights, tail, tail_dominant, corrected)


def total_trace(weights: KernelWeights) -> float:
    """Sum of trace(W_k) plus trace(T)."""
    return float(np.trace(weights.weights, axis1=1, axis2=2).sum() + np.trace(weights.tail))
