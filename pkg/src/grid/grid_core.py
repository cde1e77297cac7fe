"""
Uniform-grid representation of functions on all of space.

A function is stored as its values on the nodes of an extended box
|x|_inf <= exterior_radius plus a constant it takes everywhere beyond.
Nodes sit at integer multiples of the spacing h; the computational box
[-half_width, half_width]^dim is split into n_cells cells per axis.

Node index arrays are signed integer tuples (i_0[, i_1]) with node
position i * h. Cell index arrays run from 0 to n_cells - 1 with cell c
covering [-half_width + c*h, -half_width + (c+1)*h].
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Optional, Tuple

import numpy as np

from src.errors import PreconditionError
from utils.file_utils import setup_logger

logger = setup_logger(__name__)

#####################
#     CONSTANTS
#####################

SUPPORTED_DIMS = (1, 2)
MIN_CELLS = 8
# floor(R/h) is taken with this slack so that R = N*h lands on N
INDEX_SLACK = 1e-9
ETA_INNER = 0.75
ETA_OUTER = 1.0


def _is_power_of_two(value: int) -> bool:
    return value > 0 and (value & (value - 1)) == 0


#####################
#     GRID SPEC
#####################


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry. Build through make_grid, which validates."""

    dim: int
    n_cells: int
    half_width: float
    exterior_radius: float

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.n_cells

    @property
    def half_cells(self) -> int:
        """Box nodes satisfy |i|_inf <= half_cells."""
        return self.n_cells // 2

    @property
    def n_ext(self) -> int:
        """Extended box nodes satisfy |i|_inf <= n_ext."""
        return int(np.floor(self.exterior_radius / self.h + INDEX_SLACK))

    @property
    def shape(self) -> Tuple[int, ...]:
        return (2 * self.n_ext + 1,) * self.dim

    @property
    def cell_shape(self) -> Tuple[int, ...]:
        return (self.n_cells,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def box_measure(self) -> float:
        return (2.0 * self.half_width) ** self.dim

    def header(self) -> str:
        return (
            f"dim={self.dim} n_cells={self.n_cells} "
            f"half_width={self.half_width!r} exterior_radius={self.exterior_radius!r}"
        )

    # --- node geometry ---

    def node_indices(self) -> np.ndarray:
        """All extended-box node indices, shape (*shape, dim), C order."""
        axis = np.arange(-self.n_ext, self.n_ext + 1)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    def node_coordinates(self) -> np.ndarray:
        return self.node_indices() * self.h

    def node_radius(self) -> np.ndarray:
        return np.linalg.norm(self.node_coordinates(), axis=-1)

    def positions(self, nodes: np.ndarray) -> Tuple[np.ndarray, ...]:
        """Array positions of signed node indices in the stored value array."""
        return tuple((np.asarray(nodes) + self.n_ext).T)

    def box_nodes(self) -> np.ndarray:
        """Nodes of the computational box, |i|_inf <= half_cells, as (m, dim)."""
        indices = self.node_indices().reshape(-1, self.dim)
        keep = np.abs(indices).max(axis=1) <= self.half_cells
        return indices[keep]

    def nodes_in_ball(self, radius: float) -> np.ndarray:
        """Box nodes with |x| < radius, lexicographic order."""
        nodes = self.box_nodes()
        r2 = np.sum((nodes * self.h) ** 2, axis=1)
        return nodes[r2 < radius**2 - INDEX_SLACK * self.h**2]

    def nodes_in_cube(self, half_side: float) -> np.ndarray:
        """Box nodes with |x|_inf < half_side."""
        nodes = self.box_nodes()
        return nodes[np.abs(nodes * self.h).max(axis=1) < half_side - INDEX_SLACK * self.h]

    # --- cell geometry ---

    def cell_centers(self) -> np.ndarray:
        """Cell centres, shape (*cell_shape, dim)."""
        axis = -self.half_width + (np.arange(self.n_cells) + 0.5) * self.h
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)


def make_grid(
    dim: int,
    n_cells: int,
    half_width: float,
    exterior_radius: Optional[float] = None,
) -> GridSpec:
    """
    Validate grid parameters and build a GridSpec.

    Args:
        dim: Spatial dimension, 1 or 2.
        n_cells: Cells per axis inside the box, a power of two >= 8.
        half_width: Box half-side.
        exterior_radius: Radius beyond which the exterior constant applies.
            Defaults to 2 * half_width.

    Raises:
        PreconditionError: If any grid invariant cannot be met.
    """
    if dim not in SUPPORTED_DIMS:
        raise PreconditionError(f"unsupported dimension: {dim} (expected 1 or 2)")
    if not isinstance(n_cells, (int, np.integer)) or not _is_power_of_two(int(n_cells)):
        raise PreconditionError(f"n_cells must be a power of 2, got {n_cells}")
    if n_cells < MIN_CELLS:
        raise PreconditionError(f"n_cells must be at least {MIN_CELLS}, got {n_cells}")
    if not np.isfinite(half_width) or half_width <= 0:
        raise PreconditionError(f"half_width must be positive, got {half_width}")
    if exterior_radius is None:
        exterior_radius = 2.0 * half_width
    if exterior_radius < 2.0 * half_width:
        raise PreconditionError(
            f"exterior_radius {exterior_radius} must be at least 2*half_width = {2.0 * half_width}"
        )

    spec = GridSpec(int(dim), int(n_cells), float(half_width), float(exterior_radius))
    logger.debug(f"Grid built: {spec.header()} h={spec.h!r} n_ext={spec.n_ext}")
    return spec


##########################
#     GRID FUNCTIONS
##########################


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Node values on the extended box plus a constant exterior value."""

    spec: GridSpec
    values: np.ndarray
    exterior: float = 0.0

    __array_ufunc__ = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.spec.shape:
            raise PreconditionError(
                f"grid function shape {values.shape} does not match spec shape {self.spec.shape}"
            )
        if not np.all(np.isfinite(values)) or not np.isfinite(self.exterior):
            raise PreconditionError("grid function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "exterior", float(self.exterior))

    @property
    def exterior_rule(self) -> str:
        return "zero" if self.exterior == 0.0 else "constant"

    def sup_norm(self) -> float:
        """Sup over all of space: grid maximum or the exterior constant."""
        return max(float(np.max(np.abs(self.values))), abs(self.exterior))

    def values_at(self, nodes: np.ndarray) -> np.ndarray:
        return self.values[self.spec.positions(nodes)]

    def with_values_at(self, nodes: np.ndarray, values: np.ndarray) -> "GridFunction":
        updated = np.array(self.values)
        updated[self.spec.positions(nodes)] = values
        return GridFunction(self.spec, updated, self.exterior)

    def _check_same_grid(self, other: "GridFunction"):
        if other.spec != self.spec:
            raise PreconditionError("grid functions live on different grids")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check_same_grid(other)
        return GridFunction(self.spec, self.values + other.values, self.exterior + other.exterior)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check_same_grid(other)
        return GridFunction(self.spec, self.values - other.values, self.exterior - other.exterior)

    def __mul__(self, scalar: float) -> "GridFunction":
        return GridFunction(self.spec, self.values * scalar, self.exterior * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return self * -1.0


@dataclass(frozen=True, eq=False)
class NodeField:
    """Values at a list of nodes, e.g. an operator evaluated on a domain."""

    spec: GridSpec
    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, self.spec.dim)
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != nodes.shape[0]:
            raise PreconditionError("node field needs one value per node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", values)

    def coordinates(self) -> np.ndarray:
        return self.nodes * self.spec.h

    def to_grid_function(self, fill: float = 0.0) -> GridFunction:
        """Scatter onto the grid; nodes not in the field and the exterior get `fill`."""
        values = np.full(self.spec.shape, fill, dtype=float)
        values[self.spec.positions(self.nodes)] = self.values
        return GridFunction(self.spec, values, fill)


#########################
#     DESCRIPTORS
#########################


@dataclass(frozen=True)
class FunctionDescriptor:
    """A closed-form function: pointwise formula on coordinates plus its value at infinity."""

    name: str
    formula: Callable[[np.ndarray], np.ndarray]
    exterior: float = 0.0


def gaussian(a: float = 1.0) -> FunctionDescriptor:
    return FunctionDescriptor(
        f"gaussian({a!r})", lambda x: np.exp(-a * np.sum(x**2, axis=-1)), 0.0
    )


def constant(c: float) -> FunctionDescriptor:
    return FunctionDescriptor(f"constant({c!r})", lambda x: np.full(x.shape[:-1], float(c)), c)


def bump() -> FunctionDescriptor:
    return FunctionDescriptor("bump", lambda x: eta_profile(np.linalg.norm(x, axis=-1)), 0.0)


def radial_power(p: float) -> FunctionDescriptor:
    """(1 + |x|^2)^(-p/2): bounded, radial, decaying like |x|^-p for p > 0."""
    if p < 0:
        raise PreconditionError("radial_power needs p >= 0 to stay bounded")
    limit = 1.0 if p == 0 else 0.0
    return FunctionDescriptor(
        f"radial_power({p!r})", lambda x: (1.0 + np.sum(x**2, axis=-1)) ** (-p / 2.0), limit
    )


def tabulated(name: str, formula: Callable[[np.ndarray], np.ndarray], exterior: float = 0.0):
    """Wrap any vectorised formula x (..., dim) -> (...) as a descriptor."""
    return FunctionDescriptor(name, formula, exterior)


DESCRIPTORS = {
    "gaussian": gaussian,
    "constant": constant,
    "bump": lambda *_: bump(),
    "radial-power": radial_power,
}


def sample_function(spec: GridSpec, descriptor: FunctionDescriptor) -> GridFunction:
    """
    Evaluate a descriptor on every extended-box node.

    Raises:
        PreconditionError: If the formula is not finite somewhere on the extended box.
    """
    values = np.asarray(descriptor.formula(spec.node_coordinates()), dtype=float)
    if not np.all(np.isfinite(values)):
        raise PreconditionError(f"{descriptor.name} is not finite on the extended box")
    return GridFunction(spec, values, descriptor.exterior)


#####################
#     CUTOFF
#####################


def eta_profile(radius: np.ndarray) -> np.ndarray:
    """Radial cutoff: 1 up to 3/4, exp(1 - 1/(1 - s^2)) on (3/4, 1), 0 from 1 on."""
    radius = np.asarray(radius, dtype=float)
    s = (radius - ETA_INNER) / (ETA_OUTER - ETA_INNER)
    inside = (s > 0) & (s < 1)
    s_in = np.where(inside, s, 0.5)
    ramp = np.exp(1.0 - 1.0 / (1.0 - s_in**2))
    return np.where(s <= 0, 1.0, np.where(inside, ramp, 0.0))


def cutoff_eta(spec: GridSpec) -> GridFunction:
    """
    The cutoff eta: 1 on B_{3/4}, 0 outside B_1.

    Raises:
        PreconditionError: If the box does not contain B_1.
    """
    if spec.half_width < ETA_OUTER:
        raise PreconditionError(
            f"box half_width {spec.half_width} is too small to contain B_1"
        )
    return GridFunction(spec, eta_profile(spec.node_radius()), 0.0)


##########################
#     SET INDICATORS
##########################


@dataclass(frozen=True, eq=False)
class SetIndicator:
    """A union of grid cells."""

    spec: GridSpec
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        if cells.shape != self.spec.cell_shape:
            raise PreconditionError(
                f"indicator shape {cells.shape} does not match cells {self.spec.cell_shape}"
            )
        object.__setattr__(self, "cells", cells)

    @property
    def cell_count(self) -> int:
        return int(np.count_nonzero(self.cells))

    @property
    def measure(self) -> float:
        return indicator_measure(self)

    def node_average(self) -> GridFunction:
        """
        Node function taking, at each box node, the mean of the indicator over
        the 2^dim cells touching it. Interior nodes of E get 1, nodes outside
        the closure of E get 0.
        """
        padded = np.pad(self.cells.astype(float), 1)
        total = np.zeros((self.spec.n_cells + 1,) * self.spec.dim)
        for shift in np.ndindex(*([2] * self.spec.dim)):
            window = tuple(slice(s, s + self.spec.n_cells + 1) for s in shift)
            total += padded[window]
        averaged = total / 2**self.spec.dim

        values = np.zeros(self.spec.shape)
        lo = self.spec.n_ext - self.spec.half_cells
        box = tuple(slice(lo, lo + self.spec.n_cells + 1) for _ in range(self.spec.dim))
        values[box] = averaged
        return GridFunction(self.spec, values, 0.0)


def indicator_from_cells(spec: GridSpec, cells: np.ndarray) -> SetIndicator:
    return SetIndicator(spec, cells)


def indicator_from_predicate(spec: GridSpec, predicate: Callable[[np.ndarray], np.ndarray]):
    """Cells whose centre satisfies predicate(centres) -> bool array."""
    return SetIndicator(spec, predicate(spec.cell_centers()))


def indicator_measure(ind: SetIndicator) -> float:
    """Cell count times h^dim, exact for cell-aligned sets."""
    return ind.cell_count * ind.spec.cell_volume


#####################
#     DYADIC CUBES
#####################


@dataclass(frozen=True)
class DyadicCube:
    """
    A cube made of width^dim grid cells with lower corner cell `origin`.

    `level` counts dyadic halvings from the root the cube was derived from.
    """

    spec: GridSpec = field(repr=False)
    origin: Tuple[int, ...]
    width: int
    level: int

    @property
    def half_side(self) -> float:
        return self.width * self.spec.h / 2.0

    @property
    def center(self) -> Tuple[float, ...]:
        return tuple(
            -self.spec.half_width + (o + self.width / 2.0) * self.spec.h for o in self.origin
        )

    @property
    def cell_count(self) -> int:
        return self.width**self.spec.dim

    @property
    def measure(self) -> float:
        return self.cell_count * self.spec.cell_volume

    def cell_slices(self) -> Tuple[slice, ...]:
        return tuple(slice(o, o + self.width) for o in self.origin)

    def children(self) -> Iterator["DyadicCube"]:
        """The 2^dim halves, in lexicographic order of their origin."""
        if self.width < 2:
            return
        half = self.width // 2
        for shift in np.ndindex(*([2] * self.spec.dim)):
            origin = tuple(o + s * half for o, s in zip(self.origin, shift))
            yield DyadicCube(self.spec, origin, half, self.level + 1)

    def contains(self, other: "DyadicCube") -> bool:
        return all(
            o <= p and p + other.width <= o + self.width
            for o, p in zip(self.origin, other.origin)
        )

    def density(self, count: int) -> Fraction:
        """Exact |E ∩ Q| / |Q| from a cell count."""
        return Fraction(count, self.cell_count)


def dyadic_root(spec: GridSpec) -> DyadicCube:
    """The whole computational box as a level-0 cube."""
    return DyadicCube(spec, (0,) * spec.dim, spec.n_cells, 0)


def dyadic_cube(spec: GridSpec, center: Tuple[float, ...], half_side: float) -> DyadicCube:
    """
    Cube Q(center; half_side), which must be made of whole grid cells with a
    power-of-two width. Its level is counted from the full box.

    Raises:
        PreconditionError: If the cube is not grid aligned or leaves the box.
    """
    width_float = 2.0 * half_side / spec.h
    width = int(round(width_float))
    if width < 1 or abs(width - width_float) > 1e-9 or not _is_power_of_two(width):
        raise PreconditionError(f"half_side {half_side} is not a dyadic multiple of h/2")

    origin = []
    for c in center:
        corner = (c - half_side + spec.half_width) / spec.h
        if abs(corner - round(corner)) > 1e-9:
            raise PreconditionError(f"cube centred at {center} is not grid aligned")
        origin.append(int(round(corner)))
    if min(origin) < 0 or max(origin) + width > spec.n_cells:
        raise PreconditionError(f"cube Q({center}; {half_side}) leaves the box")

    level = int(round(np.log2(spec.n_cells // width)))
    return DyadicCube(spec, tuple(origin), width, level)
