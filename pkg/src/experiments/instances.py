"""
Seeded generators for experiment inputs: sets E, right-hand sides,
exterior data and the fixed localization test functions.

Every random quantity is drawn on a lattice that does not depend on the grid
resolution, so the same (seed, index) gives the same instance at n_cells and
n_cells / 2.
"""

from typing import Dict, List, Sequence

import numpy as np

from src.errors import PreconditionError
from src.grid.grid_core import GridFunction, GridSpec, SetIndicator

# --- Constants ---

SET_FAMILIES = ("random-cells", "balls", "unions")
SIGNS = ("nonnegative", "mixed")
RHS_LATTICE = 0.25
SET_RADIUS = 0.5
MAX_UNION_PARTS = 4
EXTERIOR_BUMP_RADIUS = 1.5
BUMP_WIDTH = 0.4
INTERIOR_BUMP_WIDTH = 0.6


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, instance index)."""
    return np.random.default_rng([int(seed), int(index)])


#####################
#     SETS
#####################


def eligible_cells(spec: GridSpec, radius: float = SET_RADIUS) -> np.ndarray:
    """Cells whose centre lies strictly inside B_radius."""
    return np.sum(spec.cell_centers() ** 2, axis=-1) < radius**2


def set_sizes(eligible_count: int, count: int) -> List[int]:
    """Target cell counts from 1 to eligible_count, log-spaced."""
    if eligible_count < 1 or count < 1:
        raise PreconditionError("set sizes need at least one eligible cell and one instance")
    sizes = np.rint(np.geomspace(1, eligible_count, count)).astype(int)
    return [int(s) for s in np.clip(sizes, 1, eligible_count)]


def _ball_cells(spec: GridSpec, eligible: np.ndarray, centre: np.ndarray, target: int) -> np.ndarray:
    centres = spec.cell_centers()
    if spec.dim == 1:
        radius = target * spec.h / 2.0
    else:
        radius = np.sqrt(target * spec.cell_volume / np.pi)
    distance = np.linalg.norm(centres - centre, axis=-1)
    cells = eligible & (distance < radius)
    if not cells.any():
        nearest = np.unravel_index(np.argmin(np.where(eligible, distance, np.inf)), distance.shape)
        cells[nearest] = True
    return cells


def random_set(spec: GridSpec, rng: np.random.Generator, family: str, target: int) -> SetIndicator:
    """
    A set E of about `target` cells inside B_{1/2}.

    random-cells: target cells drawn without replacement.
    balls: one ball of measure close to target cells around a random eligible centre.
    unions: a union of up to four such balls sharing the target.
    """
    if family not in SET_FAMILIES:
        raise PreconditionError(f"unknown set family {family!r}; expected one of {SET_FAMILIES}")
    eligible = eligible_cells(spec)
    candidates = np.flatnonzero(eligible)
    if len(candidates) == 0:
        raise PreconditionError("no cell centre lies inside B_1/2")
    target = int(np.clip(target, 1, len(candidates)))
    centres = spec.cell_centers().reshape(-1, spec.dim)

    if family == "random-cells":
        chosen = rng.choice(candidates, size=target, replace=False)
        cells = np.zeros(eligible.size, dtype=bool)
        cells[chosen] = True
        return SetIndicator(spec, cells.reshape(spec.cell_shape))

    parts = 1 if family == "balls" else int(rng.integers(1, MAX_UNION_PARTS + 1))
    cells = np.zeros(spec.cell_shape, dtype=bool)
    for _ in range(parts):
        centre = centres[rng.choice(candidates)]
        cells |= _ball_cells(spec, eligible, centre, max(1, target // parts))
    return SetIndicator(spec, cells)


#####################
#     DATA
#####################


def _lattice_values(spec: GridSpec, coordinates: np.ndarray, table: np.ndarray) -> np.ndarray:
    index = np.floor((coordinates + spec.exterior_radius) / RHS_LATTICE).astype(np.int64)
    index = np.clip(index, 0, table.shape[0] - 1)
    return table[tuple(np.moveaxis(index, -1, 0))]


def _lattice_table(spec: GridSpec, rng: np.random.Generator, low: float, high: float) -> np.ndarray:
    cells = int(np.ceil(2.0 * spec.exterior_radius / RHS_LATTICE)) + 1
    return rng.uniform(low, high, size=(cells,) * spec.dim)


def random_rhs(
    spec: GridSpec, nodes: np.ndarray, rng: np.random.Generator, sign: str = "nonnegative"
) -> np.ndarray:
    """Piecewise constant f on a 1/4 lattice, sampled at the nodes; values in [0,1] or [-1,1]."""
    if sign not in SIGNS:
        raise PreconditionError(f"unknown sign {sign!r}; expected one of {SIGNS}")
    low = 0.0 if sign == "nonnegative" else -1.0
    table = _lattice_table(spec, rng, low, 1.0)
    return _lattice_values(spec, np.asarray(nodes) * spec.h, table)


def random_exterior_data(
    spec: GridSpec, rng: np.random.Generator, low: float = -1.0, high: float = 1.0
) -> GridFunction:
    """Piecewise constant g with values and exterior constant in [low, high]."""
    table = _lattice_table(spec, rng, low, high)
    values = _lattice_values(spec, spec.node_coordinates(), table)
    return GridFunction(spec, values, float(rng.uniform(low, high)))


##########################
#     TEST FUNCTIONS
##########################


def smooth_bump(coordinates: np.ndarray, centre: Sequence[float], width: float) -> np.ndarray:
    """exp(1 - 1/(1 - s^2)) with s = |x - centre| / width, zero for s >= 1."""
    s = np.linalg.norm(coordinates - np.asarray(centre, dtype=float), axis=-1) / width
    inside = s < 1.0
    s_in = np.where(inside, s, 0.0)
    return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - s_in**2)), 0.0)


def _exterior_bumps(spec: GridSpec, coordinates: np.ndarray) -> np.ndarray:
    if spec.dim == 1:
        centres = [(-EXTERIOR_BUMP_RADIUS,), (EXTERIOR_BUMP_RADIUS,)]
    else:
        r = EXTERIOR_BUMP_RADIUS
        centres = [(r, 0.0), (0.0, r), (-r, 0.0), (0.0, -r)]
    total = np.zeros(coordinates.shape[:-1])
    for k, centre in enumerate(centres):
        total += (-1.0) ** k * smooth_bump(coordinates, centre, BUMP_WIDTH)
    return total


def localization_functions(spec: GridSpec) -> Dict[str, GridFunction]:
    """
    interior-bump: supported in B_{3/4}, so the cutoff leaves it unchanged.
    constant-one: 1 everywhere, including the exterior.
    exterior-bumps: sign-alternating bumps centred at radius 3/2, zero in B_1.
    gaussian-exterior: exp(-4|x|^2) plus the exterior bumps.
    """
    if spec.half_width < EXTERIOR_BUMP_RADIUS + BUMP_WIDTH:
        raise PreconditionError(
            f"box half_width {spec.half_width} cannot hold the exterior bumps"
        )
    x = spec.node_coordinates()
    exterior = _exterior_bumps(spec, x)
    return {
        "interior-bump": GridFunction(spec, smooth_bump(x, (0.0,) * spec.dim, INTERIOR_BUMP_WIDTH), 0.0),
        "constant-one": GridFunction(spec, np.ones(spec.shape), 1.0),
        "exterior-bumps": GridFunction(spec, exterior, 0.0),
        "gaussian-exterior": GridFunction(spec, np.exp(-4.0 * np.sum(x**2, axis=-1)) + exterior, 0.0),
    }
