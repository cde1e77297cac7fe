"""
Exact dyadic Calderon-Zygmund decomposition of a cell set E.

A cube is split while |E ∩ Q| < alpha |Q| and kept as soon as
|E ∩ Q| >= alpha |Q|. Children with no cell of E are skipped, and a single
cell of E has density 1, so the recursion always stops and the kept cubes
cover E exactly. Densities are compared as fractions, so no tolerance is used.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

import numpy as np

from src.errors import PreconditionError
from src.grid.grid_core import DyadicCube, SetIndicator, dyadic_root
from utils.file_utils import setup_logger

logger = setup_logger(__name__)


class CellCounter:
    """|E ∩ Q| in O(1) per cube from a summed-area table of the cell indicator."""

    def __init__(self, cells: np.ndarray):
        self.dim = cells.ndim
        table = cells.astype(np.int64)
        for axis in range(self.dim):
            table = np.cumsum(table, axis=axis)
        self.table = np.pad(table, [(1, 0)] * self.dim)

    def count(self, cube: DyadicCube) -> int:
        total = 0
        for corner in np.ndindex(*([2] * self.dim)):
            index = tuple(o + c * cube.width for o, c in zip(cube.origin, corner))
            sign = (-1) ** (self.dim - sum(corner))
            total += sign * int(self.table[index])
        return total


@dataclass(frozen=True)
class CZResult:
    alpha: Fraction
    root: DyadicCube
    kept: List[DyadicCube]
    predecessors: List[DyadicCube]
    kept_counts: List[int]
    # parent of each kept cube, before predecessors are reduced to maximal ones
    parents: List[DyadicCube] = field(repr=False)
    e_cells: int = 0

    @property
    def e_measure(self) -> float:
        return self.e_cells * self.root.spec.cell_volume

    @property
    def predecessor_cells(self) -> int:
        return sum(q.cell_count for q in self.predecessors)

    @property
    def predecessor_measure(self) -> float:
        return self.predecessor_cells * self.root.spec.cell_volume

    @property
    def densities(self) -> List[Fraction]:
        return [Fraction(c, q.cell_count) for c, q in zip(self.kept_counts, self.kept)]


def _as_fraction(alpha) -> Fraction:
    value = Fraction(alpha).limit_denominator(10**12) if isinstance(alpha, float) else Fraction(alpha)
    if not 0 < value < 1:
        raise PreconditionError(f"alpha must lie in (0,1), got {alpha}")
    return value


def _maximal(cubes: List[DyadicCube]) -> List[DyadicCube]:
    """Drop duplicates and cubes contained in another one; keeps first-seen order."""
    unique: Dict[tuple, DyadicCube] = {}
    for cube in cubes:
        unique.setdefault((cube.origin, cube.width), cube)
    candidates = list(unique.values())
    return [
        cube
        for cube in candidates
        if not any(other is not cube and other.contains(cube) for other in candidates)
    ]


def cz_decompose(E: SetIndicator, alpha, root: Optional[DyadicCube] = None) -> CZResult:
    """
    Decompose E inside `root` (default: the whole box).

    Raises:
        PreconditionError: If alpha is not in (0,1), E has cells outside the
            root cube, or |E| >= alpha |root|.
    """
    alpha = _as_fraction(alpha)
    spec = E.spec
    root = dyadic_root(spec) if root is None else root
    if root.spec != spec:
        raise PreconditionError("root cube and set live on different grids")

    counter = CellCounter(E.cells)
    e_cells = E.cell_count
    root_cells = counter.count(root)
    if root_cells != e_cells:
        raise PreconditionError("E has cells outside the root cube")
    if Fraction(root_cells, root.cell_count) >= alpha:
        raise PreconditionError(
            f"decomposition needs |E| < alpha |Q|; got |E|/|Q| = "
            f"{Fraction(root_cells, root.cell_count)} >= {alpha}"
        )

    kept: List[DyadicCube] = []
    kept_counts: List[int] = []
    parents: List[DyadicCube] = []
    stack = [root]
    while stack:
        cube = stack.pop()
        children = []
        for child in cube.children():
            count = counter.count(child)
            if count == 0:
                continue
            if Fraction(count, child.cell_count) >= alpha:
                kept.append(child)
                kept_counts.append(count)
                parents.append(cube)
            else:
                children.append(child)
        # reversed so the first child is visited first
        stack.extend(reversed(children))

    predecessors = _maximal(parents)
    logger.debug(
        f"CZ decomposition alpha={alpha}: {len(kept)} kept cubes, "
        f"{len(predecessors)} predecessors, |E| = {e_cells} cells"
    )
    return CZResult(alpha, root, kept, predecessors, kept_counts, parents, e_cells)


#####################
#     VERIFICATION
#####################


@dataclass(frozen=True)
class CZVerification:
    disjoint_kept: bool
    disjoint_predecessors: bool
    predecessors_cover_e: bool
    measure_bound: bool
    kept_density: bool
    covering_ae: bool
    parents_covered: bool

    @property
    def passed(self) -> bool:
        return all(self.__dict__.values())


def _coverage(cubes: List[DyadicCube], shape) -> np.ndarray:
    coverage = np.zeros(shape, dtype=np.int64)
    for cube in cubes:
        coverage[cube.cell_slices()] += 1
    return coverage


def cz_verify(r: CZResult, E: SetIndicator, alpha) -> CZVerification:
    """Recompute every conclusion in exact cell arithmetic."""
    alpha = _as_fraction(alpha)
    shape = E.cells.shape
    e_cells = E.cell_count

    kept_cover = _coverage(r.kept, shape)
    pred_cover = _coverage(r.predecessors, shape)
    predecessor_cells = int(np.count_nonzero(pred_cover))

    kept_density = all(
        Fraction(int(np.count_nonzero(E.cells[q.cell_slices()])), q.cell_count) >= alpha
        for q in r.kept
    )
    if e_cells == 0:
        measure_bound = predecessor_cells == 0
    else:
        measure_bound = Fraction(predecessor_cells) > Fraction(e_cells) / alpha

    return CZVerification(
        disjoint_kept=bool(kept_cover.max(initial=0) <= 1),
        disjoint_predecessors=bool(pred_cover.max(initial=0) <= 1),
        predecessors_cover_e=bool(np.all(pred_cover[E.cells] > 0)),
        measure_bound=measure_bound,
        kept_density=kept_density,
        covering_ae=bool(np.all(kept_cover[E.cells] > 0)),
        parents_covered=all(
            any(p.contains(parent) for p in r.predecessors) for parent in r.parents
        ),
    )
