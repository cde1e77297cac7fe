"""
Power-law fits, L^eps quasi-norms and empirical distribution tails.
"""

from dataclasses import dataclass
from typing import Iterable, Tuple, Union

import numpy as np
from scipy import stats

from src.errors import PreconditionError
from src.grid.grid_core import GridFunction, NodeField

# --- Constants ---

MIN_FIT_POINTS = 3
TAIL_DECADE = 10.0
MIN_TAIL_POINTS = 20


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    log_constant: float
    r_squared: float
    sample_count: int

    @property
    def constant(self) -> float:
        return float(np.exp(self.log_constant))


def _r_squared(x: np.ndarray, y: np.ndarray, slope: float, intercept: float) -> float:
    residual = y - (intercept + slope * x)
    ss_res = float(np.sum(residual**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))


def fit_powerlaw(pairs: Iterable[Tuple[float, float]]) -> PowerLawFit:
    """
    Least-squares line through (log x, log y); the exponent is its slope.

    Raises:
        PreconditionError: With fewer than 3 pairs, non-positive data, or all x equal.
    """
    data = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    if len(data) < MIN_FIT_POINTS:
        raise PreconditionError(f"power-law fit needs at least {MIN_FIT_POINTS} points, got {len(data)}")
    if not np.all(np.isfinite(data)) or np.any(data <= 0):
        raise PreconditionError("power-law fit needs positive finite data")

    log_x, log_y = np.log(data[:, 0]), np.log(data[:, 1])
    if np.ptp(log_x) == 0.0:
        raise PreconditionError("power-law fit needs at least two distinct x values")
    result = stats.linregress(log_x, log_y)
    slope, intercept = float(result.slope), float(result.intercept)
    return PowerLawFit(slope, intercept, _r_squared(log_x, log_y, slope, intercept), len(data))


#########################
#     NORMS
#########################


def _region_values(v: Union[GridFunction, NodeField], radius: float) -> Tuple[np.ndarray, float]:
    spec = v.spec
    if isinstance(v, GridFunction):
        return v.values_at(spec.nodes_in_ball(radius)), spec.cell_volume
    inside = np.sum((v.nodes * spec.h) ** 2, axis=1) < radius**2
    return v.values[inside], spec.cell_volume


def lp_norm(values: np.ndarray, p: float, cell_volume: float) -> float:
    """(sum |v|^p h^dim)^(1/p); a quasi-norm for p < 1."""
    if p <= 0:
        raise PreconditionError(f"exponent must be positive, got {p}")
    total = float(np.sum(np.abs(values) ** p) * cell_volume)
    return total ** (1.0 / p)


def lepsilon_norm(v: Union[GridFunction, NodeField], eps: float, radius: float = 0.5) -> float:
    """L^eps quasi-norm of v over the nodes of B_radius."""
    values, cell_volume = _region_values(v, radius)
    return lp_norm(values, eps, cell_volume)


def layer_cake_norm(values: np.ndarray, eps: float, cell_volume: float) -> float:
    """
    The same quasi-norm through the distribution function,
    int |v|^eps = int_0^inf eps t^(eps-1) |{|v| > t}| dt, integrated exactly:
    |{|v| > t}| is constant between consecutive sorted values.
    """
    if eps <= 0:
        raise PreconditionError(f"exponent must be positive, got {eps}")
    sorted_values = np.sort(np.abs(np.asarray(values, dtype=float)))
    if sorted_values.size == 0:
        return 0.0
    powered = sorted_values**eps
    increments = np.diff(np.concatenate(([0.0], powered)))
    above = np.arange(sorted_values.size, 0, -1)
    total = float(np.sum(increments * above) * cell_volume)
    return total ** (1.0 / eps)


#########################
#     TAILS
#########################


@dataclass(frozen=True)
class TailFit:
    """m(t) ~ t^-exponent fitted over the top decade of the values."""

    exponent: float
    r_squared: float
    sample_count: int
    t_max: float
    degenerate: bool = False


def fit_tail(
    values: np.ndarray,
    cell_volume: float,
    decade: float = TAIL_DECADE,
    min_points: int = MIN_TAIL_POINTS,
) -> TailFit:
    """
    Fit the decay of m(t) = |{v > t}| over t in [t_max / decade, t_max].

    Thresholds are the sorted values themselves; at the j-th largest value
    (j >= 2) the j - 1 entries ranked above it give m = (j - 1) h^dim.
    Ranks do not change when v is scaled, so neither does the exponent. When
    the top decade holds fewer than min_points thresholds, the top min_points
    order statistics are used instead.
    """
    positive = np.sort(np.asarray(values, dtype=float)[np.asarray(values) > 0])[::-1]
    if positive.size < MIN_FIT_POINTS + 1:
        return TailFit(float("nan"), float("nan"), int(positive.size), 0.0, degenerate=True)

    t_max = float(positive[0])
    in_decade = int(np.count_nonzero(positive >= t_max / decade))
    count = min(positive.size, max(in_decade, min_points + 1))
    thresholds = positive[1:count]
    measures = np.arange(1, count) * cell_volume
    if np.ptp(thresholds) == 0.0:
        return TailFit(float("inf"), 1.0, len(thresholds), t_max, degenerate=True)

    fit = fit_powerlaw(zip(thresholds, measures))
    return TailFit(-fit.exponent, fit.r_squared, fit.sample_count, t_max)
