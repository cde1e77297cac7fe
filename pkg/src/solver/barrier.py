"""
Numerically certified barrier for the lower bound argument.

Candidate: Phi_q(x) = smoothmin(r_cap^-q, |x|^-q) - R^-q inside B_R, 0 outside,
with R = 8 sqrt(dim). The exponent q is swept upwards; the first q whose
scaled M- Phi_q is bounded below by -Psi, with 0 <= Psi <= 1 supported in B_1,
is returned.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np

from src.errors import BarrierError, PreconditionError
from src.grid.grid_core import GridFunction, GridSpec, NodeField
from src.operators.kernel_weights import KernelWeights, build_weights
from src.operators.nonlocal_ops import MINUS, EllipticityParams, eval_pucci
from utils.file_utils import setup_logger

logger = setup_logger(__name__)

######################
#     CONFIGURATION
######################

DEFAULT_EXPONENTS = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0)
CAP_RADIUS = 0.5
BLEND_CAP_FRACTION = 0.25
SLACK_TOL = 1e-8
FLOOR_HALF_SIDE = 6.0


def support_radius(dim: int) -> float:
    return 8.0 * np.sqrt(dim)


def smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    """min(a, b) with the corner replaced by a quadratic blend of width k."""
    gap = np.abs(a - b)
    return np.minimum(a, b) - np.maximum(k - gap, 0.0) ** 2 / (4.0 * k)


def barrier_candidate(spec: GridSpec, q: float) -> GridFunction:
    """Phi_q on the extended box; exterior 0."""
    radius = spec.node_radius()
    support = support_radius(spec.dim)
    cap = CAP_RADIUS ** (-q)
    # one grid step of slope, but never wider than a quarter of the cap so the
    # blend stays inside r < CAP_RADIUS * (4/3)^(1/q)
    blend = min(q * CAP_RADIUS ** (-q - 1.0) * spec.h, BLEND_CAP_FRACTION * cap)

    safe = np.where(radius > 0, radius, 1.0)
    # the centre node takes the cap value itself
    power = np.where(radius > 0, safe ** (-q), np.inf)
    capped = smooth_min(cap, power, blend)
    values = np.where(radius < support, np.maximum(capped - support ** (-q), 0.0), 0.0)
    return GridFunction(spec, values, 0.0)


@dataclass(frozen=True, eq=False)
class BarrierCertificate:
    phi: GridFunction
    psi: GridFunction
    c_phi: float
    min_slack: float
    support_ok: bool
    exponent: float
    scale: float
    pucci: NodeField = field(repr=False)
    slack_by_exponent: Dict[float, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.min_slack >= -SLACK_TOL and self.c_phi > 0.0 and self.support_ok


def _certify(spec: GridSpec, p: EllipticityParams, w: KernelWeights, q: float) -> BarrierCertificate:
    raw = barrier_candidate(spec, q)
    nodes = spec.box_nodes()
    m_minus = eval_pucci(raw, w, p, MINUS, nodes)
    radius = np.linalg.norm(nodes * spec.h, axis=1)
    in_unit_ball = radius < 1.0

    deficit = -m_minus.values[in_unit_ball]
    scale = max(1.0, float(deficit.max(initial=0.0)))
    phi = raw * (1.0 / scale)
    m_scaled = m_minus.values / scale

    psi_nodes = np.where(in_unit_ball, np.clip(-m_scaled, 0.0, 1.0), 0.0)
    psi = NodeField(spec, nodes, psi_nodes).to_grid_function()
    slack = float(np.min(m_scaled + psi_nodes))

    in_floor_cube = np.abs(nodes * spec.h).max(axis=1) <= FLOOR_HALF_SIDE
    c_phi = float(phi.values_at(nodes[in_floor_cube]).min())

    outside = spec.node_radius() >= support_radius(spec.dim)
    support_ok = bool(np.all(phi.values[outside] == 0.0)) and phi.exterior == 0.0

    return BarrierCertificate(
        phi=phi,
        psi=psi,
        c_phi=c_phi,
        min_slack=slack,
        support_ok=support_ok,
        exponent=q,
        scale=scale,
        pucci=NodeField(spec, nodes, m_scaled),
    )


def barrier_construct(
    spec: GridSpec,
    p: EllipticityParams,
    w: Optional[KernelWeights] = None,
    exponents: Sequence[float] = DEFAULT_EXPONENTS,
) -> BarrierCertificate:
    """
    Sweep q in ascending order and return the first passing certificate.

    Raises:
        PreconditionError: If the box does not contain B_{8 sqrt(dim)}.
        BarrierError: If no exponent passes; carries the best slack per q.
    """
    support = support_radius(spec.dim)
    if spec.half_width < support:
        raise PreconditionError(
            f"box half_width {spec.half_width} must contain B_{support:.4g}"
        )
    w = build_weights(spec, p.sigma) if w is None else w
    if w.spec != spec or w.sigma != p.sigma:
        raise PreconditionError("weights do not match the grid and sigma of the barrier")

    slack_by_exponent: Dict[float, float] = {}
    for q in sorted(exponents):
        certificate = _certify(spec, p, w, q)
        slack_by_exponent[q] = certificate.min_slack
        logger.debug(
            f"Barrier q={q:g}: slack {certificate.min_slack:.3e}, C_phi {certificate.c_phi:.3e}"
        )
        if certificate.passed:
            logger.info(f"Barrier certified with q={q:g}, C_phi={certificate.c_phi:.4e}")
            return replace(certificate, slack_by_exponent=dict(slack_by_exponent))

    logger.error(f"No barrier exponent certified: {slack_by_exponent}")
    raise BarrierError(slack_by_exponent)
