"""
Closed-form references used by the experiments and the test suite.

With s = sigma/2, the fractional Laplacian (-Δ)^s carries the constant
C_{n,s} = 4^s Γ(n/2 + s) / (π^{n/2} |Γ(-s)|), and the trace of D^sigma is
-kappa (-Δ)^s with kappa = 2 (2 - sigma) / C_{n,s}.
"""

import numpy as np
from scipy import integrate, special

from src.operators.kernel_weights import validate_sigma


def fractional_laplacian_constant(dim: int, sigma: float) -> float:
    s = validate_sigma(sigma) / 2.0
    return float(4.0**s * special.gamma(dim / 2.0 + s) / (np.pi ** (dim / 2.0) * abs(special.gamma(-s))))


def trace_operator_factor(dim: int, sigma: float) -> float:
    """kappa with trace D^sigma u = -kappa (-Δ)^(sigma/2) u."""
    return 2.0 * (2.0 - sigma) / fractional_laplacian_constant(dim, sigma)


def ball_profile_constant(dim: int, sigma: float) -> float:
    """(-Δ)^s (1 - |x|^2)_+^s = this constant inside B_1."""
    s = sigma / 2.0
    return float(4.0**s * special.gamma(1.0 + s) * special.gamma(dim / 2.0 + s) / special.gamma(dim / 2.0))


def ball_solution(points: np.ndarray, dim: int, sigma: float, lam: float, rhs: float = 1.0) -> np.ndarray:
    """
    Solution of L_{lam I} u = -rhs in B_1 with u = 0 outside, at points (..., dim).
    """
    sigma = validate_sigma(sigma)
    radius2 = np.sum(np.asarray(points, dtype=float) ** 2, axis=-1)
    amplitude = rhs / (lam * trace_operator_factor(dim, sigma) * ball_profile_constant(dim, sigma))
    return amplitude * np.clip(1.0 - radius2, 0.0, None) ** (sigma / 2.0)


def gaussian_dsigma_closed_form(sigma: float) -> float:
    """1D D^sigma of exp(-x^2) at 0: -4 (2 - sigma) Γ(1 - sigma/2) / sigma."""
    sigma = validate_sigma(sigma)
    return float(-4.0 * (2.0 - sigma) * special.gamma(1.0 - sigma / 2.0) / sigma)


def gaussian_dsigma_at_origin(sigma: float) -> float:
    """
    1D D^sigma of exp(-x^2) at 0 by adaptive quadrature:
    -2 (2 - sigma) * 2 int_0^inf (1 - e^{-y^2}) y^{-1-sigma} dy.
    """
    sigma = validate_sigma(sigma)

    def integrand(y):
        return -np.expm1(-y * y) * y ** (-1.0 - sigma)

    near, _ = integrate.quad(integrand, 0.0, 1.0, limit=200)
    far, _ = integrate.quad(integrand, 1.0, np.inf, limit=200)
    return -4.0 * (2.0 - sigma) * (near + far)


def gaussian_trace_dsigma(points: np.ndarray, dim: int, sigma: float) -> np.ndarray:
    """
    trace D^sigma of exp(-|x|^2) at points (..., dim):
    -kappa 4^s Γ(n/2 + s) / Γ(n/2) 1F1(n/2 + s; n/2; -|x|^2).
    """
    sigma = validate_sigma(sigma)
    s = sigma / 2.0
    radius2 = np.sum(np.asarray(points, dtype=float) ** 2, axis=-1)
    amplitude = 4.0**s * special.gamma(dim / 2.0 + s) / special.gamma(dim / 2.0)
    return -trace_operator_factor(dim, sigma) * amplitude * special.hyp1f1(dim / 2.0 + s, dim / 2.0, -radius2)
