"""Closed-form reference objects and constant calculators.

Three exact solutions/bounds anchor the verification suite:

* the ZKB self-similar solution of the pure porous-medium equation
  d_t u = Lap(u^2), used as a convergence oracle,
* the supersolution U_{a,b}(t,x) = a (b^2 e^{8at} - |x|^2)_+, an exact
  solution of d_t U = Lap(U^2) + 4(d+2) a U whose support ball of radius
  b e^{4at} dominates solution supports over a computable horizon,
* the sup-norm envelope D1 = |u0|_inf exp(T sup|chi| |div V|_inf).

support_constants assembles the explicit parameter choices (delta = 1/4,
b = rho/2, the two-branch growth rate a) and the horizon t_support during
which the supersolution's support stays inside the ball of radius rho.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AdmissibilityError

SUPPORT_THRESHOLD = 1e-12


class ChiBounds(NamedTuple):
    sup: float       # sup |chi| over the achievable density range
    dsup: float      # sup |chi'|


class VelocityBounds(NamedTuple):
    sup: float           # sup |V|; the a-priori choice is f_max * mass
    div_neg_sup: float   # sup of the negative part of div V


class FieldStats(NamedTuple):
    sup: float
    mass: float
    support_radius: float
    d: int


@dataclass(frozen=True)
class SupersolutionParams:
    a: float
    b: float
    delta: float
    rho: float
    t_max: float

    def __post_init__(self):
        if not (0 < self.delta < 1):
            raise AdmissibilityError("delta must lie in (0, 1)")
        if not (self.delta * self.rho < self.b < self.rho):
            raise AdmissibilityError(
                f"b={self.b} must lie in (delta*rho, rho) = "
                f"({self.delta * self.rho}, {self.rho})")
        if self.a <= 0:
            raise AdmissibilityError("growth rate a must be positive")

    def support_radius(self, t):
        return self.b * math.exp(4.0 * self.a * t)


def supersolution_value(params, t, x):
    """U_{a,b}(t, x) = a (b^2 e^{8at} - |x|^2)_+, vectorized over x."""
    x = np.asarray(x, dtype=float)
    r2 = x**2 if x.ndim == 0 else (np.atleast_2d(x) ** 2).sum(axis=-1)
    val = params.a * (params.b**2 * np.exp(8.0 * params.a * t) - r2)
    out = np.maximum(val, 0.0)
    if np.ndim(x) <= 1 and np.size(out) == 1:
        return float(out.reshape(-1)[0])
    return out


def support_constants(chi_bounds, V_bounds, u0_stats, rho):
    """Explicit supersolution parameters (delta = 1/4, b = rho/2) and the
    horizon t_support = (1/8a) log(min(rho, rho4)/b) during which the
    comparison argument confines the support inside B_rho.

    rho_hat = (d+2)/(sup|V| sup|chi'|) is the admissibility scale; the
    preconditions are supp(u0) inside B_{rho/4} and rho <= rho_hat.
    """
    chi_bounds = ChiBounds(*chi_bounds)
    V_bounds = VelocityBounds(*V_bounds)
    u0_stats = FieldStats(*u0_stats)
    if rho <= 0:
        raise AdmissibilityError("rho must be positive")
    if u0_stats.support_radius > 0.25 * rho * (1 + 1e-9):
        raise AdmissibilityError(
            f"u0 support radius {u0_stats.support_radius} exceeds rho/4 = {rho / 4}")
    d = u0_stats.d
    drift_scale = V_bounds.sup * chi_bounds.dsup
    rho_hat = math.inf if drift_scale == 0 else (d + 2) / drift_scale
    if rho > rho_hat * (1 + 1e-12):
        raise AdmissibilityError(
            f"rho={rho} exceeds the admissible scale (d+2)/(sup|V| sup|chi'|)"
            f" = {rho_hat}")

    delta = 0.25
    b = 0.5 * rho
    c_drift = V_bounds.div_neg_sup * chi_bounds.sup / (4.0 * (d + 2))
    mass_branch = u0_stats.sup / (b**2 - (delta * rho) ** 2)  # = m_inf/((3/16) rho^2)
    if math.isinf(rho_hat):
        drift_branch = 1.0
    else:
        drift_branch = 1.0 + c_drift / (1.0 - b / rho_hat)
    a = max(mass_branch, drift_branch)
    rho4 = rho_hat if math.isinf(rho_hat) else (1.0 - c_drift / a) * rho_hat
    t_support = math.log(min(rho, rho4) / b) / (8.0 * a)
    if t_support <= 0:
        raise AdmissibilityError(
            "support horizon is not positive; the drift overwhelms the ball")
    params = SupersolutionParams(a=a, b=b, delta=delta, rho=rho, t_max=t_support)
    return params, t_support


def zkb_alpha_beta_k(d):
    alpha = d / (d + 2.0)
    beta = 1.0 / (d + 2.0)
    k = alpha / (4.0 * d)
    return alpha, beta, k


def zkb_solution(t, x, C_mass, d):
    """Self-similar source solution of d_t u = Lap(u^2):
    u(t,x) = t^{-alpha} (C - k |x|^2 t^{-2 beta})_+."""
    if t <= 0:
        raise ValueError("the self-similar profile needs t > 0")
    alpha, beta, k = zkb_alpha_beta_k(d)
    x = np.asarray(x, dtype=float)
    r2 = x**2 if x.ndim == 0 else (np.atleast_2d(x) ** 2).sum(axis=-1)
    val = t ** (-alpha) * (C_mass - k * r2 * t ** (-2 * beta))
    out = np.maximum(val, 0.0)
    if np.ndim(x) <= 1 and np.size(out) == 1:
        return float(out.reshape(-1)[0])
    return out


def _sphere_surface(d):
    # |S^{d-1}|; the two-point "sphere" measure in d=1
    if d == 1:
        return 2.0
    if d == 2:
        return 2.0 * math.pi
    if d == 3:
        return 4.0 * math.pi
    raise ValueError("dimension must be 1, 2, or 3")


def zkb_mass(C_mass, d):
    """Total mass of the profile (independent of t)."""
    _, _, k = zkb_alpha_beta_k(d)
    R = math.sqrt(C_mass / k)
    return _sphere_surface(d) * R**d * C_mass * 2.0 / (d * (d + 2.0))


def zkb_constant_for_mass(mass, d):
    """Invert zkb_mass: the C giving the requested total mass."""
    _, _, k = zkb_alpha_beta_k(d)
    sigma = _sphere_surface(d)
    return (mass * d * (d + 2.0) * k ** (d / 2.0) / (2.0 * sigma)) ** (2.0 / (d + 2.0))


def zkb_support_radius(t, C_mass, d):
    _, beta, k = zkb_alpha_beta_k(d)
    return math.sqrt(C_mass / k) * t**beta


def support_radius(u, threshold=SUPPORT_THRESHOLD):
    """Largest |cell center| whose density exceeds threshold; 0 if none."""
    mask = u.values > threshold
    if not mask.any():
        return 0.0
    centers = u.grid.cell_centers().reshape(-1, u.grid.d)
    r2 = (centers[mask.reshape(-1)] ** 2).sum(axis=1)
    return float(np.sqrt(r2.max()))


def max_bound_D1(T, chi_sup, divV_sup, u0_max):
    """Sup-norm envelope |u0|_inf e^{T sup|chi| |div V|_inf}."""
    if min(T, chi_sup, divV_sup, u0_max) < 0:
        raise ValueError("all D1 inputs must be nonnegative")
    return u0_max * math.exp(T * chi_sup * divV_sup)
