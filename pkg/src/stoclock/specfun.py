"""Closed-form machinery for the Ornstein-Uhlenbeck local-time clock.

Everything here is a deterministic function of real arguments:

* ``hermite_h`` -- the Hermite function ``H_xi(x)`` of negative order,
  evaluated through its integral representation

      H_xi(x) = (1 / (2 Gamma(-xi))) * int_0^inf exp(-s - 2 x sqrt(s)) s^(-xi/2 - 1) ds

  after the substitution ``u = sqrt(s)``, which removes the endpoint
  singularity and leaves a smooth integrand.
* ``laplace_exponent`` -- the Laplace exponent ``psi`` of the inverse
  local time at 0 of an OU process ``dR = -alpha R dt + dW``:
  ``E[exp(-lam * tau_s)] = exp(-s * psi(lam))`` for ``lam > -alpha``.
* ``hitting_transform`` -- ``j(lam, r) = E[exp(-lam * T_0) | R_0 = r]``,
  the transform of the first hitting time of 0.
* ``beta_potential`` -- the forward-looking part of the conditional
  discounted clock mass ``E[int_t^{tau_1} exp(-beta u) d kappa_u | F_t]``.
* ``nu_feedback`` -- the feedback drift loading of the optimal dual
  density in the log-utility consumption problem.  Two variants are
  shipped because the published closed form disagrees, in sign and in a
  factor (2 versus sqrt(2)), with the expression obtained by
  differentiating ``j`` in its spatial argument; the strategy simulator
  discriminates between them empirically.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

__all__ = [
    "OUParams",
    "SpecEvalConfig",
    "QuadratureError",
    "gamma_fn",
    "hermite_h",
    "hermite_h_dx",
    "laplace_exponent",
    "hitting_transform",
    "beta_potential",
    "nu_feedback",
    "nu_bound",
]

SQRT2 = math.sqrt(2.0)
SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class OUParams:
    """Parameters of the index process ``dR = -alpha R dt + dW``."""

    alpha: float

    def __post_init__(self) -> None:
        if not (self.alpha > 0.0) or not math.isfinite(self.alpha):
            raise ValueError(f"mean-reversion rate must be positive, got {self.alpha}")


@dataclass(frozen=True)
class SpecEvalConfig:
    """Quadrature controls for the integral representation of ``H_xi``."""

    quad_rel_tol: float = 1e-10
    quad_max_subdiv: int = 2048

    def __post_init__(self) -> None:
        if not (0.0 < self.quad_rel_tol < 1e-4):
            raise ValueError(f"quad_rel_tol must lie in (0, 1e-4), got {self.quad_rel_tol}")
        if self.quad_max_subdiv < 16:
            raise ValueError(f"quad_max_subdiv must be >= 16, got {self.quad_max_subdiv}")


DEFAULT_CONFIG = SpecEvalConfig()


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested relative tolerance."""

    def __init__(self, message: str, achieved_rel_err: float):
        super().__init__(message)
        self.achieved_rel_err = achieved_rel_err


def gamma_fn(x: float) -> float:
    """Gamma function on the reals, rejecting the poles at 0, -1, -2, ...

    Relative accuracy is that of the underlying library implementation
    (well below 1e-12 away from the poles).
    """
    if x <= 0.0 and x == math.floor(x):
        raise ValueError(f"gamma_fn is undefined at the pole x={x}")
    return float(special.gamma(x))


def hermite_h(xi: float, x: float, cfg: SpecEvalConfig = DEFAULT_CONFIG) -> float:
    """Hermite function ``H_xi(x)`` for order ``xi < 0`` and ``x >= 0``.

    Computed by adaptive quadrature of

        H_xi(x) = (1 / Gamma(-xi)) * int_0^inf exp(-u^2 - 2 x u) u^(-xi - 1) du,

    which is the defining integral after ``u = sqrt(s)``.  The result is
    strictly positive on the admissible domain.

    Raises
    ------
    ValueError
        If ``xi >= 0`` or ``x < 0``.
    QuadratureError
        If the integrator cannot certify ``cfg.quad_rel_tol``; the achieved
        relative error is attached to the exception.
    """
    if not (xi < 0.0):
        raise ValueError(f"order must be negative, got xi={xi}")
    if x < 0.0:
        raise ValueError(f"argument must be non-negative, got x={x}")
    power = -xi - 1.0

    def integrand(u: float) -> float:
        return math.exp(-u * u - 2.0 * x * u) * u**power

    value, abserr = integrate.quad(
        integrand, 0.0, np.inf, epsrel=cfg.quad_rel_tol, epsabs=0.0, limit=cfg.quad_max_subdiv
    )
    if value <= 0.0 or abserr > 10.0 * cfg.quad_rel_tol * abs(value):
        raise QuadratureError(
            f"quadrature for H_{xi}({x}) achieved relative error "
            f"{abserr / max(abs(value), 1e-300):.3e}, requested {cfg.quad_rel_tol:.3e}",
            achieved_rel_err=abserr / max(abs(value), 1e-300),
        )
    return value / gamma_fn(-xi)


def hermite_h_dx(xi: float, x: float, cfg: SpecEvalConfig = DEFAULT_CONFIG) -> float:
    """Spatial derivative of the Hermite function: ``d/dx H_xi(x) = 2 xi H_{xi-1}(x)``."""
    if not (xi < 0.0):
        raise ValueError(f"order must be negative, got xi={xi}")
    return 2.0 * xi * hermite_h(xi - 1.0, x, cfg)


def laplace_exponent(lam: float, params: OUParams) -> float:
    """Laplace exponent ``psi(lam)`` of the inverse local time at 0.

    ``psi(lam) = alpha * 2^(1 + lam/alpha) * Gamma(1/2 + lam/(2 alpha))^2
                 / (sqrt(2 pi) * Gamma(lam/alpha))``

    for ``lam > -alpha``.  The transform of ``tau_s`` is infinite at or
    below ``-alpha``, so such inputs are rejected.  ``psi(0) = 0`` by
    continuity (the printed quotient is indeterminate there), and
    ``psi < 0`` on ``(-alpha, 0)`` through the sign of ``Gamma`` at
    negative arguments.
    """
    a = params.alpha
    if not (lam > -a):
        raise ValueError(
            f"laplace exponent is infinite for lam <= -alpha (lam={lam}, alpha={a})"
        )
    if lam == 0.0:
        return 0.0
    z = lam / a
    return a * 2.0 ** (1.0 + z) * gamma_fn(0.5 + 0.5 * z) ** 2 / (SQRT_2PI * gamma_fn(z))


def hitting_transform(
    lam: float, r: float, params: OUParams, cfg: SpecEvalConfig = DEFAULT_CONFIG
) -> float:
    """Transform ``j(lam, |r|) = E[exp(-lam T_0) | R_0 = r]`` of the hitting time of 0.

    ``j(lam, r) = 2^(lam/alpha) * Gamma((1 + lam/alpha)/2) / Gamma(1/2)
                  * H_{-lam/alpha}(r / sqrt(2))``.

    Values lie in (0, 1], are nonincreasing in ``|r|``, and equal 1 at
    ``r = 0`` (the Legendre duplication identity collapses the prefactors).
    """
    if not (lam > 0.0):
        raise ValueError(f"transform parameter must be positive, got lam={lam}")
    z = lam / params.alpha
    prefactor = 2.0**z * gamma_fn(0.5 * (1.0 + z)) / gamma_fn(0.5)
    return prefactor * hermite_h(-z, abs(r) / SQRT2, cfg)


def beta_potential(
    t: float,
    r: float,
    k: float,
    beta: float,
    params: OUParams,
    cfg: SpecEvalConfig = DEFAULT_CONFIG,
) -> float:
    """Forward part of the discounted clock potential.

    ``g(t, r, k) = exp(-beta t) * j(beta, |r|) * (1 - exp(-(1 - k) psi(beta))) / psi(beta)``

    equals the conditional expectation of the discounted clock mass still
    to accrue before the clock reaches 1, given elapsed time ``t``, index
    position ``r`` and clock value ``k``.  Identically zero at ``k = 1``.
    """
    if not (beta > 0.0):
        raise ValueError(f"discount rate must be positive, got beta={beta}")
    if not (0.0 <= k <= 1.0):
        raise ValueError(f"clock value must lie in [0, 1], got k={k}")
    psi = laplace_exponent(beta, params)
    # -expm1 keeps the k = 1 endpoint exactly zero.
    window = -math.expm1(-(1.0 - k) * psi) / psi
    return math.exp(-beta * t) * hitting_transform(beta, r, params, cfg) * window


def _hermite_ratio(z: float, order: float, cfg: SpecEvalConfig) -> float:
    """``H_{order-1}(z) / H_{order}(z)`` for ``order < 0``; positive and bounded."""
    return hermite_h(order - 1.0, z, cfg) / hermite_h(order, z, cfg)


def nu_feedback(
    r: float,
    beta: float,
    params: OUParams,
    variant: str = "derived",
    cfg: SpecEvalConfig = DEFAULT_CONFIG,
) -> float:
    """Feedback drift loading ``nu(r)`` of the optimal dual density.

    Both variants are odd in ``r``, vanish at ``r = 0`` and decay like
    ``1/|r|`` for large ``|r|``; they differ in overall sign and in a
    factor 2 versus sqrt(2):

    * ``"paper"``:   ``nu(r) = sgn(r) * (2 beta / alpha) * H_{-beta/alpha - 1} / H_{-beta/alpha}``
      evaluated at ``|r|/sqrt(2)`` -- the closed form as published.
    * ``"derived"``: ``nu(r) = sgn(r) * d/dr j(beta, |r|) / j(beta, |r|)
      = -sgn(r) * sqrt(2) (beta/alpha) * H_{-beta/alpha - 1} / H_{-beta/alpha}``,
      the form obtained by matching the diffusion loading of the wealth
      identity to the spatial derivative of the hitting transform.

    The Monte Carlo discrimination protocol in ``stoclock.strategy``
    adjudicates between them.
    """
    if not (beta > 0.0):
        raise ValueError(f"discount rate must be positive, got beta={beta}")
    if variant not in ("derived", "paper"):
        raise ValueError(f"unknown variant {variant!r}; expected 'derived' or 'paper'")
    if r == 0.0:
        return 0.0
    order = -beta / params.alpha
    ratio = _hermite_ratio(abs(r) / SQRT2, order, cfg)
    sign = math.copysign(1.0, r)
    if variant == "paper":
        return sign * (2.0 * beta / params.alpha) * ratio
    return -sign * SQRT2 * (beta / params.alpha) * ratio


def nu_bound(
    beta: float,
    params: OUParams,
    variant: str = "derived",
    r_max: float = 12.0,
    n: int = 481,
    cfg: SpecEvalConfig = DEFAULT_CONFIG,
) -> float:
    """Grid supremum of ``|nu_feedback|`` over ``[0, r_max]``.

    The decay ``|nu| ~ C/|r|`` makes the grid supremum a faithful bound
    once ``r_max`` covers several stationary standard deviations.
    """
    grid = np.linspace(0.0, r_max, n)
    return max(abs(nu_feedback(float(r), beta, params, variant, cfg)) for r in grid)
