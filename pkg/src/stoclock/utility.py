"""Utility random fields with conjugacy and elasticity diagnostics.

A utility field ``U(t, x)`` is, for each time ``t``, a strictly concave,
strictly increasing, continuously differentiable function of wealth
``x > 0`` whose marginal utility blows up at 0 and vanishes at infinity.
The built-in families are the discounted HARA fields

    U(t, x) = exp(-beta t) * (x^gamma - 1) / gamma      (power, gamma < 1, gamma != 0)
    U(t, x) = exp(-beta t) * log(x)                     (log)

together with their inverse marginals and convex conjugates in closed
form.  Arbitrary fields enter through :class:`CustomField`, a callback
record that must pass the same validation suite.

The conjugate pair satisfies pointwise

    U(t, I(t, y)) = V(t, y) + y * I(t, y),

where ``I`` inverts the marginal ``U_x(t, I(t, y)) = y`` and
``V(t, y) = sup_x [U(t, x) - x y]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "UtilityField",
    "CustomField",
    "log_field",
    "power_field",
    "u_eval",
    "u_prime",
    "inverse_marginal",
    "conjugate",
    "elasticity_profile",
    "ElasticityReport",
    "validate_field",
]


@dataclass(frozen=True)
class UtilityField:
    """A HARA utility random field, deterministic in time.

    ``family`` is ``"log"`` or ``"power"``; ``gamma`` applies to the power
    family only (``gamma < 1``, ``gamma != 0``); ``beta >= 0`` is the
    impatience rate.  ``envelope`` optionally stores a pair of decreasing
    functions bounding the marginal utility, and ``bounds`` a pair of
    constants bounding ``U(t, 1)``; they are carried as metadata, nothing
    constructs them.
    """

    family: str
    gamma: float = 0.0
    beta: float = 0.0
    envelope: Optional[tuple] = None
    bounds: Optional[tuple] = None

    def __post_init__(self) -> None:
        if self.family not in ("log", "power"):
            raise ValueError(f"unknown utility family {self.family!r}")
        if self.family == "power" and not (self.gamma < 1.0 and self.gamma != 0.0):
            raise ValueError(f"power family needs gamma < 1, gamma != 0, got {self.gamma}")
        if self.beta < 0.0:
            raise ValueError(f"impatience rate must be >= 0, got {self.beta}")


def log_field(beta: float = 0.0) -> UtilityField:
    return UtilityField(family="log", beta=beta)


def power_field(gamma: float, beta: float = 0.0) -> UtilityField:
    return UtilityField(family="power", gamma=gamma, beta=beta)


@dataclass(frozen=True)
class CustomField:
    """User-supplied utility field as a record of callbacks.

    Each callback takes ``(t, value)``; ``inverse_marginal`` and
    ``conjugate`` may be omitted, in which case they are obtained
    numerically from ``u`` and ``u_prime`` (bisection on the marginal,
    then the conjugacy identity).  Run :func:`validate_field` before
    trusting a custom field in a solver.
    """

    u: Callable[[float, float], float]
    u_prime: Callable[[float, float], float]
    inverse_marginal: Optional[Callable[[float, float], float]] = None
    conjugate: Optional[Callable[[float, float], float]] = None


Field = object  # UtilityField | CustomField; kept loose for callers


def _discount(field: UtilityField, t: float) -> float:
    return math.exp(-field.beta * t)


def u_eval(field, t: float, x: float) -> float:
    """Utility value ``U(t, x)``; wealth must be strictly positive."""
    if x <= 0.0:
        raise ValueError(f"wealth must be positive, got x={x}")
    if isinstance(field, CustomField):
        return float(field.u(t, x))
    d = _discount(field, t)
    if field.family == "log":
        return d * math.log(x)
    return d * (x**field.gamma - 1.0) / field.gamma


def u_prime(field, t: float, x: float) -> float:
    """Marginal utility ``U_x(t, x)``."""
    if x <= 0.0:
        raise ValueError(f"wealth must be positive, got x={x}")
    if isinstance(field, CustomField):
        return float(field.u_prime(t, x))
    d = _discount(field, t)
    if field.family == "log":
        return d / x
    return d * x ** (field.gamma - 1.0)


def inverse_marginal(field, t: float, y: float) -> float:
    """Solve ``U_x(t, I) = y`` for ``I > 0``.

    Closed form for the built-in families:
    ``exp(-beta t)/y`` (log) and ``(y exp(beta t))^(1/(gamma-1))`` (power).
    """
    if y <= 0.0:
        raise ValueError(f"marginal level must be positive, got y={y}")
    if isinstance(field, CustomField):
        if field.inverse_marginal is not None:
            return float(field.inverse_marginal(t, y))
        return _invert_marginal_numerically(field, t, y)
    if field.family == "log":
        return _discount(field, t) / y
    return (y * math.exp(field.beta * t)) ** (1.0 / (field.gamma - 1.0))


def conjugate(field, t: float, y: float) -> float:
    """Convex conjugate ``V(t, y) = sup_x [U(t, x) - x y]``."""
    if y <= 0.0:
        raise ValueError(f"dual level must be positive, got y={y}")
    if isinstance(field, CustomField):
        if field.conjugate is not None:
            return float(field.conjugate(t, y))
        i = inverse_marginal(field, t, y)
        return u_eval(field, t, i) - y * i
    d = _discount(field, t)
    if field.family == "log":
        return d * (-field.beta * t - math.log(y) - 1.0)
    i = inverse_marginal(field, t, y)
    return d * (i**field.gamma - 1.0) / field.gamma - y * i


def _invert_marginal_numerically(field: CustomField, t: float, y: float) -> float:
    lo, hi = 1e-12, 1e12
    # u_prime is decreasing; expand the bracket if needed.
    for _ in range(200):
        if field.u_prime(t, lo) > y:
            break
        lo /= 2.0
    for _ in range(200):
        if field.u_prime(t, hi) < y:
            break
        hi *= 2.0
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if field.u_prime(t, mid) > y:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-14:
            break
    return math.sqrt(lo * hi)


@dataclass
class ElasticityReport:
    """Samples of the relative risk appetite ``x U_x / U`` on a wealth grid."""

    x_grid: np.ndarray
    samples: np.ndarray
    tail_sup: float
    flagged: bool
    analytic_limit: Optional[float] = None


def elasticity_profile(field, x_grid: Sequence[float], t: float = 0.0) -> ElasticityReport:
    """Empirical elasticity ``x U_x(t, x) / U(t, x)`` over an increasing grid.

    Only grid points with ``U(t, x) > 0`` enter the profile (the ratio is
    meaningless below the zero of utility).  The report is flagged if the
    tail supremum reaches 1, the threshold separating fields whose
    conjugate behaves and fields for which the dual method degenerates.
    """
    xs = np.asarray(list(x_grid), dtype=float)
    if xs.ndim != 1 or len(xs) < 2 or np.any(np.diff(xs) <= 0.0):
        raise ValueError("x_grid must be strictly increasing with at least 2 points")
    vals = np.array([u_eval(field, t, float(x)) for x in xs])
    marg = np.array([u_prime(field, t, float(x)) for x in xs])
    mask = vals > 0.0
    if not np.any(mask):
        raise ValueError("utility is nonpositive on the whole grid; extend it upward")
    samples = xs[mask] * marg[mask] / vals[mask]
    tail = samples[-max(1, len(samples) // 3):]
    tail_sup = float(np.max(tail))
    analytic = None
    if isinstance(field, UtilityField):
        analytic = 0.0 if field.family == "log" else field.gamma
    return ElasticityReport(
        x_grid=xs[mask],
        samples=samples,
        tail_sup=tail_sup,
        flagged=tail_sup >= 1.0 - 1e-9,
        analytic_limit=analytic,
    )


def validate_field(field, t_grid: Sequence[float] = (0.0, 0.5, 1.0),
                   x_lo: float = 1e-6, x_hi: float = 1e6) -> None:
    """Assert the structural contract of a utility field on a grid.

    Checks, for each ``t``: strict increase and strict concavity of
    ``U(t, .)``, consistency of ``u_prime`` with a finite difference,
    the marginal round-trip ``U_x(t, I(t, y)) = y``, the conjugacy identity
    ``U(I) = V + y I``, and the endpoint behaviour of the marginal at the
    grid edges.  Raises ``AssertionError`` on the first violation.
    """
    ys = np.geomspace(1e-4, 1e4, 17)
    xs = np.geomspace(x_lo, x_hi, 25)
    for t in t_grid:
        vals = [u_eval(field, t, float(x)) for x in xs]
        margs = [u_prime(field, t, float(x)) for x in xs]
        assert all(b > a for a, b in zip(vals, vals[1:])), "utility not increasing"
        assert all(b < a for a, b in zip(margs, margs[1:])), "marginal not decreasing"
        assert margs[0] > 1e2 and margs[-1] < 1e-2, "endpoint marginal behaviour violated"
        for a, b in zip(xs[:-1:3], xs[1::3]):
            mid = 0.5 * (a + b)
            assert u_eval(field, t, mid) >= 0.5 * (
                u_eval(field, t, float(a)) + u_eval(field, t, float(b))
            ) - 1e-12, "midpoint concavity violated"
        for y in ys:
            i = inverse_marginal(field, t, float(y))
            assert abs(u_prime(field, t, i) - y) <= 1e-10 * y, "marginal round-trip failed"
            gap = u_eval(field, t, i) - conjugate(field, t, float(y)) - y * i
            assert abs(gap) <= 1e-10 * max(1.0, abs(u_eval(field, t, i))), (
                "conjugacy identity violated"
            )
