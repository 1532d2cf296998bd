"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

``sigma`` is always the noise multiplier relative to the mechanism's
sensitivity; the privatize module's sensitivity factor never enters here.
Only integer orders are supported, where the subsampled bound is an exact
finite binomial sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from dpgcl.errors import CalibrationError, ParameterError

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65))
SIGMA_BRACKET = (0.3, 100.0)
SIGMA_PRECISION = 1e-3


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    q: float
    steps: int
    sigma: float | None = None
    orders: tuple[int, ...] = DEFAULT_ORDERS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.q <= 1:
            raise ParameterError(f"q must lie in (0, 1], got {self.q}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        orders = tuple(self.orders)
        if not orders or any(a <= 1 for a in orders) or list(orders) != sorted(orders):
            raise ParameterError("orders must be ascending and each > 1")
        object.__setattr__(self, "orders", orders)


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[int, ...]
    rdp: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.rdp):
            raise ParameterError("orders and rdp values differ in length")


def rdp_gaussian(sigma: float, alpha: float) -> float:
    """Order-``alpha`` Renyi divergence between N(0, sigma^2) and N(1, sigma^2)."""
    if not sigma > 0 or not alpha > 1:
        raise ParameterError(f"need sigma > 0 and alpha > 1, got sigma={sigma}, alpha={alpha}")
    return alpha / (2.0 * sigma ** 2)


def _log_binomial(n: int, k: np.ndarray) -> np.ndarray:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Integer-order RDP bound of the Poisson-subsampled Gaussian mechanism.

    ``log(sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2))) / (a-1)``,
    summed in log space.
    """
    if isinstance(alpha, float) and not alpha.is_integer():
        raise ParameterError(f"only integer orders are supported, got {alpha}")
    alpha = int(alpha)
    if alpha < 2:
        raise ParameterError(f"alpha must be an integer >= 2, got {alpha}")
    if not 0 <= q <= 1:
        raise ParameterError(f"q must lie in [0, 1], got {q}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if q == 0:
        return 0.0
    if q == 1:
        return rdp_gaussian(sigma, alpha)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        _log_binomial(alpha, k)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + k * (k - 1) / (2.0 * sigma ** 2)
    )
    return float(logsumexp(log_terms)) / (alpha - 1)


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    orders = tuple(int(a) for a in orders)
    return RdpCurve(orders, tuple(rdp_subsampled_gaussian(q, sigma, a) for a in orders))


def compose(curve: RdpCurve, T: int) -> RdpCurve:
    if T < 0:
        raise ParameterError(f"T must be >= 0, got {T}")
    return RdpCurve(curve.orders, tuple(T * r for r in curve.rdp))


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, int]:
    """``min_a rho(a) + log(1/delta)/(a-1)`` and the minimising order."""
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if not curve.orders:
        raise ParameterError("empty RDP curve")
    log_inv = math.log(1.0 / delta)
    best_eps, best_alpha = math.inf, curve.orders[0]
    for alpha, rho in zip(curve.orders, curve.rdp):
        eps = rho + log_inv / (alpha - 1)
        if eps < best_eps:
            best_eps, best_alpha = eps, alpha
    return best_eps, best_alpha


def certify(q: float, sigma: float, steps: int, delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> tuple[float, int]:
    """(epsilon, best order) after ``steps`` subsampled Gaussian steps."""
    return rdp_to_dp(compose(rdp_curve(q, sigma, orders), steps), delta)


def calibrate_sigma(spec: PrivacySpec) -> float:
    """Smallest sigma on the 1e-3 grid of [0.3, 100] certifying ``spec.epsilon``.

    Epsilon is nonincreasing in sigma, so a bisection over grid indices finds a
    sigma that certifies the target while ``sigma - 1e-3`` does not (unless
    the bracket's lower end already certifies it).
    """
    lo_sigma, hi_sigma = SIGMA_BRACKET
    lo = round(lo_sigma / SIGMA_PRECISION)
    hi = round(hi_sigma / SIGMA_PRECISION)

    def at(i: int) -> float:
        return round(i * SIGMA_PRECISION, 3)

    def ok(i: int) -> bool:
        eps, _ = certify(spec.q, at(i), spec.steps, spec.delta, spec.orders)
        return eps <= spec.epsilon

    if not ok(hi):
        raise CalibrationError(
            f"no sigma in [{lo_sigma}, {hi_sigma}] reaches epsilon={spec.epsilon} "
            f"(delta={spec.delta}, q={spec.q}, T={spec.steps})"
        )
    if ok(lo):
        return at(lo)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return at(hi)


def default_delta(N: int) -> float:
    """``1 / (N ln N)``."""
    if N < 3:
        raise ParameterError(f"default delta needs N >= 3, got {N}")
    return 1.0 / (N * math.log(N))
