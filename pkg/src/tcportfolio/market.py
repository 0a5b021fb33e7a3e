"""Market constants and the coefficient functions of the fraction-space HJB.

All coefficient functions accept a single point of shape ``(N,)`` or a batch
of points of shape ``(..., N)`` and broadcast over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray


@dataclass(frozen=True)
class MarketParams:
    rate: float
    drift: NDArray[np.float64]
    cov: NDArray[np.float64]
    buy_cost: NDArray[np.float64]
    sell_cost: NDArray[np.float64]
    discount: float
    risk_aversion: float
    horizon: float
    n_assets: int = field(init=False)

    def __post_init__(self):
        drift = np.atleast_1d(np.asarray(self.drift, dtype=float))
        n = drift.shape[0]
        cov = np.asarray(self.cov, dtype=float).reshape(n, n)
        lam = np.broadcast_to(np.asarray(self.buy_cost, dtype=float), (n,)).copy()
        mu = np.broadcast_to(np.asarray(self.sell_cost, dtype=float), (n,)).copy()
        for name, arr in (("drift", drift), ("cov", cov), ("buy_cost", lam), ("sell_cost", mu)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n_assets", n)

        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("cov must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("cov must be positive definite") from None
        if np.any(lam < 0) or np.any(mu < 0):
            raise ValueError("transaction costs must be non-negative")
        if np.any(lam + mu <= 0):
            raise ValueError("buy_cost + sell_cost must be positive for every asset")
        if np.any(mu >= 1):
            raise ValueError("sell_cost must be below 1")
        if self.risk_aversion == 0 or self.risk_aversion >= 1:
            raise ValueError("risk_aversion must satisfy gamma < 1, gamma != 0")
        if self.discount <= 0:
            raise ValueError("discount must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @classmethod
    def from_sigma(cls, sigma: ArrayLike, **kwargs) -> "MarketParams":
        """Build from a volatility matrix, forming ``cov = sigma @ sigma.T``."""
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        return cls(cov=sigma @ sigma.T, **kwargs)

    @property
    def gamma(self) -> float:
        return self.risk_aversion

    @property
    def excess(self) -> NDArray[np.float64]:
        return self.drift - self.rate


@dataclass(frozen=True)
class ReducedCoefficients:
    eta: NDArray[np.float64]
    b: NDArray[np.float64]
    vartheta: NDArray[np.float64] | float


@dataclass(frozen=True)
class DaiYiBounds:
    tau: float
    y_tilde: float
    sell_lower: float
    buy_upper: float
    # sign of alpha - r - (1 - gamma) a_11, decides S_t vs 1
    leverage_sign: float


def _points(y: ArrayLike, p: MarketParams) -> NDArray[np.float64]:
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape[-1] != p.n_assets:
        raise ValueError(f"expected points with last axis {p.n_assets}, got shape {y.shape}")
    return y


def coeff_eta(y: ArrayLike, p: MarketParams) -> NDArray[np.float64]:
    y = _points(y, p)
    a = p.cov
    ay = y @ a  # a symmetric
    yay = np.sum(ay * y, axis=-1)
    # (e_i - y)' a (e_j - y) = a_ij - (ay)_i - (ay)_j + y'ay
    inner = a - ay[..., :, None] - ay[..., None, :] + yay[..., None, None]
    return y[..., :, None] * y[..., None, :] * inner


def coeff_b(y: ArrayLike, p: MarketParams) -> NDArray[np.float64]:
    y = _points(y, p)
    g = p.gamma
    ay = y @ p.cov
    yay = np.sum(ay * y, axis=-1, keepdims=True)
    ex = p.excess
    return (g - 1.0) * (y * ay - y * yay) + y * ex - y * np.sum(y * ex, axis=-1, keepdims=True)


def coeff_vartheta(y: ArrayLike, p: MarketParams) -> NDArray[np.float64] | float:
    y = _points(y, p)
    g = p.gamma
    yay = np.sum((y @ p.cov) * y, axis=-1)
    out = p.discount - g * (p.rate + 0.5 * yay * (g - 1.0) + y @ p.excess)
    return float(out) if out.ndim == 0 else out


def reduced_coefficients(y: ArrayLike, p: MarketParams) -> ReducedCoefficients:
    return ReducedCoefficients(coeff_eta(y, p), coeff_b(y, p), coeff_vartheta(y, p))


def liquidation_wealth(y: ArrayLike, p: MarketParams) -> NDArray[np.float64] | float:
    """Net wealth left after liquidating a unit-wealth position ``y``."""
    y = _points(y, p)
    out = 1.0 + np.sum(np.minimum(-p.sell_cost * y, p.buy_cost * y), axis=-1)
    return float(out) if out.ndim == 0 else out


def in_domain(y: ArrayLike, p: MarketParams):
    w = liquidation_wealth(y, p)
    return bool(w >= 0) if np.ndim(w) == 0 else w >= 0


def utility(c: ArrayLike, p: MarketParams):
    g = p.gamma
    return np.asarray(c, dtype=float) ** g / g


def terminal_value(y: ArrayLike, p: MarketParams):
    w = liquidation_wealth(y, p)
    if np.any(np.asarray(w) < 0):
        raise ValueError("terminal_value called outside the solvency region")
    out = w ** p.gamma / p.gamma
    return float(out) if np.ndim(out) == 0 else out


def dual_utility(nu: ArrayLike, p: MarketParams):
    """sup over c >= 0 of U(c) - c * nu."""
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0):
        raise ValueError("dual_utility requires nu > 0")
    g = p.gamma
    out = (1.0 - g) / g * nu ** (g / (g - 1.0))
    return float(out) if out.ndim == 0 else out


def merton_proportion(p: MarketParams) -> NDArray[np.float64]:
    try:
        sol = np.linalg.solve(p.cov, p.excess)
    except np.linalg.LinAlgError:
        raise ValueError("covariance matrix is singular") from None
    return sol / (1.0 - p.gamma)


def dai_yi_bounds(p: MarketParams) -> DaiYiBounds:
    if p.n_assets != 1:
        raise ValueError("dai_yi_bounds is defined for a single risky asset only")
    ex = float(p.excess[0])
    if ex == 0:
        raise ValueError("dai_yi_bounds undefined when drift equals the interest rate")
    lam, mu = float(p.buy_cost[0]), float(p.sell_cost[0])
    lev = ex - (1.0 - p.gamma) * float(p.cov[0, 0])
    # the boundary case is an exact identity; absorb decimal-input rounding
    if abs(lev) <= 1e-12:
        lev = 0.0
    tau = np.log((1.0 + lam) / (1.0 - mu)) / ex
    y_tilde = -lev / ex
    return DaiYiBounds(
        tau=float(tau),
        y_tilde=float(y_tilde),
        sell_lower=1.0 / (1.0 + (1.0 - mu) * y_tilde),
        buy_upper=1.0 / (1.0 + (1.0 + lam) * y_tilde),
        leverage_sign=float(np.sign(lev)),
    )


def reconstruct_full_value(x: float, y: ArrayLike, phi_val: float, p: MarketParams) -> float:
    """Value of the cash/stock position ``(x, y)`` given phi at ``y / wealth``."""
    wealth = x + float(np.sum(y))
    if wealth <= 0:
        raise ValueError("total wealth must be positive")
    return phi_val * wealth ** p.gamma
