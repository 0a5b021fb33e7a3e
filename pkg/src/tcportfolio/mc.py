"""Monte Carlo half of the backward step.

The linear part of the generator (drift plus the diagonal of the diffusion)
is sampled with a one-step Euler scheme; the cross-diffusion, discounting and
consumption terms are evaluated from the sampled expectations of the value
and its finite-difference derivatives.
"""

from __future__ import annotations

import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import rng
from .grid import ValueField, interpolate, pair_list
from .market import MarketParams, coeff_b, coeff_eta, coeff_vartheta

# sample points per vectorised block
BLOCK_POINTS = 1 << 17


class NonFiniteValueError(RuntimeError):
    def __init__(self, time: float, point):
        self.time = time
        self.point = np.asarray(point)
        super().__init__(f"non-finite value at t={time:g}, y={self.point.tolist()}")


@dataclass(frozen=True)
class SchemeParams:
    h: float
    n_steps: int
    dy: tuple[float, ...]
    m_paths: int
    seed: int = 0
    clamp_eps: float = 1e-12
    # relative to |phi| at the node
    adjust_tol: float = 1e-6
    max_sweeps: int = 50
    workers: int = 1
    common_random_numbers: bool = False

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("time step h must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.m_paths < 1:
            raise ValueError("m_paths must be at least 1")
        if self.clamp_eps <= 0:
            raise ValueError("clamp_eps must be positive")
        if self.adjust_tol < 0:
            raise ValueError("adjust_tol must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        object.__setattr__(self, "dy", tuple(float(d) for d in np.atleast_1d(self.dy)))

    @classmethod
    def for_horizon(cls, horizon: float, h: float, **kwargs) -> "SchemeParams":
        n = int(round(horizon / h))
        if not np.isclose(n * h, horizon, rtol=0, atol=1e-9 * max(1.0, horizon)):
            raise ValueError(f"horizon {horizon} is not a multiple of h={h}")
        return cls(h=horizon / n if n else h, n_steps=n, **kwargs)


@dataclass(frozen=True)
class ConditionalEstimates:
    d0: NDArray[np.float64]
    d1: NDArray[np.float64]
    d2_cross: NDArray[np.float64]


@dataclass
class StepDiagnostics:
    step: int
    time: float
    clamp_count: int = 0
    monotonicity_ratio: float = 0.0
    min_value: float = np.nan
    max_value: float = np.nan
    wall_time: float = 0.0
    sweeps: int = 0
    adjusted_nodes: int = 0
    unresolved_nodes: int = 0
    max_violation: float = 0.0


def euler_step(y: ArrayLike, h: float, p: MarketParams, z: ArrayLike) -> NDArray[np.float64]:
    """One Euler step of the sampling diffusion (diagonal noise only)."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    xi = np.diagonal(coeff_eta(y, p), axis1=-2, axis2=-1)
    if np.any(xi < 0):
        raise ArithmeticError("negative diagonal diffusion; coefficient bug")
    return y + coeff_b(y, p) * h + np.sqrt(xi * h) * z


def _sample(
    next_field: ValueField,
    y: NDArray[np.float64],
    z: NDArray[np.float64],
    h: float,
    p: MarketParams,
    fields: NDArray[np.float64],
    fill: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Sample means of all stacked fields, ``y`` of shape (C, N), ``z`` (C, M, N)."""
    c, m, n = z.shape
    drift = coeff_b(y, p) * h
    xi = np.diagonal(coeff_eta(y, p), axis1=-2, axis2=-1)
    vol = np.sqrt(np.maximum(xi, 0.0) * h)
    pts = y[:, None, :] + drift[:, None, :] + vol[:, None, :] * z
    vals = interpolate(next_field.spec, fields, pts.reshape(c * m, n), fill)
    return vals.reshape(fields.shape[0], c, m).mean(axis=2)


def estimate_conditional(
    next_field: ValueField,
    y: ArrayLike,
    sp: SchemeParams,
    p: MarketParams,
    z: ArrayLike | None = None,
    step: int = 0,
    node_ids: ArrayLike | None = None,
) -> ConditionalEstimates:
    """Sample means of phi, D phi and the cross second derivatives after one step.

    ``z`` (shape ``(C, M, N)`` or ``(M, N)`` for a single point) overrides the
    counter-based draws keyed by ``(sp.seed, step, node_ids)``.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    n = p.n_assets
    if z is None:
        ids = np.arange(y2.shape[0]) if node_ids is None else np.atleast_1d(node_ids)
        z = rng.normals(sp.seed, step, ids, sp.m_paths, n)
    else:
        z = np.asarray(z, dtype=float)
        if z.ndim == 2:
            z = z[None]
    means = _sample(next_field, y2, z, sp.h, p, next_field.stacked(), next_field.stacked_fill())
    est = ConditionalEstimates(means[0], means[1 : 1 + n].T, means[1 + n :].T)
    if single:
        return ConditionalEstimates(est.d0[0], est.d1[0], est.d2_cross[0])
    return est


def nonlinear_F(
    y: ArrayLike,
    est: ConditionalEstimates,
    p: MarketParams,
    sp: SchemeParams,
    counter: list | None = None,
):
    """Cross diffusion, discounting and consumption terms of the generator.

    Clamp events on the consumption bracket are added to ``counter[0]``.
    """
    y = np.asarray(y, dtype=float)
    g = p.gamma
    d0 = np.asarray(est.d0, dtype=float)
    d1 = np.asarray(est.d1, dtype=float)
    cross = 0.0
    if p.n_assets > 1:
        eta = coeff_eta(y, p)
        d2 = np.asarray(est.d2_cross, dtype=float)
        for k, (i, j) in enumerate(pair_list(p.n_assets)):
            # eta_ij = eta_ji: the half and the double count cancel
            cross = cross + eta[..., i, j] * d2[..., k]
    bracket = g * d0 - np.sum(y * d1, axis=-1)
    clamped = bracket < sp.clamp_eps
    if counter is not None:
        counter[0] += int(np.count_nonzero(clamped))
    bracket = np.where(clamped, sp.clamp_eps, bracket)
    out = cross - coeff_vartheta(y, p) * d0 + (1.0 - g) / g * bracket ** (g / (g - 1.0))
    return float(out) if np.ndim(out) == 0 else out


def monotonicity_ratio(points: NDArray[np.float64], p: MarketParams) -> float:
    """max over points and axes of sum_{j != i} |eta_ij| / eta_ii."""
    if p.n_assets == 1 or len(points) == 0:
        return 0.0
    eta = coeff_eta(points, p)
    diag = np.diagonal(eta, axis1=-2, axis2=-1)
    off = np.sum(np.abs(eta), axis=-1) - np.abs(diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(diag > 0, off / diag, 0.0)
    return float(ratio.max())


def pde_step(
    next_field: ValueField,
    step: int,
    sp: SchemeParams,
    p: MarketParams,
    diag: StepDiagnostics | None = None,
) -> ValueField:
    """Backward step from ``t_{step+1}`` to ``t_step`` without the obstacles."""
    t0 = _time.perf_counter()
    spec = next_field.spec
    idx = spec.active_flat
    pts = spec.points[idx]
    fields = next_field.stacked()
    fill = next_field.stacked_fill()
    n = p.n_assets
    chunk = max(1, BLOCK_POINTS // sp.m_paths)
    blocks = [slice(s, min(s + chunk, len(idx))) for s in range(0, len(idx), chunk)]
    new_vals = np.empty(len(idx))
    clamps = np.zeros(len(blocks), dtype=np.int64)

    def work(b):
        sl = blocks[b]
        ids = np.zeros(sl.stop - sl.start, dtype=np.int64) if sp.common_random_numbers else idx[sl]
        z = rng.normals(sp.seed, step, ids, sp.m_paths, n)
        means = _sample(next_field, pts[sl], z, sp.h, p, fields, fill)
        est = ConditionalEstimates(means[0], means[1 : 1 + n].T, means[1 + n :].T)
        cnt = [0]
        new_vals[sl] = est.d0 + sp.h * nonlinear_F(pts[sl], est, p, sp, cnt)
        clamps[b] = cnt[0]

    if sp.workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=sp.workers) as pool:
            list(pool.map(work, range(len(blocks))))
    else:
        for b in range(len(blocks)):
            work(b)

    bad = ~np.isfinite(new_vals)
    t_k = step * sp.h
    if bad.any():
        raise NonFiniteValueError(t_k, pts[np.argmax(bad)])
    vals = np.full(spec.n_nodes, spec.ext_value)
    vals[idx] = new_vals
    out = ValueField.from_values(spec, t_k, vals)
    if diag is not None:
        diag.clamp_count += int(clamps.sum())
        diag.monotonicity_ratio = monotonicity_ratio(pts, p)
        diag.wall_time += _time.perf_counter() - t0
    return out
