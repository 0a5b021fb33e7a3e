"""Gradient-constraint projection: classify nodes, trade along the wealth
renormalised characteristics back to the no-trade region, rescale values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .grid import GridSpec, ValueField, interpolate, interpolation_weights
from .market import MarketParams

log = logging.getLogger(__name__)

NOTRADE, BUY, SELL, INACTIVE = 0, 1, 2, -1
_LETTER = {NOTRADE: "N", BUY: "B", SELL: "S"}

# bisections per settling step; lands each asset on its cell face
_BISECT = 40


class RegionInconsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class TradeDirection:
    buy_flags: NDArray[np.bool_]
    sell_flags: NDArray[np.bool_]

    def __post_init__(self):
        b = np.asarray(self.buy_flags, dtype=bool)
        s = np.asarray(self.sell_flags, dtype=bool)
        if np.any(b & s):
            raise ValueError("cannot buy and sell the same asset")
        object.__setattr__(self, "buy_flags", b)
        object.__setattr__(self, "sell_flags", s)

    @property
    def signs(self) -> NDArray[np.float64]:
        return self.buy_flags.astype(float) - self.sell_flags.astype(float)


@dataclass
class RegionLabels:
    """Per-node, per-asset labels; ``codes`` has shape ``(N, *counts)``."""

    spec: GridSpec
    time: float
    codes: NDArray[np.int8]

    def composite(self) -> NDArray[np.object_]:
        """Region names such as ``B1&S2`` per node (``''`` on inactive nodes)."""
        n = self.codes.shape[0]
        flat = self.codes.reshape(n, -1)
        out = np.full(flat.shape[1], "", dtype=object)
        for k in self.spec.active_flat:
            out[k] = "&".join(f"{_LETTER[int(flat[i, k])]}{i + 1}" for i in range(n))
        return out.reshape(self.spec.counts)

    def composite_ids(self) -> NDArray[np.int64]:
        """Base-3 composite id per node, ``-1`` on inactive nodes."""
        n = self.codes.shape[0]
        ids = np.zeros(self.spec.counts, dtype=np.int64)
        for i in range(n):
            ids = ids * 3 + np.maximum(self.codes[i], 0)
        ids[~self.spec.active] = -1
        return ids

    def notrade_mask(self) -> NDArray[np.bool_]:
        return np.all(self.codes == NOTRADE, axis=0) & self.spec.active

    def region_set(self) -> set[str]:
        comp = self.composite().ravel()
        return {c for c in comp if c}


def _dot_grad(f: ValueField) -> NDArray[np.float64]:
    pts = f.spec.points.reshape(f.spec.counts + (f.spec.ndim,))
    return np.sum(np.moveaxis(pts, -1, 0) * f.grad, axis=0)


def sell_constraints(f: ValueField, p: MarketParams) -> NDArray[np.float64]:
    """Sell constraint for every asset and node, shape ``(N, *counts)``."""
    g = p.gamma
    yd = _dot_grad(f)
    mu = p.sell_cost.reshape((-1,) + (1,) * f.spec.ndim)
    return mu * g * f.values + f.grad - mu * yd


def buy_constraints(f: ValueField, p: MarketParams) -> NDArray[np.float64]:
    g = p.gamma
    yd = _dot_grad(f)
    lam = p.buy_cost.reshape((-1,) + (1,) * f.spec.ndim)
    return lam * g * f.values - f.grad - lam * yd


def constraint_sell(f: ValueField, node, i: int, p: MarketParams) -> float:
    multi = np.unravel_index(int(node), f.spec.counts) if np.ndim(node) == 0 else tuple(node)
    return float(sell_constraints(f, p)[(i,) + tuple(multi)])


def constraint_buy(f: ValueField, node, i: int, p: MarketParams) -> float:
    multi = np.unravel_index(int(node), f.spec.counts) if np.ndim(node) == 0 else tuple(node)
    return float(buy_constraints(f, p)[(i,) + tuple(multi)])


def _normalised(f: ValueField, p: MarketParams):
    scale = np.maximum(np.abs(f.values), 1e-300)
    return buy_constraints(f, p) / scale, sell_constraints(f, p) / scale


def classify(f: ValueField, p: MarketParams, adjust_tol: float) -> RegionLabels:
    """Label nodes by the sign of the constraints relative to ``adjust_tol * |phi|``."""
    cb, cs = _normalised(f, p)
    buy = cb < -adjust_tol
    sell = cs < -adjust_tol
    act = f.spec.active
    both = buy & sell & act[None]
    if both.any():
        i, *multi = np.argwhere(both)[0]
        y = f.spec.points[f.spec.node_index(multi)]
        raise RegionInconsistencyError(
            f"asset {i + 1} violates both buy and sell constraints at y={y.tolist()}, t={f.time:g}"
        )
    codes = np.where(buy, BUY, np.where(sell, SELL, NOTRADE)).astype(np.int8)
    codes[:, ~act] = INACTIVE
    return RegionLabels(f.spec, f.time, codes)


def characteristic_point(
    y: ArrayLike,
    direction: TradeDirection,
    delta: ArrayLike,
    p: MarketParams,
) -> NDArray[np.float64]:
    """Unit-wealth fractions after trading ``delta`` of each flagged asset.

    Buying ``delta_i`` of asset i costs ``(1 + lambda_i) delta_i`` in cash, selling
    returns ``(1 - mu_i) delta_i``; the post-trade position is renormalised by the
    post-cost wealth ``1 - sum lambda_i delta_i - sum mu_i delta_i``. Batched inputs
    broadcast over leading axes.
    """
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0):
        raise ValueError("trade size must be non-negative")
    ub = np.asarray(direction.buy_flags, dtype=float)
    us = np.asarray(direction.sell_flags, dtype=float)
    dv = np.broadcast_to(delta if delta.ndim and delta.shape[-1] == y.shape[-1] else delta[..., None], y.shape)
    wealth = 1.0 - np.sum(p.buy_cost * dv * ub + p.sell_cost * dv * us, axis=-1, keepdims=True)
    if np.any(wealth <= 0):
        raise ValueError("trade exhausts the post-cost wealth")
    return (y + dv * (ub - us)) / wealth


def _wealth_ratio(y_star, y_bar, buy, sell, p: MarketParams):
    num = 1.0 + np.sum(p.buy_cost * y_star * buy - p.sell_cost * y_star * sell, axis=-1)
    den = 1.0 + np.sum(p.buy_cost * y_bar * buy - p.sell_cost * y_bar * sell, axis=-1)
    return num, den


def adjust_value(
    y_star: ArrayLike,
    y_bar: ArrayLike,
    direction: TradeDirection,
    phi_bar,
    p: MarketParams,
):
    """phi(y*) implied by trading from y* to y_bar, given phi(y_bar)."""
    num, den = _wealth_ratio(
        np.asarray(y_star, float), np.asarray(y_bar, float), direction.buy_flags, direction.sell_flags, p
    )
    if np.any(num <= 0) or np.any(den <= 0):
        raise ValueError("wealth ratio outside the solvency region")
    out = np.asarray(phi_bar, dtype=float) * (num / den) ** p.gamma
    return float(out) if out.ndim == 0 else out


@dataclass
class TraceResult:
    y_bar: NDArray[np.float64]
    delta: NDArray[np.float64]
    resolved: NDArray[np.bool_]


def _in_box(spec: GridSpec, pts):
    return np.all((pts >= spec.lo - 1e-12) & (pts <= spec.hi + 1e-12), axis=-1)


def _cell_corners(codes: NDArray[np.int8], spec: GridSpec, pts: NDArray[np.float64]):
    """Per point and asset: all cell corners NOTRADE, any corner BUY, any corner SELL."""
    n = spec.ndim
    index, _, valid = interpolation_weights(spec, pts)
    flat = codes.reshape(n, -1)
    all_nt = np.ones((pts.shape[0], n), dtype=bool)
    any_b = np.zeros((pts.shape[0], n), dtype=bool)
    any_s = np.zeros((pts.shape[0], n), dtype=bool)
    for c in range(index.shape[0]):
        cc = flat[:, index[c]].T
        v = valid[c][:, None]
        all_nt &= (cc == NOTRADE) & v
        any_b |= (cc == BUY) & v
        any_s |= (cc == SELL) & v
    return all_nt, any_b, any_s


def trace_to_boundary(
    y_star: ArrayLike,
    buy: ArrayLike,
    sell: ArrayLike,
    labels: RegionLabels,
    f: ValueField,
    p: MarketParams,
    adjust_tol: float,
) -> TraceResult:
    """Walk each point along its trade curve into the no-trade cells.

    Batched over rows of ``y_star`` (shape ``(K, N)``) with boolean ``buy``/``sell``
    flags of the same shape. An asset counts as settled once every corner of
    the cell holding the current point is NOTRADE for it. Where the no-trade
    band is thinner than a cell the curve meets corners labelled with the
    opposite trade first; inside such a cell the asset settles where its
    interpolated constraint (from ``f``) reaches ``-adjust_tol``. Settled assets
    stop advancing, which steers joint trades into the corner. The march uses
    steps of ``min(dy)/2``; any step in which an asset settles is bisected so
    that asset stops on the face of its first no-trade cell. Rows whose curve
    leaves the box or the solvency region first are unresolved and keep the
    last admissible point.
    """
    spec = labels.spec
    codes = labels.codes
    y_star = np.atleast_2d(np.asarray(y_star, dtype=float))
    buy = np.atleast_2d(np.asarray(buy, dtype=bool))
    sell = np.atleast_2d(np.asarray(sell, dtype=bool))
    k, n = y_star.shape
    traded = buy | sell
    step = float(np.min(spec.dy)) / 2.0
    sign = buy.astype(float) - sell.astype(float)
    cost = p.buy_cost * buy + p.sell_cost * sell
    cb, cs = _normalised(f, p)
    stack = np.concatenate([cb.reshape(n, -1), cs.reshape(n, -1)])
    zero = np.zeros(2 * n)

    def pending(pts, rows):
        all_nt, any_b, any_s = _cell_corners(codes, spec, pts)
        thin = np.where(buy[rows], any_s, any_b)
        settled = all_nt
        if thin.any():
            c = interpolate(spec, stack, pts, zero)
            own = np.where(buy[rows], c[:n].T, c[n:].T)
            settled = settled | (thin & (own >= -adjust_tol))
        return traded[rows] & ~settled

    def at(rows, d):
        wealth = 1.0 - np.sum(cost[rows] * d, axis=-1)
        pts = (y_star[rows] + sign[rows] * d) / np.where(wealth > 0, wealth, np.nan)[:, None]
        return pts, wealth

    delta = np.zeros((k, n))
    live = np.ones(k, dtype=bool)
    need = np.zeros((k, n), dtype=bool)
    start_in = _in_box(spec, y_star)
    need[start_in] = pending(y_star[start_in], np.flatnonzero(start_in))
    need[~start_in] = traded[~start_in]
    resolved = ~need.any(axis=1)
    live &= ~resolved
    extent = float(np.max(spec.hi - spec.lo))
    budget = int(np.ceil(4.0 * extent / step)) + 8
    # rows whose last increment settles an asset wait here for a joint bisection
    parked = np.zeros(k, dtype=bool)
    pinc = np.zeros((k, n))
    while live.any() and budget > 0:
        rows = np.flatnonzero(live & ~parked)
        if rows.size:
            budget -= 1
            inc = step * need[rows]
            pts, wealth = at(rows, delta[rows] + inc)
            inside = (wealth > 0) & _in_box(spec, pts)
            if not spec.active.all():
                inside &= _active_at(spec, pts)
            # curves leaving the admissible box stop at the last admissible point
            live[rows[~inside]] = False
            rows, inc, pts = rows[inside], inc[inside], pts[inside]
            if rows.size:
                nd = pending(pts, rows)
                settles = np.any(need[rows] & ~nd, axis=1)
                plain = rows[~settles]
                delta[plain] += inc[~settles]
                need[plain] = nd[~settles]
                parked[rows[settles]] = True
                pinc[rows[settles]] = inc[settles]
                done = plain[~need[plain].any(axis=1)]
                resolved[done] = True
                live[done] = False
            continue
        # every live row is parked: bisect the increments so each asset stops on its own face
        ev = np.flatnonzero(parked)
        inc_e = pinc[ev]
        lo_t = np.zeros(ev.size)
        hi_t = np.ones(ev.size)
        for _ in range(_BISECT):
            mid = 0.5 * (lo_t + hi_t)
            pm, _ = at(ev, delta[ev] + mid[:, None] * inc_e)
            hit = np.any(need[ev] & ~pending(pm, ev), axis=1)
            hi_t = np.where(hit, mid, hi_t)
            lo_t = np.where(hit, lo_t, mid)
        delta[ev] += hi_t[:, None] * inc_e
        pe, _ = at(ev, delta[ev])
        need[ev] = pending(pe, ev)
        parked[ev] = False
        done = ev[~need[ev].any(axis=1)]
        resolved[done] = True
        live[done] = False

    wealth = 1.0 - np.sum(cost * delta, axis=-1, keepdims=True)
    return TraceResult((y_star + sign * delta) / wealth, delta, resolved)


def _active_at(spec: GridSpec, pts):
    s = np.rint((pts - spec.lo) / spec.dy).astype(int)
    s = np.clip(s, 0, np.asarray(spec.counts) - 1)
    return spec.active[tuple(s.T)]


@dataclass
class SweepInfo:
    sweeps: int = 0
    adjusted_nodes: int = 0
    unresolved_nodes: int = 0
    max_violation: float = 0.0
    converged: bool = True
    history: list = field(default_factory=list)


def sweep_adjust(
    f: ValueField,
    p: MarketParams,
    adjust_tol: float,
    max_sweeps: int = 50,
) -> tuple[ValueField, RegionLabels, SweepInfo]:
    """Project a slice onto the gradient constraints.

    Jacobi sweeps: each sweep reads a frozen copy and writes a fresh buffer, so
    the result does not depend on node order. A node stays in the traded set
    once labelled, so its value keeps tracking its anchor while neighbours
    move. Sweeps stop when no constraint is below ``-adjust_tol`` (relative to
    ``|phi|``), when the largest relative change of a sweep is at most
    ``adjust_tol`` and no new node joined the traded set, or after
    ``max_sweeps``. The returned labels are those of the
    incoming field.
    """
    spec = f.spec
    n = spec.ndim
    info = SweepInfo()
    labels = classify(f, p, adjust_tol)
    cur = f
    codes = labels.codes
    all_pts = spec.points
    for sweep in range(max_sweeps):
        buy = (codes == BUY).reshape(n, -1).T
        sell = (codes == SELL).reshape(n, -1).T
        rows = np.flatnonzero((buy | sell).any(axis=1))
        if rows.size == 0:
            break
        info.sweeps = sweep + 1
        tr = trace_to_boundary(
            all_pts[rows], buy[rows], sell[rows], RegionLabels(spec, f.time, codes), cur, p, adjust_tol
        )
        phi_bar = interpolate(spec, cur.values.reshape(1, -1), tr.y_bar, np.array([spec.ext_value]))[0]
        num, den = _wealth_ratio(all_pts[rows], tr.y_bar, buy[rows], sell[rows], p)
        new = phi_bar * (num / den) ** p.gamma
        vals = cur.values.ravel().copy()
        old = vals[rows]
        vals[rows] = new
        info.adjusted_nodes = max(info.adjusted_nodes, rows.size)
        info.unresolved_nodes = int(np.count_nonzero(~tr.resolved))
        change = float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-300)))
        info.history.append(change)
        cur = ValueField.from_values(spec, f.time, vals)
        fresh = classify(cur, p, adjust_tol).codes
        grown = np.any((fresh != NOTRADE) & (codes == NOTRADE))
        if np.all(fresh[:, spec.active] == NOTRADE) or (change <= adjust_tol and not grown):
            break
        codes = np.where(fresh != NOTRADE, fresh, codes)
    cb, cs = _normalised(cur, p)
    act = spec.active[None]
    worst = float(min(0.0, np.min(np.where(act, cb, 0.0)), np.min(np.where(act, cs, 0.0))))
    info.max_violation = -worst
    info.converged = worst >= -adjust_tol
    if not info.converged:
        log.warning(
            "projection at t=%g stopped after %d sweeps with relative violation %.3g",
            f.time, info.sweeps, -worst,
        )
    return cur, labels, info
