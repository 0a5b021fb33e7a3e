"""Backward induction driver, free-boundary extraction and property checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .grid import GridSpec, ValueField
from .market import MarketParams, dai_yi_bounds, merton_proportion, terminal_value
from .mc import SchemeParams, StepDiagnostics, pde_step
from .obstacle import BUY, NOTRADE, SELL, RegionLabels, classify, sweep_adjust

log = logging.getLogger(__name__)

MAX_ASSETS = 3
# time comparisons are made on this scale
_TIME_EPS = 1e-9


@dataclass(frozen=True)
class CheckResult:
    """``margin`` is the worst signed violation; negative or zero means slack."""

    name: str
    passed: bool
    margin: float


@dataclass
class BoundaryReport:
    times: NDArray[np.float64]
    dy: NDArray[np.float64]
    # one-dimensional boundaries, NaN when N > 1
    buy: NDArray[np.float64]
    sell: NDArray[np.float64]
    # N > 1: per time, region name -> flat ids of NOTRADE nodes touching it
    boundary_nodes: list[dict[str, NDArray[np.intp]]]
    degenerate: NDArray[np.bool_]
    checks: list[CheckResult] = field(default_factory=list)

    def at(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > _TIME_EPS * max(1.0, abs(t)):
            raise KeyError(f"no boundary record at t={t}")
        return k


@dataclass
class SolveResult:
    params: MarketParams
    scheme: SchemeParams
    grid: GridSpec
    slices: list[ValueField]
    labels: list[RegionLabels]
    boundaries: BoundaryReport
    diagnostics: list[StepDiagnostics]

    @property
    def slice_times(self) -> NDArray[np.float64]:
        return np.array([s.time for s in self.slices])

    @property
    def label_times(self) -> NDArray[np.float64]:
        return np.array([lab.time for lab in self.labels])

    def slice_at(self, t: float) -> ValueField:
        return self.slices[_find(self.slice_times, t)]

    def labels_at(self, t: float) -> RegionLabels:
        return self.labels[_find(self.label_times, t)]


def _find(times: NDArray[np.float64], t: float) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > _TIME_EPS * max(1.0, abs(t)):
        raise KeyError(f"time {t} not retained")
    return k


def retained_steps(n_steps: int, h: float, named: Sequence[float] = ()) -> set[int]:
    """Every ceil(n/20)-th step, t=0, the terminal step and the named times."""
    keep = {0, n_steps}
    every = max(1, math.ceil(n_steps / 20))
    keep.update(range(0, n_steps + 1, every))
    for t in named:
        k = int(round(t / h))
        if abs(k * h - t) > 1e-6 * max(1.0, abs(t)) or not 0 <= k <= n_steps:
            raise ValueError(f"retained time {t} is not on the time grid")
        keep.add(k)
    return keep


def _check_inputs(p: MarketParams, sp: SchemeParams, grid: GridSpec) -> None:
    if p.n_assets > MAX_ASSETS:
        raise ValueError(
            f"{p.n_assets} assets need a {p.n_assets}-dimensional tensor grid; "
            f"full grids are supported up to N={MAX_ASSETS}"
        )
    if grid.ndim != p.n_assets:
        raise ValueError("grid dimension does not match the number of assets")
    if len(sp.dy) != grid.ndim or not np.allclose(sp.dy, grid.dy, rtol=1e-12, atol=0):
        raise ValueError("scheme and grid disagree on the spacing")
    # no steps means the terminal slice alone
    if sp.n_steps and abs(sp.n_steps * sp.h - p.horizon) > 1e-9 * max(1.0, p.horizon):
        raise ValueError("n_steps * h must equal the horizon")


def solve(
    p: MarketParams,
    sp: SchemeParams,
    grid: GridSpec,
    retain_times: Sequence[float] = (),
    adjust: bool = True,
    step_fn: Callable | None = None,
    progress: Callable[[StepDiagnostics], None] | None = None,
) -> SolveResult:
    """Terminal slice, then ``pde_step`` and ``sweep_adjust`` back to t=0.

    Labels are kept for every step (they are small); value slices only at the
    retained steps. ``step_fn`` replaces the PDE half step, which is how the
    finite-difference reference shares this loop.
    """
    _check_inputs(p, sp, grid)
    step_fn = step_fn or pde_step
    keep = retained_steps(sp.n_steps, sp.h, retain_times)
    f = ValueField.from_function(grid, p.horizon, lambda y: terminal_value(y, p))
    lab = classify(f, p, sp.adjust_tol)
    slices = [f] if sp.n_steps in keep else []
    labels = [lab]
    diags: list[StepDiagnostics] = []
    for k in range(sp.n_steps - 1, -1, -1):
        d = StepDiagnostics(step=k, time=k * sp.h)
        pde = step_fn(f, k, sp, p, d)
        if adjust:
            f, lab, info = sweep_adjust(pde, p, sp.adjust_tol, sp.max_sweeps)
            d.sweeps = info.sweeps
            d.adjusted_nodes = info.adjusted_nodes
            d.unresolved_nodes = info.unresolved_nodes
            d.max_violation = info.max_violation
        else:
            f, lab = pde, classify(pde, p, sp.adjust_tol)
        act = f.values[grid.active]
        d.min_value = float(act.min())
        d.max_value = float(act.max())
        diags.append(d)
        labels.append(lab)
        if k in keep:
            slices.append(f)
        if progress is not None:
            progress(d)
    slices.reverse()
    labels.reverse()
    diags.reverse()
    report = extract_boundaries(labels, grid)
    return SolveResult(p, sp, grid, slices, labels, report, diags)


def _one_dim_boundaries(codes: NDArray[np.int8], spec: GridSpec) -> tuple[float, float, bool]:
    y = spec.axes[0]
    c = codes[0]
    half = 0.5 * float(spec.dy[0])
    buys = y[c == BUY]
    sells = y[c == SELL]
    nt = np.count_nonzero(c == NOTRADE)
    # short positions are always bought back, so the boundary is non-negative
    b = max(0.0, float(buys.max()) + half) if buys.size else 0.0
    s = float(sells.min()) - half if sells.size else float(spec.hi[0])
    degenerate = nt == 0 or nt == np.count_nonzero(spec.active)
    return b, s, degenerate


def _boundary_nodes(lab: RegionLabels) -> dict[str, NDArray[np.intp]]:
    spec = lab.spec
    comp = lab.composite()
    nt = lab.notrade_mask()
    out: dict[str, set[int]] = {}
    for ax in range(spec.ndim):
        for shift in (1, -1):
            nb = np.roll(comp, shift, axis=ax)
            valid = np.ones(spec.counts, dtype=bool)
            edge = [slice(None)] * spec.ndim
            edge[ax] = 0 if shift == 1 else -1
            valid[tuple(edge)] = False
            touch = nt & valid & (nb != comp) & (nb != "")
            for idx in np.flatnonzero(touch.ravel()):
                out.setdefault(str(nb.ravel()[idx]), set()).add(int(idx))
    return {k: np.array(sorted(v), dtype=np.intp) for k, v in sorted(out.items())}


def extract_boundaries(labels: Sequence[RegionLabels], grid: GridSpec) -> BoundaryReport:
    """Free boundaries per labelled slice.

    N=1: ``B`` is the largest BUY node plus half a cell (zero without buying
    above the origin) and ``S`` the smallest SELL node minus half a cell (the
    top of the box without SELL nodes). N>1: NOTRADE nodes adjacent to each
    neighbouring composite region.
    """
    labels = list(labels)
    n = len(labels)
    times = np.array([lab.time for lab in labels], dtype=float)
    buy = np.full(n, np.nan)
    sell = np.full(n, np.nan)
    nodes: list[dict[str, NDArray[np.intp]]] = []
    degenerate = np.zeros(n, dtype=bool)
    for k, lab in enumerate(labels):
        if grid.ndim == 1:
            buy[k], sell[k], degenerate[k] = _one_dim_boundaries(lab.codes, grid)
            nodes.append({})
        else:
            nt = lab.notrade_mask()
            degenerate[k] = not nt.any() or nt.sum() == grid.active.sum()
            nodes.append(_boundary_nodes(lab))
    flagged = times[degenerate & (times < times.max() - _TIME_EPS)]
    if flagged.size:
        log.warning("degenerate no-trade region at %d slices, first t=%g", flagged.size, flagged[0])
    return BoundaryReport(times, grid.dy.copy(), buy, sell, nodes, degenerate)


def _check(name: str, margin: float, strict: bool = False) -> CheckResult:
    margin = float(margin)
    ok = margin < 0 if strict else margin <= 0
    return CheckResult(name, bool(ok), margin)


def check_dai_yi(
    report: BoundaryReport,
    p: MarketParams,
    grid_tol: float | None = None,
    maturity_shift: float = 0.0,
) -> list[CheckResult]:
    """Single-asset free-boundary properties over ``t in [0, T)``.

    ``grid_tol`` defaults to two cells plus rounding slack. ``maturity_shift``
    moves the start of the no-buying window later, allowing for the time
    discretisation.
    """
    bounds = dai_yi_bounds(p)
    if grid_tol is None:
        grid_tol = 2.0 * float(report.dy[0]) + 1e-9
    live = report.times < p.horizon - _TIME_EPS
    t, b, s = report.times[live], report.buy[live], report.sell[live]
    if t.size == 0:
        return []
    out = [
        _check("B<S", np.max(b - s), strict=True),
        _check("S>=S_lower", np.max(bounds.sell_lower - grid_tol - s)),
    ]
    if bounds.leverage_sign < 0:
        out.append(_check("S<1", np.max(s - 1.0), strict=True))
    elif bounds.leverage_sign > 0:
        out.append(_check("S>1", np.max(1.0 - s), strict=True))
    else:
        out.append(_check("S=1", np.max(np.abs(s - 1.0)) - grid_tol))
    t_switch = p.horizon - bounds.tau
    early = t < t_switch - _TIME_EPS
    if bounds.tau > 0 and early.any():
        out.append(_check("B<=B_upper", np.max(b[early] - bounds.buy_upper - grid_tol)))
    late = t >= t_switch + maturity_shift - _TIME_EPS
    if bounds.tau > 0 and late.any():
        out.append(_check("B=0_near_maturity", np.max(b[late])))
    return out


def merton_brackets(lab: RegionLabels, pi: NDArray[np.float64]) -> tuple[NDArray, NDArray]:
    """Per axis, the no-trade interval on the grid line through the node nearest ``pi``.

    Lower end: last BUY node plus half a cell (box floor without BUY nodes);
    upper end: first SELL node minus half a cell (box top without SELL nodes).
    """
    spec = lab.spec
    centre = spec.nearest_node(pi)
    lo = np.empty(spec.ndim)
    hi = np.empty(spec.ndim)
    for i in range(spec.ndim):
        sl = list(centre)
        sl[i] = slice(None)
        line = lab.codes[(i,) + tuple(sl)]
        y = spec.axes[i]
        half = 0.5 * spec.dy[i]
        buys = y[line == BUY]
        sells = y[line == SELL]
        lo[i] = buys.max() + half if buys.size else spec.lo[i]
        hi[i] = sells.min() - half if sells.size else spec.hi[i]
    return lo, hi


def check_merton_containment(
    result: SolveResult,
    p: MarketParams,
    tol_cells: int = 2,
    times: Sequence[float] | None = None,
    maturity_gap: float = 0.1,
) -> CheckResult:
    """pi* inside the no-trade brackets, give or take ``tol_cells`` cells.

    Without ``times`` every labelled slice at least ``maturity_gap`` (as a
    fraction of the horizon) before maturity is checked.
    """
    if np.any(p.buy_cost > 1e-4) or np.any(p.sell_cost > 1e-4):
        raise ValueError("Merton containment is only meaningful for costs of at most 1e-4")
    pi = merton_proportion(p)
    tol = tol_cells * result.grid.dy
    if times is None:
        sel = [lab for lab in result.labels if lab.time <= p.horizon * (1.0 - maturity_gap) + _TIME_EPS]
    else:
        sel = [result.labels_at(t) for t in times]
    worst = -np.inf
    for lab in sel:
        lo, hi = merton_brackets(lab, pi)
        worst = max(worst, float(np.max(np.maximum(lo - tol - pi, pi - hi - tol))))
    return _check("merton_containment", worst)


def notrade_covariance(lab: RegionLabels, min_nodes: int = 10) -> float:
    if lab.spec.ndim != 2:
        raise ValueError("elongation is defined for two assets")
    pts = lab.spec.points[lab.notrade_mask().ravel()]
    if len(pts) < min_nodes:
        raise ValueError(f"only {len(pts)} NOTRADE nodes; need at least {min_nodes}")
    d = pts - pts.mean(axis=0)
    return float(np.mean(d[:, 0] * d[:, 1]))


def correlation_elongation_sign(lab: RegionLabels, min_nodes: int = 10, rel_tol: float = 1e-9) -> int:
    """Sign of the (y1, y2) covariance over NOTRADE nodes; 0 when negligible."""
    cov = notrade_covariance(lab, min_nodes)
    pts = lab.spec.points[lab.notrade_mask().ravel()]
    scale = float(np.prod(pts.std(axis=0))) or 1.0
    if abs(cov) <= rel_tol * scale:
        return 0
    return int(np.sign(cov))


def no_buy_window(p: MarketParams, cap: float = 0.1) -> float:
    """Length before maturity over which no asset should be bought.

    Each asset's single-asset switching time bounds the window; assets with
    non-positive excess return never enter it.
    """
    ex = p.excess
    ok = ex > 0
    if not ok.any():
        return 0.0
    tau = np.log((1.0 + p.buy_cost[ok]) / (1.0 - p.sell_cost[ok])) / ex[ok]
    return float(min(cap, tau.min()))


def check_no_buy_near_maturity(
    result: SolveResult,
    window: float,
    box: tuple[float, float] = (0.0, 1.0),
) -> CheckResult:
    """Count BUY labels inside ``box**N`` over ``[T - window, T)``; margin is the count."""
    p = result.params
    spec = result.grid
    inside = np.all((spec.points >= box[0] - 1e-12) & (spec.points <= box[1] + 1e-12), axis=1)
    count = 0
    for lab in result.labels:
        if p.horizon - window - _TIME_EPS <= lab.time < p.horizon - _TIME_EPS:
            flat = lab.codes.reshape(spec.ndim, -1)
            count += int(np.count_nonzero((flat == BUY) & inside[None, :]))
    return _check("no_buy_near_maturity", count)


def check_region_count(result: SolveResult, times: Sequence[float]) -> CheckResult:
    """All 3**N composite regions present at each of ``times``; margin counts the missing ones."""
    full = 3 ** result.grid.ndim
    missing = 0
    for t in times:
        missing += full - len(result.labels_at(t).region_set())
    return _check("all_regions", missing)
