"""Implicit finite-difference reference solver for a single risky asset.

Drift, diffusion and discounting are implicit (one tridiagonal solve per
step); the consumption term is explicit. The projection step is shared with
the Monte Carlo path, so the two solvers differ only in the PDE half step.
"""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_banded

from .grid import ValueField
from .market import MarketParams, coeff_b, coeff_eta, coeff_vartheta
from .mc import ConditionalEstimates, NonFiniteValueError, SchemeParams, StepDiagnostics, nonlinear_F
from .solver import SolveResult, solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Tridiag:
    """Rows ``sub[j] x[j-1] + main[j] x[j] + sup[j] x[j+1]``; ``sub[0]`` and ``sup[-1]`` unused."""

    sub: NDArray[np.float64]
    main: NDArray[np.float64]
    sup: NDArray[np.float64]

    def __post_init__(self):
        if not (len(self.sub) == len(self.main) == len(self.sup)):
            raise ValueError("tridiagonal bands must have equal length")

    def diagonally_dominant(self) -> bool:
        off = np.abs(self.sub) + np.abs(self.sup)
        off[0] -= abs(self.sub[0])
        off[-1] -= abs(self.sup[-1])
        return bool(np.all(np.abs(self.main) >= off))

    def solve(self, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
        ab = np.zeros((3, len(self.main)))
        ab[0, 1:] = self.sup[:-1]
        ab[1] = self.main
        ab[2, :-1] = self.sub[1:]
        return solve_banded((1, 1), ab, rhs)

    def matvec(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        out = self.main * x
        out[1:] += self.sub[1:] * x[:-1]
        out[:-1] += self.sup[:-1] * x[1:]
        return out


def implicit_system(
    f: ValueField, sp: SchemeParams, p: MarketParams
) -> tuple[Tridiag, NDArray[np.float64], NDArray[np.intp]]:
    """Tridiagonal system over the active nodes plus the fixed right-hand side part.

    Box faces inside the solvency region use linear extrapolation for the
    phantom node; insolvent neighbours contribute the extension value.
    """
    spec = f.spec
    idx = spec.active_flat
    y = spec.points[idx, 0]
    dy = float(spec.dy[0])
    h = sp.h
    eta = coeff_eta(y[:, None], p)[:, 0, 0]
    b = coeff_b(y[:, None], p)[:, 0]
    th = coeff_vartheta(y[:, None], p)
    diff = 0.5 * eta / dy**2
    adv = 0.5 * b / dy
    lo_c = -h * (diff - adv)
    hi_c = -h * (diff + adv)
    main = 1.0 + h * (2.0 * diff + th)
    sub = lo_c.copy()
    sup = hi_c.copy()
    rhs_fix = np.zeros(len(idx))
    solvent = spec.phantom_solvent
    for end, coef, band in ((0, lo_c, sub), (-1, hi_c, sup)):
        k = idx[end]
        # neighbour beyond this end of the active run
        at_face = k == 0 if end == 0 else k == spec.n_nodes - 1
        phantom_ok = bool(solvent[0] if end == 0 else solvent[-1])
        if at_face and phantom_ok:
            # ghost = 2 x_end - x_inner
            main[end] += 2.0 * coef[end]
            other = sup if end == 0 else sub
            other[end] -= coef[end]
        elif at_face and spec.replicate_edges:
            main[end] += coef[end]
        else:
            rhs_fix[end] -= coef[end] * spec.ext_value
        band[end] = 0.0
    return Tridiag(sub, main, sup), rhs_fix, idx


def fd_step(
    next_field: ValueField,
    step: int,
    sp: SchemeParams,
    p: MarketParams,
    diag: StepDiagnostics | None = None,
) -> ValueField:
    """One implicit step from ``t_{step+1}`` to ``t_step`` without the obstacles."""
    t0 = _time.perf_counter()
    spec = next_field.spec
    system, rhs_fix, idx = implicit_system(next_field, sp, p)
    if not system.diagonally_dominant():
        log.warning("implicit system at step %d is not diagonally dominant", step)
    y = spec.points[idx]
    prev = next_field.values.ravel()[idx]
    est = ConditionalEstimates(prev, next_field.grad.reshape(1, -1)[:, idx].T, np.zeros((len(idx), 0)))
    cnt = [0]
    # discounting is implicit, so only the consumption part is taken from F
    cons = nonlinear_F(y, est, p, sp, cnt) + coeff_vartheta(y, p) * prev
    try:
        new = system.solve(prev + sp.h * cons + rhs_fix)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"implicit solve failed at step {step}: {exc}") from exc
    t_k = step * sp.h
    bad = ~np.isfinite(new)
    if bad.any():
        raise NonFiniteValueError(t_k, y[np.argmax(bad)])
    vals = np.full(spec.n_nodes, spec.ext_value)
    vals[idx] = new
    if diag is not None:
        diag.clamp_count += cnt[0]
        diag.wall_time += _time.perf_counter() - t0
    return ValueField.from_values(spec, t_k, vals)


def solve_fd_1d(p: MarketParams, sp: SchemeParams, grid, retain_times=(), adjust: bool = True) -> SolveResult:
    if p.n_assets != 1:
        raise ValueError("the finite-difference reference handles one risky asset only")
    return solve(p, sp, grid, retain_times=retain_times, adjust=adjust, step_fn=fd_step)


@dataclass(frozen=True)
class FieldComparison:
    time: float
    max_rel_diff: float
    buy_offset_cells: float
    sell_offset_cells: float


def compare_fields(a: SolveResult, b: SolveResult) -> list[FieldComparison]:
    """Per retained slice: max |phi_a - phi_b| / (1 + |phi_a|) and boundary offsets in cells."""
    if not a.grid.same_layout(b.grid):
        raise ValueError("results live on different grids")
    ta, tb = a.slice_times, b.slice_times
    if ta.shape != tb.shape or not np.allclose(ta, tb, rtol=0, atol=1e-9):
        raise ValueError("results retain different times")
    act = a.grid.active
    out = []
    one_dim = a.grid.ndim == 1
    for sa, sb in zip(a.slices, b.slices):
        va, vb = sa.values[act], sb.values[act]
        rel = float(np.max(np.abs(va - vb) / (1.0 + np.abs(va))))
        bo = so = np.nan
        if one_dim:
            ka, kb = a.boundaries.at(sa.time), b.boundaries.at(sb.time)
            dy = float(a.grid.dy[0])
            bo = abs(a.boundaries.buy[ka] - b.boundaries.buy[kb]) / dy
            so = abs(a.boundaries.sell[ka] - b.boundaries.sell[kb]) / dy
        out.append(FieldComparison(float(sa.time), rel, float(bo), float(so)))
    return out
