import numpy as np
import pytest

from tcportfolio.grid import build_grid
from tcportfolio.market import MarketParams, dai_yi_bounds
from tcportfolio.mc import SchemeParams
from tcportfolio.obstacle import BUY, NOTRADE, SELL, RegionLabels
from tcportfolio.solver import (
    BoundaryReport,
    check_dai_yi,
    check_merton_containment,
    check_no_buy_near_maturity,
    check_region_count,
    correlation_elongation_sign,
    extract_boundaries,
    merton_brackets,
    no_buy_window,
    notrade_covariance,
    retained_steps,
    solve,
)

from conftest import market_test1, market_test2


@pytest.fixture(scope="module")
def coarse_test1():
    """Test 1 on a coarse desk grid; shared by the tests below."""
    p = market_test1()
    g = build_grid(p, -0.2, 1.2, 0.05)
    sp = SchemeParams.for_horizon(5.0, 0.1, dy=g.dy, m_paths=400, seed=3, common_random_numbers=True)
    return solve(p, sp, g)


def test_zero_steps_gives_terminal_slice(p1):
    g = build_grid(p1, -0.2, 1.2, 0.1)
    sp = SchemeParams(h=0.1, n_steps=0, dy=g.dy, m_paths=10)
    res = solve(p1, sp, g)
    assert len(res.slices) == 1 and len(res.labels) == 1
    assert res.slices[0].time == p1.horizon
    assert res.diagnostics == []


def test_retained_steps():
    keep = retained_steps(250, 0.02, [0.9])
    assert {0, 250, 45}.issubset(keep)
    assert all(k % 13 == 0 for k in keep - {250, 45})
    with pytest.raises(ValueError):
        retained_steps(50, 0.02, [0.911])


def test_inputs_rejected(p1):
    p4 = MarketParams(
        rate=0.07, drift=[0.1] * 4, cov=np.eye(4) * 0.1, buy_cost=0.1, sell_cost=0.1,
        discount=0.1, risk_aversion=0.2, horizon=1.0,
    )
    with pytest.raises(ValueError, match="N=3"):
        solve(p4, SchemeParams(h=0.5, n_steps=2, dy=(0.5,) * 4, m_paths=1), None)
    g = build_grid(p1, -0.2, 1.2, 0.1)
    with pytest.raises(ValueError):
        solve(p1, SchemeParams(h=0.1, n_steps=3, dy=g.dy, m_paths=1), g)
    with pytest.raises(ValueError):
        solve(p1, SchemeParams(h=0.1, n_steps=50, dy=(0.2,), m_paths=1), g)


def test_slices_ordered_and_finite(coarse_test1):
    t = coarse_test1.slice_times
    assert np.all(np.diff(t) > 0)
    assert t[0] == 0.0 and t[-1] == 5.0
    for f in coarse_test1.slices:
        assert np.all(np.isfinite(f.values[f.spec.active]))
    assert len(coarse_test1.labels) == coarse_test1.scheme.n_steps + 1


def test_coarse_test1_dai_yi(coarse_test1):
    checks = check_dai_yi(coarse_test1.boundaries, coarse_test1.params, maturity_shift=2 * 0.1)
    assert [c.name for c in checks] == ["B<S", "S>=S_lower", "S<1", "B<=B_upper", "B=0_near_maturity"]
    assert all(c.passed for c in checks), checks


def test_regions_ordered_along_axis(coarse_test1):
    y = coarse_test1.grid.axes[0]
    for lab in coarse_test1.labels:
        c = lab.codes[0]
        b, n, s = y[c == BUY], y[c == NOTRADE], y[c == SELL]
        if b.size and n.size:
            assert b.max() < n.min()
        if n.size and s.size:
            assert n.max() < s.min()
        if b.size and s.size:
            assert b.max() < s.min()


def test_boundaries_consistent_with_labels(coarse_test1):
    rep = coarse_test1.boundaries
    y = coarse_test1.grid.axes[0]
    for k, lab in enumerate(coarse_test1.labels):
        c = lab.codes[0]
        assert np.all(y[c == BUY] < rep.buy[k])
        assert np.all(y[c == SELL] > rep.sell[k])
        assert rep.buy[k] <= rep.sell[k]


def test_no_buying_near_maturity(coarse_test1):
    p = coarse_test1.params
    tau = dai_yi_bounds(p).tau
    rep = coarse_test1.boundaries
    late = (rep.times >= p.horizon - tau + 0.2 - 1e-9) & (rep.times < p.horizon)
    assert np.all(rep.buy[late] == 0.0)


def test_post_sweep_feasible(coarse_test1):
    tol = coarse_test1.scheme.adjust_tol
    assert max(d.max_violation for d in coarse_test1.diagnostics) <= tol


def test_rerun_bit_identical(coarse_test1):
    p = coarse_test1.params
    g = coarse_test1.grid
    sp = SchemeParams.for_horizon(
        5.0, 0.1, dy=g.dy, m_paths=400, seed=3, common_random_numbers=True, workers=2
    )
    again = solve(p, sp, g)
    for a, b in zip(coarse_test1.slices, again.slices):
        assert np.array_equal(a.values, b.values)
    assert np.array_equal(coarse_test1.boundaries.buy, again.boundaries.buy)
    assert np.array_equal(coarse_test1.boundaries.sell, again.boundaries.sell)


def _labels_1d(spec, codes, t=0.0):
    return RegionLabels(spec, t, np.asarray(codes, dtype=np.int8)[None])


def test_extract_boundaries_synthetic(p1):
    g = build_grid(p1, 0.0, 1.0, 0.1)
    nt_only = _labels_1d(g, np.zeros(11))
    mixed = _labels_1d(g, [BUY] * 3 + [NOTRADE] * 4 + [SELL] * 4, t=1.0)
    no_buy = _labels_1d(g, [NOTRADE] * 6 + [SELL] * 5, t=2.0)
    rep = extract_boundaries([nt_only, mixed, no_buy], g)
    assert rep.buy[0] == 0.0 and rep.sell[0] == pytest.approx(1.0) and rep.degenerate[0]
    assert rep.buy[1] == pytest.approx(0.25) and rep.sell[1] == pytest.approx(0.65)
    assert rep.buy[2] == 0.0 and rep.sell[2] == pytest.approx(0.55)
    assert not rep.degenerate[1:].any()


def test_dai_yi_detects_crossing(p1):
    rep = BoundaryReport(
        times=np.array([0.0, 1.0, 5.0]), dy=np.array([0.02]), buy=np.array([0.3, 0.5, 0.0]),
        sell=np.array([0.45, 0.42, 0.4]), boundary_nodes=[{}] * 3, degenerate=np.zeros(3, dtype=bool),
    )
    first = check_dai_yi(rep, p1)[0]
    assert first.name == "B<S" and not first.passed and first.margin > 0


def test_dai_yi_sign_cases():
    rep = BoundaryReport(
        times=np.array([0.0, 5.0]), dy=np.array([0.02]), buy=np.array([0.0, 0.0]),
        sell=np.array([1.3, 1.3]), boundary_nodes=[{}] * 2, degenerate=np.zeros(2, dtype=bool),
    )
    names = {c.name: c for c in check_dai_yi(rep, market_test1(drift=[0.21]))}
    assert names["S>1"].passed
    names = {c.name: c for c in check_dai_yi(rep, market_test1(drift=[0.198]))}
    assert not names["S=1"].passed


def _merton_p(costs=1e-6):
    return MarketParams(
        rate=0.07, drift=[0.14, 0.12], cov=np.diag([0.16, 0.1225]), buy_cost=costs, sell_cost=costs,
        discount=0.1, risk_aversion=-1.0, horizon=1.0,
    )


def _box_labels(spec, lo, hi, t=0.0):
    codes = np.zeros((2,) + spec.counts, dtype=np.int8)
    for i in range(2):
        y = spec.points[:, i].reshape(spec.counts)
        codes[i] = np.where(y < lo[i], BUY, np.where(y > hi[i], SELL, NOTRADE))
    return RegionLabels(spec, t, codes)


class _Result:
    def __init__(self, labels, grid):
        self.labels = labels
        self.grid = grid

    def labels_at(self, t):
        return [lab for lab in self.labels if abs(lab.time - t) < 1e-9][0]


def test_merton_brackets_and_containment():
    p = _merton_p()
    g = build_grid(p, 0.0, 0.4, 0.01)
    lab = _box_labels(g, [0.205, 0.195], [0.225, 0.215], t=0.9)
    lo, hi = merton_brackets(lab, np.array([0.21875, 0.20408]))
    assert lo == pytest.approx([0.205, 0.195]) and hi == pytest.approx([0.225, 0.215])
    res = _Result([lab], g)
    assert check_merton_containment(res, p, times=[0.9]).passed
    off = _box_labels(g, [0.3, 0.3], [0.35, 0.35], t=0.9)
    assert not check_merton_containment(_Result([off], g), p, times=[0.9]).passed
    with pytest.raises(ValueError):
        check_merton_containment(res, _merton_p(0.01))


def test_zero_excess_merton_point_near_origin():
    p = MarketParams(
        rate=0.07, drift=[0.07, 0.07], cov=np.diag([0.16, 0.1225]), buy_cost=1e-6, sell_cost=1e-6,
        discount=0.1, risk_aversion=-1.0, horizon=1.0,
    )
    g = build_grid(p, 0.0, 0.4, 0.01)
    lab = _box_labels(g, [-1.0, -1.0], [0.005, 0.005])
    assert check_merton_containment(_Result([lab], g), p, times=[0.0]).passed


def test_elongation_sign_synthetic(p2):
    g = build_grid(p2, 0.0, 1.0, 0.05)
    y1 = g.points[:, 0].reshape(g.counts)
    y2 = g.points[:, 1].reshape(g.counts)

    def lab_of(mask):
        codes = np.where(mask, NOTRADE, SELL).astype(np.int8)
        return RegionLabels(g, 0.0, np.stack([codes, codes]))

    square = (np.abs(y1 - 0.5) <= 0.2) & (np.abs(y2 - 0.5) <= 0.2)
    assert correlation_elongation_sign(lab_of(square)) == 0
    diag = (np.abs(y1 - y2) <= 0.1) & (np.abs(y1 + y2 - 1.0) <= 0.6)
    assert correlation_elongation_sign(lab_of(diag)) == 1
    anti = (np.abs(y1 + y2 - 1.0) <= 0.1) & (np.abs(y1 - y2) <= 0.6)
    assert correlation_elongation_sign(lab_of(anti)) == -1
    assert notrade_covariance(lab_of(anti)) < 0
    tiny = (np.abs(y1 - 0.5) < 0.03) & (np.abs(y2 - 0.5) < 0.03)
    with pytest.raises(ValueError):
        correlation_elongation_sign(lab_of(tiny))


def test_no_buy_window(p2):
    tau = np.log(1.05 / 0.95) / np.array([0.14, 0.12])
    assert no_buy_window(p2) == pytest.approx(min(0.1, tau.min()))
    assert no_buy_window(p2, cap=10.0) == pytest.approx(tau.min())
    flat = market_test2(drift=[0.0, 0.0])
    assert no_buy_window(flat) == 0.0


def test_no_buy_and_region_checks(p2):
    g = build_grid(p2, 0.0, 1.0, 0.1)
    nt = RegionLabels(g, 0.95, np.zeros((2,) + g.counts, dtype=np.int8))
    buy = RegionLabels(g, 0.97, np.ones((2,) + g.counts, dtype=np.int8))
    sp = SchemeParams(h=0.01, n_steps=100, dy=g.dy, m_paths=1)

    class R:
        params, grid, scheme = p2, g, sp
        labels = [nt, buy]

        def labels_at(self, t):
            return nt if abs(t - 0.95) < 1e-9 else buy

    c = check_no_buy_near_maturity(R(), 0.1)
    assert not c.passed and c.margin == 2 * g.n_nodes
    r = check_region_count(R(), [0.95])
    assert not r.passed and r.margin == 8


def test_three_assets_coarse():
    from tcportfolio.config import preset_config

    cfg = preset_config("test3b", grid__hi=[0.7], grid__dy=[0.1], scheme__h=0.5, scheme__m_paths=50)
    g = build_grid(cfg.market, cfg.grid.lo, cfg.grid.hi, cfg.grid.dy)
    res = solve(cfg.market, cfg.scheme, g, retain_times=[0.5])
    assert res.grid.ndim == 3 and len(res.labels) == 3
    assert all(np.all(np.isfinite(f.values[g.active])) for f in res.slices)
    nodes = res.boundaries.boundary_nodes[res.boundaries.at(0.5)]
    assert res.labels_at(0.5).notrade_mask().any()
    assert sum(len(v) for v in nodes.values()) > 0
    assert np.all(np.isnan(res.boundaries.buy))
