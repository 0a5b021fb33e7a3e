import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tcportfolio.grid import (
    ValueField,
    build_grid,
    extension_value,
    interpolate,
    interpolation_weights,
    write_slice_csv,
)
from tcportfolio.market import MarketParams

from conftest import market_test1, market_test2


def test_build_grid_examples(p1, p2):
    g = build_grid(p1, 0.0, 1.0, 0.01)
    assert g.counts == (101,) and g.active.all()
    g = build_grid(p1, 19.5, 20.5, 0.1)
    y = g.axes[0]
    assert np.array_equal(g.active, y <= 20.0 + 1e-9)
    assert not g.active.all()
    g = build_grid(p2, 0.0, 1.0, 0.05)
    assert g.counts == (21, 21) and g.active.all()


def test_build_grid_errors(p1):
    with pytest.raises(ValueError):
        build_grid(p1, 1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        build_grid(p1, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        build_grid(p1, 30.0, 31.0, 0.1)


@pytest.mark.parametrize("gamma,expected", [(0.2, 0.0), (0.5, 0.0), (-1.0, -1e8)])
def test_extension_value(gamma, expected):
    assert extension_value(market_test1(risk_aversion=gamma)) == pytest.approx(expected)


def _field(spec, fn, t=0.0):
    return ValueField.from_function(spec, t, fn)


def test_value_at_examples(p1):
    g = build_grid(p1, 0.0, 1.0, 0.5)
    f = ValueField.from_values(g, 0.0, [4.0, 6.0, 7.0])
    assert f.value_at([0.0]) == 4.0
    assert f.value_at([0.25]) == 5.0
    assert f.value_at([0.5]) == 6.0
    assert f.value_at([25.0]) == 0.0


def test_first_derivative_examples(p1):
    g = build_grid(p1, 0.0, 1.0, 0.01)
    assert _field(g, lambda y: np.full(len(y), 3.0)).first_derivative(0, 50) == 0.0
    assert _field(g, lambda y: y[:, 0] ** 2).first_derivative(0, 50) == pytest.approx(1.0, abs=1e-12)
    assert _field(g, lambda y: y[:, 0] ** 3).first_derivative(0, 50) == pytest.approx(0.7501, abs=1e-12)


def test_cross_derivative_examples(p2):
    g = build_grid(p2, 0.0, 1.0, 0.01)
    node = (50, 50)
    f = _field(g, lambda y: y[:, 0] ** 2 + y[:, 1] ** 2)
    assert f.cross_derivative(0, 1, node) == pytest.approx(0.0, abs=1e-9)
    assert _field(g, lambda y: y[:, 0] * y[:, 1]).cross_derivative(0, 1, node) == pytest.approx(1.0, abs=1e-10)
    f = _field(g, lambda y: y[:, 0] ** 2 * y[:, 1])
    assert f.cross_derivative(0, 1, node) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        f.cross_derivative(1, 1, node)


def _quadratic(coef, n):
    c0, lin, quad = coef

    def fn(y):
        out = np.full(len(y), c0)
        for i in range(n):
            out = out + lin[i] * y[:, i]
            for j in range(n):
                out = out + quad[i][j] * y[:, i] * y[:, j]
        return out

    def grad(y):
        q = np.array(quad)
        return np.array(lin) + (q + q.T) @ y

    return fn, grad, np.array(quad)


coef3 = st.tuples(
    st.floats(-2, 2),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.lists(st.lists(st.floats(-2, 2), min_size=3, max_size=3), min_size=3, max_size=3),
)


def _p3():
    return MarketParams(
        rate=0.07, drift=[0.14, 0.12, 0.1], cov=np.diag([0.16, 0.1225, 0.09]), buy_cost=0.1, sell_cost=0.1,
        discount=0.1, risk_aversion=0.2, horizon=1.0,
    )


@given(coef3, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)))
def test_stencils_exact_on_quadratics(coef, multi):
    # interior nodes; face stencils use the phantom rule instead
    g = build_grid(_p3(), -0.2, 1.0, 0.2)
    flat = g.node_index(multi)
    fn, grad, quad = _quadratic(coef, 3)
    f = _field(g, fn)
    y = g.points[flat]
    scale = 1.0 + np.max(np.abs(f.values))
    for i in range(3):
        assert abs(f.first_derivative(i, flat) - grad(y)[i]) <= 1e-10 * scale
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        assert abs(f.cross_derivative(i, j, flat) - (quad[i, j] + quad[j, i])) <= 1e-10 * scale


@given(
    st.lists(st.floats(-3, 3), min_size=8, max_size=8),
    st.lists(st.tuples(st.floats(-0.2, 1.0), st.floats(-0.2, 1.0), st.floats(-0.2, 1.0)), min_size=1, max_size=20),
)
def test_interpolation_exact_on_multilinear(c, pts):
    g = build_grid(_p3(), -0.2, 1.0, 0.15)

    def fn(y):
        x1, x2, x3 = y[:, 0], y[:, 1], y[:, 2]
        return (
            c[0] + c[1] * x1 + c[2] * x2 + c[3] * x3 + c[4] * x1 * x2 + c[5] * x1 * x3 + c[6] * x2 * x3
            + c[7] * x1 * x2 * x3
        )

    f = _field(g, fn)
    q = np.array(pts)
    got = f.value_at(q)
    assert np.allclose(got, fn(q), rtol=1e-10, atol=1e-10 * (1 + np.abs(fn(q)).max()))


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0)), min_size=1, max_size=50))
def test_weights_nonnegative_and_normalised(pts):
    g = build_grid(market_test2(), 0.0, 1.0, 0.1)
    _, w, valid = interpolation_weights(g, np.array(pts))
    assert np.all(w >= -1e-15)
    assert np.allclose(w.sum(axis=0), 1.0, atol=1e-14)
    assert valid.all()


def test_values_reproduced_at_nodes(p2, rng):
    g = build_grid(p2, -0.2, 1.2, 0.1)
    f = ValueField.from_values(g, 0.0, rng.normal(size=g.n_nodes))
    assert np.array_equal(f.value_at(g.points), f.values.ravel())


def test_inactive_handling_only_touches_boundary_stencils(p1):
    # nodes above y=20 are inactive; queries with a fully active stencil must not see them
    g = build_grid(p1, 19.0, 20.5, 0.1)
    f = _field(g, lambda y: 2.0 * y[:, 0])
    inner = np.array([[19.05], [19.43], [19.88]])
    assert np.allclose(f.value_at(inner), 2.0 * inner[:, 0])
    g2 = build_grid(market_test1(risk_aversion=-1.0), 19.0, 20.5, 0.1)
    f2 = _field(g2, lambda y: 2.0 * y[:, 0])
    assert np.allclose(f2.value_at(inner), 2.0 * inner[:, 0])


def test_insolvent_query_reads_extension(p1):
    g = build_grid(p1, 0.0, 1.0, 0.1)
    f = _field(g, lambda y: 1.0 + y[:, 0])
    assert f.value_at([25.0]) == 0.0
    g = build_grid(market_test1(risk_aversion=-1.0), 0.0, 1.0, 0.1)
    f = _field(g, lambda y: 1.0 + y[:, 0])
    # gamma < 0 replicates the nearest face
    assert f.value_at([25.0]) == pytest.approx(2.0)


def test_solvent_offbox_extrapolates(p1):
    g = build_grid(p1, 0.0, 1.0, 0.1)
    f = _field(g, lambda y: 1.0 + 3.0 * y[:, 0])
    assert f.value_at([1.3]) == pytest.approx(4.9)
    assert f.value_at([-0.4]) == pytest.approx(-0.2)
    # phantom neighbours at the faces continue linear data exactly
    assert f.first_derivative(0, 0) == pytest.approx(3.0)
    assert f.first_derivative(0, 10) == pytest.approx(3.0)


def test_face_guard(p1):
    g = build_grid(p1, 0.0, 1.0, 0.1)
    f = _field(g, lambda y: 1.0 + y[:, 0])
    assert f.value_at([1.0 + 1e-14]) == pytest.approx(2.0, abs=1e-12)
    assert f.value_at([-1e-14]) == pytest.approx(1.0, abs=1e-12)


def test_inactive_nodes_hold_extension(p1):
    g = build_grid(market_test1(risk_aversion=-1.0), 19.5, 20.5, 0.1)
    f = _field(g, lambda y: np.ones(len(y)))
    assert np.all(f.values[~g.active] == g.ext_value)


def test_slice_csv_roundtrip(tmp_path, p2, rng):
    g = build_grid(p2, -0.2, 1.2, 0.1)
    f = ValueField.from_values(g, 0.0, rng.normal(size=g.n_nodes))
    path = tmp_path / "s.csv"
    write_slice_csv(path, f)
    lines = path.read_text().splitlines()
    assert lines[0] == "y1,y2,phi"
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    assert len(data) == g.active.sum()
    assert np.array_equal(data[:, 2], f.values.ravel()[g.active_flat])
    assert np.array_equal(data[:, :2], g.points[g.active_flat])


def test_interpolate_multiple_fields(p2):
    g = build_grid(p2, 0.0, 1.0, 0.25)
    a = g.points[:, 0] + 2 * g.points[:, 1]
    b = np.ones(g.n_nodes)
    out = interpolate(g, np.stack([a, b]), np.array([[0.3, 0.6]]), np.zeros(2))
    assert out[:, 0] == pytest.approx([1.5, 1.0])
