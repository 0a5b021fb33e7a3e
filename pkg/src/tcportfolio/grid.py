"""Tensor grids over a truncation box, value slices and their stencils.

Nodes are stored in one contiguous array per slice, C-ordered with axis 0 the
slowest. The box is an artificial truncation of the solvency region, so
off-box reads distinguish two cases:

* the off-box point is still solvent: stencils and interpolation both
  extrapolate the edge cell linearly;
* the off-box point is insolvent: both read the extension value (zero utility
  after forced liquidation for ``gamma > 0``, a large negative floor for
  ``gamma < 0``), except that ``gamma < 0`` replicates the edge node instead
  to keep values and derivatives bounded.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .market import MarketParams, liquidation_wealth, utility

# box-face overshoot below this is treated as rounding noise
FACE_GUARD = 1e-12


def extension_value(p: MarketParams, wealth_floor: float = 1e-8) -> float:
    """Value assigned on and beyond the solvency boundary."""
    if p.gamma > 0:
        return 0.0
    return float(utility(wealth_floor, p))


@dataclass(frozen=True)
class GridSpec:
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    dy: NDArray[np.float64]
    counts: tuple[int, ...]
    active: NDArray[np.bool_]
    ext_value: float
    replicate_edges: bool
    buy_cost: NDArray[np.float64]
    sell_cost: NDArray[np.float64]

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    def solvent(self, pts: NDArray[np.float64]) -> NDArray[np.bool_]:
        w = 1.0 + np.sum(np.minimum(-self.sell_cost * pts, self.buy_cost * pts), axis=-1)
        return w >= 0

    @cached_property
    def phantom_solvent(self) -> NDArray[np.bool_]:
        """Solvency of the one-node-wide phantom layer around the box."""
        axes = [np.concatenate([[a[0] - d], a, [a[-1] + d]]) for a, d in zip(self.axes, self.dy)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return self.solvent(np.stack(mesh, axis=-1))

    @cached_property
    def axes(self) -> list[NDArray[np.float64]]:
        return [self.lo[i] + self.dy[i] * np.arange(c) for i, c in enumerate(self.counts)]

    @cached_property
    def points(self) -> NDArray[np.float64]:
        """All node coordinates, shape ``(n_nodes, N)`` in storage order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def active_flat(self) -> NDArray[np.intp]:
        return np.flatnonzero(self.active.ravel())

    @cached_property
    def strides(self) -> NDArray[np.intp]:
        return np.array([int(np.prod(self.counts[i + 1:])) for i in range(self.ndim)], dtype=np.intp)

    def node_index(self, multi: ArrayLike) -> int:
        return int(np.ravel_multi_index(tuple(np.asarray(multi, dtype=int)), self.counts))

    def node_point(self, flat: int) -> NDArray[np.float64]:
        return self.points[flat]

    def nearest_node(self, y: ArrayLike) -> tuple[int, ...]:
        s = np.rint((np.asarray(y, dtype=float) - self.lo) / self.dy).astype(int)
        return tuple(np.clip(s, 0, np.asarray(self.counts) - 1))

    def same_layout(self, other: "GridSpec") -> bool:
        return (
            self.counts == other.counts
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.dy, other.dy)
            and np.array_equal(self.active, other.active)
        )


def build_grid(
    p: MarketParams,
    lo: ArrayLike,
    hi: ArrayLike,
    dy: ArrayLike,
    wealth_floor: float = 1e-8,
) -> GridSpec:
    n = p.n_assets
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    dy = np.broadcast_to(np.asarray(dy, dtype=float), (n,)).copy()
    if np.any(dy <= 0):
        raise ValueError("grid spacing must be positive")
    if np.any(lo >= hi):
        raise ValueError("box needs lo < hi on every axis")
    counts = tuple(int(round((hi[i] - lo[i]) / dy[i])) + 1 for i in range(n))
    if min(counts) < 3:
        raise ValueError("need at least three nodes per axis")
    # hi is snapped onto the lattice
    hi = lo + dy * (np.asarray(counts) - 1)
    mesh = np.meshgrid(*[lo[i] + dy[i] * np.arange(c) for i, c in enumerate(counts)], indexing="ij")
    pts = np.stack(mesh, axis=-1)
    active = liquidation_wealth(pts, p) >= 0
    if not active.any():
        raise ValueError("truncation box does not intersect the solvency region")
    for arr in (lo, hi, dy, active):
        arr.setflags(write=False)
    return GridSpec(
        lo, hi, dy, counts, active, extension_value(p, wealth_floor), p.gamma < 0,
        p.buy_cost.copy(), p.sell_cost.copy(),
    )


def pair_list(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


def _padded(spec: GridSpec, values: NDArray[np.float64]) -> NDArray[np.float64]:
    pad = np.pad(values, 1, mode="reflect", reflect_type="odd")
    off = ~spec.phantom_solvent
    if spec.replicate_edges:
        pad[off] = np.pad(values, 1, mode="edge")[off]
    else:
        pad[off] = spec.ext_value
    # interior inactive nodes keep their stored extension value
    inner = tuple(slice(1, -1) for _ in range(values.ndim))
    pad[inner] = values
    return pad


def _shifted(pad: NDArray[np.float64], offsets: dict[int, int]) -> NDArray[np.float64]:
    sl = []
    for ax in range(pad.ndim):
        o = offsets.get(ax, 0)
        sl.append(slice(1 + o, pad.shape[ax] - 1 + o))
    return pad[tuple(sl)]


def gradient(spec: GridSpec, values: NDArray[np.float64]) -> NDArray[np.float64]:
    """Centered first differences on every axis, shape ``(N, *counts)``."""
    pad = _padded(spec, values)
    out = np.empty((spec.ndim,) + values.shape)
    for i in range(spec.ndim):
        out[i] = (_shifted(pad, {i: 1}) - _shifted(pad, {i: -1})) / (2.0 * spec.dy[i])
    return out


def cross_derivatives(spec: GridSpec, values: NDArray[np.float64]) -> NDArray[np.float64]:
    """Four-point mixed differences for every pair ``i < j``."""
    pairs = pair_list(spec.ndim)
    out = np.empty((len(pairs),) + values.shape)
    if not pairs:
        return out
    pad = _padded(spec, values)
    for n, (i, j) in enumerate(pairs):
        out[n] = (
            _shifted(pad, {i: 1, j: 1})
            + _shifted(pad, {i: -1, j: -1})
            - _shifted(pad, {i: 1, j: -1})
            - _shifted(pad, {i: -1, j: 1})
        ) / (4.0 * spec.dy[i] * spec.dy[j])
    return out


@dataclass
class ValueField:
    spec: GridSpec
    time: float
    values: NDArray[np.float64]
    grad: NDArray[np.float64] = field(repr=False)
    hess_cross: NDArray[np.float64] = field(repr=False)

    @classmethod
    def from_values(cls, spec: GridSpec, time: float, values: ArrayLike) -> "ValueField":
        v = np.array(values, dtype=float).reshape(spec.counts)
        v[~spec.active] = spec.ext_value
        g = gradient(spec, v)
        c = cross_derivatives(spec, v)
        # derivative caches are only meaningful on active nodes
        g[:, ~spec.active] = 0.0
        c[:, ~spec.active] = 0.0
        return cls(spec, time, v, g, c)

    @classmethod
    def from_function(cls, spec: GridSpec, time: float, fn) -> "ValueField":
        vals = np.full(spec.n_nodes, spec.ext_value)
        idx = spec.active_flat
        vals[idx] = fn(spec.points[idx])
        return cls.from_values(spec, time, vals)

    def stacked(self) -> NDArray[np.float64]:
        """Values, gradient and cross fields as rows of one ``(F, n_nodes)`` array."""
        n = self.spec.n_nodes
        return np.concatenate(
            [self.values.reshape(1, n), self.grad.reshape(-1, n), self.hess_cross.reshape(-1, n)]
        )

    def stacked_fill(self) -> NDArray[np.float64]:
        nf = 1 + self.grad.shape[0] + self.hess_cross.shape[0]
        fill = np.zeros(nf)
        fill[0] = self.spec.ext_value
        return fill

    def value_at(self, y: ArrayLike):
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        out = interpolate(self.spec, self.values.reshape(1, -1), np.atleast_2d(y), np.array([self.spec.ext_value]))[0]
        return float(out[0]) if single else out

    def first_derivative(self, axis: int, node) -> float:
        return float(self.grad[axis][_as_multi(self.spec, node)])

    def cross_derivative(self, i: int, j: int, node) -> float:
        if i == j:
            raise ValueError("cross_derivative needs two distinct axes")
        i, j = min(i, j), max(i, j)
        k = pair_list(self.spec.ndim).index((i, j))
        return float(self.hess_cross[k][_as_multi(self.spec, node)])

    def copy(self) -> "ValueField":
        return ValueField(self.spec, self.time, self.values.copy(), self.grad.copy(), self.hess_cross.copy())


def _as_multi(spec: GridSpec, node) -> tuple[int, ...]:
    if np.ndim(node) == 0:
        return np.unravel_index(int(node), spec.counts)
    return tuple(int(k) for k in node)


def interpolation_weights(spec: GridSpec, points: NDArray[np.float64]):
    """Corner indices and weights of the multilinear stencil.

    Returns ``(index, weight, valid)`` each of shape ``(2**N, P)``. ``valid`` is
    False for corners that fall outside the box; their ``index`` is clipped and
    must not be trusted.
    """
    pts = np.asarray(points, dtype=float)
    n = spec.ndim
    counts = np.asarray(spec.counts)
    s = (pts - spec.lo) / spec.dy
    top = counts - 1
    # snap rounding-level overshoot back onto the faces
    guard = FACE_GUARD / spec.dy
    s = np.where((s < 0) & (s > -guard), 0.0, s)
    s = np.where((s > top) & (s < top + guard), top, s)
    # queries that sit on a node up to rounding read it exactly
    near = np.rint(s)
    s = np.where(np.abs(s - near) < 1e-10, near, s)
    solvent = spec.solvent(pts)
    # insolvent points beyond the box: replicate the face or read the fill
    if spec.replicate_edges:
        s = np.where(solvent[:, None], s, np.clip(s, 0, top))
    base = np.floor(s).astype(np.intp)
    # keep points on the upper face inside the last cell
    base = np.where(s == top, top - 1, base)
    # solvent points beyond the box extrapolate the edge cell linearly
    base = np.where(solvent[:, None], np.clip(base, 0, top - 1), base)
    frac = s - base
    n_corner = 1 << n
    index = np.zeros((n_corner, pts.shape[0]), dtype=np.intp)
    weight = np.ones((n_corner, pts.shape[0]))
    valid = np.ones((n_corner, pts.shape[0]), dtype=bool)
    for c in range(n_corner):
        for ax in range(n):
            bit = (c >> (n - 1 - ax)) & 1
            k = base[:, ax] + bit
            ok = (k >= 0) & (k <= top[ax])
            valid[c] &= ok
            index[c] += np.clip(k, 0, top[ax]) * spec.strides[ax]
            weight[c] *= frac[:, ax] if bit else 1.0 - frac[:, ax]
    return index, weight, valid


def interpolate(
    spec: GridSpec,
    fields: NDArray[np.float64],
    points: NDArray[np.float64],
    fill: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Multilinear interpolation of ``fields`` (shape ``(F, n_nodes)``) at points.

    Corners outside the box contribute ``fill`` (per field). Inactive nodes are
    expected to already hold their fill values.
    """
    index, weight, valid = interpolation_weights(spec, points)
    out = np.zeros((fields.shape[0], index.shape[1]))
    for c in range(index.shape[0]):
        vals = fields[:, index[c]]
        if not valid[c].all():
            vals = np.where(valid[c][None, :], vals, fill[:, None])
        out += weight[c][None, :] * vals
    return out


def write_slice_csv(path, f: ValueField) -> None:
    """One row per active node, columns ``y1..yN,phi``."""
    from .io_utils import atomic_write, fmt

    n = f.spec.ndim
    header = ",".join([f"y{i + 1}" for i in range(n)] + ["phi"])
    pts = f.spec.points
    vals = f.values.ravel()
    lines = [header]
    for k in f.spec.active_flat:
        lines.append(",".join([fmt(v) for v in pts[k]] + [fmt(vals[k])]))
    atomic_write(path, "\n".join(lines) + "\n")
