"""Counter-based normal variates.

Every draw is a pure function of ``(seed, step, node, sample, component)``,
so the numbers a node sees do not depend on how nodes are split between
workers or in which order they are visited.
"""

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 2.0 ** -53


def _mix(x):
    # splitmix64 finalizer; uint64 arithmetic wraps
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def stream_key(seed: int, step: int) -> np.uint64:
    s = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    k = _mix(s + _GOLDEN)
    k = _mix(k ^ _mix(np.array([step], dtype=np.uint64) * _GOLDEN + _M2))
    return k[0]


def uniforms(seed: int, step: int, node_ids, m: int, n: int) -> np.ndarray:
    """Open-interval uniforms of shape ``(len(node_ids), m, n)``."""
    key = stream_key(seed, step)
    nodes = np.asarray(node_ids, dtype=np.uint64)
    ctr = (nodes[:, None, None] * np.uint64(m) + np.arange(m, dtype=np.uint64)[None, :, None]) * np.uint64(n)
    ctr = ctr + np.arange(n, dtype=np.uint64)[None, None, :]
    x = _mix(ctr * _GOLDEN + key)
    x = _mix(x ^ key)
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def normals(seed: int, step: int, node_ids, m: int, n: int) -> np.ndarray:
    return ndtri(uniforms(seed, step, node_ids, m, n))
