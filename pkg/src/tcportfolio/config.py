"""Run configuration: flat ``section.key = <json>`` files and named presets.

Example::

    preset = "test1"
    market.drift = [0.21]
    grid.hi = [2.0]
    scheme.m_paths = 2000

Lines starting with ``#`` and blank lines are ignored. A ``preset`` line
loads that preset first; every other key overrides it. Without a preset the
``market.*`` and ``grid.*`` keys are required.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .market import MarketParams
from .mc import SchemeParams

SOLVER_KINDS = ("mc", "fd1d", "both")


class ConfigError(ValueError):
    def __init__(self, key: str | None, msg: str):
        self.key = key
        super().__init__(f"{key}: {msg}" if key else msg)


@dataclass(frozen=True)
class GridConfig:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    dy: tuple[float, ...]
    wealth_floor: float = 1e-8


@dataclass(frozen=True)
class OutputConfig:
    out_dir: str = "out"
    retain_times: tuple[float, ...] = ()
    dump_values: bool = True
    dump_regions: bool = True


@dataclass(frozen=True)
class CheckConfig:
    # None: two cells plus rounding slack
    grid_tol: float | None = None
    # None: two time steps
    maturity_shift: float | None = None
    tol_cells: int = 2
    maturity_window: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    market: MarketParams
    grid: GridConfig
    scheme: SchemeParams
    solver_kind: str = "mc"
    adjust: bool = True
    outputs: OutputConfig = field(default_factory=OutputConfig)
    checks: CheckConfig = field(default_factory=CheckConfig)
    preset: str | None = None

    def to_flat(self) -> dict[str, Any]:
        m, g, s, o, c = self.market, self.grid, self.scheme, self.outputs, self.checks
        flat: dict[str, Any] = {}
        if self.preset is not None:
            flat["preset"] = self.preset
        flat.update({
            "market.rate": m.rate,
            "market.drift": m.drift.tolist(),
            "market.cov": m.cov.tolist(),
            "market.buy_cost": m.buy_cost.tolist(),
            "market.sell_cost": m.sell_cost.tolist(),
            "market.discount": m.discount,
            "market.risk_aversion": m.risk_aversion,
            "market.horizon": m.horizon,
            "grid.lo": list(g.lo),
            "grid.hi": list(g.hi),
            "grid.dy": list(g.dy),
            "grid.wealth_floor": g.wealth_floor,
            "scheme.h": s.h,
            "scheme.m_paths": s.m_paths,
            "scheme.seed": s.seed,
            "scheme.clamp_eps": s.clamp_eps,
            "scheme.adjust_tol": s.adjust_tol,
            "scheme.max_sweeps": s.max_sweeps,
            "scheme.workers": s.workers,
            "scheme.common_random_numbers": s.common_random_numbers,
            "run.solver": self.solver_kind,
            "run.adjust": self.adjust,
            "output.dir": o.out_dir,
            "output.retain_times": list(o.retain_times),
            "output.values": o.dump_values,
            "output.regions": o.dump_regions,
            "checks.grid_tol": c.grid_tol,
            "checks.maturity_shift": c.maturity_shift,
            "checks.tol_cells": c.tol_cells,
            "checks.maturity_window": c.maturity_window,
        })
        return flat

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunConfig):
            return NotImplemented
        return self.to_flat() == other.to_flat()

    def __hash__(self):
        return hash(json.dumps(self.to_flat(), sort_keys=True))


def _num(key, v, positive=False, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(key, "must be positive")
    return float(v)


def _int(key, v, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(key, f"must be at least {minimum}")
    return v


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(key, f"expected true or false, got {v!r}")
    return v


def _vec(key, v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return (float(v),)
    if not isinstance(v, list) or not v or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    ):
        raise ConfigError(key, f"expected a number or a list of numbers, got {v!r}")
    return tuple(float(x) for x in v)


def _mat(key, v):
    if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
        raise ConfigError(key, "expected a list of rows")
    rows = [_vec(key, r) for r in v]
    if any(len(r) != len(rows) for r in rows):
        raise ConfigError(key, "matrix must be square")
    return rows


_MARKET_KEYS = {
    "rate", "drift", "cov", "sigma", "buy_cost", "sell_cost", "discount", "risk_aversion", "horizon",
}
_GRID_KEYS = {"lo", "hi", "dy", "wealth_floor"}
_SCHEME_KEYS = {
    "h", "m_paths", "seed", "clamp_eps", "adjust_tol", "max_sweeps", "workers", "common_random_numbers",
}
_RUN_KEYS = {"solver", "adjust"}
_OUTPUT_KEYS = {"dir", "retain_times", "values", "regions"}
_CHECK_KEYS = {"grid_tol", "maturity_shift", "tol_cells", "maturity_window"}
_SECTIONS = {
    "market": _MARKET_KEYS,
    "grid": _GRID_KEYS,
    "scheme": _SCHEME_KEYS,
    "run": _RUN_KEYS,
    "output": _OUTPUT_KEYS,
    "checks": _CHECK_KEYS,
}


def parse_flat(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(key, f"line {lineno}: duplicate key")
        try:
            out[key] = json.loads(val.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(key, f"line {lineno}: value is not valid JSON ({exc.msg})") from None
    for key in out:
        if key == "preset":
            continue
        sec, _, name = key.partition(".")
        if sec not in _SECTIONS or name not in _SECTIONS[sec]:
            raise ConfigError(key, "unknown key")
    return out


def from_flat(flat: dict[str, Any], base: dict[str, Any] | None = None) -> RunConfig:
    """Build a validated config from flat keys, on top of ``base`` when given."""
    merged = dict(base or {})
    if "market.sigma" in flat:
        merged.pop("market.cov", None)
    if "market.cov" in flat:
        merged.pop("market.sigma", None)
    merged.update(flat)
    g = merged.get

    def need(key):
        if key not in merged:
            raise ConfigError(key, "missing required key")
        return merged[key]

    n_assets = len(_vec("market.drift", need("market.drift")))

    def costs(key):
        v = _vec(key, need(key))
        if len(v) == 1 and n_assets > 1:
            v = v * n_assets
        return np.array(v)

    if "market.cov" in merged and "market.sigma" in merged:
        raise ConfigError("market.sigma", "give either market.cov or market.sigma")
    kwargs = dict(
        rate=_num("market.rate", need("market.rate")),
        drift=np.array(_vec("market.drift", need("market.drift"))),
        buy_cost=costs("market.buy_cost"),
        sell_cost=costs("market.sell_cost"),
        discount=_num("market.discount", need("market.discount")),
        risk_aversion=_num("market.risk_aversion", need("market.risk_aversion")),
        horizon=_num("market.horizon", need("market.horizon")),
    )
    try:
        if "market.sigma" in merged:
            market = MarketParams.from_sigma(np.array(_mat("market.sigma", merged["market.sigma"])), **kwargs)
        else:
            market = MarketParams(cov=np.array(_mat("market.cov", need("market.cov"))), **kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("market", str(exc)) from None

    def per_axis(key):
        v = _vec(key, need(key))
        if len(v) == 1:
            v = v * n_assets
        if len(v) != n_assets:
            raise ConfigError(key, f"expected {n_assets} entries")
        return v

    grid = GridConfig(
        lo=per_axis("grid.lo"),
        hi=per_axis("grid.hi"),
        dy=per_axis("grid.dy"),
        wealth_floor=_num("grid.wealth_floor", g("grid.wealth_floor", 1e-8), positive=True),
    )
    if any(d <= 0 for d in grid.dy):
        raise ConfigError("grid.dy", "must be positive")
    if any(a >= b for a, b in zip(grid.lo, grid.hi)):
        raise ConfigError("grid.hi", "must exceed grid.lo on every axis")
    try:
        scheme = SchemeParams.for_horizon(
            market.horizon,
            _num("scheme.h", g("scheme.h", 0.02), positive=True),
            dy=grid.dy,
            m_paths=_int("scheme.m_paths", g("scheme.m_paths", 5000), 1),
            seed=_int("scheme.seed", g("scheme.seed", 0), 0),
            clamp_eps=_num("scheme.clamp_eps", g("scheme.clamp_eps", 1e-12), positive=True),
            adjust_tol=_num("scheme.adjust_tol", g("scheme.adjust_tol", 1e-6)),
            max_sweeps=_int("scheme.max_sweeps", g("scheme.max_sweeps", 50), 1),
            workers=_int("scheme.workers", g("scheme.workers", 1), 1),
            common_random_numbers=_bool(
                "scheme.common_random_numbers", g("scheme.common_random_numbers", False)
            ),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("scheme", str(exc)) from None
    solver = g("run.solver", "mc")
    if solver not in SOLVER_KINDS:
        raise ConfigError("run.solver", f"expected one of {SOLVER_KINDS}, got {solver!r}")
    if solver != "mc" and n_assets != 1:
        raise ConfigError("run.solver", "the finite-difference reference needs a single asset")
    out_dir = g("output.dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output.dir", "expected a non-empty string")
    rt = g("output.retain_times", [])
    retain = () if rt == [] else _vec("output.retain_times", rt)
    outputs = OutputConfig(
        out_dir=out_dir,
        retain_times=retain,
        dump_values=_bool("output.values", g("output.values", True)),
        dump_regions=_bool("output.regions", g("output.regions", True)),
    )
    checks = CheckConfig(
        grid_tol=_num("checks.grid_tol", g("checks.grid_tol"), allow_none=True),
        maturity_shift=_num("checks.maturity_shift", g("checks.maturity_shift"), allow_none=True),
        tol_cells=_int("checks.tol_cells", g("checks.tol_cells", 2), 0),
        maturity_window=_num("checks.maturity_window", g("checks.maturity_window", 0.1)),
    )
    preset = g("preset")
    if preset is not None and not isinstance(preset, str):
        raise ConfigError("preset", "expected a string")
    return RunConfig(
        market=market,
        grid=grid,
        scheme=scheme,
        solver_kind=solver,
        adjust=_bool("run.adjust", g("run.adjust", True)),
        outputs=outputs,
        checks=checks,
        preset=preset,
    )


def _test2(a12: float) -> dict[str, Any]:
    return {
        "market.rate": 0.0,
        "market.drift": [0.14, 0.12],
        "market.cov": [[0.16, a12], [a12, 0.1225]],
        "market.buy_cost": [0.05, 0.05],
        "market.sell_cost": [0.05, 0.05],
        "market.discount": 0.1,
        "market.risk_aversion": 0.2,
        "market.horizon": 1.0,
        "grid.lo": [-0.2, -0.2],
        "grid.hi": [1.8, 1.8],
        "grid.dy": [0.05, 0.05],
        "scheme.h": 0.02,
        "scheme.m_paths": 2000,
        "scheme.common_random_numbers": True,
        "output.retain_times": [0.9],
    }


def _test3(correlated: bool) -> dict[str, Any]:
    cov = [[0.16, 0.0, 0.0], [0.0, 0.1225, 0.0], [0.0, 0.0, 0.09]]
    if correlated:
        cov = [[0.16, 0.014, 0.012], [0.014, 0.1225, 0.0105], [0.012, 0.0105, 0.09]]
    return {
        "market.rate": 0.07,
        "market.drift": [0.14, 0.12, 0.1],
        "market.cov": cov,
        "market.buy_cost": [0.1, 0.1, 0.1],
        "market.sell_cost": [0.1, 0.1, 0.1],
        "market.discount": 0.1,
        "market.risk_aversion": 0.2,
        "market.horizon": 1.0,
        "grid.lo": [-0.1, -0.1, -0.1],
        "grid.hi": [1.0, 1.0, 1.0],
        "grid.dy": [0.05, 0.05, 0.05],
        "scheme.h": 0.02,
        "scheme.m_paths": 1000,
        "scheme.common_random_numbers": True,
        "output.retain_times": [0.9],
    }


PRESETS: dict[str, dict[str, Any]] = {
    "test1": {
        "market.rate": 0.07,
        "market.drift": [0.12],
        "market.cov": [[0.16]],
        "market.buy_cost": [0.05],
        "market.sell_cost": [0.05],
        "market.discount": 0.1,
        "market.risk_aversion": 0.2,
        "market.horizon": 5.0,
        "grid.lo": [-0.2],
        "grid.hi": [1.2],
        "grid.dy": [0.02],
        "scheme.h": 0.02,
        "scheme.m_paths": 5000,
        "scheme.common_random_numbers": True,
    },
    "test2a": _test2(0.028),
    "test2b": _test2(-0.028),
    "test3a": _test3(False),
    "test3b": _test3(True),
    # two distinct assets of the ten-asset small-cost case
    "merton-smallcost": {
        "market.rate": 0.07,
        "market.drift": [0.14, 0.12],
        "market.cov": [[0.16, 0.0], [0.0, 0.1225]],
        "market.buy_cost": [1e-6, 1e-6],
        "market.sell_cost": [1e-6, 1e-6],
        "market.discount": 0.1,
        "market.risk_aversion": -1.0,
        "market.horizon": 1.0,
        "grid.lo": [0.0, 0.0],
        "grid.hi": [0.4, 0.4],
        "grid.dy": [0.01, 0.01],
        "scheme.h": 0.02,
        "scheme.m_paths": 2000,
        "scheme.common_random_numbers": True,
        "output.retain_times": [0.9],
    },
}


def preset_config(name: str, **overrides) -> RunConfig:
    """A preset with optional flat-key overrides given as ``section__key=value``."""
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    flat = {k.replace("__", "."): v for k, v in overrides.items()}
    flat["preset"] = name
    return from_flat(flat, PRESETS[name])


def parse_config_text(text: str) -> RunConfig:
    flat = parse_flat(text)
    base = None
    if "preset" in flat:
        name = flat["preset"]
        if name not in PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[name]
    return from_flat(flat, base)


def load_config(source: str | Path) -> RunConfig:
    """A preset name or the path of a config file."""
    if isinstance(source, str) and source in PRESETS:
        return preset_config(source)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(None, f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text)


def write_config(cfg: RunConfig, path: str | Path | None = None) -> str:
    """Serialise every key explicitly; the result reloads to an equal config."""
    lines = [f"{k} = {json.dumps(v)}" for k, v in cfg.to_flat().items()]
    text = "\n".join(lines) + "\n"
    if path is not None:
        from .io_utils import atomic_write

        atomic_write(path, text)
    return text


def with_overrides(cfg: RunConfig, **flat) -> RunConfig:
    """Rebuild ``cfg`` with flat-key overrides such as ``{"scheme.seed": 3}``."""
    return from_flat(flat, cfg.to_flat())


__all__ = [
    "CheckConfig", "ConfigError", "GridConfig", "OutputConfig", "PRESETS", "RunConfig",
    "load_config", "parse_config_text", "preset_config", "write_config", "with_overrides", "replace",
]
