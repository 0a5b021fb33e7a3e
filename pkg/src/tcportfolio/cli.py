"""Command-line entry point: load a config, solve, check and write the outputs.

Exit codes: 0 success, 1 a property check failed, 2 runtime abort,
3 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
import time as _time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, RunConfig, load_config, preset_config, with_overrides, write_config
from .grid import build_grid, write_slice_csv
from .io_utils import atomic_write, write_csv
from .mc import NonFiniteValueError
from .obstacle import RegionInconsistencyError
from .reference_fd import compare_fields, solve_fd_1d
from .solver import (
    CheckResult,
    SolveResult,
    check_dai_yi,
    check_merton_containment,
    check_no_buy_near_maturity,
    check_region_count,
    correlation_elongation_sign,
    notrade_covariance,
    no_buy_window,
    solve,
)

log = logging.getLogger("tcportfolio")

EXIT_OK, EXIT_CHECK, EXIT_ABORT, EXIT_CONFIG = 0, 1, 2, 3
SMALL_COST = 1e-4


def step_index(t: float, h: float) -> int:
    return int(round(t / h))


def run_checks(result: SolveResult, cfg: RunConfig) -> list[CheckResult]:
    """Property checks that apply to the configured market."""
    p = result.params
    n = p.n_assets
    named = list(cfg.outputs.retain_times)
    small = bool(np.all(p.buy_cost <= SMALL_COST) and np.all(p.sell_cost <= SMALL_COST))
    out: list[CheckResult] = []
    if n == 1 and not small and p.excess[0] > 0:
        shift = cfg.checks.maturity_shift
        if shift is None:
            shift = 2.0 * result.scheme.h
        out += check_dai_yi(result.boundaries, p, cfg.checks.grid_tol, shift)
    if small:
        out.append(
            check_merton_containment(result, p, cfg.checks.tol_cells, times=named or None)
        )
        return out
    if n >= 2:
        window = no_buy_window(p, cfg.checks.maturity_window)
        if window > 0:
            out.append(check_no_buy_near_maturity(result, window))
    if n == 2 and named:
        out.append(check_region_count(result, named))
        a12 = p.cov[0, 1]
        if a12 != 0:
            want = int(np.sign(a12))
            for t in named:
                lab = result.labels_at(t)
                try:
                    sign = correlation_elongation_sign(lab)
                    cov = notrade_covariance(lab)
                except ValueError:
                    out.append(CheckResult(f"elongation_sign@t={t:g}", False, float("inf")))
                    continue
                out.append(CheckResult(f"elongation_sign@t={t:g}", sign == want, -want * cov))
    return out


def _region_rows(lab, spec):
    pts = spec.points
    comp = lab.composite().ravel()
    for k in spec.active_flat:
        yield [*pts[k], comp[k]]


def emit_plot_data(result: SolveResult, out_dir, values: bool = True, regions: bool = True) -> list[Path]:
    """Per retained slice region and value dumps plus boundary series.

    N=1: ``boundaries.csv`` holds ``t,B,S`` per retained slice and
    ``boundaries_steps.csv`` the same for every time step. N>1:
    ``boundary_t<k>.csv`` lists NOTRADE nodes with the neighbouring region.
    """
    out_dir = Path(out_dir)
    spec = result.grid
    h = result.scheme.h
    names = [f"y{i + 1}" for i in range(spec.ndim)]
    written: list[Path] = []
    rep = result.boundaries
    for f in result.slices:
        k = step_index(f.time, h)
        if values:
            path = out_dir / f"values_t{k}.csv"
            write_slice_csv(path, f)
            written.append(path)
        lab = result.labels_at(f.time)
        if regions:
            path = out_dir / f"regions_t{k}.csv"
            write_csv(path, names + ["label"], _region_rows(lab, spec))
            written.append(path)
        if spec.ndim > 1:
            nodes = rep.boundary_nodes[rep.at(f.time)]
            rows = [[*spec.points[i], region] for region, ids in nodes.items() for i in ids]
            path = out_dir / f"boundary_t{k}.csv"
            write_csv(path, names + ["neighbour"], rows)
            written.append(path)
    if spec.ndim == 1:
        rows = []
        for f in result.slices:
            j = rep.at(f.time)
            rows.append([rep.times[j], rep.buy[j], rep.sell[j]])
        path = out_dir / "boundaries.csv"
        write_csv(path, ["t", "B", "S"], rows)
        written.append(path)
        path = out_dir / "boundaries_steps.csv"
        write_csv(path, ["t", "B", "S"], zip(rep.times, rep.buy, rep.sell))
        written.append(path)
    return written


def _write_diagnostics(result: SolveResult, out_dir: Path) -> None:
    cols = [
        "step", "time", "clamp_count", "monotonicity_ratio", "min_value", "max_value",
        "sweeps", "adjusted_nodes", "unresolved_nodes", "max_violation",
    ]
    write_csv(out_dir / "diagnostics.csv", cols, ([getattr(d, c) for c in cols] for d in result.diagnostics))
    # wall times differ between runs, so they live apart from the reproducible files
    write_csv(
        out_dir / "timing.csv", ["step", "time", "wall_time"],
        ([d.step, d.time, d.wall_time] for d in result.diagnostics),
    )


def _report(cfg: RunConfig, label: str, result: SolveResult, checks: list[CheckResult]) -> list[str]:
    p = result.params
    rep = result.boundaries
    diag = result.diagnostics
    lines = [
        f"[{label}]",
        f"assets={p.n_assets} horizon={p.horizon:g} gamma={p.gamma:g} steps={result.scheme.n_steps} "
        f"h={result.scheme.h:g} paths={result.scheme.m_paths} seed={result.scheme.seed}",
        f"grid nodes={result.grid.n_nodes} active={int(result.grid.active.sum())} "
        f"counts={result.grid.counts}",
        f"retained slices={len(result.slices)} labelled steps={len(result.labels)}",
        f"degenerate no-trade slices={int(rep.degenerate[:-1].sum())}",
    ]
    if diag:
        lines.append(
            "max sweeps={} clamps={} unresolved={} worst post-projection violation={:.3g}".format(
                max(d.sweeps for d in diag),
                sum(d.clamp_count for d in diag),
                sum(d.unresolved_nodes for d in diag),
                max(d.max_violation for d in diag),
            )
        )
    if p.n_assets == 1:
        j0 = rep.at(0.0)
        lines.append(f"t=0: B={rep.buy[j0]:.6g} S={rep.sell[j0]:.6g}")
    for c in checks:
        lines.append(f"check {c.name}: {'PASS' if c.passed else 'FAIL'} margin={c.margin:.6g}")
    return lines


def _probe_writable(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".probe.")
    os.close(fd)
    os.unlink(tmp)


def _solve_one(cfg: RunConfig, kind: str, progress=None) -> SolveResult:
    g = cfg.grid
    grid = build_grid(cfg.market, g.lo, g.hi, g.dy, g.wealth_floor)
    if kind == "fd1d":
        return solve_fd_1d(cfg.market, cfg.scheme, grid, cfg.outputs.retain_times, cfg.adjust)
    return solve(cfg.market, cfg.scheme, grid, cfg.outputs.retain_times, cfg.adjust, progress=progress)


def _write_result(cfg: RunConfig, result: SolveResult, checks, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_plot_data(result, out_dir, cfg.outputs.dump_values, cfg.outputs.dump_regions)
    write_csv(out_dir / "checks.csv", ["property", "pass", "margin"], ([c.name, c.passed, c.margin] for c in checks))
    _write_diagnostics(result, out_dir)


def run(cfg: RunConfig, progress=None) -> int:
    """Solve, check and write every output under ``cfg.outputs.out_dir``."""
    out_dir = Path(cfg.outputs.out_dir)
    try:
        _probe_writable(out_dir)
    except OSError as exc:
        log.error("output directory %s is not writable: %s", out_dir, exc)
        return EXIT_ABORT
    kinds = ["mc", "fd1d"] if cfg.solver_kind == "both" else [cfg.solver_kind]
    results: dict[str, SolveResult] = {}
    report: list[str] = [f"tcportfolio {__version__}", f"preset={cfg.preset}", ""]
    failed = False
    try:
        for kind in kinds:
            t0 = _time.perf_counter()
            res = _solve_one(cfg, kind, progress)
            log.info("%s solve finished in %.1fs", kind, _time.perf_counter() - t0)
            checks = run_checks(res, cfg)
            failed |= not all(c.passed for c in checks)
            target = out_dir if kind == kinds[0] else out_dir / kind
            _write_result(cfg, res, checks, target)
            report += _report(cfg, kind, res, checks) + [""]
            results[kind] = res
        if len(results) == 2:
            cmp = compare_fields(results["mc"], results["fd1d"])
            write_csv(
                out_dir / "compare.csv",
                ["t", "max_rel_diff", "buy_offset_cells", "sell_offset_cells"],
                ([c.time, c.max_rel_diff, c.buy_offset_cells, c.sell_offset_cells] for c in cmp),
            )
            j0 = int(np.argmin([c.time for c in cmp]))
            report.append(
                f"[compare] t=0 max relative difference={cmp[j0].max_rel_diff:.4g} "
                f"boundary offsets B={cmp[j0].buy_offset_cells:g} S={cmp[j0].sell_offset_cells:g} cells"
            )
        write_config(cfg, out_dir / "config.txt")
        atomic_write(out_dir / "report.txt", "\n".join(report) + "\n")
    except (NonFiniteValueError, RegionInconsistencyError, np.linalg.LinAlgError, OSError) as exc:
        log.error("run aborted: %s", exc)
        return EXIT_ABORT
    except ValueError as exc:
        # inputs the solver rejects, such as too many assets for a full grid
        log.error("invalid run: %s", exc)
        return EXIT_CONFIG
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tcportfolio",
        description="Free-boundary solver for optimal investment and consumption with proportional costs.",
    )
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--config", help="path of a flat key = value config file")
    ap.add_argument("--out-dir")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--paths", type=int, help="Monte Carlo samples per node")
    ap.add_argument("--dt", type=float, help="time step h")
    ap.add_argument("--dy", type=float, help="grid spacing on every axis")
    ap.add_argument("--solver", choices=["mc", "fd1d", "both"])
    ap.add_argument("--workers", type=int)
    ap.add_argument("--no-adjust", action="store_true", help="skip the projection onto the constraints")
    ap.add_argument("--write-config", metavar="PATH", help="write the resolved config and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = load_config(Path(args.config))
    else:
        cfg = preset_config(args.preset or "test1")
    over: dict = {}
    if args.out_dir:
        over["output.dir"] = args.out_dir
    if args.seed is not None:
        over["scheme.seed"] = args.seed
    if args.paths is not None:
        over["scheme.m_paths"] = args.paths
    if args.dt is not None:
        over["scheme.h"] = args.dt
    if args.dy is not None:
        over["grid.dy"] = [args.dy] * cfg.market.n_assets
    if args.solver:
        over["run.solver"] = args.solver
    if args.workers is not None:
        over["scheme.workers"] = args.workers
    if args.no_adjust:
        over["run.adjust"] = False
    return with_overrides(cfg, **over) if over else cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.write_config:
        write_config(cfg, args.write_config)
        return EXIT_OK

    def progress(d):
        log.info("t=%.4g sweeps=%d violation=%.3g", d.time, d.sweeps, d.max_violation)

    code = run(cfg, progress if args.verbose else None)
    if code == EXIT_OK:
        print(f"done; outputs in {cfg.outputs.out_dir}")
    elif code == EXIT_CHECK:
        print(f"property checks failed; see {Path(cfg.outputs.out_dir) / 'report.txt'}", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
