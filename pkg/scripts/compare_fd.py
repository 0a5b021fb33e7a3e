"""Monte Carlo solver against the implicit finite-difference reference on Test 1."""

import argparse
from dataclasses import replace

import numpy as np

from tcportfolio.grid import build_grid
from tcportfolio.config import preset_config
from tcportfolio.reference_fd import compare_fields, solve_fd_1d
from tcportfolio.solver import solve


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, nargs="+", default=[5000])
    ap.add_argument("--dy", type=float, default=0.02)
    ap.add_argument("--dt", type=float, default=0.02)
    args = ap.parse_args()
    cfg = preset_config("test1", grid__dy=[args.dy], scheme__h=args.dt)
    p = cfg.market
    g = build_grid(p, cfg.grid.lo, cfg.grid.hi, cfg.grid.dy)
    fd = solve_fd_1d(p, cfg.scheme, g)
    for m in args.paths:
        sp = replace(cfg.scheme, m_paths=m)
        mc = solve(p, sp, g)
        rows = compare_fields(mc, fd)
        worst = max(max(r.buy_offset_cells, r.sell_offset_cells) for r in rows)
        print(f"M={m}: t=0 max rel diff {rows[0].max_rel_diff:.4g}, "
              f"max over slices {max(r.max_rel_diff for r in rows):.4g}, worst boundary offset {worst:g} cells")
        k = mc.boundaries.at(0.0)
        print(f"   t=0 MC B={mc.boundaries.buy[k]:.4f} S={mc.boundaries.sell[k]:.4f}  "
              f"FD B={fd.boundaries.buy[k]:.4f} S={fd.boundaries.sell[k]:.4f}")
    print("FD no-trade width over time:", np.round(fd.boundaries.sell - fd.boundaries.buy, 3)[::25])


if __name__ == "__main__":
    main()
