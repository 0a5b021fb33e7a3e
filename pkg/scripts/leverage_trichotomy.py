"""Test 1 rerun with different drifts: sell boundary against the unit leverage line."""

import argparse

import numpy as np

from tcportfolio.config import preset_config
from tcportfolio.grid import build_grid
from tcportfolio.market import dai_yi_bounds
from tcportfolio.solver import solve


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--drifts", type=float, nargs="+", default=[0.12, 0.198, 0.21])
    ap.add_argument("--hi", type=float, default=2.0, help="upper box edge; leverage needs room above 1")
    ap.add_argument("--paths", type=int, default=5000)
    args = ap.parse_args()
    for a in args.drifts:
        cfg = preset_config("test1", market__drift=[a], grid__hi=[args.hi], scheme__m_paths=args.paths)
        p = cfg.market
        g = build_grid(p, cfg.grid.lo, cfg.grid.hi, cfg.grid.dy)
        res = solve(p, cfg.scheme, g)
        s = res.boundaries.sell[:-1]
        db = dai_yi_bounds(p)
        print(f"alpha={a}: leverage sign {db.leverage_sign:+.0f}, S in [{s.min():.4f}, {s.max():.4f}], "
              f"max |S-1| in cells {np.max(np.abs(s - 1.0)) / g.dy[0]:.2f}")


if __name__ == "__main__":
    main()
