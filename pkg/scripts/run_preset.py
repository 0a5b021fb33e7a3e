"""Run one or more presets through the CLI pipeline and print each report.

    python scripts/run_preset.py test1 test2a --out runs
"""

import argparse
from pathlib import Path

from tcportfolio.cli import run
from tcportfolio.config import PRESETS, preset_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("presets", nargs="+", choices=sorted(PRESETS))
    ap.add_argument("--out", default="runs")
    ap.add_argument("--paths", type=int)
    args = ap.parse_args()
    for name in args.presets:
        over = {"output__dir": str(Path(args.out) / name)}
        if args.paths:
            over["scheme__m_paths"] = args.paths
        cfg = preset_config(name, **over)
        code = run(cfg)
        print((Path(cfg.outputs.out_dir) / "report.txt").read_text())
        print(f"{name}: exit {code}")


if __name__ == "__main__":
    main()
