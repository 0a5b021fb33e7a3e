"""Print a two-asset composite label field as a character map.

    python scripts/region_map.py runs/test2a/regions_t45.csv
"""

import argparse
import csv

import numpy as np

# composite names look like "B1&N2"; one character per region
CHARS = {"N1&N2": ".", "B1&N2": "b", "N1&B2": "B", "S1&N2": "s", "N1&S2": "S",
         "B1&B2": "+", "S1&S2": "-", "B1&S2": "/", "S1&B2": "%"}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("path")
    args = ap.parse_args()
    with open(args.path) as fh:
        rows = list(csv.DictReader(fh))
    y1 = np.array([float(r["y1"]) for r in rows])
    y2 = np.array([float(r["y2"]) for r in rows])
    u1, u2 = np.unique(y1), np.unique(y2)
    grid = [[" "] * len(u1) for _ in u2]
    for a, b, r in zip(y1, y2, rows):
        grid[np.searchsorted(u2, b)][np.searchsorted(u1, a)] = CHARS.get(r["label"], "?")
    for row in reversed(grid):
        print("".join(row))
    counts = {}
    for r in rows:
        counts[r["label"]] = counts.get(r["label"], 0) + 1
    for k in sorted(counts):
        print(f"{k}: {counts[k]}")


if __name__ == "__main__":
    main()
