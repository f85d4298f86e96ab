"""Plot a pushforward export next to the error field it should resemble.

    gnpinn run kovasznay --iters 20 --width 32 --depth 2 --interior 961 --boundary 200 --out runs/k20
    gnpinn pushforward runs/k20 --grid 101x101 --out runs/k20/push --engd
    python3 scripts/plot_pushforward.py runs/k20/push/pushforward.csv --component u

Needs matplotlib (``pip install .[scripts]``).
"""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def read_fields(path):
    fields = defaultdict(list)
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            fields[row[2]].append((float(row[0]), float(row[1]), float(row[3])))
    return header, {k: np.array(v) for k, v in fields.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv")
    ap.add_argument("--component", default="u")
    ap.add_argument("--out", default=None, help="image path (default: next to the CSV)")
    args = ap.parse_args()

    _, fields = read_fields(args.csv)
    names = [f"error_{args.component}"] + sorted(k for k in fields if k.startswith("push_") and k.endswith(f"_{args.component}"))
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.6), constrained_layout=True)
    for ax, name in zip(np.atleast_1d(axes), names):
        data = fields[name]
        im = ax.tricontourf(data[:, 0], data[:, 1], data[:, 2], levels=41, cmap="RdBu_r", vmin=-1, vmax=1)
        ax.set_title(name)
        ax.set_aspect("equal")
    fig.colorbar(im, ax=axes, shrink=0.8)
    out = args.out or args.csv.rsplit(".", 1)[0] + f"_{args.component}.png"
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == "__main__":
    main()
