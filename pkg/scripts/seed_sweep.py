"""Train one configuration over several seeds and tabulate min/median/max E_m.

Example (desk scale, about an hour per seed on one core):

    python3 scripts/seed_sweep.py kovasznay --seeds 10 --width 32 --depth 2 \
        --iters 500 --interior 961 --boundary 200 --out runs/sweep

Each seed gets its own run directory with the usual reports; the summary is
written to ``summary.csv`` and printed as a small table.
"""

import argparse
import csv
import os
import statistics

from gnpinn import cli
from gnpinn.flows import atomic_write_text


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("problem", choices=cli.PROBLEMS)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/sweep")
    for key in ("optimizer", "solver", "constraints", "strategy"):
        ap.add_argument(f"--{key}")
    for key in ("iters", "width", "depth", "interior", "boundary", "initial"):
        ap.add_argument(f"--{key}", type=int)
    args = ap.parse_args()

    base = {k: getattr(args, k) for k in ("optimizer", "solver", "constraints", "strategy", "iters", "width", "depth", "interior", "boundary", "initial")}
    base["problem"] = args.problem
    rows = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        out = os.path.join(args.out, f"seed{seed:02d}")
        config = cli.parse_config(args.config, {**base, "seed": seed, "out": out})
        report = cli.run_experiment(config)
        if report.failure is not None:
            print(f"seed {seed}: stopped at {report.failure['iteration']} ({report.failure['message']})")
            continue
        rows.append({"seed": seed, **report.final.as_dict()})
        print(f"seed {seed}: E_m {report.final.mean:.3e}", flush=True)

    if not rows:
        raise SystemExit("no seed finished")
    keys = [k for k in rows[0] if k != "seed"]
    table = [["statistic"] + keys]
    for name, fn in (("min", min), ("median", statistics.median), ("max", max)):
        table.append([name] + [f"{fn(r[k] for r in rows):.3e}" for k in keys])

    os.makedirs(args.out, exist_ok=True)
    lines = [",".join(["seed"] + keys)] + [",".join([str(r["seed"])] + [repr(r[k]) for k in keys]) for r in rows]
    atomic_write_text(os.path.join(args.out, "summary.csv"), "\n".join(lines) + "\n")
    width = max(len(c) for row in table for c in row)
    for row in table:
        print("  ".join(c.rjust(width) for c in row))


if __name__ == "__main__":
    main()
