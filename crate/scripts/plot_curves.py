#!/usr/bin/env python3
"""Plot learning curves and per-child training losses of a training run.

Usage: plot_curves.py RUN_DIR [RUN_DIR ...] [--out FIGURE.png]

Reads RUN_DIR/curves.csv (probe accuracy of the smallest and biggest
children) and RUN_DIR/steps.csv (per-child loss per step).
"""

import argparse
import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def curves(run):
    series = defaultdict(list)
    path = os.path.join(run, "curves.csv")
    if os.path.exists(path):
        for r in read_rows(path):
            series[r["role"]].append((int(r["step"]), float(r["accuracy"])))
    return series


def losses(run, window=20):
    series = defaultdict(list)
    for r in read_rows(os.path.join(run, "steps.csv")):
        role = r["role"]
        if role.startswith("random"):
            role = "random"
        series[role].append((int(r["step"]), float(r["loss"])))
    smoothed = {}
    for role, pts in series.items():
        pts.sort()
        out = []
        for i in range(len(pts)):
            lo = max(0, i - window + 1)
            out.append((pts[i][0], sum(v for _, v in pts[lo : i + 1]) / (i + 1 - lo)))
        smoothed[role] = out
    return smoothed


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("runs", nargs="+")
    ap.add_argument("--out", default="curves.png")
    args = ap.parse_args()

    fig, (acc_ax, loss_ax) = plt.subplots(1, 2, figsize=(12, 4.5))
    for run in args.runs:
        name = os.path.basename(os.path.normpath(run))
        for role, pts in sorted(curves(run).items()):
            acc_ax.plot(*zip(*pts), label=f"{name} {role}")
        for role, pts in sorted(losses(run).items()):
            loss_ax.plot(*zip(*pts), label=f"{name} {role}")
    acc_ax.set_xlabel("step")
    acc_ax.set_ylabel("top-1 after calibration")
    acc_ax.legend(fontsize="small")
    loss_ax.set_xlabel("step")
    loss_ax.set_ylabel("training loss (moving average)")
    loss_ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
