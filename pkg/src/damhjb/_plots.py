"""Generic plotting script emitted next to the CSV outputs.

The package itself never imports matplotlib; plotting is optional and runs
out of process on the exported tables.
"""

PLOT_SCRIPT = '''#!/usr/bin/env python3
"""Plot the solver outputs in this directory (requires matplotlib)."""
import csv
import glob
import os
import sys

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    return header, rows


def surface(ax, x, y, v, xlabel, ylabel):
    xs = np.unique(x)
    ys = np.unique(y)
    vv = v.reshape(len(xs), len(ys))
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    ax.plot_surface(xx, yy, vv, cmap="viridis")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)


here = os.path.dirname(os.path.abspath(__file__))
os.chdir(here)

if os.path.exists("region.csv"):
    _, rows = load("region.csv")
    t, an, ls = rows[:, 0], rows[:, 1], rows[:, 2]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    if os.path.exists("theta.csv"):
        _, th = load("theta.csv")
        ts = np.unique(th[:, 0]); ys = np.unique(th[:, 1])
        field = th[:, 2].reshape(len(ts), len(ys))
        axes[0].contourf(ts, ys, field.T, levels=20)
        axes[0].set_title("violation cost level sets")
        axes[0].set_xlabel("t"); axes[0].set_ylabel("y")
    axes[1].plot(t, an, label="analytic")
    axes[1].plot(t, ls, "--", label="zero level")
    axes[1].legend(); axes[1].set_title("max controllable level")
    fig.tight_layout(); fig.savefig("viability.png", dpi=150)

for path in sorted(glob.glob("V_t*.csv")) + sorted(glob.glob("V_reconstructed_t*.csv")):
    header, rows = load(path)
    if rows.shape[1] < 3 or len(rows) == 0:
        continue
    fig = plt.figure(figsize=(6, 4))
    ax = fig.add_subplot(111, projection="3d")
    good = np.isfinite(rows[:, -1]) if "reconstructed" in path else slice(None)
    try:
        surface(ax, rows[:, 0], rows[:, 1], np.nan_to_num(rows[:, 2 if header[2] == "value" else -2]),
                header[0], header[1])
    except ValueError:
        continue
    ax.set_title(os.path.basename(path))
    fig.tight_layout(); fig.savefig(path.replace(".csv", ".png"), dpi=150)
    plt.close(fig)

if os.path.exists("W_levelsets.csv"):
    _, rows = load("W_levelsets.csv")
    for t in np.unique(rows[:, 0]):
        sel = rows[rows[:, 0] == t]
        ys = np.unique(sel[:, 1]); zs = np.unique(sel[:, 2])
        vv = sel[:, 3].reshape(len(ys), len(zs))
        fig, ax = plt.subplots(figsize=(5, 4))
        cs = ax.contourf(ys, zs, vv.T, levels=20)
        ax.contour(ys, zs, vv.T, levels=[1e-8], colors="white")
        fig.colorbar(cs)
        ax.set_xlabel("y"); ax.set_ylabel("z")
        ax.set_title(f"augmented value level sets, t={t:g}")
        fig.tight_layout(); fig.savefig(f"W_levelsets_t{t:g}.png", dpi=150)
        plt.close(fig)

print("plots written to", here)
'''
