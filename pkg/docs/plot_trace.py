"""Plot SI-SDR against iteration from one or more ``trace.csv`` files.

    python docs/plot_trace.py out_laplace/trace.csv out_glu/trace.csv -o trace.png

Each file is drawn as the median over sources with the per-source curves
faint behind it.  Requires matplotlib.
"""
import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def load(path):
    curves = defaultdict(dict)
    with open(path) as fh:
        for row in csv.DictReader(fh):
            curves[int(row["source"])][int(row["iter"])] = float(row["si_sdr_db"])
    return np.array([[c[t] for t in sorted(c)] for _, c in sorted(curves.items())])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("traces", nargs="+")
    p.add_argument("-o", "--out", default="trace.png")
    args = p.parse_args()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for path in args.traces:
        data = load(path)
        line, = ax.plot(np.median(data, axis=0), label=path)
        ax.plot(data.T, color=line.get_color(), alpha=0.25, lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("SI-SDR [dB]")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
