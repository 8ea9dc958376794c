"""Plot OOD error-vs-time series for each model (needs matplotlib).

    python scripts/plot_ood.py runs/reports/default [--out ood.png]

Reads every ``series_ood*_{model}.csv`` in the report directory and draws one
panel per state group (per-step RMS over the group's three axes).
"""

import argparse
import sys
from pathlib import Path


from quadwm.evaluation import parse_series_csv
from quadwm.types import GROUPS


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("reports", type=Path)
    p.add_argument("--out", type=Path, default=None, help="image path (default: <reports>/ood_series.png)")
    args = p.parse_args(argv)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; the CSV files are the primary output", file=sys.stderr)
        return 1
    files = sorted(args.reports.glob("series_ood*.csv"))
    if not files:
        print(f"no series_ood*.csv in {args.reports}", file=sys.stderr)
        return 1
    fig, axes = plt.subplots(len(GROUPS), 1, figsize=(8, 2.2 * len(GROUPS)), sharex=True)
    for f in files:
        series = parse_series_csv(f.read_text())
        label = f.stem.removeprefix("series_")
        for ax, g in zip(axes, GROUPS):
            ax.plot(series.times, series.group_error(g), label=label)
    for ax, g in zip(axes, GROUPS):
        ax.set_ylabel(g)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    axes[-1].set_xlabel("time since rollout start [s]")
    out = args.out or args.reports / "ood_series.png"
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
