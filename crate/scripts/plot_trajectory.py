"""Plot best-so-far fitness from one or more trajectory.csv files."""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("trajectories", nargs="+", help="trajectory.csv files, optionally label=path")
    parser.add_argument("--out", default="trajectory.png")
    args = parser.parse_args()

    fig, ax = plt.subplots(figsize=(7, 4))
    for entry in args.trajectories:
        label, _, path = entry.rpartition("=")
        path = path or entry
        df = pd.read_csv(path)
        ax.plot(df["evaluation_index"], df["best_so_far"], label=label or path)
        # Mark where each group's search begins.
        for start in df.groupby("group_index")["evaluation_index"].min().iloc[1:]:
            ax.axvline(start, color="0.85", linewidth=0.8, zorder=0)
    ax.set_xlabel("evaluation")
    ax.set_ylabel("best shaped fitness")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
