"""Plots the CSV reports written by `prefopt analyze` and `prefopt report`.

usage: python scripts/plot.py ANALYSIS_DIR [COMPARISON_CSV] [--out DIR]
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def scatter(csv, out):
    df = pd.read_csv(csv)
    x, y = df.columns[:2]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.scatter(df[x], df[y], s=4, alpha=0.3)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    fig.tight_layout()
    fig.savefig(out / f"{csv.stem}.png", dpi=150)


def trend(csv, out):
    df = pd.read_csv(csv)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for col, label in [("reward_w", "chosen"), ("reward_l", "rejected")]:
        axes[0].plot(df["iteration"], df[col], marker="o", label=label)
    for col, label in [("logp_norm_w", "chosen"), ("logp_norm_l", "rejected")]:
        axes[1].plot(df["iteration"], df[col], marker="o", label=label)
    axes[0].set_ylabel("mean implicit reward")
    axes[1].set_ylabel("mean log-prob per token")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "reward_trend.png", dpi=150)


def comparison(csv, out):
    df = pd.read_csv(csv)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for series, g in df.groupby("series", sort=False):
        axes[0].plot(g["iteration"], g["score"], marker="o", label=series)
        axes[1].plot(g["length"], g["score"], marker="o", label=series)
    axes[0].set_xlabel("iteration")
    axes[1].set_xlabel("held-out response length")
    for ax in axes:
        ax.set_ylabel("held-out score")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "comparison.png", dpi=150)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("analysis_dir", type=Path)
    p.add_argument("comparison", type=Path, nargs="?")
    p.add_argument("--out", type=Path)
    args = p.parse_args()
    out = args.out or args.analysis_dir
    out.mkdir(parents=True, exist_ok=True)
    for name in ["length_logprob.csv", "sref_lengthdiff.csv"]:
        scatter(args.analysis_dir / name, out)
    trend(args.analysis_dir / "reward_trend.csv", out)
    if args.comparison:
        comparison(args.comparison, out)


if __name__ == "__main__":
    main()
