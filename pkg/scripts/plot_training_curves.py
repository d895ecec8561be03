"""
Plot Training Curves
--------------------
Plots the loss of one or more runs, either from their metrics.jsonl files
or from the results database, and saves the figure as a PNG.

Usage:
    python scripts/plot_training_curves.py runs/train-.../metrics.jsonl runs/distill-.../metrics.jsonl
    python scripts/plot_training_curves.py --run-id train-20260101-120000-s0 --window 20
"""

import argparse
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from experiments.reports import read_jsonl  # noqa: E402
from experiments.results_db import create_results_engine, get_loss_curve  # noqa: E402


def plot_curves(curves, output_file="training_curves.png", show_uniform=True):
    """
    Plot loss against step for each labelled curve.

    Args:
        curves (dict): label -> DataFrame with step, loss and optionally
            rolling_loss / uniform_loss columns.
        output_file (str, optional): PNG path.
        show_uniform (bool): Also draw the uniform-model reference of the first curve.

    Returns:
        str: Message indicating where the plot was written.
    """
    fig, ax = plt.subplots(figsize=(10, 6))
    for label, df in curves.items():
        column = "rolling_loss" if "rolling_loss" in df.columns else "loss"
        ax.plot(df["step"], df[column], linestyle='-', label=label)
    first = next(iter(curves.values()))
    if show_uniform and "uniform_loss" in first.columns:
        ax.plot(first["step"], first["uniform_loss"], linestyle='--', color='gray', label='uniform model')
    ax.set_title('Training Loss')
    ax.set_xlabel('Step')
    ax.set_ylabel('Loss (nats per utterance)')
    ax.grid(True)
    ax.legend()
    plt.tight_layout()
    fig.savefig(output_file)
    plt.close(fig)
    return f"✅ Plot saved to {output_file}"


def main():
    try:
        parser = argparse.ArgumentParser(description="Plot training loss curves")
        parser.add_argument("metrics", nargs="*", help="metrics.jsonl files to plot")
        parser.add_argument("--run-id", action="append", default=[], help="Run id from the results database")
        parser.add_argument("--window", type=int, default=20, help="Rolling window for database curves")
        parser.add_argument("--db", help="Results database (default: RESULTS_DB from .env)")
        parser.add_argument("--output", default="training_curves.png", help="Output PNG path")
        args = parser.parse_args()

        curves = {}
        for path in args.metrics:
            curves[os.path.basename(os.path.dirname(os.path.abspath(path))) or path] = read_jsonl(path)
        if args.run_id:
            engine = create_results_engine(args.db)
            for run_id in args.run_id:
                curves[run_id] = get_loss_curve(engine, run_id, args.window)
        curves = {label: df for label, df in curves.items() if not df.empty}
        if not curves:
            print("❌ No curves to plot")
            sys.exit(1)
        print(plot_curves(curves, args.output))
    except Exception as e:
        print(f"❌ Error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
