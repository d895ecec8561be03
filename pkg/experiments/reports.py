"""
Reports
-------
Line-delimited JSON records (metric streams, evaluation and latency reports)
and the human-readable summary tables printed by the CLI.
"""

import logging
import os

import pandas as pd
from tabulate import tabulate

logger = logging.getLogger(__name__)

# Columns every evaluation record carries; per-utterance rows also fill
# utt_id, reference and hypothesis.
EVALUATION_COLUMNS = [
    "record", "utt_id", "mode", "beam", "reference", "hypothesis",
    "wer", "distance", "substitutions", "insertions", "deletions", "reference_length",
]
LATENCY_COLUMNS = [
    "record", "utt_id", "duration_seconds", "first_pass_ms", "second_pass_ms",
    "xrt_first", "xrt_second", "first_pass_mad_ms", "second_pass_mad_ms", "beam", "beam_passes",
]


def write_jsonl(records, path, columns=None):
    """
    Write records as JSON lines.

    Args:
        records (list): Dicts, one per line.
        path (str): Output file.
        columns (list, optional): Fixed column order; missing keys become null.

    Returns:
        str: path.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    df = pd.DataFrame(records, columns=columns)
    with open(path, "w", encoding="utf-8") as handle:
        if len(df):
            handle.write(df.to_json(orient="records", lines=True))
            handle.write("\n")
    logger.info(f"Wrote {len(df)} records to {path}")
    return path


def read_jsonl(path):
    """Read a JSON-lines report into a DataFrame."""
    if os.path.getsize(path) == 0:
        return pd.DataFrame()
    return pd.read_json(path, orient="records", lines=True)


def format_table(data, floatfmt=".4g"):
    """Render a DataFrame or list of dicts as a psql-style table."""
    df = data if isinstance(data, pd.DataFrame) else pd.DataFrame(data)
    return tabulate(df, headers="keys", tablefmt="psql", showindex=False, floatfmt=floatfmt)


def print_table(data, title=None):
    if title:
        print(f"\n{title}")
    print(format_table(data))


def summary_row(label, total_params, baseline_params, wer_nonstreaming=None, wer_streaming=None):
    """
    One row of the compression summary table: model, params, compression and
    the non-streaming / streaming error rates in percent.
    """
    return {
        "model": label,
        "params_M": round(total_params / 1e6, 3),
        "compression_%": round(100.0 * (1.0 - total_params / baseline_params), 1),
        "WER_NS_%": None if wer_nonstreaming is None else round(100.0 * wer_nonstreaming, 2),
        "WER_S_%": None if wer_streaming is None else round(100.0 * wer_streaming, 2),
    }
