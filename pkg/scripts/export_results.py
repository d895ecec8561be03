"""
Export Experiment Results
-------------------------
Exports stored runs, metric streams, evaluations and latency reports from
the results database to CSV or Excel for outside analysis.

Usage:
    python scripts/export_results.py --format excel --output results.xlsx
    python scripts/export_results.py --table metrics --output metrics.csv
"""

import argparse
import os
import sys

import pandas as pd
from sqlalchemy import text

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from experiments.results_db import TABLES, create_results_engine, export_table  # noqa: E402


def export_workbook(engine, output_file="transducer_results.xlsx"):
    """
    Export every existing table into one Excel workbook, one sheet per table.

    Args:
        engine (Engine): Results database.
        output_file (str, optional): Workbook path. Defaults to "transducer_results.xlsx".

    Returns:
        str: Message indicating the export status.
    """
    written = 0
    with pd.ExcelWriter(output_file, engine="openpyxl") as writer:
        for table in TABLES:
            try:
                df = pd.read_sql(text(f"SELECT * FROM {table}"), engine)
            except Exception as e:
                print(f"Warning: Could not export {table}: {e}")
                continue
            df.to_excel(writer, sheet_name=table, index=False)
            written += 1
    if not written:
        return "❌ No data to export"
    return f"✅ Exported {written} tables to {output_file}"


def main():
    """
    Parse command-line arguments and run the export.

    Returns:
        None
    """
    try:
        parser = argparse.ArgumentParser(description="Export experiment results")
        parser.add_argument(
            "--format",
            choices=["csv", "excel"],
            default="csv",
            help="Export format (csv exports one table, excel exports all tables)"
        )
        parser.add_argument(
            "--table",
            choices=list(TABLES),
            default="runs",
            help="Table to export in csv format (default: runs)"
        )
        parser.add_argument(
            "--output",
            help="Output file path (default depends on format)"
        )
        parser.add_argument(
            "--db",
            help="Results database (default: RESULTS_DB from .env)"
        )

        args = parser.parse_args()
        engine = create_results_engine(args.db)

        if args.format == "excel":
            print(export_workbook(engine, args.output or "transducer_results.xlsx"))
        else:
            print(f"✅ {export_table(engine, args.table, args.output or f'{args.table}.csv')}")
    except Exception as e:
        print(f"❌ Error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
