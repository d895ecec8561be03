"""
Results Database
----------------
Stores runs, metric streams, evaluation summaries and latency reports in a
SQLite database, and queries them back for the history and export tools.

Tables (appended with pandas.to_sql):
    runs         one row per training or distillation run
    metrics      per-step training metrics
    evaluations  one row per corpus-level evaluation
    latency      one row per latency benchmark

The rolling loss curve is computed in the database with a SQL window
function.
"""

import json
import logging
import os
from datetime import datetime

import pandas as pd
from sqlalchemy import create_engine, inspect, text

from experiments.config import RESULTS_DB

logger = logging.getLogger(__name__)

TABLES = ("runs", "metrics", "evaluations", "latency")


def create_results_engine(db_path=None):
    """
    Create a SQLAlchemy engine for the results database.

    Args:
        db_path (str, optional): SQLite file; defaults to RESULTS_DB.

    Returns:
        Engine: SQLAlchemy engine.
    """
    db_path = os.path.abspath(db_path or RESULTS_DB)
    directory = os.path.dirname(db_path)
    os.makedirs(directory, exist_ok=True)
    return create_engine(f"sqlite:///{db_path}")


def _append(engine, table, df):
    try:
        df.to_sql(table, engine, if_exists="append", index=False)
    except Exception as e:
        logger.error(f"Error writing to table {table}: {e}")
        raise


def _has_table(engine, table):
    return inspect(engine).has_table(table)


def record_run(engine, run_id, kind, config, metrics, checkpoint, total_params, status="completed"):
    """
    Store a run and its metric stream.

    Args:
        engine (Engine): Results database.
        run_id (str): Unique run identifier.
        kind (str): "train" or "distill".
        config (TrainConfig): Run configuration.
        metrics (list): Per-step metric dicts.
        checkpoint (str): Final checkpoint path.
        total_params (int): Model size.
        status (str): "completed" or "diverged".

    Returns:
        str: run_id.
    """
    run = pd.DataFrame([{
        "run_id": run_id,
        "kind": kind,
        "decoder": config.decoder.kind,
        "model_dim": config.cascade.model_dim,
        "causal_layers": config.cascade.causal_layers,
        "noncausal_layers": config.cascade.noncausal_layers,
        "total_params": int(total_params),
        "seed": config.seed,
        "steps": config.steps,
        "kd_alpha": config.kd.alpha if config.kd else None,
        "checkpoint": checkpoint,
        "status": status,
        "config_json": json.dumps(config.to_dict(), sort_keys=True),
        "created_at": datetime.now().isoformat(timespec="seconds"),
    }])
    _append(engine, "runs", run)
    if metrics:
        stream = pd.DataFrame(metrics)
        stream.insert(0, "run_id", run_id)
        _append(engine, "metrics", stream)
    logger.info(f"Recorded run {run_id} with {len(metrics)} metric rows")
    return run_id


def record_evaluation(engine, summary):
    """Store a corpus-level evaluation summary dict."""
    row = dict(summary)
    row["created_at"] = datetime.now().isoformat(timespec="seconds")
    _append(engine, "evaluations", pd.DataFrame([row]))


def record_latency(engine, report):
    """Store a latency report summary dict (nested values are JSON encoded)."""
    row = {k: json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v for k, v in report.items()}
    row["created_at"] = datetime.now().isoformat(timespec="seconds")
    _append(engine, "latency", pd.DataFrame([row]))


def get_latest_runs(engine, limit=10):
    """
    Most recent runs with their final loss.

    Uses a CTE to find each run's last logged step.

    Returns:
        DataFrame: One row per run, newest first.
    """
    if not _has_table(engine, "runs"):
        return pd.DataFrame()
    if not _has_table(engine, "metrics"):
        return pd.read_sql(text("SELECT * FROM runs ORDER BY created_at DESC LIMIT :limit"),
                           engine, params={"limit": int(limit)})
    query = text("""
        WITH last_step AS (
            SELECT run_id, MAX(step) AS step
            FROM metrics
            GROUP BY run_id
        )
        SELECT
            r.run_id,
            r.kind,
            r.decoder,
            r.total_params,
            r.seed,
            r.status,
            m.step AS final_step,
            m.loss AS final_loss,
            r.created_at
        FROM runs r
        LEFT JOIN last_step ls ON r.run_id = ls.run_id
        LEFT JOIN metrics m ON m.run_id = ls.run_id AND m.step = ls.step
        ORDER BY r.created_at DESC, r.run_id
        LIMIT :limit
    """)
    return pd.read_sql(query, engine, params={"limit": int(limit)})


def get_run_history(engine, kind=None):
    """
    All runs, optionally filtered by kind, with their best evaluation WER.

    Returns:
        DataFrame: Runs in creation order.
    """
    if not _has_table(engine, "runs"):
        return pd.DataFrame()
    where = "WHERE r.kind = :kind" if kind else ""
    if _has_table(engine, "evaluations"):
        query = f"""
            SELECT r.run_id, r.kind, r.decoder, r.total_params, r.seed, r.status,
                   MIN(e.wer) AS best_wer, r.created_at
            FROM runs r
            LEFT JOIN evaluations e ON e.checkpoint = r.checkpoint
            {where}
            GROUP BY r.run_id
            ORDER BY r.created_at, r.run_id
        """
    else:
        query = f"SELECT r.* FROM runs r {where} ORDER BY r.created_at, r.run_id"
    return pd.read_sql(text(query), engine, params={"kind": kind} if kind else {})


def get_loss_curve(engine, run_id, window_size=20):
    """
    Training loss of a run with a rolling mean, using SQL WINDOW FUNCTIONS.

    Args:
        engine (Engine): Results database.
        run_id (str): Run to fetch.
        window_size (int): Rolling window in logged steps.

    Returns:
        DataFrame: step, loss, rolling_loss, learning_rate.
    """
    if not _has_table(engine, "metrics"):
        return pd.DataFrame(columns=["step", "loss", "rolling_loss", "learning_rate"])
    query = text(f"""
        SELECT
            step,
            loss,
            AVG(loss) OVER (
                PARTITION BY run_id
                ORDER BY step
                ROWS BETWEEN {int(window_size) - 1} PRECEDING AND CURRENT ROW
            ) AS rolling_loss,
            learning_rate
        FROM metrics
        WHERE run_id = :run_id
        ORDER BY step
    """)
    return pd.read_sql(query, engine, params={"run_id": run_id})


def export_table(engine, table, output_file):
    """
    Export a whole table to CSV or Excel, chosen by the file extension.

    Returns:
        str: Message indicating the export status.
    """
    if table not in TABLES:
        raise ValueError(f"Unknown table '{table}'; choose from {TABLES}")
    if not _has_table(engine, table):
        raise ValueError(f"Table '{table}' does not exist in the results database")
    df = pd.read_sql(text(f"SELECT * FROM {table}"), engine)
    if output_file.endswith(".xlsx"):
        with pd.ExcelWriter(output_file, engine="openpyxl") as writer:
            df.to_excel(writer, sheet_name=table, index=False)
    else:
        df.to_csv(output_file, index=False)
    return f"Exported {len(df)} rows from {table} to {output_file}"
