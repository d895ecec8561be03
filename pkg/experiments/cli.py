#!/usr/bin/env python3
"""
Cascaded Transducer Lab - Command Line
--------------------------------------
Subcommands:

    data-gen         generate and store the synthetic train / eval splits
    train            train a model (teacher or direct baseline)
    distill          train a student against a frozen teacher checkpoint
    eval             decode a manifest and report error rates
    bench            time the first and second recognition passes
    params           parameter breakdown and size sweeps
    compress-config  derive a compressed configuration
    history          show stored runs and loss curves

Every subcommand that builds a configuration accepts --preset, --config
(a dotenv-format file), repeated --set KEY=VALUE overrides and --seed.

Usage:
    python -m experiments.cli data-gen --preset toy
    python -m experiments.cli train --preset toy --seed 1
    python -m experiments.cli eval --checkpoint runs/<run>/final.ckpt --mode both
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime

from core.decoding import DecodeMode
from core.distillation import KdConfig
from core.model import build_model, count_params, estimate_params
from experiments.compression import (
    compress_config,
    cell_size_sweep,
    embedding_size_sweep,
    layer_depth_sweep,
)
from experiments.config import (
    LOG_FILE,
    LOG_LEVEL,
    OUTPUT_DIR,
    PRESETS,
    load_config,
    parse_set_arguments,
    tar_decoder,
    write_config_file,
)
from experiments.datasets import generate_splits, load_dataset
from experiments.evaluation import evaluate
from experiments.latency import benchmark_latency, compare_latency
from experiments.reports import print_table, summary_row, write_jsonl
from experiments.results_db import (
    create_results_engine,
    get_latest_runs,
    get_loss_curve,
    get_run_history,
    record_evaluation,
    record_latency,
    record_run,
)
from experiments.training import distill_train, train

logger = logging.getLogger(__name__)


def setup_logging(level=LOG_LEVEL, log_file=LOG_FILE):
    """Configure root logging once: file and console handlers."""
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
    )


def _config_from_args(args, extra=None):
    overrides = parse_set_arguments(args.set)
    overrides.update(extra or {})
    return load_config(args.config, preset=args.preset, overrides=overrides, seed=args.seed)


def _default_manifest(split):
    return os.path.join(OUTPUT_DIR, "data", f"{split}.csv")


def _run_dir(kind, config, output_dir):
    run_id = f"{kind}-{datetime.now():%Y%m%d-%H%M%S}-s{config.seed}"
    return run_id, output_dir or os.path.join(OUTPUT_DIR, run_id)


# Subcommands


def cmd_data_gen(args):
    config = _config_from_args(args)
    output_dir = args.output_dir or os.path.join(OUTPUT_DIR, "data")
    manifests = generate_splits(config.task, config.seed, output_dir)
    for split, path in manifests.items():
        print(f"✅ {split}: {path}")
    return manifests


def _record(args, run_id, kind, config, result):
    if args.no_db:
        return
    engine = create_results_engine(args.db)
    record_run(engine, run_id, kind, config, result.metrics, result.checkpoint_path,
               count_params(result.model)["total"])


def cmd_train(args):
    config = _config_from_args(args)
    dataset = load_dataset(args.train_manifest or _default_manifest("train"))
    run_id, output_dir = _run_dir("train", config, args.output_dir)
    result = train(config, dataset, output_dir)
    _record(args, run_id, "train", config, result)
    print(f"✅ Checkpoint: {result.checkpoint_path}")
    print(f"✅ Metrics:    {result.metrics_path}")
    return result


def cmd_distill(args):
    extra = {"TRAIN__TEACHER_CHECKPOINT": args.teacher}
    if not any(key.upper().startswith("KD__") for key in parse_set_arguments(args.set)):
        extra["KD__ENABLED"] = "true"
    config = _config_from_args(args, extra)
    dataset = load_dataset(args.train_manifest or _default_manifest("train"))
    run_id, output_dir = _run_dir("distill", config, args.output_dir)
    result = distill_train(args.teacher, config, dataset, output_dir)
    _record(args, run_id, "distill", config, result)
    print(f"✅ Student checkpoint: {result.checkpoint_path}")
    print(f"✅ Teacher checksum unchanged: {result.teacher_checksum}")
    return result


def cmd_eval(args):
    dataset = load_dataset(args.manifest or _default_manifest("eval"))
    modes = [m.value for m in DecodeMode] if args.mode == "both" else [args.mode]
    summaries = []
    for mode in modes:
        report_path = None
        if args.report:
            stem, ext = os.path.splitext(args.report)
            report_path = f"{stem}_{mode}{ext or '.jsonl'}" if len(modes) > 1 else args.report
        report = evaluate(args.checkpoint, dataset, mode, args.beam, report_path, args.chunk_frames)
        summaries.append(report.summary())
        if not args.no_db:
            record_evaluation(create_results_engine(args.db), report.summary())
    print_table([{k: s[k] for k in ("mode", "beam", "wer", "substitutions", "insertions", "deletions",
                                    "reference_length")} for s in summaries], title="Evaluation")
    return summaries


def cmd_bench(args):
    dataset = load_dataset(args.manifest or _default_manifest("eval"))
    if args.limit:
        dataset = dataset[:args.limit]
    reports = []
    for checkpoint in args.checkpoint:
        report = benchmark_latency(checkpoint, dataset, args.repetitions, args.beam, report_path=None)
        reports.append(report)
        if not args.no_db:
            record_latency(create_results_engine(args.db), report.summary)
    if args.report:
        write_jsonl([r.summary for r in reports], args.report)
    print_table([{k: r.summary[k] for k in ("checkpoint", "total_params", "first_pass_ms", "second_pass_ms",
                                            "second_pass_mad_ms", "xrt_first", "xrt_second", "beam_passes")} for r in reports],
                title="Latency")
    if len(reports) == 2:
        print_table([compare_latency(reports[0], reports[1])], title="Second pass: compressed vs baseline")
    return reports


def _sweep_values(values, default):
    return values if values else default


def cmd_params(args):
    config = _config_from_args(args)
    model_config = config.model_config
    if args.build:
        breakdown = count_params(build_model(model_config, seed=config.seed))
    else:
        breakdown = estimate_params(model_config)
    print_table([breakdown], title=f"Parameters ({config.decoder.kind} decoder)")

    if args.sweep == "embedding":
        e = config.decoder.embedding_dim
        table = embedding_size_sweep(model_config, _sweep_values(args.values, [e, e // 2, e // 4]))
    elif args.sweep == "cell":
        d = config.cascade.model_dim
        heads = config.cascade.num_heads
        default = [d, (3 * d // 4) // heads * heads, (d // 2) // heads * heads]
        table = cell_size_sweep(model_config, _sweep_values(args.values, default))
    elif args.sweep == "layers":
        n = config.cascade.causal_layers
        table = layer_depth_sweep(model_config, _sweep_values(args.values, [n, max(1, 3 * n // 4), max(1, n // 2)]))
    else:
        return breakdown
    print_table(table, title=f"{args.sweep} sweep")
    return table


def cmd_compress_config(args):
    base = _config_from_args(args)
    decoder = None
    if args.decoder == "tar":
        decoder = tar_decoder(base.decoder.embedding_dim)
    baseline_total = estimate_params(base.model_config)["total"]
    rows = [summary_row("baseline", baseline_total, baseline_total)]
    derived = None
    for factor in args.factor:
        derived, spec = compress_config(base, factor, decoder=decoder,
                                        allow_layer_reduction=not args.no_layer_reduction)
        rows.append({**summary_row(f"{factor:g}%", spec.realized_total, spec.baseline_total),
                     "D": spec.model_dim, "causal": spec.causal_layers, "E": spec.embedding_dim})
        if args.output:
            path = args.output if len(args.factor) == 1 else args.output.replace(".env", f"_{factor:g}.env")
            if args.kd:
                derived = replace(derived, kd=derived.kd or KdConfig())
            write_config_file(derived, path)
            print(f"✅ Wrote {path}")
    print_table(rows, title="Compression")
    return derived


def cmd_history(args):
    engine = create_results_engine(args.db)
    if args.run_id:
        df = get_loss_curve(engine, args.run_id, args.window)
        title = f"Loss curve of {args.run_id}"
    elif args.all:
        df = get_run_history(engine, args.kind)
        title = "Run history"
    else:
        df = get_latest_runs(engine, args.limit)
        title = "Latest runs"
    if df.empty:
        print("No runs recorded yet.")
    else:
        print_table(df, title=title)
    return df


# Parser


def _add_config_arguments(parser):
    parser.add_argument("--preset", choices=sorted(PRESETS), default="toy",
                        help="Starting configuration preset (default: toy)")
    parser.add_argument("--config", help="dotenv-format experiment config applied on top of the preset")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key, e.g. --set CASCADE__MODEL_DIM=96 (repeatable)")
    parser.add_argument("--seed", type=int, help="Run seed (overrides TRAIN__SEED)")


def _add_db_arguments(parser):
    parser.add_argument("--db", help="Results database (default: RESULTS_DB from .env)")
    parser.add_argument("--no-db", action="store_true", help="Do not record results in the database")


def build_parser():
    parser = argparse.ArgumentParser(description="Cascaded streaming transducer experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data-gen", help="Generate the synthetic dataset")
    _add_config_arguments(p)
    p.add_argument("--output-dir", help="Dataset directory (default: OUTPUT_DIR/data)")
    p.set_defaults(func=cmd_data_gen)

    p = sub.add_parser("train", help="Train a model without a teacher")
    _add_config_arguments(p)
    _add_db_arguments(p)
    p.add_argument("--train-manifest", help="Training manifest (default: OUTPUT_DIR/data/train.csv)")
    p.add_argument("--output-dir", help="Run directory (default: OUTPUT_DIR/<run id>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="Distill a frozen teacher into a student")
    _add_config_arguments(p)
    _add_db_arguments(p)
    p.add_argument("--teacher", required=True, help="Teacher checkpoint")
    p.add_argument("--train-manifest", help="Training manifest (default: OUTPUT_DIR/data/train.csv)")
    p.add_argument("--output-dir", help="Run directory (default: OUTPUT_DIR/<run id>)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="Decode a manifest and report WER")
    _add_db_arguments(p)
    p.add_argument("--checkpoint", required=True, help="Model checkpoint")
    p.add_argument("--manifest", help="Evaluation manifest (default: OUTPUT_DIR/data/eval.csv)")
    p.add_argument("--mode", choices=["streaming", "nonstreaming", "both"], default="both",
                   help="Decoding mode (default: both)")
    p.add_argument("--beam", type=int, default=1, help="Beam width; 1 is greedy (default: 1)")
    p.add_argument("--chunk-frames", type=int, help="Chunked streaming greedy decoding")
    p.add_argument("--report", help="JSON-lines report path")
    p.add_argument("--seed", type=int, help="Accepted for uniformity; decoding is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="Latency and real-time factor")
    _add_db_arguments(p)
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="One checkpoint, or a baseline and a compressed checkpoint to compare")
    p.add_argument("--manifest", help="Manifest to time (default: OUTPUT_DIR/data/eval.csv)")
    p.add_argument("--repetitions", type=int, default=5, help="Timed runs per utterance (default: 5)")
    p.add_argument("--beam", type=int, default=4, help="Second-pass beam width (default: 4)")
    p.add_argument("--limit", type=int, help="Only time the first N utterances")
    p.add_argument("--report", help="JSON-lines summary path")
    p.add_argument("--seed", type=int, help="Accepted for uniformity; timing is not seeded")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="Parameter breakdown and size sweeps")
    _add_config_arguments(p)
    p.add_argument("--sweep", choices=["embedding", "cell", "layers"], help="Tabulate a size sweep")
    p.add_argument("--values", type=int, nargs="+", help="Sweep values (default: full, 3/4 and 1/2 size)")
    p.add_argument("--build", action="store_true", help="Count on a constructed model instead of analytically")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("compress-config", help="Derive a compressed configuration")
    _add_config_arguments(p)
    p.add_argument("--factor", type=float, nargs="+", required=True, help="Reduction(s) in percent, e.g. 50")
    p.add_argument("--decoder", choices=["lstm", "tar"], default="lstm",
                   help="Student decoder (default: keep the baseline's LSTM)")
    p.add_argument("--no-layer-reduction", action="store_true", help="Only scale the encoder width")
    p.add_argument("--kd", action="store_true", help="Enable distillation in the written config")
    p.add_argument("--output", help="Write the derived config as a .env file")
    p.set_defaults(func=cmd_compress_config)

    p = sub.add_parser("history", help="Stored runs and loss curves")
    p.add_argument("--db", help="Results database (default: RESULTS_DB from .env)")
    p.add_argument("--run-id", help="Show the loss curve of one run")
    p.add_argument("--window", type=int, default=20, help="Rolling window for the loss curve (default: 20)")
    p.add_argument("--all", action="store_true", help="List every run with its best WER")
    p.add_argument("--kind", choices=["train", "distill"], help="Filter runs by kind")
    p.add_argument("--limit", type=int, default=10, help="Number of latest runs (default: 10)")
    p.set_defaults(func=cmd_history)
    return parser


def main(argv=None):
    """
    Parse arguments and run a subcommand.

    Exits with status 1 after logging any error.
    """
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        args.func(args)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ Error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
