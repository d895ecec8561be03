"""
Latency Benchmark
-----------------
Wall-clock timing of the two recognition passes.

first pass   streaming pipeline: causal encoder then greedy search
second pass  end-of-utterance work: non-causal encoder then beam search

Each utterance is timed `repetitions` times after untimed warmup runs; the
report holds the median and the median absolute deviation per utterance,
the real-time factor (processing time / audio duration), and a description
of the machine. Timed sections run on the calling thread with BLAS limited to
one worker. The second pass runs the nested beam search of
core.decoding, which searches every width from 1 to `beam`; the report
records that count as `beam_passes`.
"""

import logging
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from core.decoding import beam_search_encoded, greedy_search_encoded
from core.errors import UsageError
from core.model import count_params, encode_causal, encode_noncausal
from experiments.checkpoint import load_checkpoint
from experiments.reports import LATENCY_COLUMNS, write_jsonl

logger = logging.getLogger(__name__)

MIN_REPETITIONS = 3
BLAS_THREADS = 1
# Second-pass latency reduction reported for the half-size model on device.
REFERENCE_REDUCTION_PERCENT = 30.0


def machine_descriptor():
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "omp_num_threads": os.getenv("OMP_NUM_THREADS"),
        "blas_threads": BLAS_THREADS,
    }


def median_absolute_deviation(values):
    center = statistics.median(values)
    return statistics.median(abs(v - center) for v in values)


@dataclass
class LatencyReport:
    """
    Attributes:
        summary (dict): Corpus-level medians, dispersion and xRT.
        utterances (list): Per-utterance records.
    """

    summary: dict
    utterances: list = field(default_factory=list)

    def to_records(self):
        corpus = {k: v for k, v in self.summary.items() if k in LATENCY_COLUMNS}
        corpus["record"] = "corpus"
        return self.utterances + [corpus]


def _time_passes(model, features, beam):
    t0 = time.perf_counter()
    enc = encode_causal(features, model)
    greedy_search_encoded(model, enc)
    t1 = time.perf_counter()
    enc = encode_noncausal(enc, model)
    beam_search_encoded(model, enc, beam)
    t2 = time.perf_counter()
    return (t1 - t0) * 1000.0, (t2 - t1) * 1000.0


def benchmark_latency(model_or_checkpoint, dataset, repetitions=5, beam=4, warmup=1, report_path=None):
    """
    Time both passes over a dataset.

    Args:
        model_or_checkpoint (CascadedModel or str): Model or checkpoint path.
        dataset (list): Utterances to time.
        repetitions (int): Timed runs per utterance, at least 3.
        beam (int): Second-pass beam width.
        warmup (int): Untimed runs per utterance.
        report_path (str, optional): JSON-lines report destination.

    Returns:
        LatencyReport: Per-utterance and corpus timings.

    Raises:
        UsageError: On an empty dataset or too few repetitions.
    """
    if not dataset:
        raise UsageError("Cannot benchmark an empty dataset")
    if repetitions < MIN_REPETITIONS:
        raise UsageError(f"repetitions must be at least {MIN_REPETITIONS}, got {repetitions}")
    checkpoint = model_or_checkpoint if isinstance(model_or_checkpoint, str) else None
    model = load_checkpoint(checkpoint)[0] if checkpoint else model_or_checkpoint
    model.eval()

    rows = []
    with model.frozen(), threadpool_limits(limits=BLAS_THREADS):
        for utt in dataset:
            for _ in range(warmup):
                _time_passes(model, utt.features, beam)
            timings = [_time_passes(model, utt.features, beam) for _ in range(repetitions)]
            first = [t[0] for t in timings]
            second = [t[1] for t in timings]
            first_ms, second_ms = statistics.median(first), statistics.median(second)
            rows.append({
                "record": "utterance",
                "utt_id": utt.utt_id,
                "duration_seconds": utt.duration_seconds,
                "first_pass_ms": first_ms,
                "second_pass_ms": second_ms,
                "xrt_first": first_ms / 1000.0 / utt.duration_seconds,
                "xrt_second": second_ms / 1000.0 / utt.duration_seconds,
                "first_pass_mad_ms": median_absolute_deviation(first),
                "second_pass_mad_ms": median_absolute_deviation(second),
            })

    duration = sum(r["duration_seconds"] for r in rows)
    summary = {
        "checkpoint": checkpoint,
        "total_params": count_params(model)["total"],
        "num_utterances": len(rows),
        "repetitions": repetitions,
        "beam": beam,
        "beam_passes": beam,
        "duration_seconds": duration,
        "first_pass_ms": statistics.median(r["first_pass_ms"] for r in rows),
        "second_pass_ms": statistics.median(r["second_pass_ms"] for r in rows),
        "first_pass_mad_ms": statistics.median(r["first_pass_mad_ms"] for r in rows),
        "second_pass_mad_ms": statistics.median(r["second_pass_mad_ms"] for r in rows),
        "xrt_first": sum(r["first_pass_ms"] for r in rows) / 1000.0 / duration,
        "xrt_second": sum(r["second_pass_ms"] for r in rows) / 1000.0 / duration,
        "machine": machine_descriptor(),
    }
    logger.info(f"Latency over {len(rows)} utterances: first pass {summary['first_pass_ms']:.2f} ms, "
                f"second pass {summary['second_pass_ms']:.2f} ms (xRT {summary['xrt_second']:.4f})")
    report = LatencyReport(summary=summary, utterances=rows)
    if report_path:
        write_jsonl(report.to_records(), report_path, LATENCY_COLUMNS)
    return report


def compare_latency(baseline, compressed):
    """
    Second-pass comparison of two reports from the same machine.

    Returns:
        dict: Measured ratio and reduction next to the reference reduction.
    """
    ratio = compressed.summary["second_pass_ms"] / baseline.summary["second_pass_ms"]
    return {
        "baseline_second_pass_ms": baseline.summary["second_pass_ms"],
        "compressed_second_pass_ms": compressed.summary["second_pass_ms"],
        "baseline_xrt_second": baseline.summary["xrt_second"],
        "compressed_xrt_second": compressed.summary["xrt_second"],
        "second_pass_ratio": ratio,
        "measured_reduction_percent": 100.0 * (1.0 - ratio),
        "reference_reduction_percent": REFERENCE_REDUCTION_PERCENT,
    }
