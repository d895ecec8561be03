"""
Evaluation
----------
Decodes a dataset with a trained model and reports per-utterance and
corpus-level error rates.
"""

import logging
from dataclasses import dataclass, field

from core.decoding import DecodeMode, beam_search_decode, corpus_wer, greedy_decode, streaming_greedy_decode, wer
from core.errors import UsageError
from experiments.checkpoint import load_checkpoint
from experiments.reports import EVALUATION_COLUMNS, write_jsonl

logger = logging.getLogger(__name__)


@dataclass
class EvaluationReport:
    """
    Attributes:
        mode (str): Decoding mode.
        beam (int): Beam width (1 is greedy).
        corpus (WerResult): Aggregated result.
        utterances (list): Per-utterance records.
        checkpoint (str or None): Evaluated checkpoint path.
    """

    mode: str
    beam: int
    corpus: object
    utterances: list = field(default_factory=list)
    checkpoint: str = None

    def summary(self):
        return {
            "record": "corpus",
            "checkpoint": self.checkpoint,
            "mode": self.mode,
            "beam": self.beam,
            "wer": self.corpus.rate,
            "distance": self.corpus.distance,
            "substitutions": self.corpus.substitutions,
            "insertions": self.corpus.insertions,
            "deletions": self.corpus.deletions,
            "reference_length": self.corpus.reference_length,
            "num_utterances": len(self.utterances),
        }

    def to_records(self):
        corpus = {k: v for k, v in self.summary().items() if k in EVALUATION_COLUMNS}
        return self.utterances + [corpus]


def _load(model_or_checkpoint):
    if isinstance(model_or_checkpoint, str):
        model, _ = load_checkpoint(model_or_checkpoint)
        return model, model_or_checkpoint
    return model_or_checkpoint, None


def decode_utterance(model, utterance, mode, beam=1, chunk_frames=None):
    """Token ids for one utterance under the chosen search."""
    if beam > 1:
        return beam_search_decode(model, utterance.features, beam, mode)
    if chunk_frames and DecodeMode(mode) is DecodeMode.STREAMING:
        return list(streaming_greedy_decode(model, utterance.features, chunk_frames).tokens)
    return greedy_decode(model, utterance.features, mode)


def evaluate(model_or_checkpoint, dataset, mode=DecodeMode.NONSTREAMING, beam=1, report_path=None, chunk_frames=None):
    """
    Decode every utterance and aggregate error rates.

    Args:
        model_or_checkpoint (CascadedModel or str): Model or checkpoint path.
        dataset (list): Utterances with references.
        mode (DecodeMode): Streaming or non-streaming.
        beam (int): 1 for greedy, otherwise the beam width.
        report_path (str, optional): JSON-lines report destination.
        chunk_frames (int, optional): Chunked streaming greedy decoding.

    Returns:
        EvaluationReport: Per-utterance and corpus results.

    Raises:
        UsageError: On an empty dataset or beam < 1.
    """
    if not dataset:
        raise UsageError("Cannot evaluate an empty dataset")
    if beam < 1:
        raise UsageError(f"Beam must be at least 1, got {beam}")
    mode = DecodeMode(mode).value
    model, checkpoint = _load(model_or_checkpoint)
    model.eval()

    rows, pairs = [], []
    for utt in dataset:
        hypothesis = decode_utterance(model, utt, mode, beam, chunk_frames)
        result = wer(utt.tokens, hypothesis)
        pairs.append((utt.tokens, hypothesis))
        rows.append({
            "record": "utterance",
            "utt_id": utt.utt_id,
            "mode": mode,
            "beam": beam,
            "reference": " ".join(str(k) for k in utt.tokens),
            "hypothesis": " ".join(str(k) for k in hypothesis),
            "wer": result.rate,
            "distance": result.distance,
            "substitutions": result.substitutions,
            "insertions": result.insertions,
            "deletions": result.deletions,
            "reference_length": result.reference_length,
        })
    report = EvaluationReport(mode=mode, beam=beam, corpus=corpus_wer(pairs), utterances=rows, checkpoint=checkpoint)
    logger.info(f"{mode} beam={beam}: WER {100 * report.corpus.rate:.2f}% over {len(rows)} utterances")
    if report_path:
        write_jsonl(report.to_records(), report_path, EVALUATION_COLUMNS)
    return report
