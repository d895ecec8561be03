"""
Transducer Decoding and Error Rates
-----------------------------------
Frame-synchronous greedy and beam search over a CascadedModel in streaming
(causal encoder only) or non-streaming (causal then non-causal encoder)
mode, a chunked streaming first pass, and edit-distance error rates.

Beam search variant: at each encoder frame every surviving hypothesis is
expanded by blank (which finishes it for the frame) and by every label
(which keeps it active, up to max_symbols_per_frame labels per frame). The
finished hypotheses and the new candidates are pooled and the best `beam`
are kept; the frame ends when no kept hypothesis is active. Hypotheses are
ranked by (higher score, fewer tokens, lexicographically smaller tokens).
Identical token sequences reached by different alignments are not merged.
A search with beam k returns the better of its own best hypothesis and the
result for beam k - 1, so the best score never decreases as the beam grows;
with beam 1 the search is exactly greedy decoding.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from core import tensor as T
from core.errors import UsageError
from core.model import encode_causal, encode_noncausal

logger = logging.getLogger(__name__)

BLANK_ID = 0
MAX_SYMBOLS_PER_FRAME = 5


class DecodeMode(str, Enum):
    STREAMING = "streaming"
    NONSTREAMING = "nonstreaming"


@dataclass
class Hypothesis:
    """
    A partial or final decoding result.

    Attributes:
        tokens (tuple): Emitted labels, blank never included.
        log_score (float): Log-probability of the alignment path.
        pred_context: Predictor state after the last token.
    """

    tokens: tuple = ()
    log_score: float = 0.0
    pred_context: object = field(default=None, repr=False)


def _rank(score, tokens):
    return (-score, len(tokens), tokens)


class TransducerScorer:
    """
    Cached joint log-probabilities for one utterance.

    Predictor states are cached by token prefix and survive encoder updates,
    so a streaming decoder can swap in a longer encoder output.
    """

    def __init__(self, model, enc=None):
        self.model = model
        self._states = {(): model.predictor.initial_state()}
        self._pred_h = {}
        self._log_probs = {}
        self.enc_h = None
        if enc is not None:
            self.set_encoder(enc)

    def set_encoder(self, enc):
        self.enc_h = self.model.joint.project_encoder(enc)
        self._log_probs = {}

    @property
    def num_frames(self):
        return self.enc_h.shape[0]

    def state(self, tokens):
        start = len(tokens)
        while tokens[:start] not in self._states:
            start -= 1
        for i in range(start, len(tokens)):
            self._states[tokens[:i + 1]] = self.model.predictor.step(self._states[tokens[:i]], tokens[i])
        return self._states[tokens]

    def log_probs(self, t, tokens):
        """Float64 log P(. | t, tokens)."""
        key = (t, tokens)
        if key not in self._log_probs:
            if tokens not in self._pred_h:
                row = self.model.predictor.output(self.state(tokens))
                self._pred_h[tokens] = self.model.joint.project_predictor(row)
            logits = self.model.joint.combine(self.enc_h[t], self._pred_h[tokens])
            self._log_probs[key] = T.log_softmax(logits, axis=-1).data.astype(np.float64)
        return self._log_probs[key]


def encode(model, features, mode):
    """Encoder output for a decoding mode."""
    enc = encode_causal(features, model)
    if DecodeMode(mode) is DecodeMode.NONSTREAMING:
        enc = encode_noncausal(enc, model)
    return enc


def _greedy_frame(scorer, t, score, tokens, max_symbols):
    for emitted in range(max_symbols + 1):
        lp = scorer.log_probs(t, tokens)
        if emitted == max_symbols:
            return score + lp[BLANK_ID], tokens
        k = int(np.argmax(score + lp))
        if k == BLANK_ID:
            return score + lp[BLANK_ID], tokens
        score, tokens = score + lp[k], tokens + (k,)
    return score, tokens


def greedy_search(model, features, mode=DecodeMode.NONSTREAMING, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """
    Frame-synchronous greedy search.

    At each frame the best symbol is emitted repeatedly while it is a label,
    up to max_symbols_per_frame labels; blank (or reaching the cap, which
    takes the blank arc) advances to the next frame. Ties go to blank, then
    to the lowest label id.

    Returns:
        Hypothesis: Greedy result with its path log-probability.
    """
    with model.frozen():
        return greedy_search_encoded(model, encode(model, features, mode), max_symbols_per_frame)


def greedy_search_encoded(model, enc, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """Greedy search over an already computed encoder output."""
    with model.frozen():
        scorer = TransducerScorer(model, enc)
        score, tokens = 0.0, ()
        for t in range(scorer.num_frames):
            score, tokens = _greedy_frame(scorer, t, score, tokens, max_symbols_per_frame)
        return Hypothesis(tokens=tokens, log_score=float(score), pred_context=scorer.state(tokens))


def greedy_decode(model, features, mode=DecodeMode.NONSTREAMING, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """
    Greedy transcription.

    Raises:
        UsageError: On empty features.
    """
    return list(greedy_search(model, features, mode, max_symbols_per_frame).tokens)


def _beam_pass(scorer, beam, vocab_size, max_symbols):
    hyps = [(0.0, ())]
    for t in range(scorer.num_frames):
        finished = []
        active = [(score, tokens, 0) for score, tokens in hyps]
        while active:
            candidates = list(finished)
            for score, tokens, emitted in active:
                lp = scorer.log_probs(t, tokens)
                candidates.append((score + lp[BLANK_ID], tokens, None))
                if emitted < max_symbols:
                    for k in range(1, vocab_size):
                        candidates.append((score + lp[k], tokens + (k,), emitted + 1))
            candidates.sort(key=lambda c: (*_rank(c[0], c[1]), c[2] is not None))
            kept = candidates[:beam]
            finished = [c for c in kept if c[2] is None]
            active = [c for c in kept if c[2] is not None]
        hyps = [(score, tokens) for score, tokens, _ in finished]
    return min(hyps, key=lambda h: _rank(*h))


def beam_search(model, features, beam, mode=DecodeMode.NONSTREAMING, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """
    Frame-synchronous beam search.

    Args:
        model (CascadedModel): Model to decode with.
        features (numpy.ndarray): T x F features.
        beam (int): Beam width, at least 1.
        mode (DecodeMode): Streaming or non-streaming encoder.
        max_symbols_per_frame (int): Label cap per frame.

    Returns:
        Hypothesis: Best final hypothesis.

    Raises:
        UsageError: If beam < 1 or features are empty.
    """
    if beam < 1:
        raise UsageError(f"Beam must be at least 1, got {beam}")
    with model.frozen():
        return beam_search_encoded(model, encode(model, features, mode), beam, max_symbols_per_frame)


def beam_search_encoded(model, enc, beam, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """Beam search over an already computed encoder output."""
    if beam < 1:
        raise UsageError(f"Beam must be at least 1, got {beam}")
    with model.frozen():
        scorer = TransducerScorer(model, enc)
        results = [_beam_pass(scorer, width, model.vocab_size, max_symbols_per_frame) for width in range(1, beam + 1)]
        score, tokens = min(results, key=lambda h: _rank(*h))
        return Hypothesis(tokens=tokens, log_score=float(score), pred_context=scorer.state(tokens))


def beam_search_decode(model, features, beam, mode=DecodeMode.NONSTREAMING,
                       max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    return list(beam_search(model, features, beam, mode, max_symbols_per_frame).tokens)


def streaming_greedy_decode(model, features, chunk_frames, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    """
    First-pass greedy decoding as audio arrives in chunks.

    After each chunk the causal encoder is re-run on the whole prefix received
    so far and only the new encoder rows are decoded.

    Args:
        model (CascadedModel): Model to decode with.
        features (numpy.ndarray): T x F features.
        chunk_frames (int): Frames per chunk, a multiple of the subsampling factor.

    Returns:
        Hypothesis: Result, matching greedy_search in streaming mode.

    Raises:
        UsageError: If chunk_frames is not a positive multiple of the subsampling factor.
    """
    factor = model.subsample_factor
    if chunk_frames < 1 or chunk_frames % factor != 0:
        raise UsageError(f"chunk_frames must be a positive multiple of {factor}, got {chunk_frames}")
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise UsageError(f"Expected a non-empty T x F feature matrix, got shape {features.shape}")
    with model.frozen():
        scorer = TransducerScorer(model)
        score, tokens, done = 0.0, (), 0
        for end in range(chunk_frames, features.shape[0] + chunk_frames, chunk_frames):
            scorer.set_encoder(encode_causal(features[:min(end, features.shape[0])], model))
            for t in range(done, scorer.num_frames):
                score, tokens = _greedy_frame(scorer, t, score, tokens, max_symbols_per_frame)
            done = scorer.num_frames
        return Hypothesis(tokens=tokens, log_score=float(score), pred_context=scorer.state(tokens))


@dataclass
class WerResult:
    """
    Edit-distance breakdown.

    Attributes:
        rate (float): (S + I + D) / max(1, reference_length).
        distance (int): S + I + D.
        substitutions (int): S.
        insertions (int): I.
        deletions (int): D.
        reference_length (int): Number of reference tokens.
    """

    rate: float
    distance: int
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int

    def to_dict(self):
        return {
            "rate": self.rate,
            "distance": self.distance,
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "reference_length": self.reference_length,
        }


def wer(reference, hypothesis):
    """
    Unit-cost Levenshtein alignment of two token sequences.

    Args:
        reference (sequence): Reference tokens; may be empty.
        hypothesis (sequence): Hypothesis tokens.

    Returns:
        WerResult: Rate and error counts.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    # cell = (distance, substitutions, insertions, deletions)
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        row = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            d, s, ins, dl = prev[j - 1]
            best = (d, s, ins, dl) if ref[i - 1] == hyp[j - 1] else (d + 1, s + 1, ins, dl)
            d, s, ins, dl = prev[j]
            if d + 1 < best[0]:
                best = (d + 1, s, ins, dl + 1)
            d, s, ins, dl = row[j - 1]
            if d + 1 < best[0]:
                best = (d + 1, s, ins + 1, dl)
            row.append(best)
        prev = row
    distance, subs, ins, dels = prev[m]
    return WerResult(rate=distance / max(1, n), distance=distance, substitutions=subs,
                     insertions=ins, deletions=dels, reference_length=n)


def edit_distance(a, b):
    return wer(a, b).distance


def corpus_wer(pairs):
    """
    Aggregate error rate over (reference, hypothesis) pairs.

    Returns:
        WerResult: Summed counts; rate over the summed reference length.
    """
    totals = [0, 0, 0, 0, 0]
    for reference, hypothesis in pairs:
        r = wer(reference, hypothesis)
        for i, value in enumerate((r.distance, r.substitutions, r.insertions, r.deletions, r.reference_length)):
            totals[i] += value
    distance, subs, ins, dels, length = totals
    return WerResult(rate=distance / max(1, length), distance=distance, substitutions=subs,
                     insertions=ins, deletions=dels, reference_length=length)
