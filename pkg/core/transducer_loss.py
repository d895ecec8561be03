"""
Transducer Loss
---------------
Output lattices, the transducer negative log-likelihood by log-space
forward recursion, a brute-force alignment-enumeration oracle, and the
weighted two-branch loss of the cascaded model.

Lattice node (t, u) holds log P(k | t, u): the distribution over the next
symbol after consuming t encoder frames and emitting u labels. Blank (id 0)
moves to (t+1, u); label y_{u+1} moves to (t, u+1). An alignment ends with
the blank emitted at (T'-1, U).
"""

import itertools
import logging
from dataclasses import dataclass
from math import comb

import numpy as np

from core import tensor as T
from core.errors import InfeasibleAlignmentError, UsageError

logger = logging.getLogger(__name__)

BLANK_ID = 0
MAX_BRUTEFORCE_FRAMES = 6
MAX_BRUTEFORCE_LABELS = 5


@dataclass
class Lattice:
    """
    Per-utterance grid of log output distributions.

    Attributes:
        log_probs (DiffArray): T' x (U+1) x V log-probabilities.
        labels (tuple): Reference labels, length U.
        blank_id (int): Blank symbol, always 0.
    """

    log_probs: T.DiffArray
    labels: tuple = ()
    blank_id: int = BLANK_ID

    @property
    def num_frames(self):
        return self.log_probs.shape[0]

    @property
    def num_labels(self):
        return self.log_probs.shape[1] - 1

    @property
    def vocab_size(self):
        return self.log_probs.shape[2]

    @property
    def shape(self):
        return self.log_probs.shape

    def is_normalized(self, tol=1e-5):
        x = self.log_probs.data.astype(np.float64)
        m = np.max(x, axis=-1, keepdims=True)
        totals = np.log(np.sum(np.exp(x - m), axis=-1)) + m[..., 0]
        return bool(np.all(np.abs(totals) <= tol))


def lattice_from_log_probs(log_probs, labels=()):
    """Wrap a T' x (U+1) x V array (or DiffArray) as a Lattice."""
    if not isinstance(log_probs, T.DiffArray):
        log_probs = T.constant(log_probs)
    if log_probs.ndim != 3:
        raise UsageError(f"Lattice log-probs must be 3-D, got shape {log_probs.shape}")
    return Lattice(log_probs=log_probs, labels=tuple(int(k) for k in labels))


def build_lattice(enc, pred, joint, temperature=1.0, labels=()):
    """
    Evaluate the joint network at every (t, u) node.

    Args:
        enc (DiffArray): T' x D encoder output.
        pred (DiffArray): (U+1) x P predictor rows.
        joint (Joint): Joint network.
        temperature (float): Softmax temperature, positive.
        labels (sequence): Reference labels, length U.

    Returns:
        Lattice: log_probs[t, u] = log softmax(joint(enc[t], pred[u]) / temperature).

    Raises:
        UsageError: On shape mismatch or non-positive temperature.
    """
    if enc.ndim != 2 or pred.ndim != 2:
        raise UsageError(f"Expected 2-D encoder and predictor outputs, got {enc.shape} and {pred.shape}")
    if labels and len(labels) + 1 != pred.shape[0]:
        raise UsageError(f"{len(labels)} labels need {len(labels) + 1} predictor rows, got {pred.shape[0]}")
    enc_h = joint.project_encoder(enc)
    pred_h = joint.project_predictor(pred)
    num_frames, num_rows = enc.shape[0], pred.shape[0]
    logits = joint.combine(enc_h.reshape(num_frames, 1, -1), pred_h.reshape(1, num_rows, -1))
    return Lattice(log_probs=T.log_softmax(logits, axis=-1, temperature=temperature),
                   labels=tuple(int(k) for k in labels))


def _check_labels(lattice, labels):
    labels = lattice.labels if labels is None else tuple(int(k) for k in labels)
    num_frames, rows, vocab = lattice.shape
    if num_frames == 0:
        if len(labels) > 0:
            raise InfeasibleAlignmentError(f"{len(labels)} labels cannot be aligned to zero frames")
        raise UsageError("Lattice has no frames")
    if len(labels) != rows - 1:
        raise UsageError(f"Lattice has {rows - 1} label positions but {len(labels)} labels were given")
    for k in labels:
        if not 1 <= k < vocab:
            raise UsageError(f"Label {k} outside [1, {vocab - 1}]")
    return labels


def rnnt_loss(lattice, labels=None):
    """
    Negative log-likelihood summed over all alignments.

    alpha(0, 0) = 0;
    alpha(t, u) = logaddexp(alpha(t-1, u) + blank(t-1, u), alpha(t, u-1) + y(t, u-1));
    loss = -(alpha(T'-1, U) + blank(T'-1, U)).

    Each row is computed in one vectorised step: with C the running sum of
    label log-probs along the row, alpha_t = C + logcumsumexp(a - C), where
    a holds the blank transitions from row t-1.

    Args:
        lattice (Lattice): Log-probabilities.
        labels (sequence, optional): Reference labels; defaults to lattice.labels.

    Returns:
        DiffArray: Scalar loss, differentiable with respect to the lattice.

    Raises:
        InfeasibleAlignmentError: If labels exist but the lattice has no frames.
        UsageError: If labels do not match the lattice.
    """
    labels = _check_labels(lattice, labels)
    lp = lattice.log_probs
    num_frames = lattice.num_frames
    num_labels = len(labels)
    blank = lp[:, :, lattice.blank_id]
    if num_labels == 0:
        return -T.sum(blank[:, 0])

    y = lp[:, np.arange(num_labels), np.array(labels)]
    if not np.all(np.isfinite(y.data)):
        return _rnnt_loss_nodewise(blank, y, num_frames, num_labels)

    zero = T.constant(np.zeros(1, dtype=lp.dtype))
    alpha = T.concat([zero, T.cumsum(y[0])], axis=0)
    for t in range(1, num_frames):
        a = alpha + blank[t - 1]
        c = T.concat([zero, T.cumsum(y[t])], axis=0)
        alpha = c + T.logcumsumexp(a - c)
    return -(alpha[num_labels] + blank[num_frames - 1, num_labels])


def _rnnt_loss_nodewise(blank, y, num_frames, num_labels):
    # Fallback for lattices with zero-probability label arcs.
    prev = None
    for t in range(num_frames):
        row = []
        for u in range(num_labels + 1):
            terms = []
            if t == 0 and u == 0:
                terms.append(T.constant(np.array(0.0, dtype=blank.dtype)))
            if t > 0:
                terms.append(prev[u] + blank[t - 1, u])
            if u > 0:
                terms.append(row[u - 1] + y[t, u - 1])
            row.append(T.logsumexp(T.stack(terms), axis=0))
        prev = row
    return -(prev[num_labels] + blank[num_frames - 1, num_labels])


def count_alignments(num_frames, num_labels):
    """Number of alignments: the final blank is fixed, the rest interleave freely."""
    if num_frames < 1:
        return 0
    return comb(num_frames + num_labels - 1, num_labels)


def enumerate_alignments(num_frames, num_labels):
    """
    Yield every alignment as a tuple of moves, "b" for blank and "y" for label.

    Every alignment has num_frames blanks and num_labels labels and ends in a blank.
    """
    if num_frames < 1:
        return
    slots = num_frames + num_labels - 1
    for positions in itertools.combinations(range(slots), num_labels):
        moves = ["b"] * slots
        for p in positions:
            moves[p] = "y"
        yield tuple(moves) + ("b",)


def rnnt_loss_bruteforce(lattice, labels=None):
    """
    Transducer loss by explicit enumeration, summed in extended precision.

    Args:
        lattice (Lattice): Log-probabilities.
        labels (sequence, optional): Reference labels; defaults to lattice.labels.

    Returns:
        float: -log of the summed path probabilities.

    Raises:
        UsageError: If T' > 6 or U > 5.
    """
    labels = _check_labels(lattice, labels)
    num_frames, num_labels = lattice.num_frames, len(labels)
    if num_frames > MAX_BRUTEFORCE_FRAMES or num_labels > MAX_BRUTEFORCE_LABELS:
        raise UsageError(
            f"Brute force is limited to T' <= {MAX_BRUTEFORCE_FRAMES}, U <= {MAX_BRUTEFORCE_LABELS}; "
            f"got T'={num_frames}, U={num_labels}"
        )
    probs = np.exp(lattice.log_probs.data.astype(np.longdouble))
    total = np.longdouble(0.0)
    for moves in enumerate_alignments(num_frames, num_labels):
        t = u = 0
        path = np.longdouble(1.0)
        for move in moves:
            if move == "b":
                path *= probs[t, u, lattice.blank_id]
                t += 1
            else:
                path *= probs[t, u, labels[u]]
                u += 1
        total += path
    return float(-np.log(total))


def cascaded_loss(loss_causal, loss_noncausal, causal_weight):
    """
    Weighted two-branch loss: w * causal + (1 - w) * non-causal.

    Raises:
        UsageError: If causal_weight is outside [0, 1].
    """
    if not 0.0 <= causal_weight <= 1.0:
        raise UsageError(f"causal_weight must be in [0, 1], got {causal_weight}")
    return causal_weight * loss_causal + (1.0 - causal_weight) * loss_noncausal


def batch_mean(losses):
    """Mean of per-utterance losses."""
    if not losses:
        raise UsageError("Cannot average an empty batch")
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))
