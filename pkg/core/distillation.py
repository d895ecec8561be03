"""
Knowledge Distillation Losses
-----------------------------
KL divergence between a frozen teacher's lattice and a student's lattice,
either over the full output distribution at every node or over each node's
distribution collapsed to {next reference label, blank, everything else},
and the combined training objective.

Teacher log-probabilities enter as constants: no gradient ever reaches the
teacher. Terms whose teacher probability is zero contribute nothing.
"""

import logging
from dataclasses import dataclass

import numpy as np

from core import tensor as T
from core.errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

KD_MODES = ("full", "efficient")
KD_BRANCHES = ("causal", "noncausal", "both")


@dataclass(frozen=True)
class KdConfig:
    """
    Distillation settings.

    Attributes:
        alpha (float): Weight of the distillation term, in [0, 1].
        temperature (float): Softmax temperature for both lattices.
        mode (str): "full" or "efficient".
        branches (str): Which encoder branches are distilled: "causal",
            "noncausal" or "both".
    """

    alpha: float = 0.02
    temperature: float = 1.0
    mode: str = "efficient"
    branches: str = "both"

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"KD alpha must be in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigurationError(f"KD temperature must be positive, got {self.temperature}")
        if self.mode not in KD_MODES:
            raise ConfigurationError(f"KD mode must be one of {KD_MODES}, got '{self.mode}'")
        if self.branches not in KD_BRANCHES:
            raise ConfigurationError(f"KD branches must be one of {KD_BRANCHES}, got '{self.branches}'")
        return self


def _check_shapes(teacher, student):
    if teacher.shape != student.shape:
        raise UsageError(f"Teacher lattice {teacher.shape} and student lattice {student.shape} differ")


def _weighted_divergence(teacher_lp, student_lp):
    """sum p_T * (log p_T - log p_S) with teacher_lp a constant."""
    weights = np.exp(teacher_lp.data.astype(np.float64))
    absent = weights == 0.0
    lt = T.masked_fill(teacher_lp, absent, 0.0)
    ls = T.masked_fill(student_lp, absent, 0.0)
    return T.sum(T.constant(weights.astype(student_lp.dtype)) * (lt - ls))


def full_lattice_kl(teacher, student):
    """
    Sum over nodes of KL(teacher || student) over the whole vocabulary.

    Args:
        teacher (Lattice): Teacher log-probabilities, treated as constants.
        student (Lattice): Student log-probabilities.

    Returns:
        DiffArray: Scalar divergence; gradient flows only into the student.

    Raises:
        UsageError: If the lattice shapes differ.
    """
    _check_shapes(teacher, student)
    teacher_lp = T.constant(teacher.log_probs.data, dtype=student.log_probs.dtype)
    return _weighted_divergence(teacher_lp, student.log_probs)


def _collapse(log_probs, labels, blank_id):
    """
    Per-node log-probabilities of (blank, next label, remainder).

    Returns the T' x (U+1) x 3 collapsed log-probabilities and a boolean mask
    of events that do not exist (the label event at u == U).
    """
    num_frames, rows, vocab = log_probs.shape
    num_labels = rows - 1
    taken = np.zeros((num_frames, rows, vocab), dtype=bool)
    taken[:, :, blank_id] = True
    next_label = np.zeros(rows, dtype=np.int64)
    if num_labels:
        next_label[:num_labels] = labels
        taken[:, np.arange(num_labels), np.array(labels)] = True
    blank = log_probs[:, :, blank_id]
    label = log_probs[:, np.arange(rows), next_label]
    remainder = T.logsumexp(T.masked_fill(log_probs, taken, -np.inf), axis=-1)
    collapsed = T.stack([blank, label, remainder], axis=-1)
    missing = np.zeros((num_frames, rows, 3), dtype=bool)
    missing[:, num_labels, 1] = True
    return collapsed, missing


def efficient_kd(teacher, student, labels=None):
    """
    KL divergence over each node's three-way collapsed distribution.

    At (t, u) with u < U the events are {blank, y_{u+1}, remainder}; at u == U
    they are {blank, remainder}.

    Args:
        teacher (Lattice): Teacher log-probabilities, treated as constants.
        student (Lattice): Student log-probabilities.
        labels (sequence, optional): Reference labels; defaults to student.labels.

    Returns:
        DiffArray: Scalar divergence.

    Raises:
        UsageError: If the lattice shapes differ or labels do not fit.
    """
    _check_shapes(teacher, student)
    labels = tuple(int(k) for k in (student.labels if labels is None else labels))
    if len(labels) != student.num_labels:
        raise UsageError(f"Lattice has {student.num_labels} label positions but {len(labels)} labels were given")
    teacher_lp = T.constant(teacher.log_probs.data, dtype=student.log_probs.dtype)
    teacher_c, missing = _collapse(teacher_lp, labels, teacher.blank_id)
    student_c, _ = _collapse(student.log_probs, labels, student.blank_id)
    teacher_c = T.constant(np.where(missing, -np.inf, teacher_c.data), dtype=teacher_c.dtype)
    return _weighted_divergence(teacher_c, student_c)


def distillation_loss(teacher, student, config, labels=None):
    """Dispatch on config.mode."""
    if config.mode == "full":
        return full_lattice_kl(teacher, student)
    return efficient_kd(teacher, student, labels)


def total_loss(rnnt, distill, alpha):
    """
    (1 - alpha) * rnnt + alpha * distill.

    Raises:
        UsageError: If alpha is outside [0, 1].
    """
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * rnnt + alpha * distill
