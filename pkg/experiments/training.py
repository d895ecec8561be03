"""
Training and Distillation
-------------------------
Optimises a cascaded model on the weighted two-branch transducer loss plus
an L2 penalty, optionally distilling a frozen teacher's lattices into the
student.

Each optimiser step builds one graph per utterance of the batch on a fresh
Tape, averages the losses, back-propagates, adds the L2 gradient and applies
an Adam update. Batches walk a seeded permutation of the dataset per epoch,
so (config, seed, dataset) fixes every metric and parameter value.
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from core import tensor as T
from core.data_synth import spec_augment
from core.distillation import distillation_loss, total_loss
from core.errors import ConfigurationError, TrainingDivergedError, TransducerLabError, UsageError
from core.model import build_model, count_params, encode_causal, encode_noncausal, parameter_checksum
from core.rng import Rng, derive_seed
from core.transducer_loss import batch_mean, build_lattice, cascaded_loss, count_alignments, rnnt_loss
from experiments.checkpoint import load_checkpoint, save_checkpoint
from experiments.config import write_config_file
from experiments.reports import write_jsonl

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "loss", "rnnt_loss", "kd_loss", "l2_loss", "learning_rate", "uniform_loss"]


def lr_at_step(step, config):
    """
    Linear warmup to the peak rate, then inverse-square-root decay.

    Args:
        step (int): Zero-based optimiser step.
        config (TrainConfig): Supplies learning_rate, warmup_steps and lr_decay.

    Returns:
        float: Learning rate for this step.
    """
    peak, warmup = config.learning_rate, config.warmup_steps
    if step < warmup:
        return peak * (step + 1) / warmup
    if config.lr_decay == "none":
        return peak
    return peak * math.sqrt(max(1, warmup) / (step + 1))


class Adam:
    """
    Adam over a fixed list of Parameters, updating their data in place.

    Attributes:
        params (list): Parameters being optimised.
        step_count (int): Updates applied so far.
    """

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self, learning_rate):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def l2_penalty(params, weight_decay):
    """weight_decay * sum of squared parameters, as a float."""
    return float(weight_decay * sum(np.sum(np.square(p.data, dtype=np.float64)) for p in params))


def uniform_loss_estimate(num_frames, num_labels, vocab_size):
    """Transducer loss of a model whose every output distribution is uniform."""
    return (num_frames + num_labels) * math.log(vocab_size) - math.log(count_alignments(num_frames, num_labels))


@dataclass
class TrainResult:
    """
    Outcome of a training or distillation run.

    Attributes:
        model (CascadedModel): Trained model.
        metrics (list): Per-step metric dicts.
        checkpoint_path (str or None): Final checkpoint.
        metrics_path (str or None): JSON-lines metric stream.
        teacher_checksum (str or None): Teacher checksum, for distillation runs.
    """

    model: object
    metrics: list = field(default_factory=list)
    checkpoint_path: str = None
    metrics_path: str = None
    teacher_checksum: str = None


class Trainer:
    """
    Owns one model, its optimiser and the step loop.

    Args:
        config (TrainConfig): Run configuration.
        dataset (list): Training utterances.
        teacher (CascadedModel, optional): Frozen teacher; required when config.kd is set.
        dtype (numpy dtype): Parameter dtype of the student.
    """

    def __init__(self, config, dataset, teacher=None, dtype=np.float32):
        config.validate()
        if not dataset:
            raise UsageError("Training needs a non-empty dataset")
        if config.kd is not None and teacher is None:
            raise ConfigurationError("Distillation is configured but no teacher model was given")
        self.config = config
        self.dataset = list(dataset)
        self.teacher = teacher
        self.model = build_model(config.model_config, seed=config.seed, dtype=dtype)
        self.params = self.model.parameters()
        self.optimizer = Adam(self.params)
        self.metrics = []
        self._epoch_orders = {}

    def batch_indices(self, step):
        """Dataset indices of a step's batch: consecutive slices of per-epoch permutations."""
        n = len(self.dataset)
        indices = []
        for position in range(step * self.config.batch_size, (step + 1) * self.config.batch_size):
            epoch, offset = divmod(position, n)
            if epoch not in self._epoch_orders:
                self._epoch_orders = {epoch: Rng(derive_seed(self.config.seed, f"epoch{epoch}")).permutation(n)}
            indices.append(int(self._epoch_orders[epoch][offset]))
        return indices

    def _augment(self, features, seed):
        task = self.config.task
        num_frames, num_bins = features.shape
        return spec_augment(features, task.time_masks, min(task.time_width, num_frames),
                            task.freq_masks, min(task.freq_width, num_bins), seed)

    def utterance_losses(self, utterance, step, tape):
        """
        Transducer and distillation losses of one utterance.

        Returns:
            tuple: (total, rnnt, kd) DiffArrays; kd is None without distillation.
        """
        cfg = self.config
        key = f"{step}:{utterance.utt_id}"
        features = self._augment(utterance.features, derive_seed(cfg.seed, "augment" + key))
        dropout_rng = Rng(derive_seed(cfg.seed, "dropout" + key))
        tokens = tuple(utterance.tokens)

        enc_c = encode_causal(features, self.model, rng=dropout_rng, tape=tape)
        enc_n = encode_noncausal(enc_c, self.model, rng=dropout_rng)
        pred = self.model.predictor.predict(tokens)
        lattice_c = build_lattice(enc_c, pred, self.model.joint, labels=tokens)
        lattice_n = build_lattice(enc_n, pred, self.model.joint, labels=tokens)
        rnnt = cascaded_loss(rnnt_loss(lattice_c), rnnt_loss(lattice_n), cfg.causal_weight)
        if cfg.kd is None:
            return rnnt, rnnt, None

        kd = cfg.kd
        if kd.temperature != 1.0:
            lattice_c = build_lattice(enc_c, pred, self.model.joint, kd.temperature, tokens)
            lattice_n = build_lattice(enc_n, pred, self.model.joint, kd.temperature, tokens)
        teacher_c, teacher_n = self.teacher_lattices(features, tokens)
        terms = {}
        if kd.branches in ("causal", "both"):
            terms["causal"] = distillation_loss(teacher_c, lattice_c, kd, tokens)
        if kd.branches in ("noncausal", "both"):
            terms["noncausal"] = distillation_loss(teacher_n, lattice_n, kd, tokens)
        if len(terms) == 2:
            distill = cascaded_loss(terms["causal"], terms["noncausal"], cfg.causal_weight)
        else:
            distill = next(iter(terms.values()))
        return total_loss(rnnt, distill, kd.alpha), rnnt, distill

    def teacher_lattices(self, features, tokens):
        """Teacher lattices of both branches, computed without gradient tracking."""
        teacher = self.teacher
        with teacher.frozen():
            enc_c = encode_causal(features, teacher)
            enc_n = encode_noncausal(enc_c, teacher)
            pred = teacher.predictor.predict(tokens)
            temperature = self.config.kd.temperature
            return (build_lattice(enc_c, pred, teacher.joint, temperature, tokens),
                    build_lattice(enc_n, pred, teacher.joint, temperature, tokens))

    def train_step(self, step):
        """
        One optimiser update.

        Returns:
            dict: Metric record of the step.

        Raises:
            TrainingDivergedError: If the loss is not finite.
        """
        cfg = self.config
        lr = lr_at_step(step, cfg)
        batch = [self.dataset[i] for i in self.batch_indices(step)]
        self.model.train()
        with T.Tape() as tape:
            totals, rnnts, kds = [], [], []
            for utt in batch:
                total, rnnt, kd = self.utterance_losses(utt, step, tape)
                totals.append(total)
                rnnts.append(rnnt.item())
                if kd is not None:
                    kds.append(kd.item())
            loss = batch_mean(totals)
            l2 = l2_penalty(self.params, cfg.weight_decay)
            value = loss.item() + l2
            if not np.isfinite(value):
                last = self.metrics[-1] if self.metrics else None
                raise TrainingDivergedError(f"Loss became {value} at step {step}", step=step, last_metrics=last)
            self.model.zero_grad()
            tape.backward(loss)
        for p in self.params:
            p.grad = (p.grad + 2.0 * cfg.weight_decay * p.data).astype(p.dtype) if p.grad is not None else None
        self.optimizer.step(lr)

        factor = self.model.subsample_factor
        uniform = np.mean([
            uniform_loss_estimate(-(-utt.num_frames // factor), len(utt.tokens), self.model.vocab_size)
            for utt in batch
        ])
        record = {
            "step": step,
            "loss": float(value),
            "rnnt_loss": float(np.mean(rnnts)),
            "kd_loss": float(np.mean(kds)) if kds else 0.0,
            "l2_loss": l2,
            "learning_rate": float(lr),
            "uniform_loss": float(uniform),
        }
        self.metrics.append(record)
        return record

    def run(self):
        """Run config.steps updates; returns the metric records."""
        cfg = self.config
        logger.info(f"Training {cfg.decoder.kind} model for {cfg.steps} steps "
                    f"(batch {cfg.batch_size}, seed {cfg.seed}, kd={'on' if cfg.kd else 'off'})")
        for step in range(cfg.steps):
            record = self.train_step(step)
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                logger.info(f"step {step}: loss={record['loss']:.4f} rnnt={record['rnnt_loss']:.4f} "
                            f"kd={record['kd_loss']:.5f} lr={record['learning_rate']:.2e}")
        self.model.eval()
        return self.metrics


def _save_outputs(trainer, output_dir, config):
    os.makedirs(output_dir, exist_ok=True)
    metrics_path = write_jsonl(trainer.metrics, os.path.join(output_dir, "metrics.jsonl"), METRIC_COLUMNS)
    checkpoint_path = save_checkpoint(trainer.model, config, os.path.join(output_dir, "final.ckpt"))
    write_config_file(config, os.path.join(output_dir, "config.env"))
    return checkpoint_path, metrics_path


def _run(trainer, config, output_dir):
    try:
        trainer.run()
    except TrainingDivergedError as e:
        logger.error(f"Training diverged at step {e.step}: {e}")
        if output_dir:
            write_jsonl(trainer.metrics, os.path.join(output_dir, "metrics.jsonl"), METRIC_COLUMNS)
        raise
    result = TrainResult(model=trainer.model, metrics=trainer.metrics)
    if output_dir:
        result.checkpoint_path, result.metrics_path = _save_outputs(trainer, output_dir, config)
    return result


def train(config, dataset, output_dir=None, dtype=np.float32):
    """
    Train a model without a teacher.

    Args:
        config (TrainConfig): Run configuration; kd must be unset.
        dataset (list): Training utterances.
        output_dir (str, optional): Where the checkpoint, metrics and config go.

    Returns:
        TrainResult: Model and metric stream.

    Raises:
        ConfigurationError: If the config asks for distillation.
        TrainingDivergedError: On a non-finite loss.
    """
    if config.kd is not None:
        raise ConfigurationError("Config enables distillation; use distill_train")
    trainer = Trainer(config, dataset, dtype=dtype)
    logger.info(f"Model size: {count_params(trainer.model)['total']:,} parameters")
    return _run(trainer, config, output_dir)


def _check_compatible(teacher_config, student_config):
    for name in ("vocab_size", "feature_dim"):
        if getattr(teacher_config, name) != getattr(student_config, name):
            raise ConfigurationError(f"Teacher {name} {getattr(teacher_config, name)} != "
                                     f"student {name} {getattr(student_config, name)}")
    if teacher_config.cascade.subsample_factor != student_config.cascade.subsample_factor:
        raise ConfigurationError(f"Teacher subsampling {teacher_config.cascade.subsample_factor} != "
                                 f"student subsampling {student_config.cascade.subsample_factor}")


def distill_train(teacher, student_config, dataset, output_dir=None, dtype=np.float32):
    """
    Train a student against a frozen teacher.

    Args:
        teacher (str or CascadedModel): Teacher checkpoint path or model.
        student_config (TrainConfig): Student configuration with kd set.
        dataset (list): Training utterances.
        output_dir (str, optional): Where the student's outputs go.

    Returns:
        TrainResult: Student model, metrics and the teacher checksum.

    Raises:
        ConfigurationError: If kd is unset or teacher and student disagree on
            vocabulary, feature width or subsampling.
        TransducerLabError: If the teacher's parameters changed.
    """
    if student_config.kd is None:
        raise ConfigurationError("distill_train needs a KD configuration")
    if isinstance(teacher, str):
        student_config = replace(student_config, teacher_checkpoint=teacher)
        teacher, _ = load_checkpoint(teacher)
    elif not student_config.teacher_checkpoint:
        student_config = replace(student_config, teacher_checkpoint="in-memory")
    _check_compatible(teacher.config, student_config.model_config)
    teacher.eval()
    before = parameter_checksum(teacher)

    trainer = Trainer(student_config, dataset, teacher=teacher, dtype=dtype)
    result = _run(trainer, student_config, output_dir)

    after = parameter_checksum(teacher)
    if after != before:
        logger.error("Teacher parameters changed during distillation")
        raise TransducerLabError("Teacher parameters changed during distillation")
    result.teacher_checksum = after
    logger.info(f"Teacher checksum unchanged: {after[:16]}")
    return result
