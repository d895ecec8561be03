"""
Experiment Configuration
------------------------
Runtime settings from the environment and experiment configurations from
dotenv-format files.

Runtime settings (.env, loaded with python-dotenv):
    LOG_LEVEL, LOG_FILE, RESULTS_DB, OUTPUT_DIR, RUN_SLOW_TESTS

Experiment config files use flat upper-case keys with "__" separating the
section from the field, for example:

    CASCADE__MODEL_DIM=144
    DECODER__KIND=tar
    KD__ALPHA=0.02
    TRAIN__LEARNING_RATE=0.0003

Values are coerced to the field type. Unknown keys are errors.
"""

import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace

from dotenv import dotenv_values, load_dotenv

from core.data_synth import SynthTaskSpec
from core.distillation import KdConfig
from core.errors import ConfigurationError
from core.model import CascadeConfig, DecoderConfig, ModelConfig
from experiments.compression import compress_config

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()


# Helper function to clean environment variables
def clean_env_value(value):
    if value is None:
        return None
    # Remove quotes and trailing comments
    value = value.strip()
    value = re.sub(r'\s+#.*$', '', value)
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        value = value[1:-1]
    return value.strip()


LOG_LEVEL = clean_env_value(os.getenv("LOG_LEVEL", "INFO"))
LOG_FILE = clean_env_value(os.getenv("LOG_FILE", "transducer_lab.log"))
RESULTS_DB = clean_env_value(os.getenv("RESULTS_DB", "results.db"))
OUTPUT_DIR = clean_env_value(os.getenv("OUTPUT_DIR", "runs"))


def slow_tests_enabled():
    return clean_env_value(os.getenv("RUN_SLOW_TESTS", "0")).lower() in ("1", "true", "yes")


@dataclass(frozen=True)
class TaskConfig:
    """
    Synthetic task and dataset sizes.

    Attributes:
        vocab_size (int): V including blank.
        frames_per_token (int): Frames per token.
        feature_dim (int): Feature values per frame.
        noise_std (float): Additive noise.
        prototype_seed (int): Seed of the token prototypes.
        train_utterances (int): Training set size.
        eval_utterances (int): Evaluation set size.
        min_tokens (int): Shortest utterance in tokens.
        max_tokens (int): Longest utterance in tokens.
        time_masks, time_width, freq_masks, freq_width (int): Training augmentation.
    """

    vocab_size: int = 16
    frames_per_token: int = 4
    feature_dim: int = 80
    noise_std: float = 0.1
    prototype_seed: int = 1234
    train_utterances: int = 256
    eval_utterances: int = 64
    min_tokens: int = 5
    max_tokens: int = 12
    time_masks: int = 0
    time_width: int = 2
    freq_masks: int = 1
    freq_width: int = 8

    def synth_spec(self):
        return SynthTaskSpec(vocab_size=self.vocab_size, frames_per_token=self.frames_per_token,
                             feature_dim=self.feature_dim, noise_std=self.noise_std,
                             prototype_seed=self.prototype_seed)


@dataclass(frozen=True)
class TrainConfig:
    """
    Everything that determines a training run.

    Attributes:
        task (TaskConfig): Synthetic task.
        cascade (CascadeConfig): Encoder topology.
        decoder (DecoderConfig): Predictor and joint network.
        kd (KdConfig or None): Distillation settings; None trains without a teacher.
        learning_rate (float): Peak learning rate.
        warmup_steps (int): Linear warmup length.
        lr_decay (str): "inverse_sqrt" or "none" after warmup.
        weight_decay (float): L2 coefficient on all parameters.
        causal_weight (float): Weight of the causal branch loss.
        batch_size (int): Utterances per step.
        steps (int): Optimizer steps.
        seed (int): Run seed.
        log_every (int): Steps between logged metrics.
        teacher_checkpoint (str or None): Teacher path, required with kd.
    """

    task: TaskConfig = field(default_factory=TaskConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    kd: KdConfig = None
    learning_rate: float = 3e-4
    warmup_steps: int = 500
    lr_decay: str = "inverse_sqrt"
    weight_decay: float = 1e-6
    causal_weight: float = 0.8
    batch_size: int = 16
    steps: int = 5000
    seed: int = 0
    log_every: int = 50
    teacher_checkpoint: str = None

    @property
    def model_config(self):
        return ModelConfig(vocab_size=self.task.vocab_size, feature_dim=self.task.feature_dim,
                           cascade=self.cascade, decoder=self.decoder)

    def validate(self):
        """
        Raises:
            ConfigurationError: On any inconsistent value.
        """
        self.model_config.validate()
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigurationError("warmup_steps and weight_decay must be non-negative")
        if self.lr_decay not in ("inverse_sqrt", "none"):
            raise ConfigurationError(f"Unknown lr_decay '{self.lr_decay}'")
        if not 0.0 <= self.causal_weight <= 1.0:
            raise ConfigurationError(f"causal_weight must be in [0, 1], got {self.causal_weight}")
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise ConfigurationError("batch_size and log_every must be positive and steps non-negative")
        if self.kd is not None:
            self.kd.validate()
            if not self.teacher_checkpoint:
                raise ConfigurationError("Distillation needs TRAIN__TEACHER_CHECKPOINT")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        kd = data.get("kd")
        return cls(
            task=TaskConfig(**data["task"]),
            cascade=CascadeConfig(**data["cascade"]),
            decoder=DecoderConfig(**data["decoder"]),
            kd=KdConfig(**kd) if kd else None,
            **{k: v for k, v in data.items() if k not in ("task", "cascade", "decoder", "kd")},
        )


SECTIONS = {
    "TASK": TaskConfig,
    "CASCADE": CascadeConfig,
    "DECODER": DecoderConfig,
    "KD": KdConfig,
}
TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name not in ("task", "cascade", "decoder", "kd")}
TRAIN_TYPES = {
    "learning_rate": float, "warmup_steps": int, "lr_decay": str, "weight_decay": float,
    "causal_weight": float, "batch_size": int, "steps": int, "seed": int, "log_every": int,
    "teacher_checkpoint": str,
}


def _coerce(key, raw, kind):
    raw = clean_env_value(raw)
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("1", "true", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return None if raw.lower() in ("", "none") else raw
    except ValueError:
        raise ConfigurationError(f"Cannot parse {key}={raw!r} as {kind.__name__}")


def _field_type(cls, name):
    default = {f.name: f for f in fields(cls)}[name].default
    return type(default) if default is not None else str


def apply_overrides(config, values):
    """
    Apply flat SECTION__FIELD=value pairs to a TrainConfig.

    KD__ENABLED=true|false switches distillation on or off; other KD keys
    enable it implicitly.

    Args:
        config (TrainConfig): Starting configuration.
        values (dict): Raw string values keyed by flat key.

    Returns:
        TrainConfig: Updated configuration.

    Raises:
        ConfigurationError: On unknown keys or unparsable values.
    """
    sections = {"TASK": {}, "CASCADE": {}, "DECODER": {}, "KD": {}}
    train = {}
    kd_enabled = None
    for key, raw in values.items():
        key = key.strip().upper()
        if "__" not in key:
            raise ConfigurationError(f"Config key '{key}' must look like SECTION__FIELD")
        section, name = key.split("__", 1)
        name = name.lower()
        if section == "KD" and name == "enabled":
            kd_enabled = _coerce(key, raw, bool)
        elif section in SECTIONS:
            cls = SECTIONS[section]
            if name not in {f.name for f in fields(cls)}:
                raise ConfigurationError(f"Unknown config key '{key}'")
            sections[section][name] = _coerce(key, raw, _field_type(cls, name))
        elif section == "TRAIN":
            if name not in TRAIN_FIELDS:
                raise ConfigurationError(f"Unknown config key '{key}'")
            train[name] = _coerce(key, raw, TRAIN_TYPES[name])
        else:
            raise ConfigurationError(f"Unknown config section '{section}' in '{key}'")

    kd = config.kd
    if kd_enabled is False:
        kd = None
    elif kd_enabled or sections["KD"]:
        kd = replace(kd or KdConfig(), **sections["KD"])
    return replace(
        config,
        task=replace(config.task, **sections["TASK"]),
        cascade=replace(config.cascade, **sections["CASCADE"]),
        decoder=replace(config.decoder, **sections["DECODER"]),
        kd=kd,
        **train,
    )


def flatten_config(config):
    """TrainConfig -> flat SECTION__FIELD string mapping, the inverse of apply_overrides."""
    flat = {}
    for section, cls in SECTIONS.items():
        value = getattr(config, section.lower())
        if section == "KD":
            flat["KD__ENABLED"] = "true" if value is not None else "false"
            if value is None:
                continue
        for f in fields(cls):
            flat[f"{section}__{f.name.upper()}"] = str(getattr(value, f.name))
    for name in TRAIN_FIELDS:
        flat[f"TRAIN__{name.upper()}"] = str(getattr(config, name))
    return flat


def write_config_file(config, path):
    """Write a TrainConfig as a dotenv-format file."""
    lines = [f"{key}={value}" for key, value in flatten_config(config).items()]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    logger.info(f"Wrote config to {path}")
    return path


def parse_set_arguments(pairs):
    """Turn ["KEY=VALUE", ...] command-line pairs into a dict."""
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(f"Expected KEY=VALUE, got '{pair}'")
        key, value = pair.split("=", 1)
        values[key.strip()] = value
    return values


def load_config(path=None, preset="toy", overrides=None, seed=None):
    """
    Build a TrainConfig from a preset, an optional config file and overrides.

    Args:
        path (str, optional): dotenv-format config file.
        preset (str): Starting preset name (see PRESETS).
        overrides (dict, optional): Flat key -> raw value, applied after the file.
        seed (int, optional): Replaces TRAIN__SEED.

    Returns:
        TrainConfig: Validated configuration.

    Raises:
        ConfigurationError: On unknown presets, keys or values.
        FileNotFoundError: If the config file does not exist.
    """
    if preset not in PRESETS:
        raise ConfigurationError(f"Unknown preset '{preset}'; choose from {sorted(PRESETS)}")
    config = PRESETS[preset]()
    if path:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        config = apply_overrides(config, {k: v for k, v in dotenv_values(path).items() if v is not None})
    if overrides:
        config = apply_overrides(config, overrides)
    if seed is not None:
        config = replace(config, seed=int(seed))
    return config.validate()


# Presets


def toy_config():
    """Small cascaded LSTM model that trains in minutes; used by the tests."""
    return TrainConfig(
        task=TaskConfig(train_utterances=128, eval_utterances=32),
        cascade=CascadeConfig(causal_layers=2, noncausal_layers=1, model_dim=32, num_heads=4),
        decoder=DecoderConfig(kind="lstm", embedding_dim=32, hidden_dim=32, pred_dim=32, joint_dim=32),
        learning_rate=2e-3,
        warmup_steps=50,
        batch_size=8,
        steps=400,
        log_every=20,
    )


def desk_teacher_config():
    """16 causal + 6 non-causal blocks at width 144 with a 2-layer LSTM decoder."""
    return TrainConfig(
        cascade=CascadeConfig(causal_layers=16, noncausal_layers=6, model_dim=144, num_heads=4),
        decoder=DecoderConfig(kind="lstm", embedding_dim=128, hidden_dim=128, pred_dim=128, joint_dim=128),
    )


def paper_teacher_config():
    """
    Full-size reference: V=1000, width 256, 16 + 6 blocks and an LSTM decoder
    with E = H = P = J = 560 (about 6.9 M decoder parameters, 40.4 M total).
    Used for parameter accounting only.
    """
    return TrainConfig(
        task=TaskConfig(vocab_size=1000),
        cascade=CascadeConfig(causal_layers=16, noncausal_layers=6, model_dim=256, num_heads=4),
        decoder=DecoderConfig(kind="lstm", embedding_dim=560, hidden_dim=560, pred_dim=560, joint_dim=560),
    )


def tar_decoder(embedding_dim, history_size=5, num_heads=4):
    """Tied TAR decoder whose predictor, joint and embedding widths all equal embedding_dim."""
    return DecoderConfig(kind="tar", embedding_dim=embedding_dim, hidden_dim=embedding_dim,
                         pred_dim=embedding_dim, joint_dim=embedding_dim, history_size=history_size,
                         num_heads=num_heads, tied=True)


def paper_tar_config(embedding_dim=768):
    return replace(paper_teacher_config(), decoder=tar_decoder(embedding_dim))


def toy_tar_config():
    return replace(toy_config(), decoder=tar_decoder(32))


def compressed_student(teacher, factor_percent=50, decoder_kind="tar"):
    """
    Student derived from a teacher preset: factor_percent fewer parameters,
    a TAR (or LSTM) decoder and distillation switched on.
    """
    decoder = tar_decoder(teacher.decoder.embedding_dim) if decoder_kind == "tar" else teacher.decoder
    student, _ = compress_config(teacher, factor_percent, decoder=decoder)
    return replace(student, kd=KdConfig())


def toy_student_config():
    return compressed_student(toy_config())


def desk_student_config():
    return compressed_student(desk_teacher_config())


PRESETS = {
    "toy": toy_config,
    "toy_tar": toy_tar_config,
    "toy_student": toy_student_config,
    "desk_teacher": desk_teacher_config,
    "desk_student": desk_student_config,
    "paper_teacher": paper_teacher_config,
    "paper_tar": paper_tar_config,
}
