"""
Cascaded Transducer Model
-------------------------
Assembles the frame-stacking frontend, the causal encoder, the non-causal
encoder stacked on the causal output, the shared predictor and the joint
network into one model, and accounts for its parameters.

The same CascadedModel drives both decoding modes: streaming uses only the
causal encoder; non-streaming feeds the causal output through the
non-causal blocks.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from core import tensor as T
from core.conformer import AttentionMode, ConformerBlock, conformer_block_params
from core.data_synth import subsample
from core.decoders import (
    Joint,
    LstmPredictor,
    TarPredictor,
    joint_params,
    lstm_predictor_params,
    tar_predictor_params,
)
from core.errors import ConfigurationError, UsageError
from core.layers import Linear, linear_params
from core.rng import Rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CascadeConfig:
    """
    Encoder topology.

    Attributes:
        causal_layers (int): Blocks in the causal (first-pass) encoder.
        noncausal_layers (int): Blocks in the non-causal (second-pass) encoder.
        model_dim (int): Block width D.
        num_heads (int): Attention heads.
        conv_kernel (int): Depthwise kernel width.
        subsample_factor (int): Frame-stacking factor.
        max_rel_position (int): Relative offsets are clipped to this magnitude.
        ffn_multiplier (int): Feed-forward expansion.
        dropout (float): Dropout after each sub-layer during training.
    """

    causal_layers: int = 16
    noncausal_layers: int = 6
    model_dim: int = 144
    num_heads: int = 4
    conv_kernel: int = 7
    subsample_factor: int = 4
    max_rel_position: int = 16
    ffn_multiplier: int = 4
    dropout: float = 0.1

    def validate(self):
        if self.causal_layers < 1:
            raise ConfigurationError(f"causal_layers must be at least 1, got {self.causal_layers}")
        if self.noncausal_layers < 0:
            raise ConfigurationError(f"noncausal_layers must be non-negative, got {self.noncausal_layers}")
        if self.model_dim < 1 or self.model_dim % self.num_heads != 0:
            raise ConfigurationError(f"model_dim {self.model_dim} must be a positive multiple of {self.num_heads}")
        if self.noncausal_layers > 0 and self.conv_kernel % 2 == 0:
            raise ConfigurationError(f"Non-causal blocks need an odd conv_kernel, got {self.conv_kernel}")
        if self.subsample_factor < 1:
            raise ConfigurationError(f"subsample_factor must be at least 1, got {self.subsample_factor}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class DecoderConfig:
    """
    Predictor and joint network.

    Attributes:
        kind (str): "lstm" or "tar".
        embedding_dim (int): E.
        hidden_dim (int): LSTM width H (unused for TAR).
        num_layers (int): LSTM layers (unused for TAR).
        pred_dim (int): Predictor output width P; TAR forces P = joint_dim.
        joint_dim (int): J.
        history_size (int): TAR history N.
        num_heads (int): TAR heads.
        tied (bool): Share the embedding with the joint output (needs J == E).
    """

    kind: str = "lstm"
    embedding_dim: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    pred_dim: int = 64
    joint_dim: int = 64
    history_size: int = 5
    num_heads: int = 4
    tied: bool = False

    def validate(self):
        if self.kind not in ("lstm", "tar"):
            raise ConfigurationError(f"Unknown decoder kind '{self.kind}'")
        if self.tied and self.joint_dim != self.embedding_dim:
            raise ConfigurationError(f"Tied decoder needs joint_dim == embedding_dim, got {self.joint_dim} != {self.embedding_dim}")
        if self.kind == "tar" and self.pred_dim != self.joint_dim:
            raise ConfigurationError(f"TAR predictor emits joint-width rows: pred_dim {self.pred_dim} != joint_dim {self.joint_dim}")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    feature_dim: int = 80
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must be at least 2, got {self.vocab_size}")
        self.cascade.validate()
        self.decoder.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(
            vocab_size=int(data["vocab_size"]),
            feature_dim=int(data["feature_dim"]),
            cascade=CascadeConfig(**data["cascade"]),
            decoder=DecoderConfig(**data["decoder"]),
        )

    def with_changes(self, cascade=None, decoder=None, **kwargs):
        return replace(
            self,
            cascade=replace(self.cascade, **(cascade or {})),
            decoder=replace(self.decoder, **(decoder or {})),
            **kwargs,
        )


class CascadedModel(T.Module):
    """
    Causal encoder, non-causal encoder, shared predictor and joint network.

    Attributes:
        config (ModelConfig): Architecture.
        in_proj (Linear): Stacked-frame -> D projection (part of the causal encoder).
        causal_blocks (list): Causal ConformerBlocks.
        noncausal_blocks (list): Non-causal ConformerBlocks.
        predictor (LstmPredictor or TarPredictor): Shared prediction network.
        joint (Joint): Joint network.
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        config.validate()
        self.config = config
        cc, dc = config.cascade, config.decoder
        rng = Rng(seed)
        self.in_proj = Linear(rng.child("in_proj"), config.feature_dim * cc.subsample_factor, cc.model_dim, dtype=dtype)
        block_args = dict(model_dim=cc.model_dim, num_heads=cc.num_heads, conv_kernel=cc.conv_kernel,
                          max_offset=cc.max_rel_position, ffn_multiplier=cc.ffn_multiplier,
                          dropout=cc.dropout, dtype=dtype)
        self.causal_blocks = [ConformerBlock(rng.child(f"causal{i}"), **block_args) for i in range(cc.causal_layers)]
        self.noncausal_blocks = [
            ConformerBlock(rng.child(f"noncausal{i}"), **block_args) for i in range(cc.noncausal_layers)
        ]
        if dc.kind == "lstm":
            self.predictor = LstmPredictor(rng.child("predictor"), config.vocab_size, dc.embedding_dim,
                                           dc.hidden_dim, dc.pred_dim, dc.num_layers, dtype=dtype)
        else:
            self.predictor = TarPredictor(rng.child("predictor"), config.vocab_size, dc.embedding_dim,
                                          dc.pred_dim, dc.history_size, dc.num_heads, dtype=dtype)
        self.joint = Joint(rng.child("joint"), cc.model_dim, dc.pred_dim, dc.joint_dim, config.vocab_size,
                           use_pred_proj=(dc.kind == "lstm"),
                           tied_embedding=self.predictor.embedding if dc.tied else None, dtype=dtype)

    @property
    def vocab_size(self):
        return self.config.vocab_size

    @property
    def subsample_factor(self):
        return self.config.cascade.subsample_factor

    def encode_causal(self, features, rng=None):
        return encode_causal(features, self, rng)

    def encode_noncausal(self, causal_out, rng=None):
        return encode_noncausal(causal_out, self, rng)


def _as_features(features, model):
    if isinstance(features, T.DiffArray):
        features = features.data
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise UsageError(f"Expected a non-empty T x F feature matrix, got shape {features.shape}")
    if features.shape[1] != model.config.feature_dim:
        raise UsageError(f"Expected {model.config.feature_dim} feature dims, got {features.shape[1]}")
    return features


def encode_causal(features, model, rng=None, tape=None):
    """
    Frontend and causal encoder.

    Args:
        features (numpy.ndarray): T x F features.
        model (CascadedModel): Model.
        rng (Rng, optional): Dropout stream (training only).
        tape (Tape, optional): Tape the input is recorded on.

    Returns:
        DiffArray: ceil(T / factor) x D encoder output.

    Raises:
        UsageError: On empty or mis-shaped features.
    """
    stacked = subsample(_as_features(features, model), model.subsample_factor)
    x = tape.constant(stacked, dtype=model.in_proj.weight.dtype) if tape is not None else \
        T.constant(stacked, dtype=model.in_proj.weight.dtype)
    x = model.in_proj(x)
    for i, block in enumerate(model.causal_blocks):
        x = block(x, AttentionMode.CAUSAL, rng.child(f"causal{i}") if rng is not None else None)
    return x


def encode_noncausal(causal_out, model, rng=None):
    """
    Non-causal encoder applied to the causal encoder's output.

    Raises:
        UsageError: If the input width differs from the model width.
    """
    if causal_out.ndim != 2 or causal_out.shape[1] != model.config.cascade.model_dim:
        raise UsageError(f"Expected T' x {model.config.cascade.model_dim} input, got {causal_out.shape}")
    x = causal_out
    for i, block in enumerate(model.noncausal_blocks):
        x = block(x, AttentionMode.NONCAUSAL, rng.child(f"noncausal{i}") if rng is not None else None)
    return x


def build_model(config, seed=0, dtype=np.float32):
    model = CascadedModel(config, seed=seed, dtype=dtype)
    logger.info(f"Built {config.decoder.kind} cascaded model with {model.num_params():,} parameters")
    return model


def count_params(model):
    """
    Exact parameter breakdown of a constructed model.

    Tied storage is counted once and attributed to the predictor; the
    frontend projection belongs to the causal encoder.

    Returns:
        dict: causal_encoder, noncausal_encoder, predictor, joint, decoder, total.
    """
    def size(params):
        return int(sum(p.size for p in params))

    predictor = model.predictor.parameters()
    predictor_ids = {id(p) for p in predictor}
    breakdown = {
        "causal_encoder": model.in_proj.num_params() + int(sum(b.num_params() for b in model.causal_blocks)),
        "noncausal_encoder": int(sum(b.num_params() for b in model.noncausal_blocks)),
        "predictor": size(predictor),
        "joint": size(p for p in model.joint.parameters() if id(p) not in predictor_ids),
    }
    breakdown["decoder"] = breakdown["predictor"] + breakdown["joint"]
    breakdown["total"] = (breakdown["causal_encoder"] + breakdown["noncausal_encoder"]
                          + breakdown["decoder"])
    return breakdown


def estimate_params(config):
    """
    Analytic parameter breakdown for a configuration, without allocating it.

    Matches count_params(build_model(config)) exactly.
    """
    cc, dc = config.cascade, config.decoder
    block = conformer_block_params(cc.model_dim, cc.num_heads, cc.conv_kernel, cc.max_rel_position, cc.ffn_multiplier)
    if dc.kind == "lstm":
        predictor = lstm_predictor_params(config.vocab_size, dc.embedding_dim, dc.hidden_dim, dc.pred_dim, dc.num_layers)
    else:
        predictor = tar_predictor_params(config.vocab_size, dc.embedding_dim, dc.pred_dim, dc.history_size, dc.num_heads)
    joint = joint_params(cc.model_dim, dc.pred_dim, dc.joint_dim, config.vocab_size,
                         use_pred_proj=(dc.kind == "lstm"), tied=dc.tied)
    breakdown = {
        "causal_encoder": linear_params(config.feature_dim * cc.subsample_factor, cc.model_dim) + cc.causal_layers * block,
        "noncausal_encoder": cc.noncausal_layers * block,
        "predictor": predictor,
        "joint": joint,
    }
    breakdown["decoder"] = predictor + joint
    breakdown["total"] = breakdown["causal_encoder"] + breakdown["noncausal_encoder"] + breakdown["decoder"]
    return breakdown


def parameter_checksum(model):
    """SHA-256 over parameter names, shapes and raw bytes, in model order."""
    digest = hashlib.sha256()
    for name, p in model.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(str(p.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def copy_parameters(source, target):
    """
    Copy parameter values between models of identical structure.

    Raises:
        ConfigurationError: If names or shapes differ.
    """
    src = dict(source.named_parameters())
    dst = dict(target.named_parameters())
    if src.keys() != dst.keys():
        raise ConfigurationError("Models have different parameter names")
    for name, p in dst.items():
        if src[name].shape != p.shape:
            raise ConfigurationError(f"Shape mismatch for {name}: {src[name].shape} != {p.shape}")
        p.data = np.array(src[name].data, dtype=p.dtype, copy=True)
    return target
