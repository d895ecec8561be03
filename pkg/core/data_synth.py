"""
Synthetic Speech-Like Data
--------------------------
Generates mel-like feature sequences with a learnable mapping to token
strings, plus the simple augmentation and frame-stacking frontend used by
the encoders.

Each label id owns a fixed prototype of frames_per_token x feature_dim
values drawn from prototype_seed. An utterance is the concatenation of its
tokens' prototypes plus Gaussian noise, one frame per 10 ms.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from core.errors import UsageError
from core.rng import Rng, derive_seed

logger = logging.getLogger(__name__)

FRAMES_PER_SECOND = 100


@dataclass(frozen=True)
class SynthTaskSpec:
    """
    Definition of a synthetic recognition task.

    Attributes:
        vocab_size (int): V, including blank id 0.
        frames_per_token (int): d, frames emitted per token.
        feature_dim (int): F, feature values per frame.
        noise_std (float): Standard deviation of additive noise.
        prototype_seed (int): Seed fixing the per-token prototypes.
    """

    vocab_size: int = 16
    frames_per_token: int = 4
    feature_dim: int = 80
    noise_std: float = 0.1
    prototype_seed: int = 1234

    def __post_init__(self):
        if self.vocab_size < 2:
            raise UsageError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.frames_per_token < 1:
            raise UsageError(f"frames_per_token must be at least 1, got {self.frames_per_token}")
        if self.feature_dim < 1:
            raise UsageError(f"feature_dim must be at least 1, got {self.feature_dim}")
        if self.noise_std < 0:
            raise UsageError(f"noise_std must be non-negative, got {self.noise_std}")


@dataclass
class Utterance:
    """
    Feature matrix with its reference labels.

    Attributes:
        utt_id (str): Identifier.
        features (numpy.ndarray): T x F float32 matrix.
        tokens (tuple): Label ids in [1, V-1].
    """

    utt_id: str
    features: np.ndarray
    tokens: tuple = field(default_factory=tuple)

    @property
    def num_frames(self):
        return int(self.features.shape[0])

    @property
    def duration_seconds(self):
        return self.num_frames / FRAMES_PER_SECOND


@lru_cache(maxsize=32)
def prototypes(spec):
    """
    Per-token prototype frames, shape V x d x F. Row 0 (blank) is never emitted.
    """
    rng = Rng(spec.prototype_seed)
    return rng.normal((spec.vocab_size, spec.frames_per_token, spec.feature_dim))


def generate_utterance(spec, num_tokens, seed, utt_id=None):
    """
    Generate one utterance.

    Args:
        spec (SynthTaskSpec): Task definition.
        num_tokens (int): Number of labels, at least 1.
        seed (int): Seed for the token draw and the noise.
        utt_id (str, optional): Identifier; derived from the seed if omitted.

    Returns:
        Utterance: Features with T = num_tokens * frames_per_token.

    Raises:
        UsageError: If num_tokens < 1.
    """
    if num_tokens < 1:
        raise UsageError(f"num_tokens must be at least 1, got {num_tokens}")
    rng = Rng(seed)
    tokens = tuple(int(k) for k in rng.child("tokens").integers(1, spec.vocab_size, size=num_tokens))
    frames = prototypes(spec)[list(tokens)].reshape(-1, spec.feature_dim)
    noise = rng.child("noise").normal(frames.shape, std=spec.noise_std) if spec.noise_std > 0 else 0.0
    features = (frames + noise).astype(np.float32)
    return Utterance(utt_id=utt_id or f"utt-{seed}", features=features, tokens=tokens)


def generate_dataset(spec, num_utterances, seed, min_tokens=5, max_tokens=12, prefix="utt"):
    """
    Generate a reproducible list of utterances.

    Utterance i is generated from a seed derived from (seed, i), so any
    subset can be regenerated independently.

    Args:
        spec (SynthTaskSpec): Task definition.
        num_utterances (int): Number of utterances.
        seed (int): Dataset seed.
        min_tokens (int): Shortest label sequence.
        max_tokens (int): Longest label sequence.
        prefix (str): Identifier prefix.

    Returns:
        list: Utterances.
    """
    if num_utterances < 1:
        raise UsageError(f"num_utterances must be at least 1, got {num_utterances}")
    if not 1 <= min_tokens <= max_tokens:
        raise UsageError(f"Invalid token range [{min_tokens}, {max_tokens}]")
    lengths = Rng(derive_seed(seed, "lengths")).integers(min_tokens, max_tokens + 1, size=num_utterances)
    dataset = [
        generate_utterance(spec, int(n), derive_seed(seed, i), utt_id=f"{prefix}-{i:05d}")
        for i, n in enumerate(lengths)
    ]
    logger.info(f"Generated {len(dataset)} utterances (V={spec.vocab_size}, seed={seed})")
    return dataset


def spec_augment(features, time_masks, time_width, freq_masks, freq_width, seed):
    """
    Zero out random contiguous time spans and frequency bands.

    Each mask has exactly the given width; its start is drawn uniformly
    among the positions where it fits.

    Args:
        features (numpy.ndarray): T x F matrix.
        time_masks (int): Number of time masks.
        time_width (int): Frames per time mask.
        freq_masks (int): Number of frequency masks.
        freq_width (int): Bins per frequency mask.
        seed (int): Placement seed.

    Returns:
        numpy.ndarray: Masked copy.

    Raises:
        UsageError: If a count or width is negative or a width exceeds its axis.
    """
    num_frames, num_bins = features.shape
    for name, value in (("time_masks", time_masks), ("time_width", time_width),
                        ("freq_masks", freq_masks), ("freq_width", freq_width)):
        if value < 0:
            raise UsageError(f"{name} must be non-negative, got {value}")
    if time_width > num_frames:
        raise UsageError(f"time_width {time_width} exceeds {num_frames} frames")
    if freq_width > num_bins:
        raise UsageError(f"freq_width {freq_width} exceeds {num_bins} bins")

    out = np.array(features, copy=True)
    rng = Rng(seed)
    for start in rng.integers(0, num_frames - time_width + 1, size=time_masks):
        out[start:start + time_width, :] = 0.0
    for start in rng.integers(0, num_bins - freq_width + 1, size=freq_masks):
        out[:, start:start + freq_width] = 0.0
    return out


def subsample(features, factor):
    """
    Stack consecutive frames: row j holds frames j*factor .. j*factor+factor-1.

    Args:
        features (numpy.ndarray): T x F matrix.
        factor (int): Stacking factor, at least 1.

    Returns:
        numpy.ndarray: ceil(T/factor) x (F*factor) matrix, zero-padded at the tail.

    Raises:
        UsageError: If factor < 1.
    """
    if factor < 1:
        raise UsageError(f"Subsampling factor must be at least 1, got {factor}")
    num_frames, num_bins = features.shape
    rows = -(-num_frames // factor)
    padded = np.zeros((rows * factor, num_bins), dtype=features.dtype)
    padded[:num_frames] = features
    return padded.reshape(rows, factor * num_bins)


def unstack(stacked, factor, num_frames):
    """Inverse of subsample, dropping tail padding."""
    rows, width = stacked.shape
    return stacked.reshape(rows * factor, width // factor)[:num_frames]


def nearest_prototype_decode(features, spec):
    """
    Classify each d-frame block as the label with the closest prototype.

    Raises:
        UsageError: If T is not a multiple of frames_per_token.
    """
    d = spec.frames_per_token
    if features.shape[0] % d != 0:
        raise UsageError(f"{features.shape[0]} frames is not a multiple of {d}")
    blocks = features.reshape(-1, 1, d, spec.feature_dim).astype(np.float64)
    protos = prototypes(spec)[1:].astype(np.float64)[None]
    distances = np.sum((blocks - protos) ** 2, axis=(2, 3))
    return tuple(int(k) + 1 for k in np.argmin(distances, axis=1))
