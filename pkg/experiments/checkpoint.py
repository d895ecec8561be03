"""
Checkpoint Containers
---------------------
Binary containers for model checkpoints and feature files.

Layout (all integers little-endian, see docs/CHECKPOINT_FORMAT.md):

    magic        4 bytes  b"CTKD"
    version      u16      FORMAT_VERSION
    total_len    u64      length of the whole container, checksum included
    length_crc   u32      CRC-32 of the 14 bytes above
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys, compact)
    blob_count   u32
    blob_count x:
        name_len u16, name (UTF-8), dtype tag u8, ndim u8, ndim x u32 dims,
        payload (row-major, little-endian)
    checksum     32 bytes SHA-256 of everything before it
"""

import hashlib
import json
import logging
import os
import struct
import zlib

import numpy as np

from core.data_synth import Utterance
from core.errors import (
    ChecksumMismatchError,
    CheckpointConfigMismatchError,
    CheckpointError,
    FormatVersionError,
    TruncatedCheckpointError,
)
from core.model import ModelConfig, build_model
from experiments.config import TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"CTKD"
FORMAT_VERSION = 2
CHECKSUM_BYTES = 32

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
TAG_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}

_PREFIX = struct.Struct("<4sHQ")
_LENGTH_CRC = struct.Struct("<I")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_BLOB_META = struct.Struct("<BB")


def encode_container(header, blobs):
    """
    Serialise a JSON header and named arrays.

    Args:
        header (dict): JSON-serialisable metadata.
        blobs (list): (name, numpy.ndarray) pairs, written in order.

    Returns:
        bytes: Container bytes including the trailing checksum.

    Raises:
        CheckpointError: For an unsupported array dtype.
    """
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_U32.pack(len(header_bytes)), header_bytes, _U32.pack(len(blobs))]
    for name, array in blobs:
        array = np.asarray(array)
        tag = TAG_FOR_DTYPE.get(array.dtype)
        if tag is None:
            raise CheckpointError(f"Cannot store blob '{name}' with dtype {array.dtype}")
        name_bytes = name.encode("utf-8")
        parts.append(_U16.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_BLOB_META.pack(tag, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes())
    content = b"".join(parts)
    total_len = _PREFIX.size + _LENGTH_CRC.size + len(content) + CHECKSUM_BYTES
    prefix = _PREFIX.pack(MAGIC, FORMAT_VERSION, total_len)
    body = prefix + _LENGTH_CRC.pack(zlib.crc32(prefix)) + content
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data, start, end):
        self.data = data
        self.end = end
        self.pos = start

    def take(self, n):
        if self.pos + n > self.end:
            raise CheckpointError(f"Malformed container: field at byte {self.pos} runs past byte {self.end}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return fmt.unpack(self.take(fmt.size))


def decode_container(data):
    """
    Parse and verify container bytes.

    The declared length and the SHA-256 trailer are both checked before any
    of the content is parsed.

    Returns:
        tuple: (header dict, list of (name, numpy.ndarray)).

    Raises:
        FormatVersionError: Wrong magic or unsupported version.
        TruncatedCheckpointError: The data is shorter than the declared length.
        ChecksumMismatchError: The length field or the trailing checksum does
            not match the bytes.
    """
    fixed = _PREFIX.size + _LENGTH_CRC.size
    if len(data) < _PREFIX.size:
        raise TruncatedCheckpointError(f"Container is only {len(data)} bytes")
    magic, version, total_len = _PREFIX.unpack(data[:_PREFIX.size])
    if magic != MAGIC:
        raise FormatVersionError(f"Not a checkpoint container (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"Unsupported container version {version}, expected {FORMAT_VERSION}")
    if len(data) < fixed:
        raise TruncatedCheckpointError(f"Container is only {len(data)} bytes")
    (length_crc,) = _LENGTH_CRC.unpack(data[_PREFIX.size:fixed])
    if zlib.crc32(data[:_PREFIX.size]) != length_crc or total_len < fixed + CHECKSUM_BYTES:
        raise ChecksumMismatchError("Checksum mismatch: container length field is corrupted")
    if len(data) < total_len:
        raise TruncatedCheckpointError(f"Container is {len(data)} bytes, expected {total_len}")
    if len(data) > total_len:
        raise ChecksumMismatchError(f"{len(data) - total_len} unexpected bytes after the checksum")
    if hashlib.sha256(data[:-CHECKSUM_BYTES]).digest() != data[-CHECKSUM_BYTES:]:
        raise ChecksumMismatchError("Checksum mismatch: container is corrupted")

    reader = _Reader(data, fixed, len(data) - CHECKSUM_BYTES)
    (header_len,) = reader.unpack(_U32)
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Malformed container: header is not valid JSON: {e}")
    (count,) = reader.unpack(_U32)
    blobs = []
    for _ in range(count):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode("utf-8", errors="replace")
        tag, ndim = reader.unpack(_BLOB_META)
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Malformed container: blob '{name}' has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        dtype = DTYPE_TAGS[tag]
        payload = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        blobs.append((name, np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))))
    if reader.pos != reader.end:
        raise CheckpointError(f"Malformed container: {reader.end - reader.pos} unexpected bytes before the checksum")
    return header, blobs


def write_container(path, header, blobs):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(encode_container(header, blobs))
    return path


def read_container(path):
    with open(path, "rb") as handle:
        return decode_container(handle.read())


def _model_config_of(config):
    return config if isinstance(config, ModelConfig) else config.model_config


def save_checkpoint(model, config, path):
    """
    Write a model checkpoint.

    Args:
        model (CascadedModel): Model whose parameters are stored.
        config (TrainConfig): Run configuration snapshot.
        path (str): Destination file.

    Raises:
        CheckpointConfigMismatchError: If config does not describe the model.
    """
    if _model_config_of(config) != model.config:
        raise CheckpointConfigMismatchError("Configuration does not describe the model being saved")
    header = {"kind": "model", "train_config": config.to_dict(), "model_config": model.config.to_dict()}
    blobs = [(name, p.data) for name, p in model.named_parameters()]
    try:
        write_container(path, header, blobs)
    except OSError as e:
        logger.error(f"Could not write checkpoint {path}: {e}")
        raise
    logger.info(f"Saved checkpoint with {len(blobs)} tensors to {path}")
    return path


def load_checkpoint(path, expected_config=None):
    """
    Read a model checkpoint.

    Args:
        path (str): Checkpoint file.
        expected_config (TrainConfig or ModelConfig, optional): Architecture the
            checkpoint must match.

    Returns:
        tuple: (CascadedModel, TrainConfig).

    Raises:
        CheckpointError: For corrupted, truncated or foreign files.
        CheckpointConfigMismatchError: If the stored architecture differs from
            expected_config or the stored tensors do not fit it.
    """
    header, blobs = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path} holds '{header.get('kind')}', not a model")
    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"])
    if expected_config is not None and _model_config_of(expected_config) != model_config:
        raise CheckpointConfigMismatchError(
            f"Checkpoint {path} holds a {model_config.decoder.kind} model that does not match the requested "
            f"{_model_config_of(expected_config).decoder.kind} configuration"
        )

    dtype = blobs[0][1].dtype if blobs else np.float32
    model = build_model(model_config, seed=train_config.seed, dtype=dtype)
    params = dict(model.named_parameters())
    stored = dict(blobs)
    if stored.keys() != params.keys():
        missing = sorted(params.keys() - stored.keys())
        extra = sorted(stored.keys() - params.keys())
        raise CheckpointConfigMismatchError(f"Tensor names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointConfigMismatchError(f"Shape of {name} is {stored[name].shape}, model expects {p.shape}")
        p.data = stored[name].copy()
    logger.info(f"Loaded checkpoint {path}")
    return model, train_config


def save_features(utterance, path):
    """Write one utterance's features and tokens as a feature container."""
    header = {"kind": "features", "utt_id": utterance.utt_id, "tokens": [int(k) for k in utterance.tokens]}
    return write_container(path, header, [("features", np.asarray(utterance.features, dtype=np.float32))])


def load_features(path):
    """
    Read a feature container.

    Returns:
        Utterance: Stored utterance.
    """
    header, blobs = read_container(path)
    if header.get("kind") != "features":
        raise CheckpointError(f"{path} holds '{header.get('kind')}', not features")
    return Utterance(utt_id=header["utt_id"], features=dict(blobs)["features"], tokens=tuple(header["tokens"]))
