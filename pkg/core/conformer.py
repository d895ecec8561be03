"""
Conformer Encoder
-----------------
Conformer blocks and the masks that make them causal or non-causal.

A block is the macaron arrangement: half-step feed-forward, multi-head
self-attention with a learned relative-position bias, a convolution module,
a second half-step feed-forward, and a final layer norm. Every sub-layer is
pre-normalised and wrapped in a residual connection.

In causal mode attention is restricted to j <= i and the depthwise
convolution sees only the current and previous kernel_width - 1 frames, so
row t of the output depends on input rows <= t only.
"""

import logging
from enum import Enum

import numpy as np

from core import tensor as T
from core.errors import UsageError
from core.layers import LayerNorm, Linear, layer_norm_params, linear_params

logger = logging.getLogger(__name__)


class AttentionMode(str, Enum):
    CAUSAL = "causal"
    NONCAUSAL = "noncausal"


def attention_mask(num_frames, mode):
    """
    Boolean matrix of allowed (query, key) pairs.

    Args:
        num_frames (int): Sequence length, at least 1.
        mode (str or AttentionMode): "causal" allows j <= i; "noncausal" allows all.

    Returns:
        numpy.ndarray: num_frames x num_frames booleans.

    Raises:
        UsageError: If num_frames < 1.
    """
    if num_frames < 1:
        raise UsageError(f"num_frames must be at least 1, got {num_frames}")
    if AttentionMode(mode) is AttentionMode.CAUSAL:
        return np.tril(np.ones((num_frames, num_frames), dtype=bool))
    return np.ones((num_frames, num_frames), dtype=bool)


def relative_position_index(num_frames, max_offset):
    offsets = np.arange(num_frames)[None, :] - np.arange(num_frames)[:, None]
    return np.clip(offsets, -max_offset, max_offset) + max_offset


class FeedForward(T.Module):
    def __init__(self, rng, dim, multiplier, dtype):
        self.norm = LayerNorm(dim, dtype)
        self.expand = Linear(rng.child("expand"), dim, multiplier * dim, dtype=dtype)
        self.contract = Linear(rng.child("contract"), multiplier * dim, dim, dtype=dtype)

    def __call__(self, x, drop):
        h = T.swish(self.expand(self.norm(x)))
        return drop(self.contract(drop(h)))


class RelativeSelfAttention(T.Module):
    """
    Multi-head self-attention with a learned bias per head and clipped offset.

    Attributes:
        rel_bias (Parameter): num_heads x (2 * max_offset + 1) table.
    """

    def __init__(self, rng, dim, num_heads, max_offset, dtype):
        if dim % num_heads != 0:
            raise UsageError(f"model_dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.max_offset = max_offset
        self.norm = LayerNorm(dim, dtype)
        self.query = Linear(rng.child("query"), dim, dim, dtype=dtype)
        self.key = Linear(rng.child("key"), dim, dim, dtype=dtype)
        self.value = Linear(rng.child("value"), dim, dim, dtype=dtype)
        self.out = Linear(rng.child("out"), dim, dim, dtype=dtype)
        self.rel_bias = T.Parameter(np.zeros((num_heads, 2 * max_offset + 1), dtype=dtype), name="rel_bias")

    def _split(self, x, num_frames):
        head_dim = x.shape[-1] // self.num_heads
        return T.transpose(x.reshape(num_frames, self.num_heads, head_dim), (1, 0, 2))

    def __call__(self, x, mode, drop):
        num_frames, dim = x.shape
        h = self.norm(x)
        q = self._split(self.query(h), num_frames)
        k = self._split(self.key(h), num_frames)
        v = self._split(self.value(h), num_frames)
        scale = 1.0 / np.sqrt(dim // self.num_heads)
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * scale
        scores = scores + self.rel_bias[:, relative_position_index(num_frames, self.max_offset)]
        allowed = attention_mask(num_frames, mode)
        scores = T.masked_fill(scores, ~allowed[None], -np.inf)
        context = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.transpose(context, (1, 0, 2)).reshape(num_frames, dim)
        return drop(self.out(merged))


class ConvolutionModule(T.Module):
    """
    Pointwise (D -> 2D) + GLU, depthwise over time, layer norm + swish, pointwise (D -> D).

    Layer norm replaces batch norm so single utterances are processed identically
    in training and inference.
    """

    def __init__(self, rng, dim, kernel_width, dtype):
        self.kernel_width = kernel_width
        self.norm = LayerNorm(dim, dtype)
        self.pointwise_in = Linear(rng.child("pointwise_in"), dim, 2 * dim, dtype=dtype)
        self.depthwise = T.Parameter(
            rng.child("depthwise").normal((kernel_width, dim), std=1.0 / np.sqrt(kernel_width), dtype=dtype),
            name="depthwise",
        )
        self.depthwise_bias = T.Parameter(np.zeros(dim, dtype=dtype), name="depthwise_bias")
        self.depthwise_norm = LayerNorm(dim, dtype)
        self.pointwise_out = Linear(rng.child("pointwise_out"), dim, dim, dtype=dtype)

    def __call__(self, x, mode, drop):
        num_frames, dim = x.shape
        a = self.pointwise_in(self.norm(x))
        gated = a[:, :dim] * T.sigmoid(a[:, dim:])
        k = self.kernel_width
        if AttentionMode(mode) is AttentionMode.CAUSAL:
            left, right = k - 1, 0
        else:
            if k % 2 == 0:
                raise UsageError(f"Non-causal convolution needs an odd kernel, got {k}")
            left = right = (k - 1) // 2
        pieces = []
        if left:
            pieces.append(T.constant(np.zeros((left, dim), dtype=x.dtype)))
        pieces.append(gated)
        if right:
            pieces.append(T.constant(np.zeros((right, dim), dtype=x.dtype)))
        padded = T.concat(pieces, axis=0) if len(pieces) > 1 else gated
        conv = self.depthwise_bias
        for i in range(k):
            conv = conv + padded[i:i + num_frames] * self.depthwise[i]
        h = T.swish(self.depthwise_norm(conv))
        return drop(self.pointwise_out(h))


class ConformerBlock(T.Module):
    """
    One conformer block of width model_dim.

    Attributes:
        ffn1, ffn2 (FeedForward): Macaron feed-forward pair, half residual weight.
        mhsa (RelativeSelfAttention): Attention sub-layer.
        conv (ConvolutionModule): Convolution sub-layer.
        final_norm (LayerNorm): Output normalisation.
    """

    def __init__(self, rng, model_dim, num_heads, conv_kernel, max_offset=16,
                 ffn_multiplier=4, dropout=0.1, dtype=np.float32):
        self.model_dim = model_dim
        self.dropout = dropout
        self.ffn1 = FeedForward(rng.child("ffn1"), model_dim, ffn_multiplier, dtype)
        self.mhsa = RelativeSelfAttention(rng.child("mhsa"), model_dim, num_heads, max_offset, dtype)
        self.conv = ConvolutionModule(rng.child("conv"), model_dim, conv_kernel, dtype)
        self.ffn2 = FeedForward(rng.child("ffn2"), model_dim, ffn_multiplier, dtype)
        self.final_norm = LayerNorm(model_dim, dtype)

    def __call__(self, x, mode, rng=None):
        return conformer_block_forward(x, self, mode, rng)


def conformer_block_forward(x, block, mode, rng=None):
    """
    Apply one conformer block.

    Args:
        x (DiffArray): T' x D input.
        block (ConformerBlock): Block parameters.
        mode (str or AttentionMode): Causal or non-causal masking.
        rng (Rng, optional): Dropout stream; dropout runs only when the block
            is in training mode and a stream is given.

    Returns:
        DiffArray: T' x D output.

    Raises:
        UsageError: If the input width differs from the block width.
    """
    if x.ndim != 2 or x.shape[1] != block.model_dim:
        raise UsageError(f"Conformer block expects width {block.model_dim}, got shape {x.shape}")
    training = block.training and rng is not None
    counter = iter(range(1 << 30))

    def drop(h):
        if not training:
            return h
        return T.dropout(h, block.dropout, rng.child(next(counter)), True)

    x = x + 0.5 * block.ffn1(x, drop)
    x = x + block.mhsa(x, mode, drop)
    x = x + block.conv(x, mode, drop)
    x = x + 0.5 * block.ffn2(x, drop)
    return block.final_norm(x)


def conformer_block_params(model_dim, num_heads, conv_kernel, max_offset=16, ffn_multiplier=4):
    """Analytic parameter count of one block."""
    d = model_dim
    ffn = layer_norm_params(d) + linear_params(d, ffn_multiplier * d) + linear_params(ffn_multiplier * d, d)
    mhsa = layer_norm_params(d) + 4 * linear_params(d, d) + num_heads * (2 * max_offset + 1)
    conv = (layer_norm_params(d) + linear_params(d, 2 * d) + conv_kernel * d + d
            + layer_norm_params(d) + linear_params(d, d))
    return 2 * ffn + mhsa + conv + layer_norm_params(d)
