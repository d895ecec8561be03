"""
Basic Layers
------------
Parameterised building blocks shared by the encoders, predictors and joint
network.
"""

import numpy as np

from core import tensor as T
from core.errors import UsageError


def init_weight(rng, fan_in, fan_out, dtype=np.float32):
    """Gaussian initialisation scaled by 1/sqrt(fan_in)."""
    return rng.normal((fan_in, fan_out), std=1.0 / np.sqrt(fan_in), dtype=dtype)


class Linear(T.Module):
    """
    Affine map x @ weight + bias over the last axis.

    Attributes:
        weight (Parameter): in_dim x out_dim matrix.
        bias (Parameter or None): out_dim vector.
    """

    def __init__(self, rng, in_dim, out_dim, bias=True, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = T.Parameter(init_weight(rng, in_dim, out_dim, dtype), name="weight")
        self.bias = T.Parameter(np.zeros(out_dim, dtype=dtype), name="bias") if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise UsageError(f"Linear expects width {self.in_dim}, got {x.shape[-1]}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(T.Module):
    def __init__(self, dim, dtype=np.float32):
        self.dim = dim
        self.scale = T.Parameter(np.ones(dim, dtype=dtype), name="scale")
        self.shift = T.Parameter(np.zeros(dim, dtype=dtype), name="shift")

    def __call__(self, x):
        return T.layer_norm(x, self.scale, self.shift)


def linear_params(in_dim, out_dim, bias=True):
    return in_dim * out_dim + (out_dim if bias else 0)


def layer_norm_params(dim):
    return 2 * dim
