"""Neural layers used by the encoders and the reverse-step MLP."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    _make,
    as_tensor,
    concat,
    matmul,
    relu,
    reshape,
    softmax,
    swap_last,
    transpose,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ConfigurationError(ValueError):
    """Layer hyperparameters that cannot work together."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested from a single example."""


class Parameter(Tensor):
    """Trainable leaf tensor carrying its RMSprop accumulator."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.accumulator = np.zeros_like(self.data)


class Module:
    """Container that discovers parameters and sub-modules by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name in sorted(vars(self)):
            value = vars(self)[name]
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in sorted(vars(self)):
            value = vars(self)[name]
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Parameter:
    bound = math.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


# linear ----------------------------------------------------------------------

def linear_forward(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in_dim, out_dim]."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weights {weight.shape} "
            f"and bias {bias.shape}")
    return matmul(x, weight) + bias


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = _uniform(rng, in_dim, (in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim))

    def forward(self, x) -> Tensor:
        return linear_forward(x, self.weight, self.bias)


# convolution -------------------------------------------------------------------

def conv2d_forward(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B, C_in, H, W] input with [C_out, C_in, k, k] kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    batch, c_in, height, width = x.shape
    c_out, _, k, k2 = kernels.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernels must be square, got {kernels.shape}")
    if k > height + 2 * padding or k > width + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {k}x{k} larger than padded input "
            f"{height + 2 * padding}x{width + 2 * padding}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    # im2col: rows are (b, h, w) output positions, columns are (c, i, j) taps
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, c_in * k * k)
    w2d = kernels.data.reshape(c_out, c_in * k * k)
    out = (cols @ w2d.T).reshape(batch, out_h, out_w, c_out).transpose(0, 3, 1, 2)

    def back(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        g_kernels = (g2d.T @ cols).reshape(kernels.shape)
        if not x.requires_grad:
            return None, g_kernels
        if stride == 1 and padding <= k - 1:
            # input gradient is a full correlation of g with the flipped kernels
            flipped = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            return conv2d_forward(g, flipped, 1, k - 1 - padding).data, g_kernels
        g_cols = (g2d @ w2d).reshape(batch, out_h, out_w, c_in, k, k)
        g_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                g_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        g_x = g_padded[:, :, padding:padding + height, padding:padding + width]
        return g_x, g_kernels

    return _make(out, (x, kernels), back)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.kernels = _uniform(rng, c_in * kernel * kernel, (c_out, c_in, kernel, kernel))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x) -> Tensor:
        out = conv2d_forward(x, self.kernels, self.stride, self.padding)
        return out + reshape(self.bias, (1, -1, 1, 1))


# batch normalization -------------------------------------------------------------

def _bn_normalize(x: Tensor, mean: np.ndarray, var: np.ndarray, axes: tuple,
                  batch_stats: bool, eps: float) -> Tensor:
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std

    def back(g):
        if not batch_stats:
            return (g * inv_std,)
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _make(xhat, (x,), back)


def batchnorm_forward(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                      training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the running statistics are updated in place.
    """
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        count = int(np.prod([x.shape[a] for a in axes]))
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in train mode needs batch >= 2")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * count / max(count - 1, 1)
    else:
        mean = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    xhat = _bn_normalize(x, mean, var, axes, training, eps)
    return xhat * reshape(gamma, bshape) + reshape(beta, bshape)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x) -> Tensor:
        return batchnorm_forward(x, self.gamma, self.beta, self.running_mean,
                                 self.running_var, self.training)


# attention ---------------------------------------------------------------------

def multihead_attention(query, key_value, heads: int, w_q, w_k, w_v, w_o,
                        b_q, b_k, b_v, b_o, return_weights: bool = False):
    """Scaled dot-product attention of ``query`` [..., n_q, d] over ``key_value`` [..., n_kv, d].

    Returns the [..., n_q, d] output and, if requested, the attention weights
    as a [..., heads, n_q, n_kv] array.
    """
    query, key_value = as_tensor(query), as_tensor(key_value)
    d = query.shape[-1]
    if d % heads:
        raise ConfigurationError(f"model dim {d} not divisible by {heads} heads")
    if key_value.shape[-1] != d:
        raise DimensionError(f"attention: query dim {d} != key/value dim {key_value.shape[-1]}")
    head_dim = d // heads
    lead = query.shape[:-2]
    n_q, n_kv = query.shape[-2], key_value.shape[-2]

    def split(t: Tensor, n: int) -> Tensor:
        # [..., n, d] -> [..., heads, n, head_dim]
        t = reshape(t, lead + (n, heads, head_dim))
        axes = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2))
        return transpose(t, axes)

    q = split(linear_forward(query, w_q, b_q), n_q)
    k = split(linear_forward(key_value, w_k, b_k), n_kv)
    v = split(linear_forward(key_value, w_v, b_v), n_kv)
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    mixed = matmul(weights, v)
    axes = tuple(range(len(lead))) + tuple(len(lead) + a for a in (1, 0, 2))
    mixed = reshape(transpose(mixed, axes), lead + (n_q, d))
    out = linear_forward(mixed, w_o, b_o)
    if return_weights:
        return out, weights.data
    return out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = _uniform(rng, dim, (dim, dim))
        self.w_k = _uniform(rng, dim, (dim, dim))
        self.w_v = _uniform(rng, dim, (dim, dim))
        self.w_o = _uniform(rng, dim, (dim, dim))
        self.b_q = Parameter(np.zeros(dim))
        self.b_k = Parameter(np.zeros(dim))
        self.b_v = Parameter(np.zeros(dim))
        self.b_o = Parameter(np.zeros(dim))
        self.last_weights: np.ndarray | None = None

    def forward(self, query, key_value) -> Tensor:
        out, self.last_weights = multihead_attention(
            query, key_value, self.heads, self.w_q, self.w_k, self.w_v, self.w_o,
            self.b_q, self.b_k, self.b_v, self.b_o, return_weights=True)
        return out


class MLP(Module):
    """Stack of linear layers with ReLU between them."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


__all__ = [
    "BN_EPS", "BN_MOMENTUM", "BatchNorm", "ConfigurationError", "Conv2d",
    "DegenerateBatchError", "Linear", "MLP", "Module", "MultiHeadAttention",
    "Parameter", "batchnorm_forward", "concat", "conv2d_forward",
    "linear_forward", "multihead_attention",
]
