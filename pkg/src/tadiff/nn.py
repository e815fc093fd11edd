"""Small parameterized building blocks on top of the autodiff tape."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class whose named_parameters walks attributes in insertion order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise KeyError(
                f"parameter table mismatch: missing={sorted(missing)} "
                f"extra={sorted(extra)}"
            )
        for name, p in params.items():
            arr = np.ascontiguousarray(values[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ad.ShapeError(
                    f"parameter {name}: shape {arr.shape} does not match "
                    f"{p.data.shape}"
                )
            p.data = arr


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def glorot_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = glorot_init(rng, in_dim, out_dim)
        self.weight = _param(w)
        self.bias = _param(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, kernel_size: int, in_dim: int, out_dim: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 zero_init: bool = False, bias_fill: float = 0.0):
        if zero_init:
            w = np.zeros((kernel_size, in_dim, out_dim))
        else:
            w = he_init(rng, (kernel_size, in_dim, out_dim), kernel_size * in_dim)
        self.weight = _param(w)
        self.bias = _param(np.full(out_dim, bias_fill))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)


class DepthwiseConv1d(Module):
    def __init__(self, kernel_size: int, dim: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        # near-averaging init keeps downsampling stable at the start
        w = np.full((kernel_size, dim), 1.0 / kernel_size)
        w += rng.standard_normal((kernel_size, dim)) * 0.02
        self.weight = _param(w)
        self.bias = _param(np.zeros(dim))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.depthwise_conv1d(x, self.weight, self.bias,
                                   stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class LocalAttentionBlock(Module):
    """Pre-norm transformer block with banded self-attention over a window."""

    def __init__(self, dim: int, window: int, rng: np.random.Generator,
                 ffn_mult: int = 2):
        self.norm_attn = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm_ffn = LayerNorm(dim)
        self.ffn_in = Linear(dim, dim * ffn_mult, rng)
        self.ffn_out = Linear(dim * ffn_mult, dim, rng)
        self.window = window
        self.scale = 1.0 / math.sqrt(dim)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        scores = ad.local_qk_scores(self.q(h), self.k(h), self.window)
        attn = ad.softmax_lastdim(ad.scale(scores, self.scale))
        ctx = ad.local_weighted_sum(attn, self.v(h), self.window)
        x = ad.add(x, self.out(ctx))
        h = self.norm_ffn(x)
        return ad.add(x, self.ffn_out(ad.relu(self.ffn_in(h))))


class ConvStack(Module):
    """Stack of kernel-k convolutions with ReLU between layers.

    The final layer maps to ``out_dim`` without an activation; callers
    apply their own output nonlinearity.
    """

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator,
                 layers: int = 3, kernel_size: int = 3,
                 final_bias: float = 0.0, final_zero: bool = False):
        pad = kernel_size // 2
        self.hidden = [
            Conv1d(kernel_size, dim, dim, rng, padding=pad)
            for _ in range(layers - 1)
        ]
        self.final = Conv1d(kernel_size, dim, out_dim, rng, padding=pad,
                            zero_init=final_zero, bias_fill=final_bias)

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.hidden:
            x = ad.relu(conv(x))
        return self.final(x)
