"""Small parameterised layers built on :mod:`whistle.numerics.ops`.

Parameters are initialised from an explicit :class:`Stream`, never from
torch's global generator.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from . import ops
from .rng import Stream


def _param(stream: Stream, shape, std: float) -> nn.Parameter:
    return nn.Parameter(stream.torch_normal(shape) * std)


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, stream: Stream, bias: bool = True):
        super().__init__()
        self.weight = _param(stream.child("w"), (n_out, n_in), 1.0 / math.sqrt(n_in))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv1d(nn.Module):
    """Channels-first convolution with symmetric zero padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, stream: Stream):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = _param(stream.child("w"), (c_out, c_in, kernel), 1.0 / math.sqrt(c_in * kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, stream: Stream):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel / stride
        self.weight = _param(stream.child("w"), (c_in, c_out, kernel), 1.0 / math.sqrt(fan_in))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return ops.conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias)


class ChannelNorm(LayerNorm):
    """Layer norm over the channel axis of a (B, C, L) tensor."""

    def forward(self, x):
        return ops.layer_norm(x.transpose(1, 2), self.weight, self.bias).transpose(1, 2)


class Embedding(nn.Module):
    def __init__(self, n: int, width: int, stream: Stream, std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(width) if std is None else std
        self.weight = _param(stream.child("w"), (n, width), std)

    def forward(self, ids):
        return ops.embedding(ids, self.weight)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int, stream: Stream):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(width, width, stream.child("q"))
        self.kv = Linear(width, 2 * width, stream.child("kv"))
        self.out = Linear(width, width, stream.child("o"))

    def forward(self, x, memory, causal: bool = False):
        b, lq, w = x.shape
        lk = memory.shape[1]
        hd = w // self.heads
        q = self.q(x).view(b, lq, self.heads, hd).transpose(1, 2)
        k, v = self.kv(memory).view(b, lk, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        y = ops.attention(q, k, v, causal=causal)
        return self.out(y.transpose(1, 2).reshape(b, lq, w))


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden: int, stream: Stream):
        super().__init__()
        self.up = Linear(width, hidden, stream.child("up"))
        self.down = Linear(hidden, width, stream.child("down"))

    def forward(self, x):
        return self.down(ops.gelu(self.up(x)))
