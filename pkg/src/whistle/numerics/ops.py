"""Differentiable tensor operations.

Tensors are ``torch.Tensor`` values (float32 for training, float64 when
verifying gradients); reverse-mode gradients come from torch autograd. The
wrappers here pin down the conventions the models rely on: channels-first
1-D convolutions with explicit symmetric zero padding, shape validation
that names the offending op, and a hard error on non-finite results.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    def __init__(self, op: str, message: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shape_txt = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: {message} (shapes: {shape_txt})")


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


def check_finite(op: str, t: Tensor) -> Tensor:
    # NaN/Inf anywhere makes the sum non-finite; one reduction is far cheaper
    # than an elementwise isfinite pass.
    if not math.isfinite(t.detach().sum().item()):
        if not bool(torch.isfinite(t).all()):
            raise NonFiniteError(op)
    return t


def conv1d_out_len(l_in: int, kernel: int, stride: int, padding: int) -> int:
    return (l_in + 2 * padding - kernel) // stride + 1


def conv_transpose1d_out_len(l_in: int, kernel: int, stride: int, padding: int) -> int:
    return (l_in - 1) * stride + kernel - 2 * padding


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", "inner dimensions differ", a.shape, b.shape)
    return check_finite("matmul", a @ b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", "input width differs from weight", x.shape, weight.shape)
    return check_finite("linear", F.linear(x, weight, bias))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    """x: (B, C_in, L); weight: (C_out, C_in, K)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d", "expected (B, C_in, L) and (C_out, C_in, K)", x.shape, weight.shape)
    if conv1d_out_len(x.shape[2], weight.shape[2], stride, padding) < 1:
        raise ShapeError("conv1d", "input shorter than kernel", x.shape, weight.shape)
    return check_finite("conv1d", F.conv1d(x, weight, bias, stride=stride, padding=padding))


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    """x: (B, C_in, L); weight: (C_in, C_out, K), as in torch."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            "conv_transpose1d", "expected (B, C_in, L) and (C_in, C_out, K)", x.shape, weight.shape
        )
    if conv_transpose1d_out_len(x.shape[2], weight.shape[2], stride, padding) < 1:
        raise ShapeError("conv_transpose1d", "padding consumes the whole output", x.shape, weight.shape)
    out = F.conv_transpose1d(x, weight, bias, stride=stride, padding=padding)
    return check_finite("conv_transpose1d", out)


def embedding(ids: Tensor, table: Tensor) -> Tensor:
    if ids.dtype not in (torch.int32, torch.int64):
        raise ShapeError("embedding", f"ids must be integer, got {ids.dtype}", ids.shape, table.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError("embedding", "id outside the table", ids.shape, table.shape)
    return F.embedding(ids, table)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", "affine params must match the last axis", x.shape, weight.shape)
    return check_finite("layer_norm", F.layer_norm(x, x.shape[-1:], weight, bias, eps))


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return check_finite("softmax", torch.softmax(x, dim=dim))


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return check_finite("log_softmax", torch.log_softmax(x, dim=dim))


def gelu(x: Tensor) -> Tensor:
    return check_finite("gelu", F.gelu(x))


def relu(x: Tensor) -> Tensor:
    return check_finite("relu", torch.relu(x))


def _broadcastable(op: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, "operands do not broadcast", a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("add", a, b)
    return check_finite("add", a + b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("mul", a, b)
    return check_finite("mul", a * b)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if pred.shape != target.shape:
        raise ShapeError("mse", "prediction and target differ", pred.shape, target.shape)
    return check_finite("mse", torch.mean((pred - target) ** 2))


def cross_entropy(logits: Tensor, targets: Tensor, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    logits: (..., V); targets: (...) integer ids. Positions equal to
    ``ignore_index`` are excluded from both the sum and the count.
    """
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", "logits and targets disagree", logits.shape, targets.shape)
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    kwargs = {} if ignore_index is None else {"ignore_index": ignore_index}
    loss = F.cross_entropy(flat_logits, flat_targets, **kwargs)
    return check_finite("cross_entropy", loss)


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed per item and averaged over the batch.

    The leading axis is the batch; a 0-d or 1-element input counts as one item.
    """
    if mu.shape != logvar.shape:
        raise ShapeError("kl_diag_gaussian", "mu and logvar differ", mu.shape, logvar.shape)
    terms = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar)
    batch = mu.shape[0] if mu.dim() > 1 else 1
    return check_finite("kl_diag_gaussian", terms.sum() / batch)


def sinusoid_positions(length: int, width: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, width, 2, dtype=torch.float64) / width)
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: width // 2])
    return table.to(dtype)


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over (B, H, L, d) tensors."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", "q/k/v disagree", q.shape, k.shape, v.shape)
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if causal:
        lq, lk = scores.shape[-2], scores.shape[-1]
        mask = torch.ones(lq, lk, dtype=torch.bool).triu(1 + lk - lq)
        scores = scores.masked_fill(mask, float("-inf"))
    return matmul(softmax(scores), v)


CATALOG = {
    "matmul": matmul,
    "linear": linear,
    "conv1d": conv1d,
    "conv_transpose1d": conv_transpose1d,
    "embedding": embedding,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "gelu": gelu,
    "relu": relu,
    "add": add,
    "mul": mul,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "kl_diag_gaussian": kl_diag_gaussian,
    "attention": attention,
}


def op_catalog() -> dict:
    """Name -> callable for every op with a verified reverse-mode gradient."""
    return dict(CATALOG)
