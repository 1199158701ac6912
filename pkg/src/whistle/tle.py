"""Text-to-latent encoder: a convolutional VAE from token canvases to
approximations of the acoustic encoder's output grid.

Layout for the default sizes (lengths along time, channels in brackets)::

    tokens 16 --embed--> 16[64] --tconv k8 s4--> 64[64]
    enc1 64->32[64]   enc2 32->16[96]   enc3 16->8[128]
    mu / logvar heads 8[64] -> z
    dec1  8->8[128]   (+enc3)  dec2  8->16[96]   (+enc2)
    dec3 16->32[64]   (+enc1)  dec4 32->64[h]
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .asr import AsrModel, as_token_batch, encode
from .numerics import ops
from .numerics.layers import ChannelNorm, Conv1d, ConvTranspose1d, Embedding, Linear
from .numerics.rng import Stream
from .world import PAD


class TleConfigError(ValueError):
    pass


class LengthHeadDisabled(RuntimeError):
    pass


@dataclass
class TleConfig:
    vocab_size: int = 163
    l_max: int = 16
    t_enc: int = 64
    h: int = 64
    k: int = 4
    embed: int = 64
    up_kernel: int = 8
    up_stride: int = 4
    up_padding: int = 2
    enc_channels: tuple = (64, 96, 128)
    latent: int = 64
    kernel: int = 3
    beta: float = 1e-3
    embed_std: float = 0.02
    length_head: bool = False

    def validate(self) -> None:
        up = ops.conv_transpose1d_out_len(self.l_max, self.up_kernel, self.up_stride, self.up_padding)
        if up != self.t_enc:
            raise TleConfigError(f"upsampler maps L_max={self.l_max} to {up}, need T_enc={self.t_enc}")
        if self.t_enc % 2 ** len(self.enc_channels):
            raise TleConfigError("T_enc must halve cleanly through every encoder layer")
        if self.beta < 0:
            raise TleConfigError("beta must be >= 0")

    @property
    def latent_len(self) -> int:
        return self.t_enc // 2 ** len(self.enc_channels)


@dataclass
class TleOutput:
    approx: torch.Tensor  # (B, T_enc, h)
    mu: torch.Tensor  # (B, latent_len, latent)
    logvar: torch.Tensor
    length: torch.Tensor | None = None  # (B,) normalised length prediction


class TleModel(nn.Module):
    kind = "tle"

    def __init__(self, cfg: TleConfig, stream: Stream):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3 = cfg.enc_channels
        pad = cfg.kernel // 2
        self.embed = Embedding(cfg.vocab_size, cfg.embed, stream.child("embed"), std=cfg.embed_std)
        self.upsample = ConvTranspose1d(
            cfg.embed, cfg.embed, cfg.up_kernel, cfg.up_stride, cfg.up_padding, stream.child("up")
        )
        self.up_norm = ChannelNorm(cfg.embed)
        widths = [cfg.embed, c1, c2, c3]
        self.enc = nn.ModuleList(
            Conv1d(widths[i], widths[i + 1], cfg.kernel, 2, pad, stream.child("enc", i)) for i in range(3)
        )
        self.enc_norms = nn.ModuleList(ChannelNorm(w) for w in widths[1:])
        self.mu_head = Conv1d(c3, cfg.latent, 1, 1, 0, stream.child("mu"))
        self.logvar_head = Conv1d(c3, cfg.latent, 1, 1, 0, stream.child("logvar"))
        self.dec1 = Conv1d(cfg.latent, c3, cfg.kernel, 1, pad, stream.child("dec", 0))
        self.dec_up = nn.ModuleList(
            [
                ConvTranspose1d(c3, c2, 4, 2, 1, stream.child("dec", 1)),
                ConvTranspose1d(c2, c1, 4, 2, 1, stream.child("dec", 2)),
                ConvTranspose1d(c1, cfg.h, 4, 2, 1, stream.child("dec", 3)),
            ]
        )
        self.dec_norms = nn.ModuleList(ChannelNorm(w) for w in (c3, c2, c1))
        self.length_head = Linear(cfg.latent, 1, stream.child("length")) if cfg.length_head else None

    @classmethod
    def create(cls, cfg: TleConfig, seed: int) -> "TleModel":
        return cls(dataclasses.replace(cfg), Stream(seed).child("tle-init"))

    @classmethod
    def for_asr(cls, asr: AsrModel, seed: int, **overrides) -> "TleModel":
        a = asr.cfg
        cfg = TleConfig(vocab_size=a.vocab_size, l_max=a.l_max, t_enc=a.t_enc, h=a.h, k=a.k, **overrides)
        return cls.create(cfg, seed)

    def encode_text(self, tokens: torch.Tensor):
        x = self.embed(tokens).transpose(1, 2)
        x = ops.gelu(self.up_norm(self.upsample(x)))
        skips = []
        for conv, norm in zip(self.enc, self.enc_norms):
            x = ops.gelu(norm(conv(x)))
            skips.append(x)
        return self.mu_head(x), self.logvar_head(x), skips

    def decode_latent(self, z: torch.Tensor, skips: list) -> torch.Tensor:
        x = ops.gelu(self.dec_norms[0](self.dec1(z)))
        for i, up in enumerate(self.dec_up):
            x = ops.add(x, skips[-1 - i])
            x = up(x)
            if i < 2:
                x = ops.gelu(self.dec_norms[i + 1](x))
        return x.transpose(1, 2)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, stream: Stream | None = None, eps=None):
    """``mu + exp(logvar / 2) * eps`` with eps drawn from ``stream`` unless given."""
    if mu.shape != logvar.shape:
        raise ops.ShapeError("reparameterize", "mu and logvar differ", mu.shape, logvar.shape)
    if eps is None:
        if stream is None:
            raise ValueError("reparameterize needs a stream or explicit eps")
        eps = stream.torch_normal(tuple(mu.shape), dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


def _token_canvas(tle: TleModel, transcripts) -> torch.Tensor:
    if isinstance(transcripts, (list, tuple)) and transcripts and hasattr(transcripts[0], "tokens"):
        for t in transcripts:
            if len(t) > tle.cfg.l_max:
                raise ValueError(f"transcript of length {len(t)} exceeds L_max={tle.cfg.l_max}")
        transcripts = np.stack([t.padded(tle.cfg.l_max) for t in transcripts])
    elif hasattr(transcripts, "tokens"):
        if len(transcripts) > tle.cfg.l_max:
            raise ValueError(f"transcript of length {len(transcripts)} exceeds L_max={tle.cfg.l_max}")
        transcripts = transcripts.padded(tle.cfg.l_max)
    tokens = as_token_batch(transcripts)
    if tokens.shape[1] > tle.cfg.l_max:
        raise ValueError(f"transcript of length {tokens.shape[1]} exceeds L_max={tle.cfg.l_max}")
    if tokens.shape[1] < tle.cfg.l_max:
        fill = torch.full((tokens.shape[0], tle.cfg.l_max - tokens.shape[1]), PAD, dtype=torch.long)
        tokens = torch.cat([tokens, fill], dim=1)
    return tokens


def tle_forward(tle: TleModel, transcripts, mode: str = "sample", stream: Stream | None = None) -> TleOutput:
    """Approximate encoder grids for a batch of transcripts.

    ``transcripts`` may be a Transcript, a list of them, or a (B, L) id array
    already padded to L_max. ``mode="mean"`` uses z = mu and needs no stream.
    """
    if mode not in ("sample", "mean"):
        raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
    tokens = _token_canvas(tle, transcripts)
    mu, logvar, skips = tle.encode_text(tokens)
    z = mu if mode == "mean" else reparameterize(mu, logvar, stream)
    approx = tle.decode_latent(z, skips)
    length = None
    if tle.length_head is not None:
        length = tle.length_head(mu.mean(dim=2)).squeeze(-1)
    return TleOutput(approx, mu.transpose(1, 2), logvar.transpose(1, 2), length)


def vae_objective(out: TleOutput, target: torch.Tensor, beta: float) -> torch.Tensor:
    return ops.mse(out.approx, target) + beta * ops.kl_diag_gaussian(out.mu, out.logvar)


def length_targets(valid_len, k: int, t_enc: int) -> torch.Tensor:
    """True encoder lengths ceil(valid_len / k), normalised by T_enc."""
    valid_len = torch.as_tensor(np.asarray(valid_len), dtype=torch.float64)
    return torch.ceil(valid_len / k) / t_enc


def length_loss(out: TleOutput, valid_len, k: int, t_enc: int) -> torch.Tensor:
    """Squared error of the length head in units of T_enc (i.e. frames / T_enc)."""
    if out.length is None:
        raise LengthHeadDisabled("the length head is disabled for this TLE")
    target = length_targets(valid_len, k, t_enc).to(out.length.dtype)
    return torch.mean((out.length - target) ** 2)


def vae_loss(
    tle: TleModel,
    asr: AsrModel,
    features,
    transcripts,
    beta: float | None = None,
    mode: str = "sample",
    stream: Stream | None = None,
) -> torch.Tensor:
    """Reconstruction MSE against the frozen acoustic encoder plus beta * KL.

    The encoder grid is computed without gradient tracking, so only the TLE
    parameters receive gradients.
    """
    if features is None or any(f is None for f in (features if isinstance(features, list) else [features])):
        raise ValueError("vae_loss needs audio for every batch item")
    if isinstance(features, list):
        features = np.stack([f.frames for f in features])
    beta = tle.cfg.beta if beta is None else beta
    with torch.no_grad():
        target = encode(asr, features)
    out = tle_forward(tle, transcripts, mode=mode, stream=stream)
    return vae_objective(out, target.to(out.approx.dtype), beta)


def predict_lengths(tle: TleModel, transcripts) -> np.ndarray:
    """Integer encoder lengths in [1, T_enc], one per transcript."""
    if tle.length_head is None:
        raise LengthHeadDisabled("predict_lengths needs a TLE built with length_head=True")
    with torch.no_grad():
        out = tle_forward(tle, transcripts, mode="mean")
    frames = np.rint(out.length.double().numpy() * tle.cfg.t_enc)
    return np.clip(frames, 1, tle.cfg.t_enc).astype(np.int64)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_compatible(tle: TleModel, asr: AsrModel) -> None:
    a, t = asr.cfg, tle.cfg
    if (a.h, a.t_enc, a.vocab_size, a.l_max) != (t.h, t.t_enc, t.vocab_size, t.l_max):
        raise ops.ShapeError(
            "tle/asr",
            "TLE grid or vocabulary does not match the recognizer",
            (t.t_enc, t.h, t.vocab_size, t.l_max),
            (a.t_enc, a.h, a.vocab_size, a.l_max),
        )


__all__ = [
    "TleConfig",
    "TleModel",
    "TleOutput",
    "check_compatible",
    "length_loss",
    "predict_lengths",
    "reparameterize",
    "tle_forward",
    "vae_loss",
    "vae_objective",
]
