"""Encoder-decoder recognizer: conv downsampler + transformer encoder, and an
autoregressive transformer decoder with cross-attention."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import ops
from .numerics.layers import (
    Conv1d,
    Embedding,
    FeedForward,
    LayerNorm,
    MultiHeadAttention,
)
from .numerics.rng import Stream
from .world import BOS, EOS, PAD, AudioFeatures, Transcript


class AsrConfigError(ValueError):
    pass


class TokenError(ValueError):
    pass


@dataclass
class AsrConfig:
    vocab_size: int = 163
    feature_dim: int = 16
    n_max: int = 256
    k: int = 4
    h: int = 64
    heads: int = 4
    ffn: int = 128
    enc_blocks: int = 2
    dec_blocks: int = 2
    l_max: int = 16

    def validate(self) -> None:
        if self.k < 2 or self.k & (self.k - 1):
            raise AsrConfigError(f"k must be a power of two >= 2, got {self.k}")
        if self.n_max % self.k:
            raise AsrConfigError(f"n_max={self.n_max} not divisible by k={self.k}")
        if self.h % self.heads:
            raise AsrConfigError(f"h={self.h} not divisible by heads={self.heads}")
        if self.vocab_size <= EOS:
            raise AsrConfigError("vocabulary must contain the special tokens")

    @property
    def t_enc(self) -> int:
        return self.n_max // self.k


class EncoderBlock(nn.Module):
    def __init__(self, cfg: AsrConfig, stream: Stream):
        super().__init__()
        self.norm1 = LayerNorm(cfg.h)
        self.attn = MultiHeadAttention(cfg.h, cfg.heads, stream.child("attn"))
        self.norm2 = LayerNorm(cfg.h)
        self.ff = FeedForward(cfg.h, cfg.ffn, stream.child("ff"))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.ff(self.norm2(x))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: AsrConfig, stream: Stream):
        super().__init__()
        self.norm1 = LayerNorm(cfg.h)
        self.self_attn = MultiHeadAttention(cfg.h, cfg.heads, stream.child("self"))
        self.norm2 = LayerNorm(cfg.h)
        self.cross_attn = MultiHeadAttention(cfg.h, cfg.heads, stream.child("cross"))
        self.norm3 = LayerNorm(cfg.h)
        self.ff = FeedForward(cfg.h, cfg.ffn, stream.child("ff"))

    def forward(self, x, memory):
        y = self.norm1(x)
        x = x + self.self_attn(y, y, causal=True)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))


class Encoder(nn.Module):
    def __init__(self, cfg: AsrConfig, stream: Stream):
        super().__init__()
        n_down = int(math.log2(cfg.k))
        widths = [cfg.feature_dim] + [cfg.h] * n_down
        self.convs = nn.ModuleList(
            Conv1d(widths[i], widths[i + 1], 3, 2, 1, stream.child("conv", i)) for i in range(n_down)
        )
        self.blocks = nn.ModuleList(EncoderBlock(cfg, stream.child("block", i)) for i in range(cfg.enc_blocks))
        self.norm = LayerNorm(cfg.h)
        self.register_buffer("pos", ops.sinusoid_positions(cfg.t_enc, cfg.h), persistent=False)

    def forward(self, feats):
        x = feats.transpose(1, 2)
        for conv in self.convs:
            x = ops.gelu(conv(x))
        x = x.transpose(1, 2) + self.pos.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, cfg: AsrConfig, stream: Stream):
        super().__init__()
        self.scale = math.sqrt(cfg.h)
        self.embed = Embedding(cfg.vocab_size, cfg.h, stream.child("embed"))
        self.blocks = nn.ModuleList(DecoderBlock(cfg, stream.child("block", i)) for i in range(cfg.dec_blocks))
        self.norm = LayerNorm(cfg.h)
        self.register_buffer("pos", ops.sinusoid_positions(cfg.l_max, cfg.h), persistent=False)

    def forward(self, tokens, memory):
        """Logits (B, L, V) for next-token prediction; output weights are tied to the embedding."""
        length = tokens.shape[1]
        x = self.embed(tokens) * self.scale + self.pos[:length].to(memory.dtype)
        for block in self.blocks:
            x = block(x, memory)
        return ops.matmul(self.norm(x), self.embed.weight.T)


class AsrModel(nn.Module):
    kind = "asr"

    def __init__(self, cfg: AsrConfig, stream: Stream):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg, stream.child("encoder"))
        self.decoder = Decoder(cfg, stream.child("decoder"))

    @classmethod
    def create(cls, cfg: AsrConfig, seed: int) -> "AsrModel":
        return cls(dataclasses.replace(cfg), Stream(seed).child("asr-init"))


def _as_canvas(model: AsrModel, features) -> torch.Tensor:
    cfg = model.cfg
    if isinstance(features, AudioFeatures):
        features = features.frames[None]
    if isinstance(features, np.ndarray):
        features = torch.from_numpy(np.ascontiguousarray(features))
    if features.dim() == 2:
        features = features[None]
    if tuple(features.shape[1:]) != (cfg.n_max, cfg.feature_dim):
        raise ops.ShapeError(
            "encode", f"expected canvas ({cfg.n_max}, {cfg.feature_dim})", tuple(features.shape)
        )
    param = next(model.parameters())
    return features.to(param.dtype)


def encode(model: AsrModel, features) -> torch.Tensor:
    """Encoder grid (B, T_enc, h) for AudioFeatures, a (N, d) canvas or a (B, N, d) batch."""
    return model.encoder(_as_canvas(model, features))


def _check_tokens(model: AsrModel, targets: torch.Tensor) -> None:
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= model.cfg.vocab_size):
        raise TokenError(f"token id outside vocabulary of size {model.cfg.vocab_size}")


def as_token_batch(targets) -> torch.Tensor:
    if isinstance(targets, Transcript):
        targets = np.asarray(targets.tokens)[None]
    if isinstance(targets, np.ndarray):
        targets = torch.from_numpy(targets)
    if targets.dim() == 1:
        targets = targets[None]
    return targets.long()


def nll_loss(model: AsrModel, enc: torch.Tensor, targets) -> torch.Tensor:
    """Teacher-forced token NLL averaged over non-PAD target positions.

    ``targets`` are (B, L) id rows starting with BOS and padded with PAD;
    the decoder sees ``targets[:, :-1]`` and predicts ``targets[:, 1:]``.
    """
    targets = as_token_batch(targets)
    _check_tokens(model, targets)
    if enc.dim() == 2:
        enc = enc[None]
    if enc.shape[0] != targets.shape[0]:
        raise ops.ShapeError("nll_loss", "encoder batch and target batch differ", enc.shape, targets.shape)
    logits = model.decoder(targets[:, :-1], enc)
    return ops.cross_entropy(logits, targets[:, 1:], ignore_index=PAD)


def decoder_log_probs(model: AsrModel, enc: torch.Tensor, prefixes: torch.Tensor) -> torch.Tensor:
    """Next-token log-probabilities (n, V) for each BOS-led prefix row against one grid."""
    memory = enc.expand(prefixes.shape[0], *enc.shape[-2:])
    logits = model.decoder(prefixes, memory)[:, -1]
    return ops.log_softmax(logits)


BANNED = (PAD, BOS)
StepFn = Callable[[list], np.ndarray]


def beam_search(
    step_fn: StepFn,
    vocab_size: int,
    beam_size: int,
    max_len: int,
    banned: Sequence[int] = BANNED,
) -> tuple:
    """Length-normalised beam search over emitted tokens.

    ``step_fn`` maps a list of emitted-token tuples to an (n, V) array of
    next-token log-probabilities. A hypothesis completes when it emits EOS or
    reaches ``max_len`` tokens; its score is total log-probability divided by
    the number of emitted tokens. Candidates are ranked by cumulative score,
    ties going to the smaller token sequence. Returns (tokens, score).
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    allowed = np.array([v for v in range(vocab_size) if v not in set(banned)])
    active = [((), 0.0)]
    finished = []
    for t in range(max_len):
        logp = np.asarray(step_fn([toks for toks, _ in active]), dtype=np.float64)
        candidates = []
        for row, (toks, score) in enumerate(active):
            totals = score + logp[row, allowed]
            candidates.extend((float(s), toks + (int(v),)) for s, v in zip(totals, allowed))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        active = []
        for score, toks in candidates[:beam_size]:
            if toks[-1] == EOS or t == max_len - 1:
                finished.append((score / len(toks), toks))
            else:
                active.append((toks, score))
        if not active:
            break
    best = min(finished, key=lambda f: (-f[0], f[1]))
    return best[1], best[0]


def _asr_step_fn(model: AsrModel, enc: torch.Tensor) -> StepFn:
    enc = enc[None] if enc.dim() == 2 else enc

    def step(prefixes):
        rows = torch.tensor([(BOS, *p) for p in prefixes], dtype=torch.long)
        with torch.no_grad():
            return decoder_log_probs(model, enc, rows).double().numpy()

    return step


def _max_emit(model: AsrModel, max_len: int | None) -> int:
    limit = model.cfg.l_max - 1
    max_len = limit if max_len is None else max_len
    if not 1 <= max_len <= limit:
        raise ValueError(f"max_len must lie in [1, {limit}] (emitted tokens after BOS)")
    return max_len


def with_greedy_floor(search: Callable[[int], tuple], beam_size: int) -> tuple:
    """Run a beam search and never return less than its beam-1 (greedy) result."""
    toks, score = search(beam_size)
    if beam_size > 1:
        g_toks, g_score = search(1)
        if g_score > score:
            return g_toks, g_score
    return toks, score


def decode_beam(model: AsrModel, enc: torch.Tensor, beam_size: int, max_len: int | None = None) -> tuple:
    """Best transcript for one encoder grid and its length-normalised log-score.

    ``max_len`` counts emitted tokens after BOS (EOS included); the default
    fills the decoder's L_max canvas.
    """
    max_len = _max_emit(model, max_len)
    step = _asr_step_fn(model, enc)
    toks, score = with_greedy_floor(
        lambda b: beam_search(step, model.cfg.vocab_size, b, max_len), beam_size
    )
    return _to_transcript(toks), score


def decode_greedy(model: AsrModel, enc: torch.Tensor, max_len: int | None = None) -> Transcript:
    return decode_beam(model, enc, 1, max_len)[0]


def _to_transcript(emitted: Sequence[int]) -> Transcript:
    words = [t for t in emitted if t != EOS]
    return Transcript.from_words(words)


def greedy_batch(model: AsrModel, enc: torch.Tensor, max_len: int | None = None) -> list:
    """Batched argmax decoding for monitoring; one Transcript per grid row."""
    max_len = _max_emit(model, max_len)
    n = enc.shape[0]
    rows = torch.full((n, 1), BOS, dtype=torch.long)
    done = torch.zeros(n, dtype=torch.bool)
    with torch.no_grad():
        for _ in range(max_len):
            logits = model.decoder(rows, enc)[:, -1]
            logits[:, list(BANNED)] = float("-inf")
            nxt = logits.argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
            rows = torch.cat([rows, nxt[:, None]], dim=1)
            done |= nxt == EOS
            if bool(done.all()):
                break
    out = []
    for r in rows[:, 1:].tolist():
        words = []
        for t in r:
            if t in (EOS, PAD):
                break
            words.append(t)
        out.append(Transcript.from_words(words))
    return out
