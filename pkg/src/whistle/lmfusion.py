"""Interpolated trigram LM and shallow-fusion beam decoding."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .asr import AsrModel, _asr_step_fn, _max_emit, _to_transcript, beam_search, with_greedy_floor
from .world import BOS, EOS, Corpus, Transcript

DEFAULT_GRID = (0.10, 0.25, 0.50, 0.75)


class OutOfVocabulary(KeyError):
    pass


@dataclass
class FusionConfig:
    gamma: float = 0.0
    beam_size: int = 4
    grid: tuple = DEFAULT_GRID

    def validate(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.grid:
            raise ValueError("gamma grid must be non-empty")
        if any(g < 0 for g in self.grid):
            raise ValueError("gamma grid values must be >= 0")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass
class TrigramLM:
    """Count tables over sentences padded as ``BOS BOS w1 .. wn EOS``.

    ``vocab`` holds the predictable tokens (words and EOS); BOS only ever
    appears as context.
    """

    vocab: list
    unigrams: Counter = field(default_factory=Counter)
    bigrams: Counter = field(default_factory=Counter)
    trigrams: Counter = field(default_factory=Counter)
    bigram_ctx: Counter = field(default_factory=Counter)
    trigram_ctx: Counter = field(default_factory=Counter)
    lambdas: tuple = (0.6, 0.3, 0.1)  # trigram, bigram, unigram

    def __post_init__(self):
        if any(lam <= 0 for lam in self.lambdas):
            raise ValueError("interpolation weights must be positive")
        self._index = {t: i for i, t in enumerate(self.vocab)}
        self._total = sum(self.unigrams.values())

    def to_json(self) -> dict:
        def pack(c: Counter):
            return sorted([list(k) if isinstance(k, tuple) else [k], v] for k, v in c.items())

        return {
            "vocab": list(self.vocab),
            "lambdas": list(self.lambdas),
            "unigrams": pack(self.unigrams),
            "bigrams": pack(self.bigrams),
            "trigrams": pack(self.trigrams),
            "bigram_ctx": pack(self.bigram_ctx),
            "trigram_ctx": pack(self.trigram_ctx),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrigramLM":
        def unpack(rows, n):
            return Counter({(tuple(k) if n > 1 else k[0]): v for k, v in rows})

        return cls(
            vocab=list(d["vocab"]),
            unigrams=unpack(d["unigrams"], 1),
            bigrams=unpack(d["bigrams"], 2),
            trigrams=unpack(d["trigrams"], 3),
            bigram_ctx=unpack(d["bigram_ctx"], 1),
            trigram_ctx=unpack(d["trigram_ctx"], 2),
            lambdas=tuple(d["lambdas"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TrigramLM":
        return cls.from_json(json.loads(Path(path).read_text()))


def train_trigram(
    sentences: Iterable, vocab: Sequence | None = None, lambdas: tuple = (0.6, 0.3, 0.1)
) -> TrigramLM:
    """Exact n-gram counts. ``sentences`` are word sequences, Transcripts or a Corpus.

    Without ``vocab`` the LM vocabulary is the observed words plus EOS.
    """
    if isinstance(sentences, Corpus):
        sentences = [u.transcript for u in sentences.items]
    sents = [list(s.words) if isinstance(s, Transcript) else list(s) for s in sentences]
    if not sents:
        raise ValueError("cannot train a language model on an empty corpus")
    uni, bi, tri, bctx, tctx = Counter(), Counter(), Counter(), Counter(), Counter()
    for words in sents:
        seq = [BOS, BOS, *words, EOS]
        for i in range(2, len(seq)):
            u, v, w = seq[i - 2], seq[i - 1], seq[i]
            uni[w] += 1
            bi[(v, w)] += 1
            bctx[v] += 1
            tri[(u, v, w)] += 1
            tctx[(u, v)] += 1
    if vocab is None:
        vocab = sorted({w for s in sents for w in s}, key=str) + [EOS]
    vocab = list(vocab)
    for w in uni:
        if w not in set(vocab):
            raise OutOfVocabulary(f"corpus token {w!r} missing from LM vocabulary")
    return TrigramLM(vocab, uni, bi, tri, bctx, tctx, tuple(lambdas))


def lm_prob(lm: TrigramLM, context: Sequence, token) -> float:
    if token not in lm._index:
        raise OutOfVocabulary(f"token {token!r} is not in the LM vocabulary")
    u, v = context[-2], context[-1]
    l3, l2, l1 = lm.lambdas
    p1 = (lm.unigrams[token] + 1) / (lm._total + len(lm.vocab))
    num, den = l1 * p1, l1
    c3 = lm.trigram_ctx[(u, v)]
    if c3:
        num += l3 * lm.trigrams[(u, v, token)] / c3
        den += l3
    c2 = lm.bigram_ctx[v]
    if c2:
        num += l2 * lm.bigrams[(v, token)] / c2
        den += l2
    return num / den


def lm_logprob(lm: TrigramLM, context: Sequence, token) -> float:
    """log P(token | two-token context), renormalised over the observed orders."""
    return math.log(lm_prob(lm, context, token))


def lm_logprob_row(lm: TrigramLM, context: Sequence, vocab_size: int) -> np.ndarray:
    """Log-probabilities over recognizer ids 0..vocab_size-1; ids outside the
    LM vocabulary (PAD, BOS) get -inf."""
    row = np.full(vocab_size, -np.inf)
    for tok in lm.vocab:
        if isinstance(tok, (int, np.integer)) and 0 <= tok < vocab_size:
            row[tok] = lm_logprob(lm, context, tok)
    return row


def fused_step_fn(model: AsrModel, enc: torch.Tensor, lm: TrigramLM | None, gamma: float):
    asr_step = _asr_step_fn(model, enc)
    if lm is None or gamma == 0:
        return asr_step
    cache: dict = {}

    def step(prefixes):
        scores = asr_step(prefixes)
        for row, p in enumerate(prefixes):
            ctx = tuple((BOS, BOS, *p)[-2:])
            if ctx not in cache:
                cache[ctx] = lm_logprob_row(lm, ctx, model.cfg.vocab_size)
            scores[row] += gamma * cache[ctx]
        return scores

    return step


def fused_decode(
    model: AsrModel,
    lm: TrigramLM | None,
    enc: torch.Tensor,
    fusion: FusionConfig,
    max_len: int | None = None,
) -> tuple:
    """Beam search scoring each token by log P_asr + gamma * log P_lm.

    With gamma = 0 the LM is never consulted, so the result is exactly
    :func:`whistle.asr.decode_beam` at the same beam size.
    """
    fusion.validate()
    max_len = _max_emit(model, max_len)
    step = fused_step_fn(model, enc, lm, fusion.gamma)
    toks, score = with_greedy_floor(
        lambda b: beam_search(step, model.cfg.vocab_size, b, max_len), fusion.beam_size
    )
    return _to_transcript(toks), score


def gamma_search(model: AsrModel, lm: TrigramLM, dev: Corpus, fusion: FusionConfig) -> tuple:
    """WER for every gamma in ``fusion.grid`` on ``dev``.

    Returns (best gamma, {gamma: EvalReport}); ties go to the smaller gamma.
    """
    from .evalkit import evaluate

    fusion.validate()
    if not dev.has_audio:
        raise ValueError(f"gamma search needs audio; corpus {dev.name} lacks it")
    table = {}
    for g in sorted(set(float(x) for x in fusion.grid)):
        cfg = FusionConfig(gamma=g, beam_size=fusion.beam_size, grid=fusion.grid)
        table[g] = evaluate(model, dev, beam_size=fusion.beam_size, lm=lm, fusion=cfg)
    best = min(table, key=lambda g: (table[g].wer, g))
    return best, table


__all__ = [
    "DEFAULT_GRID",
    "gamma_search",
    "FusionConfig",
    "OutOfVocabulary",
    "TrigramLM",
    "fused_decode",
    "lm_logprob",
    "train_trigram",
]
