import itertools
import math
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from whistle.asr import (
    AsrConfig,
    AsrConfigError,
    AsrModel,
    TokenError,
    beam_search,
    decode_beam,
    decode_greedy,
    encode,
    greedy_batch,
    nll_loss,
    with_greedy_floor,
)
from whistle.numerics import ops
from whistle.numerics.optim import OptimizerState, ParamStore, adam_step
from whistle.numerics.rng import Stream
from whistle.world import BOS, EOS, PAD, Transcript

SMALL = AsrConfig(vocab_size=12, feature_dim=4, n_max=32, k=4, h=16, heads=2, ffn=32, l_max=8)


@pytest.fixture(scope="module")
def small():
    return AsrModel.create(SMALL, 0)


def _feats(n, seed=0, cfg=SMALL):
    return Stream(seed).torch_normal((n, cfg.n_max, cfg.feature_dim))


def test_encoder_shape(small):
    assert encode(small, _feats(3)).shape == (3, SMALL.t_enc, SMALL.h)
    assert encode(small, _feats(1)[0]).shape == (1, SMALL.t_enc, SMALL.h)


def test_default_grid_shape():
    cfg = AsrConfig()
    assert cfg.t_enc == 64
    m = AsrModel.create(cfg, 0)
    assert encode(m, torch.zeros(2, 256, 16)).shape == (2, 64, 64)


def test_bad_canvas_shape(small):
    with pytest.raises(ops.ShapeError):
        encode(small, torch.zeros(1, 31, 4))


@pytest.mark.parametrize("kw", [{"k": 3}, {"n_max": 30}, {"heads": 3}])
def test_config_errors(kw):
    with pytest.raises(AsrConfigError):
        AsrModel.create(AsrConfig(**{**SMALL.__dict__, **kw}), 0)


def test_same_seed_same_weights():
    a, b = AsrModel.create(SMALL, 3), AsrModel.create(SMALL, 3)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_uniform_logits_give_log_vocab(small):
    m = AsrModel.create(SMALL, 1)
    with torch.no_grad():
        m.decoder.norm.weight.zero_()
        m.decoder.norm.bias.zero_()
    targets = torch.tensor([[BOS, 4, 5, EOS, PAD], [BOS, 7, EOS, PAD, PAD]])
    loss = nll_loss(m, encode(m, _feats(2)), targets)
    assert abs(loss.item() - math.log(SMALL.vocab_size)) < 1e-5


def test_nll_ignores_padding(small):
    enc = encode(small, _feats(1))
    short = torch.tensor([[BOS, 4, EOS]])
    padded = torch.tensor([[BOS, 4, EOS, PAD, PAD]])
    assert torch.allclose(nll_loss(small, enc, short), nll_loss(small, enc, padded), atol=1e-6)


def test_nll_nonnegative_and_token_errors(small):
    enc = encode(small, _feats(1))
    assert nll_loss(small, enc, torch.tensor([[BOS, 3, EOS]])).item() >= 0
    with pytest.raises(TokenError):
        nll_loss(small, enc, torch.tensor([[BOS, 99, EOS]]))


def test_nll_batch_mismatch(small):
    with pytest.raises(ops.ShapeError):
        nll_loss(small, encode(small, _feats(2)), torch.tensor([[BOS, 3, EOS]]))


def _toy_step_fn(vocab, salt=0):
    """Deterministic pseudo-random next-token distributions keyed on the prefix."""

    def step(prefixes):
        rows = []
        for p in prefixes:
            seed = zlib.crc32(repr((salt, p)).encode())
            logits = np.random.default_rng(seed).normal(size=vocab)
            rows.append(logits - np.log(np.exp(logits).sum()))
        return np.stack(rows)

    return step


def _exhaustive(step_fn, vocab, max_len, banned):
    allowed = [v for v in range(vocab) if v not in banned]
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(allowed, repeat=n):
            if EOS in seq[:-1] or (n < max_len and seq[-1] != EOS):
                continue
            total = sum(step_fn([seq[:i]])[0, seq[i]] for i in range(n))
            cand = (total / n, seq)
            if best is None or (-cand[0], cand[1]) < (-best[0], best[1]):
                best = cand
    return best[1], best[0]


@pytest.mark.parametrize("vocab,banned", [(4, (PAD, BOS)), (4, ()), (3, ())])
@pytest.mark.parametrize("max_len", [1, 2, 3])
@pytest.mark.parametrize("salt", range(5))
def test_beam_matches_exhaustive(vocab, banned, max_len, salt):
    step = _toy_step_fn(vocab, salt)
    width = vocab**max_len
    toks, score = beam_search(step, vocab, width, max_len, banned=banned)
    e_toks, e_score = _exhaustive(step, vocab, max_len, banned)
    assert toks == e_toks
    assert abs(score - e_score) < 1e-12


def test_beam_rejects_bad_arguments():
    step = _toy_step_fn(4)
    with pytest.raises(ValueError):
        beam_search(step, 4, 0, 3)
    with pytest.raises(ValueError):
        beam_search(step, 4, 2, 0)


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_greedy_floor_dominates(salt, beam):
    step = _toy_step_fn(6, salt)
    toks, score = with_greedy_floor(lambda b: beam_search(step, 6, b, 4), beam)
    _, g_score = beam_search(step, 6, 1, 4)
    assert score >= g_score
    assert PAD not in toks and BOS not in toks


def test_beam_one_equals_greedy_batch(small):
    enc = encode(small, _feats(6, seed=5))
    batch = greedy_batch(small, enc)
    for i in range(6):
        assert decode_greedy(small, enc[i]) == batch[i]


def test_decode_respects_max_len(small):
    enc = encode(small, _feats(1))
    t, _ = decode_beam(small, enc[0], 3, max_len=2)
    assert len(t.words) <= 2
    with pytest.raises(ValueError):
        decode_beam(small, enc[0], 2, max_len=SMALL.l_max)


def _overfit(model, feats, targets, steps, lr=3e-3):
    params = ParamStore.from_module(model)
    opt = OptimizerState.create(params, lr=lr)
    for _ in range(steps):
        loss = nll_loss(model, encode(model, feats), targets)
        grads = torch.autograd.grad(loss, params.tensors())
        adam_step(params, dict(zip(params.names(), grads)), opt)
    return nll_loss(model, encode(model, feats), targets).item()


def test_overfit_one_batch():
    model = AsrModel.create(SMALL, 2)
    feats = _feats(4, seed=8)
    targets = torch.tensor(
        [
            [BOS, 3, 4, 5, EOS, PAD],
            [BOS, 6, 7, EOS, PAD, PAD],
            [BOS, 8, 9, 10, 11, EOS],
            [BOS, 11, 3, EOS, PAD, PAD],
        ]
    )
    assert _overfit(model, feats, targets, 500) < 0.05
    enc = encode(model, feats)
    assert decode_beam(model, enc[2], 2)[0] == Transcript((BOS, 8, 9, 10, 11, EOS))
