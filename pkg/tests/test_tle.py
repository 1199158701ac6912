import numpy as np
import pytest
import torch

from whistle.asr import AsrConfig, AsrModel, encode
from whistle.numerics import ops
from whistle.numerics.optim import OptimizerState, ParamStore, adam_step
from whistle.numerics.rng import Stream
from whistle.tle import (
    LengthHeadDisabled,
    TleConfig,
    TleConfigError,
    TleModel,
    check_compatible,
    length_loss,
    predict_lengths,
    reparameterize,
    tle_forward,
    vae_loss,
    vae_objective,
)
from whistle.world import BOS, EOS, Transcript, build_world, sample_corpus

SMALL = TleConfig(vocab_size=12, l_max=8, t_enc=32, h=16, embed=8, enc_channels=(8, 12, 16), latent=8)


@pytest.fixture(scope="module")
def small():
    return TleModel.create(SMALL, 0)


def _tokens(n=2):
    return torch.tensor([[BOS, 3, 4, 5, EOS, 0, 0, 0], [BOS, 7, EOS, 0, 0, 0, 0, 0]])[:n]


def test_default_shapes():
    tle = TleModel.create(TleConfig(), 0)
    out = tle_forward(tle, Transcript.from_words([5, 6, 7]), mode="mean")
    assert out.approx.shape == (1, 64, 64)
    assert out.mu.shape == out.logvar.shape == (1, 8, 64)
    assert out.length is None


def test_config_rejects_misaligned_upsampler():
    with pytest.raises(TleConfigError):
        TleModel.create(TleConfig(up_stride=2), 0)
    with pytest.raises(TleConfigError):
        TleModel.create(TleConfig(beta=-1.0), 0)


def test_reparameterize_examples():
    mu = torch.tensor([[0.5, -1.0]])
    assert torch.equal(reparameterize(mu, torch.zeros_like(mu), eps=torch.zeros_like(mu)), mu)
    assert torch.equal(reparameterize(mu, torch.zeros_like(mu), eps=torch.ones_like(mu)), mu + 1)
    with pytest.raises(ops.ShapeError):
        reparameterize(mu, torch.zeros(3), eps=torch.zeros(3))
    with pytest.raises(ValueError):
        reparameterize(mu, mu)


def test_reparameterize_monte_carlo_mean():
    mu = torch.tensor([1.5, -0.5, 0.0], dtype=torch.float64).expand(10_000, 3)
    z = reparameterize(mu, torch.zeros_like(mu), Stream(11))
    assert (z.mean(0) - mu[0]).abs().max() < 0.05


def test_mean_mode_deterministic(small):
    a = tle_forward(small, _tokens(), mode="mean").approx
    b = tle_forward(small, _tokens(), mode="mean").approx
    assert torch.equal(a, b)


def test_sample_mode_depends_on_stream(small):
    a = tle_forward(small, _tokens(), stream=Stream(1)).approx
    b = tle_forward(small, _tokens(), stream=Stream(2)).approx
    c = tle_forward(small, _tokens(), stream=Stream(1)).approx
    assert (a - b).abs().max() > 0
    assert torch.equal(a, c)


def test_unknown_mode_and_long_transcripts(small):
    with pytest.raises(ValueError):
        tle_forward(small, _tokens(), mode="median")
    with pytest.raises(ValueError):
        tle_forward(small, Transcript.from_words(range(3, 10)), mode="mean")


def test_short_rows_are_padded(small):
    full = tle_forward(small, _tokens(1), mode="mean").approx
    short = tle_forward(small, _tokens(1)[:, :5], mode="mean").approx
    assert torch.equal(full, short)


def test_beta_zero_is_pure_mse(small):
    out = tle_forward(small, _tokens(), stream=Stream(3))
    target = torch.randn(2, SMALL.t_enc, SMALL.h, generator=torch.Generator().manual_seed(0))
    assert torch.equal(vae_objective(out, target, 0.0), ops.mse(out.approx, target))


def test_perfect_reconstruction_gives_zero(small):
    out = tle_forward(small, _tokens(), mode="mean")
    out.mu = torch.zeros_like(out.mu)
    out.logvar = torch.zeros_like(out.logvar)
    assert vae_objective(out, out.approx.detach(), 0.5).item() == 0.0


def _pair():
    w = build_world(0)
    asr = AsrModel.create(AsrConfig(vocab_size=w.vocab_size), 0)
    tle = TleModel.for_asr(asr, 0)
    corpus = sample_corpus(w, "source", "dev", 4, True)
    return asr, tle, corpus


def test_frozen_encoder_contract():
    asr, tle, corpus = _pair()
    before = {k: v.clone() for k, v in asr.state_dict().items()}
    feats = [u.features for u in corpus.items]
    trans = [u.transcript for u in corpus.items]
    params = ParamStore.from_module(tle)
    opt = OptimizerState.create(params, lr=1e-3)
    for step in range(3):
        loss = vae_loss(tle, asr, feats, trans, stream=Stream(step))
        assert loss.item() >= 0
        grads = torch.autograd.grad(loss, params.tensors())
        adam_step(params, dict(zip(params.names(), grads)), opt)
    for k, v in asr.state_dict().items():
        assert torch.equal(v, before[k])
    assert all(p.grad is None for p in asr.parameters())


def test_vae_loss_needs_audio():
    asr, tle, corpus = _pair()
    with pytest.raises(ValueError, match="audio"):
        vae_loss(tle, asr, [None], [corpus.items[0].transcript])


def test_vae_loss_target_is_encoder_output():
    asr, tle, corpus = _pair()
    feats = [u.features for u in corpus.items[:2]]
    trans = [u.transcript for u in corpus.items[:2]]
    target = encode(asr, np.stack([f.frames for f in feats]))
    out = tle_forward(tle, trans, mode="mean")
    expect = vae_objective(out, target, tle.cfg.beta)
    assert torch.allclose(vae_loss(tle, asr, feats, trans, mode="mean"), expect)


def test_compatibility_check(small):
    asr = AsrModel.create(AsrConfig(), 0)
    check_compatible(TleModel.for_asr(asr, 0), asr)
    with pytest.raises(ops.ShapeError):
        check_compatible(small, asr)


def test_length_head_disabled(small):
    with pytest.raises(LengthHeadDisabled):
        predict_lengths(small, _tokens())
    with pytest.raises(LengthHeadDisabled):
        length_loss(tle_forward(small, _tokens(), mode="mean"), [40, 20], 4, 32)


def test_length_head_overfits_to_true_length():
    cfg = TleConfig(length_head=True)
    tle = TleModel.create(cfg, 1)
    tokens = Transcript.from_words([10, 11, 12, 13])
    valid = [157]  # ceil(157 / 4) = 40
    params = ParamStore.from_module(tle)
    opt = OptimizerState.create(params, lr=3e-3)
    for _ in range(200):
        loss = length_loss(tle_forward(tle, tokens, mode="mean"), valid, cfg.k, cfg.t_enc)
        grads = torch.autograd.grad(loss, params.tensors(), allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params.tensors(), grads)]
        adam_step(params, dict(zip(params.names(), grads)), opt)
    assert predict_lengths(tle, tokens).tolist() == [40]
    assert predict_lengths(tle, tokens).tolist() == [40]


def test_predicted_lengths_clamped():
    tle = TleModel.create(TleConfig(length_head=True), 2)
    with torch.no_grad():
        tle.length_head.bias.fill_(5.0)
    assert predict_lengths(tle, Transcript.from_words([4])).tolist() == [64]
    with torch.no_grad():
        tle.length_head.bias.fill_(-5.0)
    assert predict_lengths(tle, Transcript.from_words([4])).tolist() == [1]
