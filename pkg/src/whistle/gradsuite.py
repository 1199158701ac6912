"""The gradient suite: every catalogued op plus the recognizer NLL and the
TLE objective, checked against central differences in float64.

Non-scalar ops are reduced with a fixed random weighting so every output
coordinate contributes to the checked gradient.
"""

from __future__ import annotations

import torch
from torch.func import functional_call

from .asr import AsrConfig, AsrModel, encode, nll_loss
from .numerics import ops
from .numerics.gradcheck import GradCheckReport, grad_check
from .numerics.rng import Stream
from .tle import TleConfig, TleModel, tle_forward, vae_objective

_R = Stream(1234).child("gradsuite")


def _rand(name: str, *shape) -> torch.Tensor:
    return _R.child(name).torch_normal(shape, dtype=torch.float64)


def _weighted(fn, out_shape, name):
    w = _rand(name + "/w", *out_shape)

    def scalar(*xs):
        return (fn(*xs) * w).sum()

    return scalar


def _away_from_zero(t: torch.Tensor, margin: float = 0.1) -> torch.Tensor:
    return torch.where(t.abs() < margin, t.sign() * margin + t, t)


def op_cases() -> dict:
    """Name -> (scalar fn, inputs) for every op in the catalog."""
    cases = {}
    x23, y34 = _rand("a", 2, 3), _rand("b", 3, 4)
    cases["matmul"] = (_weighted(ops.matmul, (2, 4), "matmul"), [x23, y34])
    cases["linear"] = (
        _weighted(ops.linear, (2, 5, 4), "linear"),
        [_rand("lx", 2, 5, 3), _rand("lw", 4, 3), _rand("lb", 4)],
    )
    cases["conv1d"] = (
        _weighted(lambda x, w, b: ops.conv1d(x, w, b, 2, 1), (2, 4, 4), "conv1d"),
        [_rand("cx", 2, 3, 7), _rand("cw", 4, 3, 3), _rand("cb", 4)],
    )
    cases["conv_transpose1d"] = (
        _weighted(lambda x, w, b: ops.conv_transpose1d(x, w, b, 2, 1), (2, 4, 8), "tconv"),
        [_rand("tx", 2, 3, 4), _rand("tw", 3, 4, 4), _rand("tb", 4)],
    )
    ids = torch.tensor([[0, 2, 2], [1, 3, 0]])
    cases["embedding"] = (_weighted(lambda t: ops.embedding(ids, t), (2, 3, 5), "embedding"), [_rand("et", 4, 5)])
    cases["layer_norm"] = (
        _weighted(ops.layer_norm, (3, 6), "ln"),
        [_rand("nx", 3, 6), 1 + 0.1 * _rand("ng", 6), _rand("nb", 6)],
    )
    cases["softmax"] = (_weighted(ops.softmax, (3, 5), "softmax"), [_rand("sx", 3, 5)])
    cases["log_softmax"] = (_weighted(ops.log_softmax, (3, 5), "lsm"), [_rand("lsx", 3, 5)])
    cases["gelu"] = (_weighted(ops.gelu, (4, 5), "gelu"), [_rand("gx", 4, 5)])
    cases["relu"] = (_weighted(ops.relu, (4, 5), "relu"), [_away_from_zero(_rand("rx", 4, 5))])
    cases["add"] = (_weighted(ops.add, (3, 4), "add"), [_rand("aa", 3, 4), _rand("ab", 4)])
    cases["mul"] = (_weighted(ops.mul, (3, 4), "mul"), [_rand("ma", 3, 4), _rand("mb", 3, 1)])
    cases["mse"] = (ops.mse, [_rand("ep", 3, 4), _rand("et2", 3, 4)])
    targets = torch.tensor([[1, 2, 0], [3, 0, 0]])
    cases["cross_entropy"] = (
        lambda z: ops.cross_entropy(z, targets, ignore_index=0),
        [_rand("ce", 2, 3, 5)],
    )
    cases["kl_diag_gaussian"] = (ops.kl_diag_gaussian, [_rand("km", 2, 3, 4), 0.5 * _rand("kv", 2, 3, 4)])
    cases["attention"] = (
        _weighted(lambda q, k, v: ops.attention(q, k, v, causal=True), (2, 2, 4, 3), "attn"),
        [_rand("q", 2, 2, 4, 3), _rand("k", 2, 2, 4, 3), _rand("v", 2, 2, 4, 3)],
    )
    missing = set(ops.op_catalog()) - set(cases)
    if missing:
        raise RuntimeError(f"gradient suite lacks cases for {sorted(missing)}")
    return cases


TINY_ASR = AsrConfig(vocab_size=8, feature_dim=4, n_max=16, k=4, h=8, heads=2, ffn=16, enc_blocks=1, dec_blocks=1, l_max=6)
TINY_TLE = TleConfig(
    vocab_size=8, l_max=4, t_enc=16, h=8, k=4, embed=4, enc_channels=(4, 6, 8), latent=4, beta=0.1, embed_std=0.5
)


class _Objective(torch.nn.Module):
    """Wraps a model and a fixed batch so ``functional_call`` can swap in the
    parameters being perturbed."""

    def __init__(self, model, loss_of):
        super().__init__()
        self.model = model
        self.loss_of = loss_of

    def forward(self):
        return self.loss_of(self.model)


def _param_fn(model, loss_of):
    wrapper = _Objective(model, loss_of)
    names = [f"model.{n}" for n, _ in model.named_parameters()]

    def fn(*tensors):
        return functional_call(wrapper, dict(zip(names, tensors)), ())

    return fn, [p.detach() for p in model.parameters()]


def nll_case():
    model = AsrModel.create(TINY_ASR, 5).double()
    feats = _rand("feats", 2, TINY_ASR.n_max, TINY_ASR.feature_dim)
    targets = torch.tensor([[1, 4, 5, 3, 2, 0], [1, 6, 2, 0, 0, 0]])
    return _param_fn(model, lambda m: nll_loss(m, encode(m, feats), targets))


def vae_case():
    tle = TleModel.create(TINY_TLE, 6).double()
    tokens = torch.tensor([[1, 4, 2, 0], [1, 5, 6, 2]])
    target = _rand("grid", 2, TINY_TLE.t_enc, TINY_TLE.h)

    def loss(m):
        # a fresh stream per call keeps eps fixed across perturbations
        out = tle_forward(m, tokens, mode="sample", stream=Stream(99).child("eps"))
        return vae_objective(out, target, m.cfg.beta)

    return _param_fn(tle, loss)


def loss_cases() -> dict:
    return {"L_NLL": nll_case(), "L_VAE": vae_case()}


def run_suite(precision: str = "high", max_coords: int = 24) -> dict:
    """Name -> max relative error over the checked coordinates."""
    return {name: rep.max_rel_err for name, rep in run_reports(precision, max_coords).items()}


def run_reports(precision: str = "high", max_coords: int = 24) -> dict:
    reports: dict[str, GradCheckReport] = {}
    for name, (fn, inputs) in op_cases().items():
        reports[name] = grad_check(fn, inputs, precision=precision)
    stream = Stream(4321).child("loss-coords")
    for name, (fn, inputs) in loss_cases().items():
        reports[name] = grad_check(fn, inputs, precision=precision, max_coords=max_coords, stream=stream.child(name))
    return reports


__all__ = ["loss_cases", "op_cases", "run_reports", "run_suite"]
