"""Training procedures: base fine-tuning, TLE fitting, and text-only
adaptation (TLE path, synthetic-speech path, or both) with source replay."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .asr import AsrModel, encode, nll_loss
from .numerics.optim import OptimizerState, ParamStore, adam_step
from .numerics.rng import Stream
from .tle import TleModel, check_compatible, length_loss, tle_forward, vae_objective
from .world import Corpus, World, tts_sim

log = logging.getLogger(__name__)

METHODS = ("none", "tle", "tts", "tle+tts")
KINDS = ("base", "tle_train", "tle_text", "tts_text", "replay")
ENCODER, DECODER = "encoder.", "decoder."


@dataclass
class AdaptPlan:
    method: str = "tle"
    base_steps: int = 5000
    text_steps: int = 2000
    tle_steps: int = 3000
    batch_size: int = 8
    replay_ratio: int = 2
    lr: float = 1e-3
    adapt_lr: float = 3e-4
    tle_lr: float = 5e-4
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.0
    seed: int = 0
    tle_mode: str = "sample"
    tle_eval_every: int = 50

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.replay_ratio < 0:
            raise ValueError("replay_ratio must be >= 0")
        if min(self.base_steps, self.text_steps, self.tle_steps) < 0 or self.batch_size < 1:
            raise ValueError("step budgets must be >= 0 and batch_size >= 1")
        if self.tle_mode not in ("sample", "mean"):
            raise ValueError("tle_mode must be 'sample' or 'mean'")

    def lr_at(self, base_lr: float, step: int) -> float:
        if self.warmup <= 0:
            return base_lr
        return base_lr * min(1.0, (step + 1) / self.warmup)

    def optimizer(self, params: ParamStore, lr: float) -> OptimizerState:
        return OptimizerState.create(params, lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class StepRecord:
    step: int
    kind: str
    loss: float
    groups: list
    batch: list = field(default_factory=list)


@dataclass
class StepLog:
    records: list = field(default_factory=list)
    heldout_mse: list = field(default_factory=list)  # (step, mse) pairs from train_tle

    def add(self, kind: str, loss: float, groups: Sequence[str], batch: Iterable[int]) -> None:
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite {kind} loss at step {len(self.records)}")
        self.records.append(StepRecord(len(self.records), kind, float(loss), list(groups), [int(i) for i in batch]))

    def kinds(self) -> list:
        return [r.kind for r in self.records]

    def count(self, kind: str) -> int:
        return sum(r.kind == kind for r in self.records)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "StepLog":
        out = cls()
        with open(path) as f:
            for line in f:
                out.records.append(StepRecord(**json.loads(line)))
        return out


class Batches:
    """Endless shuffled mini-batches of corpus indices, one permutation per epoch."""

    def __init__(self, n: int, batch_size: int, stream: Stream):
        if n < 1:
            raise ValueError("cannot batch an empty corpus")
        self.n, self.batch_size, self.stream = n, batch_size, stream
        self.epoch, self.pos = 0, 0
        self.order = stream.child(0).permutation(n)

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self.pos == self.n:
                self.epoch += 1
                self.pos = 0
                self.order = self.stream.child(self.epoch).permutation(self.n)
            take = min(self.batch_size - len(out), self.n - self.pos)
            out.extend(self.order[self.pos : self.pos + take].tolist())
            self.pos += take
        return np.asarray(out)


def _require_audio(corpus: Corpus, what: str) -> None:
    if not corpus.has_audio:
        raise ValueError(f"{what} needs audio for every item; corpus {corpus.name} lacks it")


def _require_text_only(corpus: Corpus) -> None:
    if any(u.features is not None for u in corpus.items):
        raise ValueError(f"corpus {corpus.name} carries audio; text-only adaptation takes text alone")


def _apply(loss: torch.Tensor, params: ParamStore, opt: OptimizerState, lr: float, clip_norm: float = 0.0) -> None:
    grads = torch.autograd.grad(loss, params.tensors())
    if clip_norm > 0:
        norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
        if norm > clip_norm:
            grads = [g * (clip_norm / norm).to(g.dtype) for g in grads]
    adam_step(params, dict(zip(params.names(), grads)), opt, lr=lr)


class _Source:
    """Source audio batches shared by base training and replay."""

    def __init__(self, corpus: Corpus, l_max: int, batch_size: int, stream: Stream, clip_norm: float = 0.0):
        _require_audio(corpus, "source training")
        self.clip_norm = clip_norm
        self.feats = torch.from_numpy(corpus.features_array())
        self.tokens = torch.from_numpy(corpus.tokens_array(l_max))
        self.batches = Batches(len(corpus), batch_size, stream)

    def step(self, model: AsrModel, params: ParamStore, opt: OptimizerState, lr: float):
        idx = self.batches.next()
        loss = nll_loss(model, encode(model, self.feats[idx]), self.tokens[idx])
        _apply(loss, params, opt, lr, self.clip_norm)
        return loss.item(), idx


def finetune_base(model: AsrModel, corpus: Corpus, plan: AdaptPlan) -> tuple:
    """End-to-end NLL training on source audio; returns (new model, StepLog)."""
    plan.validate()
    model = copy.deepcopy(model)
    steplog = StepLog()
    if plan.base_steps == 0:
        return model, steplog
    source = _Source(corpus, model.cfg.l_max, plan.batch_size, Stream(plan.seed).child("base-batches"), plan.clip_norm)
    params = ParamStore.from_module(model)
    opt = plan.optimizer(params, plan.lr)
    for step in range(plan.base_steps):
        loss, idx = source.step(model, params, opt, plan.lr_at(plan.lr, step))
        steplog.add("base", loss, ["encoder", "decoder"], idx)
        if (step + 1) % 500 == 0:
            log.info("base step %d loss %.4f", step + 1, loss)
    return model, steplog


def encoder_targets(model: AsrModel, feats: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([encode(model, feats[i : i + chunk]) for i in range(0, len(feats), chunk)])


def heldout_mse(tle: TleModel, tokens: torch.Tensor, targets: torch.Tensor, chunk: int = 64) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(tokens), chunk):
            out = tle_forward(tle, tokens[i : i + chunk], mode="mean")
            total += float(((out.approx - targets[i : i + chunk]) ** 2).sum())
    return total / targets.numel()


def train_tle(
    tle: TleModel,
    model: AsrModel,
    corpus: Corpus,
    plan: AdaptPlan,
    heldout: Corpus | None = None,
) -> tuple:
    """Fit the TLE to the frozen recognizer's encoder grids on source audio.

    Returns (new TLE, StepLog). With ``heldout`` given, the log's
    ``heldout_mse`` holds (step, MSE) pairs measured in mean mode at step 0,
    every ``plan.tle_eval_every`` steps, and after the last step.
    """
    plan.validate()
    check_compatible(tle, model)
    _require_audio(corpus, "TLE training")
    tle = copy.deepcopy(tle)
    steplog = StepLog()
    if plan.tle_steps == 0:
        return tle, steplog
    l_max = model.cfg.l_max
    tokens = torch.from_numpy(corpus.tokens_array(l_max))
    targets = encoder_targets(model, torch.from_numpy(corpus.features_array()))
    valid = corpus.valid_lengths()
    if heldout is not None:
        _require_audio(heldout, "held-out TLE evaluation")
        h_tokens = torch.from_numpy(heldout.tokens_array(l_max))
        h_targets = encoder_targets(model, torch.from_numpy(heldout.features_array()))
        steplog.heldout_mse.append((0, heldout_mse(tle, h_tokens, h_targets)))

    root = Stream(plan.seed).child("tle-train")
    batches = Batches(len(corpus), plan.batch_size, root.child("batches"))
    params = ParamStore.from_module(tle)
    opt = plan.optimizer(params, plan.tle_lr)
    for step in range(plan.tle_steps):
        idx = batches.next()
        out = tle_forward(tle, tokens[idx], mode="sample", stream=root.child("z", step))
        loss = vae_objective(out, targets[idx], tle.cfg.beta)
        if tle.length_head is not None:
            loss = loss + length_loss(out, valid[idx], tle.cfg.k, tle.cfg.t_enc)
        _apply(loss, params, opt, plan.lr_at(plan.tle_lr, step), plan.clip_norm)
        steplog.add("tle_train", loss.item(), ["tle"], idx)
        done = step + 1
        if heldout is not None and (done % plan.tle_eval_every == 0 or done == plan.tle_steps):
            if not steplog.heldout_mse or steplog.heldout_mse[-1][0] != done:
                steplog.heldout_mse.append((done, heldout_mse(tle, h_tokens, h_targets)))
        if done % 500 == 0:
            log.info("tle step %d loss %.4f", done, loss.item())
    return tle, steplog


class _TextRounds:
    """State shared by the text-only adaptation variants."""

    def __init__(self, model: AsrModel, target: Corpus, source: Corpus, plan: AdaptPlan, tag: str):
        plan.validate()
        _require_text_only(target)
        self.plan = plan
        self.model = copy.deepcopy(model)
        self.steplog = StepLog()
        self.root = Stream(plan.seed).child("adapt", tag)
        self.tokens = torch.from_numpy(target.tokens_array(model.cfg.l_max))
        self.text_batches = Batches(len(target), plan.batch_size, self.root.child("text-batches"))
        self.source = _Source(source, model.cfg.l_max, plan.batch_size, self.root.child("replay-batches"), plan.clip_norm)
        self.full = ParamStore.from_module(self.model)
        self.decoder = self.full.subset([DECODER])
        self.opt = plan.optimizer(self.full, plan.adapt_lr)
        self.n = 0

    @property
    def lr(self) -> float:
        return self.plan.lr_at(self.plan.adapt_lr, self.n)

    def tle_step(self, tle: TleModel, idx: np.ndarray, round_: int) -> None:
        with torch.no_grad():
            stream = self.root.child("tle-z", round_)
            enc = tle_forward(tle, self.tokens[idx], mode=self.plan.tle_mode, stream=stream).approx
        loss = nll_loss(self.model, enc, self.tokens[idx])
        _apply(loss, self.decoder, self.opt, self.lr, self.plan.clip_norm)
        self.n += 1
        self.steplog.add("tle_text", loss.item(), ["decoder"], idx)

    def tts_step(self, tts_feats: torch.Tensor, idx: np.ndarray) -> None:
        loss = nll_loss(self.model, encode(self.model, tts_feats[idx]), self.tokens[idx])
        _apply(loss, self.full, self.opt, self.lr, self.plan.clip_norm)
        self.n += 1
        self.steplog.add("tts_text", loss.item(), ["encoder", "decoder"], idx)

    def replay(self) -> None:
        for _ in range(self.plan.replay_ratio):
            loss, idx = self.source.step(self.model, self.full, self.opt, self.lr)
            self.n += 1
            self.steplog.add("replay", loss, ["encoder", "decoder"], idx)


def synthesize(world: World, target: Corpus, seed: int) -> torch.Tensor:
    """Synthetic-speech canvases for every target transcript; item i uses stream (seed, 'tts', i)."""
    root = Stream(seed).child("tts")
    return torch.from_numpy(
        np.stack([tts_sim(world, u.transcript, root.child(i)).frames for i, u in enumerate(target.items)])
    )


def adapt_text_only(model: AsrModel, tle: TleModel, target: Corpus, source: Corpus, plan: AdaptPlan) -> tuple:
    """Decoder-only steps on TLE grids for target text, each followed by
    ``replay_ratio`` end-to-end steps on source audio."""
    check_compatible(tle, model)
    run = _TextRounds(model, target, source, plan, "tle")
    for r in range(plan.text_steps):
        run.tle_step(tle, run.text_batches.next(), r)
        run.replay()
    return run.model, run.steplog


def adapt_tts(model: AsrModel, target: Corpus, world: World, source: Corpus, plan: AdaptPlan) -> tuple:
    """End-to-end steps on synthesized target speech, each followed by replay."""
    run = _TextRounds(model, target, source, plan, "tts")
    if plan.text_steps == 0:
        return run.model, run.steplog
    tts_feats = synthesize(world, target, plan.seed)
    for _ in range(plan.text_steps):
        run.tts_step(tts_feats, run.text_batches.next())
        run.replay()
    return run.model, run.steplog


def adapt_combined(
    model: AsrModel, tle: TleModel, target: Corpus, world: World, source: Corpus, plan: AdaptPlan
) -> tuple:
    """Per round, the same target batch drives a TLE step and a synthetic-speech
    step; replay follows each of them."""
    check_compatible(tle, model)
    run = _TextRounds(model, target, source, plan, "tle+tts")
    if plan.text_steps == 0:
        return run.model, run.steplog
    tts_feats = synthesize(world, target, plan.seed)
    for r in range(plan.text_steps):
        idx = run.text_batches.next()
        run.tle_step(tle, idx, r)
        run.replay()
        run.tts_step(tts_feats, idx)
        run.replay()
    return run.model, run.steplog


def adapt(
    method: str,
    model: AsrModel,
    plan: AdaptPlan,
    target: Corpus,
    source: Corpus,
    world: World | None = None,
    tle: TleModel | None = None,
) -> tuple:
    """Dispatch on ``method``; "none" returns an untouched copy."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "none":
        return copy.deepcopy(model), StepLog()
    if "tle" in method and tle is None:
        raise ValueError(f"method {method!r} needs a trained TLE")
    if "tts" in method and world is None:
        raise ValueError(f"method {method!r} needs the world for speech synthesis")
    if method == "tle":
        return adapt_text_only(model, tle, target, source, plan)
    if method == "tts":
        return adapt_tts(model, target, world, source, plan)
    return adapt_combined(model, tle, target, world, source, plan)
