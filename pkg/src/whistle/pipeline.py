"""Per-seed artifact cache shared by the CLI and the matrix runner.

A :class:`SeedRun` owns one directory of checkpoints and step logs and
produces (loading when present, training when allowed) the base
recognizer, the TLE, each adapted recognizer, the target-text LM and the
best fusion weight per method.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

from .adapt import AdaptPlan, StepLog, adapt, finetune_base, train_tle
from .asr import AsrModel
from .checkpoint import load_checkpoint, save_checkpoint
from .lmfusion import FusionConfig, TrigramLM, gamma_search, train_trigram
from .tle import TleModel
from .world import EOS, Corpus, World, build_world, generate_corpora

log = logging.getLogger(__name__)


def _missing(what: str, path: Path):
    from .evalkit import MissingPrerequisite

    return MissingPrerequisite(f"{what} checkpoint {path} is missing")


def plan_for(cfg, seed: int, method: str = "none") -> AdaptPlan:
    return dataclasses.replace(cfg.adapt, seed=int(seed), method=method)


def asr_for(cfg, seed: int) -> AsrModel:
    return AsrModel.create(cfg.asr, seed)


def tle_for(cfg, seed: int) -> TleModel:
    return TleModel.create(dataclasses.replace(cfg.tle), seed)


def ckpt_name(method: str) -> str:
    return "base.wtle" if method == "none" else f"adapted-{method.replace('+', '_')}.wtle"


def target_lm(world: World, corpus: Corpus) -> TrigramLM:
    """Trigram LM over target training text with every recognizer word plus EOS in its vocabulary."""
    vocab = list(range(EOS + 1, world.vocab_size)) + [EOS]
    return train_trigram(corpus, vocab=vocab)


class SeedRun:
    def __init__(self, cfg, seed: int, directory, train_missing: bool = True, world: World | None = None):
        self.cfg = cfg
        self.seed = int(seed)
        self.dir = Path(directory)
        self.train_missing = train_missing
        self.world = world or build_world(config=cfg.world)
        self._corpora = None
        self._models: dict = {}
        self._tle = None
        self._lm = None
        self._gammas: dict = {}

    @property
    def corpora(self) -> dict:
        if self._corpora is None:
            self._corpora = generate_corpora(self.world)
        return self._corpora

    def _store(self, model, name: str, steplog: StepLog | None = None) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, self.dir / name)
        if steplog is not None:
            steplog.write_jsonl(self.dir / name.replace(".wtle", ".steps.jsonl"))

    def base(self) -> AsrModel:
        if "none" not in self._models:
            path = self.dir / "base.wtle"
            if path.exists():
                self._models["none"] = load_checkpoint(path, kind="asr")
            elif not self.train_missing:
                raise _missing("base", path)
            else:
                log.info("seed %d: training base recognizer", self.seed)
                model, steps = finetune_base(
                    asr_for(self.cfg, self.seed), self.corpora[("source", "train")], plan_for(self.cfg, self.seed)
                )
                self._store(model, "base.wtle", steps)
                self._models["none"] = model
        return self._models["none"]

    def tle(self) -> TleModel:
        if self._tle is None:
            path = self.dir / "tle.wtle"
            if path.exists():
                self._tle = load_checkpoint(path, kind="tle")
            elif not self.train_missing:
                raise _missing("TLE", path)
            else:
                base = self.base()
                log.info("seed %d: training TLE", self.seed)
                tle, steps = train_tle(
                    tle_for(self.cfg, self.seed),
                    base,
                    self.corpora[("source", "train")],
                    plan_for(self.cfg, self.seed),
                    heldout=self.corpora[("source", "dev")],
                )
                self._store(tle, "tle.wtle", steps)
                (self.dir / "tle.heldout.json").write_text(json.dumps(steps.heldout_mse))
                self._tle = tle
        return self._tle

    def adapted(self, method: str) -> AsrModel:
        if method == "none":
            return self.base()
        if method not in self._models:
            path = self.dir / ckpt_name(method)
            if path.exists():
                self._models[method] = load_checkpoint(path, kind="asr")
            elif not self.train_missing:
                raise _missing(method, path)
            else:
                base = self.base()
                tle = self.tle() if "tle" in method else None
                log.info("seed %d: adapting with %s", self.seed, method)
                model, steps = adapt(
                    method,
                    base,
                    plan_for(self.cfg, self.seed, method),
                    self.corpora[("target", "train")].text_only(),
                    self.corpora[("source", "train")],
                    self.world,
                    tle,
                )
                self._store(model, ckpt_name(method), steps)
                self._models[method] = model
        return self._models[method]

    @property
    def lm(self) -> TrigramLM:
        if self._lm is None:
            self._lm = target_lm(self.world, self.corpora[("target", "train")])
        return self._lm

    def best_gamma(self, method: str) -> float:
        if method not in self._gammas:
            fusion = FusionConfig(beam_size=self.cfg.eval.beam_size, grid=tuple(self.cfg.fusion.grid))
            best, _ = gamma_search(self.adapted(method), self.lm, self.corpora[("target", "dev")], fusion)
            self._gammas[method] = best
        return self._gammas[method]


__all__ = ["SeedRun", "asr_for", "ckpt_name", "plan_for", "target_lm", "tle_for"]
