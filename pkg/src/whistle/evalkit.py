"""Word error rate, corpus evaluation, and the method x corpus x seed matrix."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .asr import AsrModel, decode_beam, encode
from .lmfusion import FusionConfig, TrigramLM, fused_decode
from .world import BOS, EOS, PAD, Corpus

SPECIAL = (PAD, BOS, EOS)


def strip_special(tokens: Sequence) -> list:
    return [t for t in tokens if t not in SPECIAL]


@dataclass
class WerResult:
    rate: float
    sub: int
    dele: int
    ins: int
    n_ref: int

    @property
    def edits(self) -> int:
        return self.sub + self.dele + self.ins


def edit_counts(ref: Sequence, hyp: Sequence) -> tuple:
    """Minimum-edit alignment counts (S, D, I) by unit-cost Levenshtein DP."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), d, ins


def wer(reference: Sequence, hypothesis: Sequence) -> WerResult:
    """(S + D + I) / |reference| after dropping PAD/BOS/EOS from both sides."""
    ref, hyp = strip_special(reference), strip_special(hypothesis)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    s, d, i = edit_counts(ref, hyp)
    return WerResult((s + d + i) / len(ref), s, d, i, len(ref))


@dataclass
class EvalRow:
    uid: str
    reference: list
    hypothesis: list
    sub: int
    dele: int
    ins: int

    @property
    def n_ref(self) -> int:
        return len(self.reference)


@dataclass
class EvalReport:
    corpus: str
    rows: list = field(default_factory=list)

    @property
    def sub(self) -> int:
        return sum(r.sub for r in self.rows)

    @property
    def dele(self) -> int:
        return sum(r.dele for r in self.rows)

    @property
    def ins(self) -> int:
        return sum(r.ins for r in self.rows)

    @property
    def n_ref_words(self) -> int:
        return sum(r.n_ref for r in self.rows)

    @property
    def wer(self) -> float:
        """Pooled over words: total edits / total reference words."""
        return (self.sub + self.dele + self.ins) / self.n_ref_words

    def hypotheses(self) -> list:
        return [r.hypothesis for r in self.rows]

    def to_json(self) -> dict:
        return {
            "corpus": self.corpus,
            "wer": self.wer,
            "S": self.sub,
            "D": self.dele,
            "I": self.ins,
            "n_ref_words": self.n_ref_words,
            "rows": [
                {"id": r.uid, "ref": r.reference, "hyp": r.hypothesis, "S": r.sub, "D": r.dele, "I": r.ins}
                for r in self.rows
            ],
        }


def encode_corpus(model: AsrModel, corpus: Corpus, chunk: int = 32) -> torch.Tensor:
    """Encoder grids for every item, computed in fixed-size chunks so a given
    utterance always sees the same batch arithmetic."""
    feats = torch.from_numpy(corpus.features_array())
    with torch.no_grad():
        return torch.cat([encode(model, feats[i : i + chunk]) for i in range(0, len(feats), chunk)])


def evaluate(
    model: AsrModel,
    corpus: Corpus,
    beam_size: int = 4,
    lm: TrigramLM | None = None,
    fusion: FusionConfig | None = None,
    max_len: int | None = None,
) -> EvalReport:
    """Decode every utterance (shallow-fused when ``lm`` is given) and score it."""
    if not corpus.has_audio:
        raise ValueError(f"evaluation needs audio; corpus {corpus.name} lacks it")
    grids = encode_corpus(model, corpus)
    report = EvalReport(corpus.name)
    for utt, grid in zip(corpus.items, grids):
        if lm is not None:
            cfg = fusion or FusionConfig(beam_size=beam_size)
            hyp, _ = fused_decode(model, lm, grid, cfg, max_len)
        else:
            hyp, _ = decode_beam(model, grid, beam_size, max_len)
        ref = list(utt.transcript.words)
        res = wer(ref, hyp.tokens)
        report.rows.append(EvalRow(utt.uid, ref, list(hyp.words), res.sub, res.dele, res.ins))
    return report


MATRIX_METHODS = ("none", "tle", "tts", "sf", "tts+sf", "tle+tts", "tle+tts+sf")
CSV_HEADER = "method,corpus,seed,wer,S,D,I,n_ref_words"


class MissingPrerequisite(FileNotFoundError):
    """A matrix cell needs a checkpoint that is absent and may not be trained."""


@dataclass
class MatrixSpec:
    methods: tuple = ("none", "tle", "tts", "tle+tts")
    corpora: tuple = ("target", "source")
    seeds: tuple = (0, 1, 2)

    def validate(self) -> None:
        if not self.methods or not self.corpora or not self.seeds:
            raise ValueError("matrix spec needs at least one method, corpus and seed")
        bad = [m for m in self.methods if m not in MATRIX_METHODS]
        if bad:
            raise ValueError(f"unknown matrix method(s) {bad}; choose from {MATRIX_METHODS}")
        bad = [c for c in self.corpora if c not in ("target", "source")]
        if bad:
            raise ValueError(f"unknown corpora {bad}")

    def cells(self) -> list:
        return [(m, c, s) for m in self.methods for c in self.corpora for s in self.seeds]


@dataclass
class MatrixCell:
    method: str
    corpus: str
    seed: int
    report: EvalReport
    gamma: float | None = None

    def csv_row(self) -> str:
        r = self.report
        return f"{self.method},{self.corpus},{self.seed},{r.wer:.6f},{r.sub},{r.dele},{r.ins},{r.n_ref_words}"


def adapt_method(cell_method: str) -> str:
    """The adaptation a matrix method builds on ("tts+sf" -> "tts", "sf" -> "none")."""
    base = cell_method.replace("+sf", "").replace("sf", "")
    return base or "none"


def matrix_csv(cells: list) -> str:
    return "\n".join([CSV_HEADER, *(c.csv_row() for c in cells)]) + "\n"


def matrix_markdown(cells: list, spec: MatrixSpec) -> str:
    """Method rows, and per corpus one WER column per seed plus the mean, in percent."""
    by = {(c.method, c.corpus, c.seed): c for c in cells}
    head = ["Method"]
    for corpus in spec.corpora:
        head += [f"{corpus} s{s}" for s in spec.seeds] + [f"{corpus} mean"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for m in spec.methods:
        row = [m.upper() if m != "none" else "None"]
        for corpus in spec.corpora:
            vals = [100 * by[(m, corpus, s)].report.wer for s in spec.seeds]
            row += [f"{v:.2f}" for v in vals] + [f"{sum(vals) / len(vals):.2f}"]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def mean_wer(cells: list, method: str, corpus: str) -> float:
    vals = [c.report.wer for c in cells if c.method == method and c.corpus == corpus]
    if not vals:
        raise KeyError(f"no cells for ({method}, {corpus})")
    return sum(vals) / len(vals)


def run_matrix(spec: MatrixSpec, cfg, ckpt_dir, out_dir, train_missing: bool = True) -> list:
    """Adapt and evaluate every (method, corpus, seed) cell, then write
    ``matrix.csv`` and ``matrix.md`` to ``out_dir``.

    Per seed, the base recognizer and TLE are read from ``ckpt_dir/seed<N>``;
    when absent they are trained there (or, with ``train_missing=False``,
    :class:`MissingPrerequisite` names the cell). SF variants pick gamma on
    the target dev split and report the test result at that gamma.
    """
    from pathlib import Path

    from .pipeline import SeedRun

    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for seed in spec.seeds:
        run = SeedRun(cfg, seed, Path(ckpt_dir) / f"seed{seed}", train_missing=train_missing)
        for method in spec.methods:
            for corpus in spec.corpora:
                try:
                    model = run.adapted(adapt_method(method))
                    gamma = run.best_gamma(adapt_method(method)) if "sf" in method else None
                except MissingPrerequisite as e:
                    raise MissingPrerequisite(f"cell ({method}, {corpus}, seed {seed}): {e}") from e
                test = run.corpora[(corpus, "test")]
                if gamma is None:
                    report = evaluate(model, test, beam_size=cfg.eval.beam_size)
                else:
                    fusion = FusionConfig(gamma=gamma, beam_size=cfg.eval.beam_size, grid=cfg.fusion.grid)
                    report = evaluate(model, test, beam_size=cfg.eval.beam_size, lm=run.lm, fusion=fusion)
                cells.append(MatrixCell(method, corpus, seed, report, gamma))
    order = {cell: i for i, cell in enumerate(spec.cells())}
    cells.sort(key=lambda c: order[(c.method, c.corpus, c.seed)])
    (out_dir / "matrix.csv").write_text(matrix_csv(cells))
    (out_dir / "matrix.md").write_text(matrix_markdown(cells, spec))
    return cells
