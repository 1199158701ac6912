"""A deterministic synthetic speech universe.

Words are sequences of phonemes; each phoneme is a short prototype block of
feature frames. The articulator turns a word sequence into a fixed-size
feature canvas under a per-utterance speaker transform, duration jitter and
noise. A degraded articulator stands in for text-to-speech. Two text domains
share part of their lexicon; the rest of the target lexicon never appears in
source-domain text.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics.rng import Stream

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<s>", "</s>")
DOMAINS = ("source", "target")
SPLITS = ("train", "dev", "test")

_CONSONANTS = "ptkbdgmnslrfvzhjw"
_VOWELS = "aeiou"


class WorldConfigError(ValueError):
    pass


class ArticulationError(ValueError):
    pass


@dataclass
class SpeakerDist:
    gain_std: float = 0.15
    bias_mean: float = 0.0
    bias_std: float = 0.15
    tap_std: float = 0.1


@dataclass
class WorldConfig:
    seed: int = 0
    n_phonemes: int = 24
    feature_dim: int = 16
    proto_min_frames: int = 3
    proto_max_frames: int = 6
    word_min_phonemes: int = 2
    word_max_phonemes: int = 5
    source_words: int = 120
    target_words: int = 80
    overlap: float = 0.5
    n_max: int = 256
    l_max: int = 16
    utt_min_words: int = 3
    utt_max_words: int = 10
    bigram_alpha: float = 0.1
    jitter_prob: float = 0.1
    noise_sigma: float = 0.2
    source_speaker: SpeakerDist = field(default_factory=SpeakerDist)
    target_speaker: SpeakerDist = field(
        default_factory=lambda: SpeakerDist(gain_std=0.2, bias_mean=0.05, bias_std=0.2, tap_std=0.15)
    )
    tts_pool_size: int = 4
    tts_tilt: float = 0.15
    source_train: int = 4000
    source_dev: int = 200
    source_test: int = 200
    target_train: int = 2000
    target_dev: int = 100
    target_test: int = 200

    def validate(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise WorldConfigError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not 1 <= self.proto_min_frames <= self.proto_max_frames:
            raise WorldConfigError("need 1 <= proto_min_frames <= proto_max_frames")
        if not 1 <= self.word_min_phonemes <= self.word_max_phonemes:
            raise WorldConfigError("need 1 <= word_min_phonemes <= word_max_phonemes")
        if not 1 <= self.utt_min_words <= self.utt_max_words:
            raise WorldConfigError("need 1 <= utt_min_words <= utt_max_words")
        if self.utt_max_words + 2 > self.l_max:
            raise WorldConfigError(f"utt_max_words + 2 must fit l_max={self.l_max}")
        if self.n_phonemes > len(_CONSONANTS) * len(_VOWELS):
            raise WorldConfigError(f"at most {len(_CONSONANTS) * len(_VOWELS)} phonemes supported")
        if self.source_words < 1 or self.target_words < 1:
            raise WorldConfigError("lexicons must be non-empty")
        if self.n_shared > self.source_words:
            raise WorldConfigError("overlap asks for more shared words than the source lexicon holds")
        possible = sum(
            self.n_phonemes**n for n in range(self.word_min_phonemes, self.word_max_phonemes + 1)
        )
        if self.source_words + self.n_novel > possible:
            raise WorldConfigError("not enough distinct phoneme sequences for the lexicons")
        if self.bigram_alpha <= 0 or self.jitter_prob < 0 or 2 * self.jitter_prob > 1:
            raise WorldConfigError("bigram_alpha must be > 0 and jitter_prob in [0, 0.5]")
        if self.noise_sigma < 0 or self.tts_pool_size < 1:
            raise WorldConfigError("noise_sigma must be >= 0 and tts_pool_size >= 1")
        if self.n_max < 1 or self.feature_dim < 1:
            raise WorldConfigError("n_max and feature_dim must be positive")

    @property
    def n_shared(self) -> int:
        return int(round(self.overlap * self.target_words))

    @property
    def n_novel(self) -> int:
        return self.target_words - self.n_shared

    def corpus_size(self, domain: str, split: str) -> int:
        return getattr(self, f"{domain}_{split}")


@dataclass
class Speaker:
    gain: np.ndarray
    bias: np.ndarray
    taps: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Speaker":
        return cls(
            gain=np.ones(dim, np.float32),
            bias=np.zeros(dim, np.float32),
            taps=np.array([0.0, 1.0, 0.0], np.float32),
        )

    @classmethod
    def sample(cls, dist: SpeakerDist, dim: int, stream: Stream) -> "Speaker":
        gain = 1.0 + stream.normal(dim, dist.gain_std)
        bias = dist.bias_mean + stream.normal(dim, dist.bias_std)
        side = stream.normal(2, dist.tap_std)
        taps = np.array([side[0], 1.0, side[1]], np.float32)
        return cls(gain.astype(np.float32), bias.astype(np.float32), taps)

    def to_json(self) -> dict:
        return {"gain": self.gain.tolist(), "bias": self.bias.tolist(), "taps": self.taps.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Speaker":
        return cls(*(np.asarray(d[k], np.float32) for k in ("gain", "bias", "taps")))


@dataclass
class AudioFeatures:
    frames: np.ndarray  # (n_max, d) float32, zero after valid_len
    valid_len: int

    def __post_init__(self):
        if self.valid_len > self.frames.shape[0]:
            raise ValueError("valid_len exceeds the canvas")


@dataclass(frozen=True)
class Transcript:
    """Token ids from BOS through EOS, unpadded."""

    tokens: tuple

    @classmethod
    def from_words(cls, word_ids: Iterable[int]) -> "Transcript":
        return cls((BOS, *(int(w) for w in word_ids), EOS))

    @property
    def words(self) -> tuple:
        return tuple(t for t in self.tokens if t not in (PAD, BOS, EOS))

    def __len__(self) -> int:
        return len(self.tokens)

    def padded(self, l_max: int) -> np.ndarray:
        if len(self.tokens) > l_max:
            raise ValueError(f"transcript of length {len(self.tokens)} exceeds L_max={l_max}")
        out = np.full(l_max, PAD, np.int64)
        out[: len(self.tokens)] = self.tokens
        return out


@dataclass
class Utterance:
    uid: str
    transcript: Transcript
    features: AudioFeatures | None = None


@dataclass
class Corpus:
    domain: str
    split: str
    items: list

    @property
    def name(self) -> str:
        return f"{self.domain}-{self.split}"

    @property
    def has_audio(self) -> bool:
        return bool(self.items) and all(u.features is not None for u in self.items)

    def __len__(self) -> int:
        return len(self.items)

    def features_array(self) -> np.ndarray:
        if not self.has_audio:
            raise ValueError(f"corpus {self.name} has no audio")
        return np.stack([u.features.frames for u in self.items])

    def valid_lengths(self) -> np.ndarray:
        return np.array([u.features.valid_len for u in self.items], np.int64)

    def tokens_array(self, l_max: int) -> np.ndarray:
        return np.stack([u.transcript.padded(l_max) for u in self.items])

    def text_only(self) -> "Corpus":
        return Corpus(self.domain, self.split, [Utterance(u.uid, u.transcript) for u in self.items])


@dataclass
class World:
    config: WorldConfig
    phoneme_names: list
    prototypes: list  # per phoneme: (frames, d) float32
    vocab: list  # token strings, specials first
    pronunciations: dict  # token id -> tuple of phoneme ids
    source_lexicon: list
    target_lexicon: list
    start_probs: dict  # domain -> (lexicon,) probabilities
    transitions: dict  # domain -> (lexicon, lexicon) row-stochastic
    tts_pool: list
    tilt: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def target_only(self) -> list:
        src = set(self.source_lexicon)
        return [w for w in self.target_lexicon if w not in src]

    def lexicon(self, domain: str) -> list:
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        return self.source_lexicon if domain == "source" else self.target_lexicon

    def speaker_dist(self, domain: str) -> SpeakerDist:
        return self.config.source_speaker if domain == "source" else self.config.target_speaker

    def word_names(self, tokens: Iterable[int]) -> list:
        return [self.vocab[t] for t in tokens]

    def token_ids(self, names: Iterable[str]) -> list:
        index = {w: i for i, w in enumerate(self.vocab)}
        return [index[n] for n in names]

    def to_json(self) -> dict:
        return {
            "config": dataclasses.asdict(self.config),
            "phoneme_names": self.phoneme_names,
            "prototypes": [p.tolist() for p in self.prototypes],
            "vocab": self.vocab,
            "pronunciations": {str(k): list(v) for k, v in self.pronunciations.items()},
            "source_lexicon": self.source_lexicon,
            "target_lexicon": self.target_lexicon,
            "start_probs": {d: p.tolist() for d, p in self.start_probs.items()},
            "transitions": {d: t.tolist() for d, t in self.transitions.items()},
            "tts_pool": [s.to_json() for s in self.tts_pool],
            "tilt": self.tilt.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "World":
        cfg = dict(d["config"])
        cfg["source_speaker"] = SpeakerDist(**cfg["source_speaker"])
        cfg["target_speaker"] = SpeakerDist(**cfg["target_speaker"])
        return cls(
            config=WorldConfig(**cfg),
            phoneme_names=list(d["phoneme_names"]),
            prototypes=[np.asarray(p, np.float32) for p in d["prototypes"]],
            vocab=list(d["vocab"]),
            pronunciations={int(k): tuple(v) for k, v in d["pronunciations"].items()},
            source_lexicon=list(d["source_lexicon"]),
            target_lexicon=list(d["target_lexicon"]),
            start_probs={k: np.asarray(v) for k, v in d["start_probs"].items()},
            transitions={k: np.asarray(v) for k, v in d["transitions"].items()},
            tts_pool=[Speaker.from_json(s) for s in d["tts_pool"]],
            tilt=np.asarray(d["tilt"], np.float32),
        )


def build_world(seed: int | None = None, config: WorldConfig | None = None) -> World:
    """Construct the world for ``config`` (``seed`` overrides ``config.seed``)."""
    config = dataclasses.replace(config or WorldConfig())
    if seed is not None:
        config.seed = int(seed)
    config.validate()
    root = Stream(config.seed).child("world")
    d = config.feature_dim

    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    picks = root.child("phoneme-names").permutation(len(syllables))[: config.n_phonemes]
    phoneme_names = [syllables[i] for i in sorted(picks)]

    proto_stream = root.child("prototypes")
    prototypes = []
    for p in range(config.n_phonemes):
        s = proto_stream.child(p)
        n_frames = int(s.integers(config.proto_min_frames, config.proto_max_frames + 1))
        prototypes.append(s.normal((n_frames, d)))

    word_stream = root.child("words")
    n_words = config.source_words + config.n_novel
    seen: set = set()
    sequences = []
    while len(sequences) < n_words:
        length = int(word_stream.integers(config.word_min_phonemes, config.word_max_phonemes + 1))
        seq = tuple(int(x) for x in word_stream.integers(0, config.n_phonemes, length))
        if seq not in seen:
            seen.add(seq)
            sequences.append(seq)

    vocab = list(SPECIALS)
    pronunciations = {}
    for seq in sequences:
        pronunciations[len(vocab)] = seq
        vocab.append("".join(phoneme_names[p] for p in seq))

    first = len(SPECIALS)
    source_lexicon = list(range(first, first + config.source_words))
    novel = list(range(first + config.source_words, first + n_words))
    shared_idx = root.child("shared").permutation(config.source_words)[: config.n_shared]
    target_lexicon = sorted(source_lexicon[i] for i in shared_idx) + novel

    start_probs, transitions = {}, {}
    for domain, lex in (("source", source_lexicon), ("target", target_lexicon)):
        s = root.child("bigram", domain)
        alpha = np.full(len(lex), config.bigram_alpha)
        start_probs[domain] = s.child("start").dirichlet(alpha)
        transitions[domain] = np.stack([s.child("row", i).dirichlet(alpha) for i in range(len(lex))])

    pool_stream = root.child("tts-pool")
    tts_pool = [
        Speaker.sample(config.source_speaker, d, pool_stream.child(i)) for i in range(config.tts_pool_size)
    ]
    sign = 1.0 if root.child("tilt").uniform() < 0.5 else -1.0
    ramp = np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1)
    tilt = (sign * config.tts_tilt * ramp).astype(np.float32)

    return World(
        config=config,
        phoneme_names=phoneme_names,
        prototypes=prototypes,
        vocab=vocab,
        pronunciations=pronunciations,
        source_lexicon=source_lexicon,
        target_lexicon=target_lexicon,
        start_probs=start_probs,
        transitions=transitions,
        tts_pool=tts_pool,
        tilt=tilt,
    )


def _channel_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    prev = np.zeros_like(x)
    nxt = np.zeros_like(x)
    prev[1:] = x[:-1]
    nxt[:-1] = x[1:]
    return taps[0] * prev + taps[1] * x + taps[2] * nxt


def _jitter(frames: np.ndarray, prob: float, stream: Stream) -> np.ndarray:
    """Drop each frame with ``prob`` and double it with ``prob``."""
    if prob <= 0:
        return frames
    u = stream.uniform(len(frames))
    repeats = np.where(u < prob, 0, np.where(u < 2 * prob, 2, 1))
    return np.repeat(frames, repeats, axis=0)


def articulate(
    world: World,
    words: Sequence[int],
    speaker: Speaker,
    stream: Stream,
    noise_sigma: float,
    jitter_prob: float | None = None,
    tilt: np.ndarray | None = None,
) -> AudioFeatures:
    """Render ``words`` (token ids) onto a silence-padded feature canvas.

    Frames of the phoneme prototypes are dropped or repeated independently
    with ``jitter_prob`` each, then filtered along time by the speaker's
    3-tap channel, scaled and shifted per feature dimension, optionally
    tilted, and finally perturbed by Gaussian noise. Padding stays exactly
    zero.
    """
    cfg = world.config
    jitter_prob = cfg.jitter_prob if jitter_prob is None else jitter_prob
    blocks = [world.prototypes[p] for w in words for p in world.pronunciations[int(w)]]
    canvas = np.zeros((cfg.n_max, cfg.feature_dim), np.float32)
    if not blocks:
        return AudioFeatures(canvas, 0)
    frames = _jitter(np.concatenate(blocks, axis=0), jitter_prob, stream.child("jitter"))
    n = len(frames)
    if n > cfg.n_max:
        names = " ".join(world.word_names(words))
        raise ArticulationError(f"utterance '{names}' needs {n} frames, canvas holds {cfg.n_max}")
    if n == 0:
        return AudioFeatures(canvas, 0)
    out = _channel_filter(frames, speaker.taps) * speaker.gain + speaker.bias
    if tilt is not None:
        out = out + tilt
    if noise_sigma > 0:
        out = out + stream.child("noise").normal(out.shape, noise_sigma)
    canvas[:n] = out.astype(np.float32)
    return AudioFeatures(canvas, n)


def sample_words(world: World, domain: str, stream: Stream) -> list:
    cfg = world.config
    lex = world.lexicon(domain)
    n = int(stream.integers(cfg.utt_min_words, cfg.utt_max_words + 1))
    idx = [stream.choice(len(lex), p=world.start_probs[domain])]
    trans = world.transitions[domain]
    while len(idx) < n:
        idx.append(stream.choice(len(lex), p=trans[idx[-1]]))
    return [lex[i] for i in idx]


def sample_corpus(
    world: World,
    domain: str,
    split: str,
    count: int,
    with_audio: bool,
    stream: Stream | None = None,
) -> Corpus:
    """Draw ``count`` utterances; each uses its own child stream, so items are
    independent of one another and of the order they are generated in."""
    if count <= 0:
        raise ValueError("count must be positive")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    stream = stream or Stream(world.config.seed).child("corpus", domain, split)
    cfg = world.config
    items = []
    for i in range(count):
        s = stream.child(i)
        for attempt in range(100):
            a = s.child(attempt)
            words = sample_words(world, domain, a.child("text"))
            feats = None
            if with_audio:
                speaker = Speaker.sample(world.speaker_dist(domain), cfg.feature_dim, a.child("speaker"))
                try:
                    feats = articulate(world, words, speaker, a.child("audio"), cfg.noise_sigma)
                except ArticulationError:
                    continue
            break
        else:
            raise ArticulationError(f"could not fit utterance {i} of {domain}-{split} on the canvas")
        items.append(Utterance(f"{domain}-{split}-{i:06d}", Transcript.from_words(words), feats))
    return Corpus(domain, split, items)


def tts_sim(
    world: World,
    transcript: Transcript,
    stream: Stream,
    speaker_pool: Sequence[Speaker] | None = None,
    tilt: np.ndarray | float | None = None,
    noise_sigma: float | None = None,
) -> AudioFeatures:
    """Synthetic-speech stand-in: a pooled source speaker, no duration
    jitter, and the world's fixed spectral tilt."""
    pool = world.tts_pool if speaker_pool is None else list(speaker_pool)
    if tilt is None:
        tilt = world.tilt
    elif np.isscalar(tilt):
        tilt = np.full(world.config.feature_dim, tilt, np.float32) if tilt else None
    sigma = world.config.noise_sigma if noise_sigma is None else noise_sigma
    speaker = pool[stream.choice(len(pool))] if len(pool) > 1 else pool[0]
    return articulate(world, transcript.words, speaker, stream.child("audio"), sigma, 0.0, tilt)


def generate_corpora(world: World, which: Sequence[tuple] | None = None) -> dict:
    """All standard corpora keyed by (domain, split). Target train is text-only."""
    which = which or [(d, s) for d in DOMAINS for s in SPLITS]
    out = {}
    for domain, split in which:
        with_audio = not (domain == "target" and split == "train")
        out[(domain, split)] = sample_corpus(
            world, domain, split, world.config.corpus_size(domain, split), with_audio
        )
    return out


def save_dataset(path: str | Path, world: World, corpora: Iterable[Corpus]) -> list:
    """Write world.json, manifest.jsonl and features.bin; return the file paths."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "world.json").write_text(json.dumps(world.to_json()))
    offset = 0
    with open(path / "features.bin", "wb") as fbin, open(path / "manifest.jsonl", "w") as fman:
        for corpus in corpora:
            for u in corpus.items:
                rec = {
                    "id": u.uid,
                    "domain": corpus.domain,
                    "split": corpus.split,
                    "tokens": world.word_names(u.transcript.words),
                    "valid_len": None,
                    "offset": None,
                    "length": None,
                }
                if u.features is not None:
                    blob = u.features.frames[: u.features.valid_len].astype("<f4").tobytes()
                    fbin.write(blob)
                    rec.update(valid_len=u.features.valid_len, offset=offset, length=len(blob))
                    offset += len(blob)
                fman.write(json.dumps(rec) + "\n")
    return [path / "world.json", path / "manifest.jsonl", path / "features.bin"]


def load_dataset(path: str | Path) -> tuple:
    """Inverse of :func:`save_dataset`: (world, {(domain, split): Corpus})."""
    path = Path(path)
    world = World.from_json(json.loads((path / "world.json").read_text()))
    cfg = world.config
    raw = (path / "features.bin").read_bytes()
    index = {w: i for i, w in enumerate(world.vocab)}
    corpora: dict = {}
    with open(path / "manifest.jsonl") as fman:
        for line in fman:
            rec = json.loads(line)
            transcript = Transcript.from_words(index[t] for t in rec["tokens"])
            feats = None
            if rec["offset"] is not None:
                chunk = raw[rec["offset"] : rec["offset"] + rec["length"]]
                if len(chunk) != rec["length"]:
                    raise ValueError(f"{rec['id']}: features.bin is truncated")
                frames = np.frombuffer(chunk, "<f4").reshape(rec["valid_len"], cfg.feature_dim)
                canvas = np.zeros((cfg.n_max, cfg.feature_dim), np.float32)
                canvas[: rec["valid_len"]] = frames
                feats = AudioFeatures(canvas, rec["valid_len"])
            key = (rec["domain"], rec["split"])
            corpora.setdefault(key, Corpus(rec["domain"], rec["split"], []))
            corpora[key].items.append(Utterance(rec["id"], transcript, feats))
    return world, corpora
