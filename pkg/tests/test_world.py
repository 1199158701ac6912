import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whistle.numerics.rng import Stream
from whistle.world import (
    BOS,
    EOS,
    ArticulationError,
    Speaker,
    Transcript,
    WorldConfig,
    WorldConfigError,
    articulate,
    build_world,
    generate_corpora,
    load_dataset,
    sample_corpus,
    save_dataset,
    tts_sim,
)


@pytest.fixture(scope="module")
def world():
    return build_world(0)


def _worlds_equal(a, b) -> bool:
    return json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)


def test_same_seed_same_world(world):
    assert _worlds_equal(world, build_world(0))
    assert not _worlds_equal(world, build_world(1))


def test_default_sizes(world):
    cfg = world.config
    assert len(world.prototypes) == 24
    assert all(3 <= len(p) <= 6 and p.shape[1] == 16 for p in world.prototypes)
    assert len(world.source_lexicon) == 120
    assert len(world.target_lexicon) == 80
    assert len(world.target_only) == 40
    assert world.vocab_size == 3 + 120 + 40
    assert all(2 <= len(world.pronunciations[w]) <= 5 for w in world.source_lexicon + world.target_lexicon)
    assert cfg.n_max == 256 and cfg.l_max == 16


def test_pronunciations_distinct(world):
    prons = list(world.pronunciations.values())
    assert len(set(prons)) == len(prons)


def test_overlap_zero_disjoint():
    w = build_world(0, WorldConfig(overlap=0.0))
    assert not set(w.source_lexicon) & set(w.target_lexicon)


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_overlap_out_of_range(bad):
    with pytest.raises(WorldConfigError, match="overlap"):
        build_world(0, WorldConfig(overlap=bad))


def test_target_only_words_absent_from_source_corpora(world):
    # token-scan oracle over every source split at default sizes
    novel = set(world.target_only)
    corpora = generate_corpora(world, [("source", s) for s in ("train", "dev", "test")])
    seen = {t for c in corpora.values() for u in c.items for t in u.transcript.words}
    assert not seen & novel
    assert len(novel) == 40


def test_articulator_matches_concatenation_oracle(world):
    word = next(w for w in world.source_lexicon if len(world.pronunciations[w]) == 2)
    out = articulate(world, [word], Speaker.identity(16), Stream(0), 0.0, jitter_prob=0.0)
    expect = np.concatenate([world.prototypes[p] for p in world.pronunciations[word]])
    assert out.valid_len == len(expect)
    assert np.array_equal(out.frames[: out.valid_len], expect)
    assert not out.frames[out.valid_len :].any()


@given(st.lists(st.integers(0, 119), min_size=1, max_size=6))
@settings(max_examples=30, deadline=None)
def test_articulator_oracle_any_sentence(idx):
    w = build_world(0)
    words = [w.source_lexicon[i] for i in idx]
    out = articulate(w, words, Speaker.identity(16), Stream(3), 0.0, jitter_prob=0.0)
    expect = np.concatenate([w.prototypes[p] for t in words for p in w.pronunciations[t]])
    assert np.array_equal(out.frames[: out.valid_len], expect)


def test_empty_utterance(world):
    out = articulate(world, [], Speaker.identity(16), Stream(0), 0.2)
    assert out.valid_len == 0 and not out.frames.any()


def test_articulate_deterministic(world):
    spk = Speaker.sample(world.config.source_speaker, 16, Stream(1))
    words = world.source_lexicon[:4]
    a = articulate(world, words, spk, Stream(2).child("x"), 0.2)
    b = articulate(world, words, spk, Stream(2).child("x"), 0.2)
    assert np.array_equal(a.frames, b.frames) and a.valid_len == b.valid_len


def test_articulate_overflow_names_utterance(world):
    words = [world.source_lexicon[0]] * 80
    with pytest.raises(ArticulationError, match=world.vocab[world.source_lexicon[0]]):
        articulate(world, words, Speaker.identity(16), Stream(0), 0.0, jitter_prob=0.0)


def test_jitter_drops_and_repeats(world):
    words = world.source_lexicon[:6]
    clean = articulate(world, words, Speaker.identity(16), Stream(5), 0.0, jitter_prob=0.0)
    lengths = {
        articulate(world, words, Speaker.identity(16), Stream(5).child(i), 0.0, jitter_prob=0.3).valid_len
        for i in range(20)
    }
    assert len(lengths) > 1
    assert min(lengths) < clean.valid_len * 1.5


def test_sample_corpus_text_only(world):
    c = sample_corpus(world, "target", "train", 20, with_audio=False)
    assert all(u.features is None for u in c.items)
    assert not c.has_audio


def test_sample_corpus_properties(world):
    c = sample_corpus(world, "source", "dev", 50, with_audio=True)
    assert c.has_audio
    for u in c.items:
        assert 3 <= len(u.transcript.words) <= 10
        assert u.transcript.tokens[0] == BOS and u.transcript.tokens[-1] == EOS
        assert len(u.transcript) <= world.config.l_max
        assert 0 < u.features.valid_len <= world.config.n_max
        assert np.isfinite(u.features.frames).all()
        assert not u.features.frames[u.features.valid_len :].any()


def test_sample_corpus_deterministic(world):
    a = sample_corpus(world, "source", "test", 10, True)
    b = sample_corpus(world, "source", "test", 10, True)
    assert [u.transcript for u in a.items] == [u.transcript for u in b.items]
    assert all(np.array_equal(x.features.frames, y.features.frames) for x, y in zip(a.items, b.items))


def test_sample_corpus_count_positive(world):
    with pytest.raises(ValueError):
        sample_corpus(world, "source", "train", 0, True)


def test_tts_deterministic(world):
    t = Transcript.from_words(world.target_lexicon[:4])
    a = tts_sim(world, t, Stream(9))
    b = tts_sim(world, t, Stream(9))
    assert np.array_equal(a.frames, b.frames)


def test_tts_reduces_to_articulate(world):
    t = Transcript.from_words(world.target_lexicon[-5:])
    tts = tts_sim(world, t, Stream(4), speaker_pool=[Speaker.identity(16)], tilt=0.0, noise_sigma=0.0)
    clean = articulate(world, t.words, Speaker.identity(16), Stream(0), 0.0, jitter_prob=0.0)
    assert np.array_equal(tts.frames, clean.frames)


def test_tts_tilt_differs_from_clean(world):
    t = Transcript.from_words(world.target_lexicon[:5])
    tilted = tts_sim(world, t, Stream(4), speaker_pool=[Speaker.identity(16)], noise_sigma=0.0)
    clean = articulate(world, t.words, Speaker.identity(16), Stream(0), 0.0, jitter_prob=0.0)
    n = clean.valid_len
    assert tilted.valid_len == n
    assert np.abs(tilted.frames[:n] - clean.frames[:n]).mean() > 0
    np.testing.assert_allclose(np.abs(world.tilt).max(), 0.15, rtol=1e-6)


def test_tts_has_no_jitter(world):
    t = Transcript.from_words(world.target_lexicon[:6])
    clean = articulate(world, t.words, Speaker.identity(16), Stream(0), 0.0, jitter_prob=0.0)
    for i in range(5):
        assert tts_sim(world, t, Stream(i)).valid_len == clean.valid_len


def test_dataset_roundtrip(tmp_path, world):
    corpora = {
        ("source", "dev"): sample_corpus(world, "source", "dev", 5, True),
        ("target", "train"): sample_corpus(world, "target", "train", 4, False),
    }
    save_dataset(tmp_path, world, corpora.values())
    w2, c2 = load_dataset(tmp_path)
    assert _worlds_equal(world, w2)
    for key, corpus in corpora.items():
        for a, b in zip(corpus.items, c2[key].items):
            assert a.uid == b.uid and a.transcript == b.transcript
            if a.features is None:
                assert b.features is None
            else:
                assert np.array_equal(a.features.frames, b.features.frames)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 9
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "domain", "split", "tokens", "valid_len", "offset", "length"}
    assert rec["length"] == rec["valid_len"] * 16 * 4
