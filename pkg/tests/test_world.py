import filecmp
import json
from collections import Counter

import numpy as np
import pytest

from deliberation.rng import stream
from deliberation.text import ConfigError, TokenSequence
from deliberation.world import (FeatureSequence, Teacher, World, WorldSpec, audit_exclusivity,
                                generate_corpora, pseudo_label, read_features, read_jsonl,
                                split_counts, synth_features, write_features)

SMALL = dict(n_text_only=400, n_supervised=100, n_audio_only=50, n_head_test=20,
             n_tail_test_per_domain=4)


@pytest.fixture(scope="module")
def world():
    return World(WorldSpec())


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    generate_corpora(WorldSpec(), out)
    return out


def test_noiseless_frames_are_repeated_codebook_rows(world):
    toks = TokenSequence.frame([5, 9, 33])
    fs = synth_features(world, toks, speaker=0, sigma=0.0, rng=np.random.default_rng(0))
    assert fs.num_frames == 9
    np.testing.assert_array_equal(fs.frames, np.repeat(world.codebook[[5, 9, 33]], 3, axis=0))


def test_synthesis_is_deterministic(world):
    a = synth_features(world, [5, 6, 7], 3, 0.5, stream(1, "x"))
    b = synth_features(world, [5, 6, 7], 3, 0.5, stream(1, "x"))
    assert a.frames.tobytes() == b.frames.tobytes()
    assert World(WorldSpec()).codebook.tobytes() == world.codebook.tobytes()


def test_noise_level_statistics(world):
    content = np.random.default_rng(0).integers(5, 64, size=10000 // 3 + 1)
    fs = synth_features(world, content, 2, 0.1, np.random.default_rng(1))
    clean = synth_features(world, content, 2, 0.0, np.random.default_rng(1)).frames
    std = (fs.frames - clean).std(axis=0)
    assert fs.num_frames >= 10000
    assert np.all((std > 0.095) & (std < 0.105))


def test_synthesis_errors(world):
    with pytest.raises(ValueError):
        synth_features(world, [5], speaker=99, sigma=0.1, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        synth_features(world, [], speaker=0, sigma=0.1, rng=np.random.default_rng(0))


def test_feature_file_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 16))
    write_features(tmp_path / "f.f64", x)
    assert read_features(tmp_path / "f.f64").tobytes() == x.tobytes()


def test_tts_speakers_are_disjoint_from_real(world):
    spec = world.spec
    assert not world.is_tts_speaker(spec.n_real_speakers - 1)
    assert world.is_tts_speaker(spec.n_real_speakers)
    assert spec.sigma_tts > spec.sigma_real


def test_lexicon_shapes(world):
    assert len(world.head_words) == 40 and len(world.tail_words) == 20
    assert len(set(world.lexicon)) == 60
    assert Counter(world.tail_domain) == {d: 4 for d in world.spec.domains}


def test_split_counts_is_largest_remainder():
    assert split_counts(10, [1, 1, 1]) == [4, 3, 3]
    assert sum(split_counts(20000, WorldSpec().text_only_weights)) == 20000
    assert split_counts(5, [0, 0]) == [0, 0]


def test_text_only_proportions(default_corpus):
    spec = WorldSpec()
    counts = Counter(r["domain"] for r in read_jsonl(default_corpus / "text_only.jsonl"))
    total = sum(spec.text_only_weights)
    for dom, w in zip(spec.domains, spec.text_only_weights):
        assert abs(counts[dom] - spec.n_text_only * w / total) <= 1


def test_exclusivity_audit_is_clean(default_corpus):
    assert audit_exclusivity(default_corpus) == []
    meta = json.loads((default_corpus / "world.json").read_text())
    banned = {w for w, ex in zip(meta["tail_words"], meta["tail_exclusive"]) if ex}
    sup_words = {w for r in read_jsonl(default_corpus / "supervised.jsonl") for w in r["text"].split()}
    assert banned and not banned & sup_words
    txt_words = {w for r in read_jsonl(default_corpus / "text_only.jsonl") for w in r["text"].split()}
    assert banned <= txt_words


def test_record_kinds(default_corpus, world):
    for r in read_jsonl(default_corpus / "audio_only.jsonl"):
        assert r["kind"] == "audio_only" and "features" in r and "text" not in r
    for r in read_jsonl(default_corpus / "text_only.jsonl"):
        assert r["kind"] == "text_only" and "text" in r and "features" not in r
    for r in read_jsonl(default_corpus / "supervised.jsonl")[:200]:
        assert r["kind"] == "supervised" and "text" in r
        frames = read_features(default_corpus / r["features"])
        assert np.all(np.isfinite(frames))
        assert frames.shape == (3 * len(world.encode(r["text"]).content), 16)


def test_eval_sets(default_corpus, world):
    tail = read_jsonl(default_corpus / "eval" / "tail_test.jsonl")
    rpnm = read_jsonl(default_corpus / "eval" / "rpnm_test.jsonl")
    head = read_jsonl(default_corpus / "eval" / "head_test.jsonl")
    tails = set(world.tail_words)
    assert len(tail) == 300 and len(head) == 300
    assert all(any(w in tails for w in r["text"].split()) for r in tail)
    assert not any(w in tails for r in head for w in r["text"].split())
    assert rpnm == [r for r in tail if r["domain"] == "Maps"]
    assert all(world.is_tts_speaker(r["speaker"]) for r in tail)


def test_generation_is_a_pure_function_of_the_spec(tmp_path):
    spec = WorldSpec(seed=3, **SMALL)
    a = generate_corpora(spec, tmp_path / "a")
    b = generate_corpora(spec, tmp_path / "b")
    for key in a.files:
        assert filecmp.cmp(a[key], b[key], shallow=False), key
    cmp = filecmp.dircmp(tmp_path / "a" / "features", tmp_path / "b" / "features")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    c = generate_corpora(WorldSpec(seed=4, **SMALL), tmp_path / "c")
    assert c["supervised"].read_bytes() != a["supervised"].read_bytes()


def test_zero_tail_words_warns_and_empties_tail_set(tmp_path):
    with pytest.warns(UserWarning):
        paths = generate_corpora(WorldSpec(n_tail_words=0, **SMALL), tmp_path)
    assert read_jsonl(paths["tail_test"]) == []


def test_invalid_specs():
    with pytest.raises(ConfigError):
        WorldSpec(text_only_weights=(0, 0, 0, 0, 0), supervised_weights=(0, 0, 0, 0, 0)).validate()
    with pytest.raises(ConfigError):
        WorldSpec(head_test_domain="Mail").validate()
    with pytest.raises(ConfigError):
        WorldSpec.from_dict({"bogus": 1})
    assert WorldSpec.from_dict(WorldSpec().to_dict()) == WorldSpec()


def _teacher(n=100, rate=0.05):
    rng = np.random.default_rng(0)
    w = World(WorldSpec())
    truth = {f"u{i}": " ".join(rng.choice(w.lexicon, size=5)) for i in range(n)}
    return Teacher(truth, w.lexicon, rate, seed=1), w


def _fs(utt):
    return FeatureSequence(np.zeros((3, 16)), 0, 0.0, "Search", utt)


def test_teacher_boundaries():
    t, w = _teacher(rate=0.0)
    for utt, text in t.truth.items():
        assert pseudo_label(_fs(utt), t) == text.split()
    t.sub_rate = 1.0
    survived = total = 0
    for utt, text in t.truth.items():
        out = pseudo_label(_fs(utt), t)
        survived += sum(a == b for a, b in zip(out, text.split()))
        total += len(out)
    # a substitution can pick the original word with probability 1/|lexicon|
    assert survived / total < 3 / len(w.lexicon)


def test_teacher_substitution_rate_and_determinism():
    t, w = _teacher(n=2000)
    subs = words = 0
    for utt, text in t.truth.items():
        out = pseudo_label(_fs(utt), t)
        subs += sum(a != b for a, b in zip(out, text.split()))
        words += len(out)
    assert words == 10**4
    # a substitution that draws the same word is invisible: expected 0.05 * 59/60
    assert abs(subs / words - 0.05) < 0.007
    seq = pseudo_label(_fs("u3"), t, w.vocab)
    assert seq == pseudo_label(_fs("u3"), t, w.vocab)
    assert isinstance(seq, TokenSequence)
