import numpy as np
import pytest

from deliberation import checkpoint
from deliberation import tensor as T
from deliberation.text import ConfigError
from deliberation.training import (FULL_MIX, JATD_MIX, SUPERVISED_MIX, Batch, DelibConfig,
                                   MissingCorpusError, MixSpec, SourcePool, batch_loss,
                                   build_deliberation, load_deliberation, pretrain_mlm,
                                   sample_batch, save_deliberation, train_deliberation)
from deliberation.world import World, WorldSpec, split_counts

DOMAINS = WorldSpec().domains
TEXT_WEIGHTS = WorldSpec().text_only_weights
# two-sided 99% normal quantile, used for binomial confidence intervals
Z99 = 2.5758


def fake_pool(counts, rng):
    tokens, domains = [], []
    for dom, n in zip(DOMAINS, counts):
        for _ in range(n):
            tokens.append(tuple(rng.integers(5, 64, size=rng.integers(1, 6)).tolist()))
            domains.append(dom)
    ids = [f"x{i}" for i in range(len(tokens))]
    return SourcePool(tokens, domains, ids)


@pytest.fixture(scope="module")
def sampling_pools():
    rng = np.random.default_rng(0)
    return {"supervised": fake_pool([30, 20, 15, 15, 20], rng),
            "tts": fake_pool(split_counts(2000, TEXT_WEIGHTS), rng),
            "semisup": fake_pool([10, 10, 10, 10, 10], rng)}


def test_mix_validation():
    MixSpec().validate()
    with pytest.raises(ConfigError):
        MixSpec(0.5, 0.6, -0.1).validate()
    with pytest.raises(ConfigError):
        MixSpec(0.5, 0.4, 0.0).validate()
    with pytest.raises(ConfigError):
        MixSpec(domain_sampling="inverse").validate()


def test_supervised_only_mix(sampling_pools):
    rng = np.random.default_rng(1)
    assert all(sample_batch(SUPERVISED_MIX, rng, sampling_pools).source == "supervised"
               for _ in range(500))


def _binomial_ok(count, n, p):
    return abs(count / n - p) <= Z99 * np.sqrt(p * (1 - p) / n)


@pytest.mark.parametrize("mix", [JATD_MIX, FULL_MIX])
def test_source_fractions_match_mix(mix, sampling_pools):
    rng = np.random.default_rng(2)
    n = 10**4
    sources = [sample_batch(mix, rng, sampling_pools, batch_size=1).source for _ in range(n)]
    for name, w in zip(("supervised", "tts", "semisup"), mix.weights):
        count = sources.count(name)
        assert _binomial_ok(count, n, w), (name, count)
    assert abs(sources.count("tts") / n - 0.10) <= 0.01


def test_tts_batches_are_domain_pure_and_proportional(sampling_pools):
    rng = np.random.default_rng(3)
    mix = MixSpec(0.0, 1.0, 0.0)
    n = 10**4
    counts = dict.fromkeys(DOMAINS, 0)
    pool = sampling_pools["tts"]
    for _ in range(n):
        b = sample_batch(mix, rng, sampling_pools)
        assert b.substitute_contexts
        assert {pool.domains[i] for i in b.indices} == {b.domain}
        counts[b.domain] += 1
    sizes = np.array(split_counts(2000, TEXT_WEIGHTS), dtype=float)
    for dom, p in zip(DOMAINS, sizes / sizes.sum()):
        # within 10% relative where the multinomial interval allows it, else within the 99% interval
        tol = max(0.10 * p, Z99 * np.sqrt(p * (1 - p) / n))
        assert abs(counts[dom] / n - p) <= tol, dom


def test_missing_corpus_is_an_error(sampling_pools):
    pools = {"supervised": sampling_pools["supervised"], "tts": None, "semisup": None}
    with pytest.raises(MissingCorpusError):
        sample_batch(JATD_MIX, np.random.default_rng(0), pools)
    sample_batch(SUPERVISED_MIX, np.random.default_rng(0), pools)


def test_delib_config_round_trip_and_errors():
    cfg = DelibConfig(mix=FULL_MIX, text_encoder_init="ptb_checkpoint", preset="delib-ptb-large")
    assert DelibConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        DelibConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        DelibConfig.from_dict({"mix": {"supervised": 1.0, "speech": 0.0}})
    with pytest.raises(ConfigError):
        DelibConfig(text_encoder_init="bert").validate()
    with pytest.raises(ConfigError):
        build_deliberation(DelibConfig(text_encoder_init="ptb_checkpoint"), 64)


# deliberation training on a small synthetic setup ------------------------------------

def _state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_zero_steps_is_initialisation_and_first_pass_untouched(delib_setup):
    out, _, pools = delib_setup
    before = checkpoint.file_hash(out / "fp.ckpt")
    cfg = DelibConfig(mix=FULL_MIX, steps=0, seed=5)
    model, metrics = train_deliberation(cfg, pools, out / "fp.ckpt", 64)
    assert metrics == []
    assert _state_equal(model, build_deliberation(cfg, 64))
    assert checkpoint.file_hash(out / "fp.ckpt") == before


def test_training_is_deterministic_and_leaves_first_pass_frozen(delib_setup, tmp_path):
    out, _, pools = delib_setup
    before = checkpoint.file_hash(out / "fp.ckpt")
    cfg = DelibConfig(mix=FULL_MIX, steps=30, seed=6, hypothesis_mask=True)
    a, ma = train_deliberation(cfg, pools, out / "fp.ckpt", 64)
    b, mb = train_deliberation(cfg, pools, out / "fp.ckpt", 64)
    assert ma == mb and _state_equal(a, b)
    assert {m[2] for m in ma} <= {"supervised", "tts", "semisup"}
    assert checkpoint.file_hash(out / "fp.ckpt") == before
    save_deliberation(tmp_path / "d.ckpt", a, cfg)
    back, cfg2 = load_deliberation(tmp_path / "d.ckpt")
    assert cfg2 == cfg and _state_equal(a, back)


def test_missing_first_pass_checkpoint(delib_setup, tmp_path):
    _, _, pools = delib_setup
    with pytest.raises(FileNotFoundError):
        train_deliberation(DelibConfig(steps=1), pools, tmp_path / "nope.ckpt", 64)


def _feats_tensor(pools, batch):
    frames = [pools["supervised"].frames[i] for i in batch.indices]
    width = max(f.shape[0] for f in frames)
    x = np.zeros((len(frames), width, frames[0].shape[1]))
    for j, f in enumerate(frames):
        x[j, :f.shape[0]] = f
    return T.Tensor(x, requires_grad=True)


def test_tts_batches_ignore_audio_and_hypotheses(delib_setup):
    _, enc, pools = delib_setup
    model = build_deliberation(DelibConfig(seed=1), 64)
    idx = np.arange(4)
    tts_like = Batch("tts", "Search", idx)
    sup = Batch("supervised", None, idx)
    pools_tts = dict(pools, tts=pools["supervised"])

    feats = _feats_tensor(pools, sup)
    loss = batch_loss(model, tts_like, pools_tts, first_pass=enc, feats=feats)
    T.backward(loss)
    grad = np.zeros_like(feats.data) if feats.grad is None else feats.grad
    assert np.max(np.abs(grad)) == 0.0

    # perturbing audio encodings and n-best inputs leaves the loss bit-identical
    rng = np.random.default_rng(0)
    noisy = pools["supervised"]
    perturbed = SourcePool(noisy.tokens, noisy.domains, noisy.utt_ids,
                           [e + rng.normal(size=e.shape) for e in noisy.encs],
                           [type(nb)(tuple(((5,) * len(h), s) for h, s in nb)) for nb in noisy.nbests],
                           [f + 1.0 for f in noisy.frames])
    with T.no_grad():
        a = batch_loss(model, tts_like, pools_tts).item()
        b = batch_loss(model, tts_like, dict(pools, tts=perturbed)).item()
    assert a == b

    # the same items as a supervised batch do reach the audio features
    feats = _feats_tensor(pools, sup)
    loss = batch_loss(model, sup, pools, first_pass=enc, feats=feats)
    T.backward(loss)
    assert np.max(np.abs(feats.grad)) > 0


def test_mlm_zero_steps_and_determinism():
    rng = np.random.default_rng(0)
    texts = [tuple(rng.integers(5, 64, size=rng.integers(1, 10)).tolist()) for _ in range(200)]
    enc0, losses0 = pretrain_mlm(texts, "delib-base", 0, seed=3)
    assert losses0 == []
    a, la = pretrain_mlm(texts, "delib-base", 20, seed=3)
    b, lb = pretrain_mlm(texts, "delib-base", 20, seed=3)
    assert la == lb and _state_equal(a, b) and not _state_equal(a, enc0)
    with pytest.raises(ValueError):
        pretrain_mlm([], "delib-base", 1, seed=0)


def test_mlm_learns_a_structured_corpus():
    w = World(WorldSpec())
    rng = np.random.default_rng(1)
    texts = [w.encode(" ".join(rng.choice(w.head_words[:8], size=rng.integers(2, 5)))).content
             for _ in range(1000)]
    _, losses = pretrain_mlm(texts, "delib-base", 200, seed=0)
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]
