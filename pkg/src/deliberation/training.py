"""Training loops: MLM pretraining, the LM baseline and deliberation with data mixing."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import decoder_io, pad_frames
from .evaluation import pack_nbest_batch
from .firstpass import load_first_pass
from .models import LM_PRESETS, CausalLM, DeliberationModel, Memory, mlm_loss, text_encoder_from_preset
from .optim import Adam, warmup_lr
from .rng import derive_seed, stream
from .text import EOS, PAD, SOS, ConfigError, MaskRates, TokenSequence, hypothesis_corrupt, mlm_corrupt

SOURCES = ("supervised", "tts", "semisup")


class MissingCorpusError(ValueError):
    """A mix gives weight to a source with no data."""


# mixing ------------------------------------------------------------------------

@dataclass(frozen=True)
class MixSpec:
    supervised: float = 0.9
    tts: float = 0.1
    semisup: float = 0.0
    domain_sampling: str = "proportional"

    @property
    def weights(self):
        return (self.supervised, self.tts, self.semisup)

    def validate(self, path="mix"):
        for name, w in zip(SOURCES, self.weights):
            if w < 0:
                raise ConfigError(f"{path}.{name}: weight must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"{path}: weights must sum to 1 (got {sum(self.weights)})")
        if self.domain_sampling not in ("proportional", "uniform"):
            raise ConfigError(f"{path}.domain_sampling: expected 'proportional' or 'uniform'")


SUPERVISED_MIX = MixSpec(1.0, 0.0, 0.0)
JATD_MIX = MixSpec(0.9, 0.1, 0.0)
SEMISUP_MIX = MixSpec(0.9, 0.0, 0.1)
FULL_MIX = MixSpec(0.8, 0.1, 0.1)


@dataclass
class SourcePool:
    """Training material for one source.

    tokens are target content ids; encs/nbests come from the frozen first
    pass and are absent for text-only material.
    """

    tokens: list
    domains: list
    utt_ids: list
    encs: list | None = None
    nbests: list | None = None
    frames: list | None = None

    def __len__(self):
        return len(self.tokens)

    def by_domain(self):
        groups = {}
        for i, d in enumerate(self.domains):
            groups.setdefault(d, []).append(i)
        return groups


@dataclass
class Batch:
    source: str
    domain: str | None
    indices: np.ndarray

    @property
    def substitute_contexts(self):
        return self.source == "tts"


def sample_batch(mix, rng, pools, batch_size=16):
    """Draw a source by mix weight, then items; tts batches are domain-pure."""
    for name, w in zip(SOURCES, mix.weights):
        if w > 0 and (pools.get(name) is None or len(pools[name]) == 0):
            raise MissingCorpusError(f"mix.{name} = {w} but no {name} corpus is available")
    source = SOURCES[int(rng.choice(3, p=np.asarray(mix.weights) / sum(mix.weights)))]
    pool = pools[source]
    groups = _groups(pool)
    names = sorted(groups)
    if source == "tts":
        sizes = np.array([len(groups[d]) for d in names], dtype=float)
        p = sizes / sizes.sum() if mix.domain_sampling == "proportional" else np.full(len(names), 1 / len(names))
        dom = names[int(rng.choice(len(names), p=p))]
        members = groups[dom]
        idx = np.asarray(members)[rng.integers(len(members), size=batch_size)]
        return Batch(source, dom, idx)
    if mix.domain_sampling == "uniform":
        doms = rng.integers(len(names), size=batch_size)
        idx = np.array([groups[names[d]][int(rng.integers(len(groups[names[d]])))] for d in doms])
    else:
        idx = rng.integers(len(pool), size=batch_size)
    return Batch(source, None, idx)


_GROUP_CACHE = {}


def _groups(pool):
    key = id(pool)
    hit = _GROUP_CACHE.get(key)
    if hit is None or hit[0] is not pool:
        hit = (pool, pool.by_domain())
        _GROUP_CACHE[key] = hit
    return hit[1]


# losses ---------------------------------------------------------------------------

def deliberation_loss(model, tokens, substitute, e=None, e_mask=None, nbest_ids=None):
    """Teacher-forced CE on ``tokens`` + eos.

    With ``substitute`` the decoder uses its fixed context vectors and the
    audio/hypothesis inputs are ignored entirely.
    """
    prev, tgt = decoder_io([list(t) for t in tokens], SOS, EOS, PAD)
    if substitute:
        mem = Memory()
    else:
        mem = model.memory(e, e_mask, nbest_ids)
    logits = model.decoder.forward(prev, mem, substitute)
    return T.cross_entropy_masked(logits, tgt, tgt != PAD)


def tts_frames(world, pool, indices, seed):
    """Synthesize TTS-speaker features for text-only items (deterministic per item)."""
    spec = world.spec
    out = []
    for i in indices:
        rng = stream(seed, "tts", pool.utt_ids[i])
        spk = spec.n_real_speakers + int(rng.integers(max(spec.n_tts_speakers, 1)))
        spk = min(spk, world.speaker_offsets.shape[0] - 1)
        out.append(world.synth_features(pool.tokens[i], spk, spec.sigma_tts, rng).frames)
    return out


def batch_loss(model, batch, pools, hyp_rng=None, hyp_mask=None, first_pass=None, feats=None):
    """Loss of one Batch.

    By default audio encodings come from the cached frozen first pass. When
    ``first_pass`` and a features Tensor ``feats`` (B, T, D) are given, the
    encodings are recomputed from ``feats`` so gradients can reach them.
    """
    pool = pools[batch.source]
    tokens = [pool.tokens[i] for i in batch.indices]
    if batch.substitute_contexts:
        return deliberation_loss(model, tokens, True)
    nb_ids = pack_nbest_batch([pool.nbests[i] for i in batch.indices])
    if hyp_mask is not None and hyp_rng is not None:
        nb_ids = hypothesis_corrupt(nb_ids, hyp_rng, hyp_mask[0], hyp_mask[1], model.decoder.vocab_size)
    if first_pass is not None and feats is not None:
        lengths = np.array([pool.frames[i].shape[0] for i in batch.indices])
        _, e = first_pass.encode(feats, lengths)
        e_mask = np.arange(e.shape[1])[None, :] < lengths[:, None]
    else:
        e, lengths = pad_frames([pool.encs[i] for i in batch.indices])
        e_mask = np.arange(e.shape[1])[None, :] < lengths[:, None]
    return deliberation_loss(model, tokens, False, e, e_mask, nb_ids)


# deliberation training ---------------------------------------------------------------

@dataclass
class DelibConfig:
    mix: MixSpec = field(default_factory=lambda: SUPERVISED_MIX)
    text_encoder_init: str = "random"  # or "ptb_checkpoint"
    preset: str = "delib-base"
    hypothesis_mask: bool = False
    hyp_mask_rate: float = 0.02
    hyp_random_rate: float = 0.0001
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    warmup_frac: float = 0.1
    clip_norm: float = 5.0
    freeze_depth: int = 0
    seed: int = 0

    def validate(self, path="delib"):
        self.mix.validate(f"{path}.mix")
        if self.text_encoder_init not in ("random", "ptb_checkpoint"):
            raise ConfigError(f"{path}.text_encoder_init: expected 'random' or 'ptb_checkpoint'")
        if self.steps < 0:
            raise ConfigError(f"{path}.steps: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size: must be >= 1")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mix"] = dataclasses.asdict(self.mix)
        return d

    @classmethod
    def from_dict(cls, d, path="delib"):
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(f"{path}.{k}: unknown field")
        kw = dict(d)
        if "mix" in kw and isinstance(kw["mix"], dict):
            mix_names = {f.name for f in dataclasses.fields(MixSpec)}
            for k in kw["mix"]:
                if k not in mix_names:
                    raise ConfigError(f"{path}.mix.{k}: unknown field")
            kw["mix"] = MixSpec(**kw["mix"])
        return cls(**kw)


def params_digest(module):
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def build_deliberation(cfg, vocab_size, ptb_path=None):
    model = DeliberationModel(vocab_size, cfg.preset, seed=derive_seed(cfg.seed, "delib_init"))
    if cfg.text_encoder_init == "ptb_checkpoint":
        if ptb_path is None:
            raise ConfigError("delib.text_encoder_init: ptb_checkpoint requires a pretrained encoder")
        state, meta = checkpoint.load(ptb_path)
        if meta.get("preset") != cfg.preset:
            raise ConfigError(f"delib.preset: {cfg.preset!r} does not match pretrained "
                              f"encoder preset {meta.get('preset')!r}")
        model.text_encoder.load_state_dict({k: v for k, v in state.items() if not k.startswith("mlm.")})
    if cfg.freeze_depth:
        model.text_encoder.freeze_bottom(cfg.freeze_depth)
    return model


def train_deliberation(cfg, pools, first_pass_path, vocab_size, ptb_path=None, log=None):
    """Train text encoder + decoder jointly with the first pass frozen.

    Returns (model, metrics) where metrics rows are (step, loss, source, lr).
    """
    cfg.validate()
    fp_hash = checkpoint.file_hash(first_pass_path) if _exists(first_pass_path) else None
    if fp_hash is None:
        raise FileNotFoundError(f"first-pass checkpoint not found: {first_pass_path}")
    first_pass, _ = load_first_pass(first_pass_path)
    fp_digest = params_digest(first_pass)

    model = build_deliberation(cfg, vocab_size, ptb_path)
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = Adam(trainable, lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = stream(cfg.seed, "delib", "batches")
    hyp_rng = stream(cfg.seed, "delib", "hypothesis_mask")
    hyp_mask = (cfg.hyp_mask_rate, cfg.hyp_random_rate) if cfg.hypothesis_mask else None
    metrics = []
    for step in range(cfg.steps):
        batch = sample_batch(cfg.mix, rng, pools, cfg.batch_size)
        opt.zero_grad()
        loss = batch_loss(model, batch, pools, hyp_rng, hyp_mask)
        T.backward(loss)
        lr = warmup_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac)
        opt.step(lr)
        row = (step, loss.item(), batch.source, lr)
        metrics.append(row)
        if log is not None:
            log(*row)

    if checkpoint.file_hash(first_pass_path) != fp_hash or params_digest(first_pass) != fp_digest:
        raise RuntimeError("first-pass parameters changed during deliberation training")
    return model, metrics


def _exists(path):
    from pathlib import Path

    return Path(path).exists()


def save_deliberation(path, model, cfg, extra=None):
    meta = {"kind": "deliberation", "config": cfg.to_dict(), "vocab_size": model.decoder.vocab_size}
    meta.update(extra or {})
    checkpoint.save(path, model.state_dict(), meta)


def load_deliberation(path):
    state, meta = checkpoint.load(path)
    if meta.get("kind") != "deliberation":
        raise ValueError(f"{path} is not a deliberation checkpoint")
    cfg = DelibConfig.from_dict(meta["config"])
    model = DeliberationModel(meta["vocab_size"], cfg.preset, seed=derive_seed(cfg.seed, "delib_init"))
    model.load_state_dict(state)
    return model, cfg


# MLM pretraining -------------------------------------------------------------------

def frame_batch(token_lists):
    width = max(len(t) for t in token_lists) + 2
    out = np.full((len(token_lists), width), PAD, dtype=np.int64)
    for i, t in enumerate(token_lists):
        out[i, 0] = SOS
        out[i, 1:len(t) + 1] = t
        out[i, len(t) + 1] = EOS
    return out


def pretrain_mlm(texts, preset, steps, seed, vocab_size=64, batch_size=32, lr=1e-3,
                 rates=MaskRates(), log=None):
    """Masked-LM pretraining of a text encoder on content-id sequences.

    Returns (encoder, per-step losses). steps=0 returns the initialization.
    """
    if not texts:
        raise ValueError("text-only corpus is empty")
    enc = text_encoder_from_preset(preset, vocab_size, seed=derive_seed(seed, "mlm_init"))
    opt = Adam(list(enc.named_parameters()), lr=lr, clip_norm=5.0)
    rng = stream(seed, "mlm", "batches")
    mrng = stream(seed, "mlm", "masking")
    losses = []
    for step in range(steps):
        ids = frame_batch([texts[i] for i in rng.integers(len(texts), size=batch_size)])
        inp, sel = mlm_corrupt(ids, mrng, rates, vocab_size)
        while not sel.any():
            inp, sel = mlm_corrupt(ids, mrng, rates, vocab_size)
        opt.zero_grad()
        loss = mlm_loss(enc, inp, ids, sel)
        T.backward(loss)
        cur = warmup_lr(step, steps, lr)
        opt.step(cur)
        losses.append(loss.item())
        if log is not None:
            log(step, loss.item(), cur)
    return enc, losses


def save_text_encoder(path, enc, preset, seed):
    checkpoint.save(path, enc.state_dict(), {"kind": "text_encoder", "preset": preset, "seed": seed})


def load_text_encoder(path, vocab_size=64):
    state, meta = checkpoint.load(path)
    enc = text_encoder_from_preset(meta["preset"], vocab_size, seed=derive_seed(meta["seed"], "mlm_init"))
    enc.load_state_dict(state)
    return enc, meta


# LM baseline --------------------------------------------------------------------------

def train_lm(texts, steps, seed, vocab_size=64, preset="lm-rescorer", batch_size=32, lr=1e-3, log=None):
    """Causal LM over framed sequences. Returns (lm, per-step losses)."""
    if not texts:
        raise ValueError("LM training corpus is empty")
    lm = CausalLM(vocab_size, seed=derive_seed(seed, "lm_init"), **LM_PRESETS[preset])
    opt = Adam(list(lm.named_parameters()), lr=lr, clip_norm=5.0)
    rng = stream(seed, "lm", "batches")
    losses = []
    for step in range(steps):
        ids = frame_batch([texts[i] for i in rng.integers(len(texts), size=batch_size)])
        opt.zero_grad()
        loss = lm.loss(ids)
        T.backward(loss)
        cur = warmup_lr(step, steps, lr)
        opt.step(cur)
        losses.append(loss.item())
        if log is not None:
            log(step, loss.item(), cur)
    return lm, losses


def save_lm(path, lm, preset, seed):
    checkpoint.save(path, lm.state_dict(), {"kind": "lm", "preset": preset, "seed": seed})


def load_lm(path, vocab_size=64):
    state, meta = checkpoint.load(path)
    if meta.get("kind") != "lm":
        raise ValueError(f"{path} is not an LM checkpoint")
    lm = CausalLM(vocab_size, seed=derive_seed(meta["seed"], "lm_init"), **LM_PRESETS[meta["preset"]])
    lm.load_state_dict(state)
    return lm


def framed(tokens, max_len=32):
    return TokenSequence.frame(tokens, max_len)
