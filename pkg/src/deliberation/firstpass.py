"""First-pass recognizer: CTC training of the cascaded encoder and n-best decoding."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .ctc import ctc_loss_batch, log_softmax_np, prefix_beam_search
from .data import pad_frames
from .models import AudioEncoder
from .optim import Adam, warmup_lr
from .rng import stream
from .text import EOS, EPSILON, PAD, SOS, UNK, ConfigError


@dataclass
class FirstPassConfig:
    d: int = 32
    n_causal: int = 2
    n_noncausal: int = 1
    right_context: int = 6
    left_context: int | None = 3  # total over all encoder layers
    heads: int = 2
    d_ff: int = 64
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    clip_norm: float = 5.0
    beam_width: int = 8
    nbest: int = 4
    prune_logp: float = -8.0

    def validate(self, path="first_pass"):
        if self.nbest < 1:
            raise ConfigError(f"{path}.nbest: must be >= 1")
        if self.nbest > self.beam_width:
            raise ConfigError(f"{path}.nbest: must not exceed beam_width")
        if self.steps < 0:
            raise ConfigError(f"{path}.steps: must be >= 0")


def build_encoder(cfg, feature_dim, vocab_size, seed):
    return AudioEncoder(feature_dim, vocab_size, d=cfg.d, n_causal=cfg.n_causal,
                        n_noncausal=cfg.n_noncausal, right_context=cfg.right_context,
                        heads=cfg.heads, d_ff=cfg.d_ff, seed=seed, left_context=cfg.left_context)


def cascaded_ctc_loss(encoder, feats, lengths, targets):
    """CTC on the causal and on the non-causal outputs through the shared head."""
    c_out, e = encoder.encode(feats, lengths)
    return (ctc_loss_batch(encoder.logits(c_out), lengths, targets, EPSILON)
            + ctc_loss_batch(encoder.logits(e), lengths, targets, EPSILON))


def train_first_pass(utterances, cfg, seed, feature_dim, vocab_size, log=None):
    """Train the cascaded encoder with CTC. Returns (encoder, per-step losses)."""
    cfg.validate()
    if not utterances:
        raise ValueError("no supervised utterances for first-pass training")
    encoder = build_encoder(cfg, feature_dim, vocab_size, seed)
    opt = Adam(list(encoder.named_parameters()), lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = stream(seed, "first_pass", "batches")
    losses = []
    for step in range(cfg.steps):
        idx = rng.integers(len(utterances), size=cfg.batch_size)
        batch = [utterances[i] for i in idx]
        feats, lengths = pad_frames([u.frames for u in batch])
        opt.zero_grad()
        loss = cascaded_ctc_loss(encoder, feats, lengths, [list(u.tokens) for u in batch])
        T.backward(loss)
        lr = warmup_lr(step, cfg.steps, cfg.lr)
        opt.step(lr)
        losses.append(loss.item())
        if log is not None:
            log(step, loss.item(), lr)
    return encoder, losses


def save_first_pass(path, encoder, cfg, seed, feature_dim, vocab_size):
    meta = {"kind": "first_pass", "config": dataclasses.asdict(cfg), "seed": seed,
            "feature_dim": feature_dim, "vocab_size": vocab_size}
    checkpoint.save(path, encoder.state_dict(), meta)


def load_first_pass(path):
    state, meta = checkpoint.load(path)
    if meta.get("kind") != "first_pass":
        raise ValueError(f"{path} is not a first-pass checkpoint")
    cfg = FirstPassConfig(**meta["config"])
    encoder = build_encoder(cfg, meta["feature_dim"], meta["vocab_size"], meta["seed"])
    encoder.load_state_dict(state)
    return encoder, cfg


NON_LABELS = (PAD, SOS, EOS, UNK)


def first_pass_beam(encoder, e, beam_width=8, n=4, prune_logp=None):
    """N-best label sequences from non-causal encodings e (T, d)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    with T.no_grad():
        z = encoder.logits(T.as_tensor(e)).data
    return prefix_beam_search(log_softmax_np(z), beam_width, n, EPSILON, prune_logp, NON_LABELS)


def run_first_pass(encoder, utterances, cfg, chunk=64):
    """Encode and decode utterances. Returns (list of e arrays, list of NBestList)."""
    order = sorted(range(len(utterances)), key=lambda i: (utterances[i].frames.shape[0], i))
    encs = [None] * len(utterances)
    nbests = [None] * len(utterances)
    for s in range(0, len(order), chunk):
        ids = order[s:s + chunk]
        feats, lengths = pad_frames([utterances[i].frames for i in ids])
        with T.no_grad():
            _, e = encoder.encode(feats, lengths)
            logp = log_softmax_np(encoder.logits(e).data)
        for j, i in enumerate(ids):
            n_t = int(lengths[j])
            encs[i] = e.data[j, :n_t].copy()
            nbests[i] = prefix_beam_search(logp[j, :n_t], cfg.beam_width, cfg.nbest, EPSILON,
                                           cfg.prune_logp, NON_LABELS)
    return encs, nbests


def greedy_tokens(encoder, frames):
    """Frame-argmax-then-collapse hypothesis (for quick diagnostics)."""
    from .ctc import greedy_decode

    with T.no_grad():
        _, e = encoder.encode(frames)
        z = encoder.logits(e).data
    z = z.copy()
    z[:, list(NON_LABELS)] = -np.inf
    return greedy_decode(z, EPSILON)
