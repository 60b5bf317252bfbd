"""Cascaded audio encoder, text encoder, deliberation decoder and causal LM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Block, LayerNorm, Linear, Module, Parameter, full_mask, sinusoid
from .rng import stream
from .tensor import Tensor
from .text import EOS, NUM_RESERVED, PAD, SOS


def split_context(total, layers):
    """Per-layer windows whose stacked reach is exactly ``total`` (None = unbounded)."""
    if total is None:
        return [None] * layers
    base, extra = divmod(total, layers)
    return [base + (1 if i < extra else 0) for i in range(layers)]


# audio ---------------------------------------------------------------------

class AudioEncoder(Module):
    """Causal block followed by a right-context block; a CTC head reads both.

    ``right_context`` is the total look-ahead of the non-causal block and
    ``left_context`` the total look-back of the whole stack, both in frames.
    """

    def __init__(self, feature_dim, vocab_size, d=32, n_causal=2, n_noncausal=1,
                 right_context=6, heads=2, d_ff=64, seed=0, left_context=None):
        rng = stream(seed, "audio_encoder")
        self.feature_dim = feature_dim
        self.d = d
        self.right_context = right_context
        self.left_context = left_context
        self.proj = Linear(feature_dim, d, rng)
        self.causal = [Block(d, heads, d_ff, rng) for _ in range(n_causal)]
        self.ln_causal = LayerNorm(d)
        self.noncausal = [Block(d, heads, d_ff, rng) for _ in range(n_noncausal)]
        self.ln_noncausal = LayerNorm(d)
        self.head = Linear(d, vocab_size, rng, scale=0.1)
        self._nc_right = split_context(right_context, max(n_noncausal, 1))
        left = split_context(left_context, n_causal + n_noncausal)
        self._causal_left, self._nc_left = left[:n_causal], left[n_causal:]

    def encode(self, feats, lengths=None):
        """feats: Tensor (B, T, D) or (T, D). Returns (causal_out, noncausal_out)."""
        feats = T.as_tensor(feats)
        single = feats.ndim == 2
        if single:
            feats = T.reshape(feats, (1,) + feats.shape)
        b, n, dim = feats.shape
        if dim != self.feature_dim:
            raise ValueError(f"feature dim {dim} != encoder feature dim {self.feature_dim}")
        if n < 1:
            raise ValueError("need at least one frame")
        valid = _valid(lengths, b, n)
        x = self.proj(feats) + sinusoid(n, self.d)
        for blk, left in zip(self.causal, self._causal_left):
            x = blk(x, full_mask(n, valid, left, 0))
        c_out = self.ln_causal(x)
        for blk, left, r in zip(self.noncausal, self._nc_left, self._nc_right):
            x = blk(x, full_mask(n, valid, left, r))
        e = self.ln_noncausal(x)
        if single:
            return T.reshape(c_out, c_out.shape[1:]), T.reshape(e, e.shape[1:])
        return c_out, e

    def logits(self, enc_out):
        return self.head(enc_out)


def _valid(lengths, b, n):
    if lengths is None:
        return np.ones((b, n), dtype=bool)
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


# text ----------------------------------------------------------------------

class TextEncoder(Module):
    """Self-attention over token ids: unbounded left, ``right_context`` tokens
    of total look-ahead split across the layers."""

    def __init__(self, vocab_size, d=32, layers=2, right_context=2, heads=2, d_ff=64,
                 seed=0, mlm_head=True):
        rng = stream(seed, "text_encoder")
        self.d = d
        self.right_context = right_context
        self._right = split_context(right_context, layers)
        self.embed = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, d)))
        self.blocks = [Block(d, heads, d_ff, rng) for _ in range(layers)]
        self.ln = LayerNorm(d)
        self.mlm = Linear(d, vocab_size, rng, scale=0.1) if mlm_head else None
        self.frozen_layers = 0

    def __call__(self, ids):
        """ids: int array (B, L) of framed sequences. Returns (B, L, d)."""
        ids = np.asarray(ids, dtype=np.int64)
        b, n = ids.shape
        valid = ids != PAD
        x = T.embedding(self.embed, ids) + sinusoid(n, self.d)
        for blk, r in zip(self.blocks, self._right):
            x = blk(x, full_mask(n, valid, None, r))
        return self.ln(x)

    def encoder_parameters(self):
        """Parameters used by deliberation (the MLM head is pretraining-only)."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("mlm.")]

    def freeze_bottom(self, k):
        """Stop gradients into the embedding and the first ``k`` blocks."""
        self.frozen_layers = k
        if k > 0:
            self.embed.requires_grad = False
        for i, blk in enumerate(self.blocks):
            blk.set_trainable(i >= k)


def mlm_loss(encoder, input_ids, target_ids, loss_positions):
    """Masked-LM cross entropy at ``loss_positions`` only."""
    if encoder.mlm is None:
        raise ValueError("text encoder has no MLM head")
    if not np.any(loss_positions):
        raise ValueError("masked example has no loss positions")
    h = encoder(np.asarray(input_ids))
    return T.cross_entropy_masked(encoder.mlm(h), target_ids, loss_positions)


def mlm_forward(masked, encoder):
    """Loss for a single MaskedExample."""
    return mlm_loss(encoder, masked.input_ids.array()[None], masked.target_ids.array()[None],
                    np.asarray(masked.loss_positions)[None])


def pack_nbest(hyps, max_hyps=4):
    """Stack hypotheses (content-id sequences) as framed rows, trimmed to the longest."""
    if not hyps:
        raise ValueError("empty n-best list")
    hyps = list(hyps)[:max_hyps]
    width = max(len(h) for h in hyps) + 2
    out = np.full((len(hyps), width), PAD, dtype=np.int64)
    for i, h in enumerate(hyps):
        out[i, 0] = SOS
        out[i, 1:len(h) + 1] = h
        out[i, len(h) + 1] = EOS
    return out


def encode_text(nbest, encoder):
    """Encode each hypothesis separately and concatenate along time: (sum L_i, d)."""
    hyps = [h for h, _ in nbest] if nbest and isinstance(nbest[0], tuple) else list(nbest)
    rows = pack_nbest(hyps)
    h = encoder(rows)
    lens = [len(x) + 2 for x in hyps[:4]]
    parts = [h[i, :lens[i]] for i in range(len(lens))]
    return T.concat(parts, axis=0)


def encode_nbest_batch(encoder, nbest_ids):
    """nbest_ids: (B, K, L) framed ids. Returns (h_b (B, K*L, d), mask (B, K*L))."""
    b, k, n = nbest_ids.shape
    h = encoder(nbest_ids.reshape(b * k, n))
    h = T.reshape(h, (b, k * n, encoder.d))
    return h, (nbest_ids != PAD).reshape(b, k * n)


# deliberation decoder --------------------------------------------------------

@dataclass
class Memory:
    """Projected attention keys/values for one batch of utterances."""

    audio_k: Tensor | None = None
    audio_v: Tensor | None = None
    audio_mask: np.ndarray | None = None
    text_k: Tensor | None = None
    text_v: Tensor | None = None
    text_mask: np.ndarray | None = None
    last_weights: dict = field(default_factory=dict)


class LSTMLayer(Module):
    """LSTM with a linear projection of the hidden output."""

    def __init__(self, d_in, hidden, proj, rng):
        self.hidden = hidden
        self.proj_dim = proj
        self.wx = Linear(d_in, 4 * hidden, rng)
        self.wh = Linear(proj, 4 * hidden, rng, bias=False)
        self.proj = Linear(hidden, proj, rng, bias=False)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.wx.b.data = b

    def cell(self, xw, h, c):
        z = xw + self.wh(h)
        hd = self.hidden
        gates = T.sigmoid(z[..., :3 * hd])
        g = T.tanh(z[..., 3 * hd:])
        i, f, o = gates[..., :hd], gates[..., hd:2 * hd], gates[..., 2 * hd:]
        c = f * c + i * g
        h = self.proj(o * T.tanh(c))
        return h, c

    def zero_state(self, b):
        return Tensor(np.zeros((b, self.proj_dim))), Tensor(np.zeros((b, self.hidden)))


class DeliberationDecoder(Module):
    """Two-source attention decoder: LSTM over previous tokens, attention over
    audio encodings and text encodings, or fixed context vectors instead."""

    def __init__(self, vocab_size, d_audio=32, d_text=32, d_emb=32, hidden=64, proj=32,
                 d_att=32, layers=2, seed=0):
        rng = stream(seed, "delib_decoder")
        self.vocab_size = vocab_size
        self.d_att = d_att
        self.embed = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, d_emb)))
        dims = [d_emb] + [proj] * (layers - 1)
        self.lstm = [LSTMLayer(di, hidden, proj, rng) for di in dims]
        self.aq = Linear(proj, d_att, rng)
        self.ak = Linear(d_audio, d_att, rng)
        self.av = Linear(d_audio, d_att, rng)
        self.tq = Linear(proj, d_att, rng)
        self.tk = Linear(d_text, d_att, rng)
        self.tv = Linear(d_text, d_att, rng)
        self.fixed_audio_context = Parameter(np.zeros(d_att))
        self.fixed_text_context = Parameter(np.zeros(d_att))
        self.combine = Linear(proj + 2 * d_att, proj, rng)
        self.out = Linear(proj, vocab_size, rng, scale=0.1)

    # memory ----------------------------------------------------------------

    def memory(self, e=None, e_mask=None, h_b=None, hb_mask=None):
        mem = Memory()
        if e is not None:
            e = T.as_tensor(e)
            if e.ndim == 2:
                e = T.reshape(e, (1,) + e.shape)
            mem.audio_k, mem.audio_v = self.ak(e), self.av(e)
            mem.audio_mask = np.ones(e.shape[:2], bool) if e_mask is None else np.asarray(e_mask, bool)
        if h_b is not None:
            h_b = T.as_tensor(h_b)
            if h_b.ndim == 2:
                h_b = T.reshape(h_b, (1,) + h_b.shape)
            mem.text_k, mem.text_v = self.tk(h_b), self.tv(h_b)
            mem.text_mask = np.ones(h_b.shape[:2], bool) if hb_mask is None else np.asarray(hb_mask, bool)
        return mem

    def _attend(self, q, k, v, mask, tag, mem):
        # q (B, U, A); k, v (B, N, A); mask (B, N)
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d_att))
        w = T.softmax(scores, axis=-1, mask=mask[:, None, :])
        mem.last_weights[tag] = w.data
        return T.matmul(w, v)

    def _readout(self, p, mem, substitute):
        b, u, _ = p.shape
        if substitute:
            ones = np.ones((b, u, 1))
            ctx_a = T.mul(ones, self.fixed_audio_context)
            ctx_t = T.mul(ones, self.fixed_text_context)
        else:
            if mem.audio_k is None or mem.text_k is None:
                raise ValueError("computed attention needs both audio and text memories")
            ctx_a = self._attend(self.aq(p), mem.audio_k, mem.audio_v, mem.audio_mask, "audio", mem)
            ctx_t = self._attend(self.tq(p), mem.text_k, mem.text_v, mem.text_mask, "text", mem)
        hid = T.tanh(self.combine(T.concat([p, ctx_a, ctx_t], axis=-1)))
        return self.out(hid)

    # full teacher-forced pass --------------------------------------------------

    def forward(self, prev_ids, mem, substitute=False):
        """prev_ids (B, U) int. Returns logits (B, U, V)."""
        prev_ids = np.asarray(prev_ids, dtype=np.int64)
        b, u = prev_ids.shape
        x = T.embedding(self.embed, prev_ids)
        for layer in self.lstm:
            xw = layer.wx(x)
            h, c = layer.zero_state(b)
            outs = []
            for t in range(u):
                h, c = layer.cell(xw[:, t], h, c)
                outs.append(h)
            x = T.stack(outs, axis=1)
        return self._readout(x, mem, substitute)

    # incremental -------------------------------------------------------------

    def start_state(self, b=1):
        return [layer.zero_state(b) for layer in self.lstm]

    def step(self, prev_token, state, mem, substitute=False):
        """One decoding step. prev_token (B,) ints. Returns (logits (B, V), state)."""
        prev = np.asarray(prev_token, dtype=np.int64).reshape(-1)
        x = T.embedding(self.embed, prev)
        new_state = []
        for layer, (h, c) in zip(self.lstm, state):
            h, c = layer.cell(layer.wx(x), h, c)
            new_state.append((h, c))
            x = h
        logits = self._readout(T.reshape(x, (x.shape[0], 1, x.shape[1])), mem, substitute)
        return T.reshape(logits, (logits.shape[0], logits.shape[2])), new_state


def decoder_step(decoder, prev_token, state, e, h_b, substitute_contexts=False):
    """Single-utterance convenience wrapper over DeliberationDecoder.step.

    With ``substitute_contexts`` the encodings are never touched.
    """
    mem = Memory() if substitute_contexts else decoder.memory(e, None, h_b, None)
    logits, state = decoder.step([prev_token], state, mem, substitute_contexts)
    return T.reshape(logits, (logits.shape[1],)), state, mem


# causal LM -------------------------------------------------------------------

class CausalLM(Module):
    """Transformer LM; ``left_context`` is the total look-back across layers."""

    def __init__(self, vocab_size, d=32, layers=2, left_context=31, heads=2, d_ff=64, seed=0):
        rng = stream(seed, "causal_lm")
        self.d = d
        self.left_context = left_context
        self._left = split_context(left_context, layers)
        self.embed = Parameter(rng.normal(0.0, 1.0, size=(vocab_size, d)))
        self.blocks = [Block(d, heads, d_ff, rng) for _ in range(layers)]
        self.ln = LayerNorm(d)
        self.out = Linear(d, vocab_size, rng, scale=0.1)

    def __call__(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        b, n = ids.shape
        x = T.embedding(self.embed, ids) + sinusoid(n, self.d)
        for blk, left in zip(self.blocks, self._left):
            x = blk(x, full_mask(n, ids != PAD, left, 0))
        return self.out(self.ln(x))

    def loss(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        logits = self(ids[:, :-1])
        tgt = ids[:, 1:]
        return T.cross_entropy_masked(logits, tgt, tgt != PAD)

    def token_logprobs(self, ids):
        """Per-position log p(ids[:, t] | ids[:, <t]) for t >= 1, zero at pad."""
        ids = np.asarray(ids, dtype=np.int64)
        with T.no_grad():
            logp = T.log_softmax(self(ids[:, :-1])).data
        tgt = ids[:, 1:]
        lp = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
        return np.where(tgt != PAD, lp, 0.0)


def lm_score(tokens, lm):
    """Total log-probability of a framed sequence (pad positions excluded)."""
    ids = tokens.array() if hasattr(tokens, "array") else np.asarray(tokens)
    if ids.ndim == 1:
        ids = ids[None]
    return lm.token_logprobs(ids).sum(axis=1) if ids.shape[0] > 1 else float(lm.token_logprobs(ids).sum())


# presets ---------------------------------------------------------------------

TEXT_PRESETS = {
    "delib-base": {"layers": 2, "right_context": 2},
    "delib-ptb-small": {"layers": 2, "right_context": 30},
    "delib-ptb-medium": {"layers": 4, "right_context": 30},
    "delib-ptb-large": {"layers": 12, "right_context": 30},
}

LM_PRESETS = {"lm-rescorer": {"layers": 2, "left_context": 31}}


def text_encoder_from_preset(name, vocab_size, d=32, heads=2, d_ff=64, seed=0):
    if name not in TEXT_PRESETS:
        raise KeyError(f"unknown text encoder preset {name!r}; choose from {sorted(TEXT_PRESETS)}")
    return TextEncoder(vocab_size, d=d, heads=heads, d_ff=d_ff, seed=seed, **TEXT_PRESETS[name])


def content_mask(ids):
    return np.asarray(ids) >= NUM_RESERVED


# second pass bundle ------------------------------------------------------------

class DeliberationModel(Module):
    """Text encoder over the n-best plus the two-source decoder."""

    def __init__(self, vocab_size, preset="delib-base", d=32, seed=0, decoder_kw=None):
        self.preset = preset
        self.text_encoder = text_encoder_from_preset(preset, vocab_size, d=d, seed=seed)
        self.text_encoder.mlm = None
        self.decoder = DeliberationDecoder(vocab_size, d_audio=d, d_text=d, seed=seed,
                                           **(decoder_kw or {}))

    def memory(self, e, e_mask, nbest_ids):
        """e (B, T, d) with mask (B, T); nbest_ids (B, K, L) framed ids."""
        h_b, hb_mask = encode_nbest_batch(self.text_encoder, nbest_ids)
        return self.decoder.memory(e, e_mask, h_b, hb_mask)
