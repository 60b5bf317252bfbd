"""CTC loss (log-space forward-backward) and CTC prefix beam search."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .text import EPSILON

NEG_INF = -np.inf


class AlignmentError(ValueError):
    """Target cannot be aligned to the available frames."""


def _lse(a, b):
    m = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        out = m + np.log(np.exp(a - m) + np.exp(b - m))
    return np.where(np.isneginf(m), NEG_INF, out)


def _extended(targets, blank):
    """Blank-interleaved label rows, padded; plus skip-transition mask."""
    b = len(targets)
    s_max = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((b, s_max), blank, dtype=np.int64)
    skip = np.zeros((b, s_max), dtype=bool)
    sizes = np.zeros(b, dtype=np.int64)
    for i, tgt in enumerate(targets):
        tgt = list(tgt)
        ext[i, 1:2 * len(tgt):2] = tgt
        sizes[i] = 2 * len(tgt) + 1
        for s in range(3, 2 * len(tgt), 2):
            skip[i, s] = ext[i, s] != ext[i, s - 2]
    return ext, skip, sizes


def min_frames(target):
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_forward_backward(logp, lengths, targets, blank=EPSILON):
    """Per-utterance negative log-likelihood and its gradient w.r.t. logp.

    logp: (B, T, K) log-probabilities. Returns (nll (B,), occupancy (B, T, K)),
    where occupancy[b, t, k] is the posterior of emitting class k at frame t.
    """
    bsz, n_t, k = logp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    for i, tgt in enumerate(targets):
        if min_frames(tgt) > lengths[i]:
            raise AlignmentError(f"target of length {len(tgt)} needs {min_frames(tgt)} frames, "
                                 f"only {lengths[i]} available")
    ext, skip, sizes = _extended(targets, blank)
    s_max = ext.shape[1]
    rows = np.arange(bsz)[:, None]
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (bsz, n_t, s_max)), axis=2)
    svalid = np.arange(s_max)[None, :] < sizes[:, None]

    alpha = np.full((bsz, n_t, s_max), NEG_INF)
    a0 = np.full((bsz, s_max), NEG_INF)
    a0[:, 0] = emit[:, 0, 0]
    has_label = sizes > 1
    if s_max > 1:
        a0[has_label, 1] = emit[has_label, 0, 1]
    alpha[:, 0] = a0
    for t in range(1, n_t):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = _lse(acc[:, 1:], prev[:, :-1])
        two = np.full_like(prev, NEG_INF)
        two[:, 2:] = prev[:, :-2]
        acc = np.where(skip, _lse(acc, two), acc)
        cur = np.where(svalid, acc + emit[:, t], NEG_INF)
        live = (t < lengths)[:, None]
        alpha[:, t] = np.where(live, cur, prev)

    last = lengths - 1
    a_last = alpha[np.arange(bsz), last]
    end1 = a_last[np.arange(bsz), sizes - 1]
    end2 = np.where(sizes > 1, a_last[np.arange(bsz), np.maximum(sizes - 2, 0)], NEG_INF)
    loglik = _lse(end1, end2)

    beta = np.full((bsz, n_t, s_max), NEG_INF)
    for t in range(n_t - 1, -1, -1):
        init = np.full((bsz, s_max), NEG_INF)
        init[np.arange(bsz), sizes - 1] = 0.0
        init[sizes > 1, np.maximum(sizes - 2, 0)[sizes > 1]] = 0.0
        if t == n_t - 1:
            beta[:, t] = init
            continue
        nxt = beta[:, t + 1] + emit[:, t + 1]
        acc = nxt.copy()
        acc[:, :-1] = _lse(acc[:, :-1], nxt[:, 1:])
        two = np.full_like(nxt, NEG_INF)
        two[:, :-2] = np.where(skip[:, 2:], nxt[:, 2:], NEG_INF)
        acc = _lse(acc, two)
        acc = np.where(svalid, acc, NEG_INF)
        is_last = (t == last)[:, None]
        beta[:, t] = np.where(is_last, init, np.where((t < last)[:, None], acc, NEG_INF))

    with np.errstate(invalid="ignore"):
        gamma = np.exp(alpha + beta - loglik[:, None, None])
    gamma = np.nan_to_num(gamma, nan=0.0)
    tvalid = np.arange(n_t)[None, :] < lengths[:, None]
    gamma *= tvalid[:, :, None]
    occ = np.zeros((bsz, n_t, k))
    bi = np.broadcast_to(rows[:, :, None], (bsz, n_t, s_max))
    ti = np.broadcast_to(np.arange(n_t)[None, :, None], (bsz, n_t, s_max))
    ki = np.broadcast_to(ext[:, None, :], (bsz, n_t, s_max))
    np.add.at(occ, (bi, ti, ki), np.where(svalid[:, None, :], gamma, 0.0))
    if not np.all(np.isfinite(loglik)):
        raise AlignmentError("CTC likelihood is zero for some utterance")
    return -loglik, occ


def ctc_loss_batch(logits, lengths, targets, blank=EPSILON, reduction="mean"):
    """Differentiable CTC loss over a padded batch of logits (B, T, K)."""
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    logp = z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    nll, occ = ctc_forward_backward(logp, lengths, targets, blank)
    bsz, n_t, _ = z.shape
    tvalid = (np.arange(n_t)[None, :] < np.asarray(lengths)[:, None])[:, :, None]
    scale = 1.0 / bsz if reduction == "mean" else 1.0
    total = nll.sum() * scale

    def bw(g):
        return ((np.exp(logp) * tvalid - occ) * (g * scale),)

    return T._node(np.asarray(total), (logits,), bw)


def ctc_loss(logits, target, blank=EPSILON):
    """-log P(target | logits) for one utterance; logits (T, K)."""
    logits = T.as_tensor(logits)
    batched = T.reshape(logits, (1,) + logits.shape)
    return ctc_loss_batch(batched, [logits.shape[0]], [list(target)], blank, reduction="sum")


# decoding ------------------------------------------------------------------

@dataclass(frozen=True)
class NBestList:
    """Distinct collapsed label sequences with first-pass log-probabilities,
    sorted by score (descending), ties broken lexicographically."""

    hyps: tuple  # of (tuple of ids, float)

    def __len__(self):
        return len(self.hyps)

    def __iter__(self):
        return iter(self.hyps)

    def __getitem__(self, i):
        return self.hyps[i]

    @property
    def sequences(self):
        return [h for h, _ in self.hyps]

    @property
    def scores(self):
        return [s for _, s in self.hyps]

    def to_json(self, utt_id):
        return json.dumps({"utt_id": utt_id,
                           "hyps": [{"tokens": list(h), "logp": s} for h, s in self.hyps]},
                          sort_keys=True)

    @classmethod
    def from_json(cls, line):
        rec = json.loads(line)
        return rec["utt_id"], cls(tuple((tuple(h["tokens"]), float(h["logp"])) for h in rec["hyps"]))


def _rank_key(item):
    seq, score = item
    return (-score, seq)


def collapse(path, blank=EPSILON):
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def greedy_decode(logp, blank=EPSILON):
    return collapse(np.argmax(np.asarray(logp), axis=-1), blank)


def prefix_beam_search(logp, beam_width=8, n=4, blank=EPSILON, prune_logp=None, exclude=()):
    """CTC prefix beam search over frame log-probabilities (T, K).

    Alignments that collapse to the same prefix are merged. ``prune_logp``
    skips classes whose frame log-probability falls below it; ``exclude``
    lists classes never emitted as labels.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    logp = np.asarray(logp, dtype=np.float64)
    n_t, k = logp.shape
    excluded = set(int(e) for e in exclude) | {blank}
    beams = {(): (0.0, NEG_INF)}  # prefix -> (log p ending in blank, log p ending in label)
    lse = np.logaddexp
    for t in range(n_t):
        row = logp[t]
        if prune_logp is None:
            cands = [c for c in range(k) if c not in excluded]
        else:
            cands = [c for c in np.flatnonzero(row >= prune_logp).tolist() if c not in excluded]
        pb_t = row[blank]
        nxt = {}

        def add(prefix, pb, pnb):
            old = nxt.get(prefix)
            if old is None:
                nxt[prefix] = (pb, pnb)
            else:
                nxt[prefix] = (lse(old[0], pb), lse(old[1], pnb))

        for prefix, (pb, pnb) in beams.items():
            tot = lse(pb, pnb)
            add(prefix, tot + pb_t, NEG_INF)
            last = prefix[-1] if prefix else None
            for c in cands:
                pc = row[c]
                if c == last:
                    add(prefix, NEG_INF, pnb + pc)
                    add(prefix + (c,), NEG_INF, pb + pc)
                else:
                    add(prefix + (c,), NEG_INF, tot + pc)
        scored = sorted(((p, float(lse(*v))) for p, v in nxt.items()), key=_rank_key)
        beams = {p: nxt[p] for p, _ in scored[:beam_width]}
    final = sorted(((p, float(lse(*v))) for p, v in beams.items()), key=_rank_key)
    return NBestList(tuple(final[:n]))


def exhaustive_decode(logp, n=None, blank=EPSILON):
    """Brute-force label-sequence probabilities by enumerating every alignment."""
    import itertools

    logp = np.asarray(logp, dtype=np.float64)
    n_t, k = logp.shape
    probs = {}
    for path in itertools.product(range(k), repeat=n_t):
        lab = collapse(path, blank)
        lp = float(sum(logp[t, c] for t, c in enumerate(path)))
        probs[lab] = lp if lab not in probs else float(np.logaddexp(probs[lab], lp))
    ranked = sorted(probs.items(), key=_rank_key)
    return ranked if n is None else ranked[:n]


def log_softmax_np(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def is_strictly_ordered(nbest):
    items = list(nbest)
    return all(_rank_key(a) < _rank_key(b) for a, b in zip(items, items[1:])) and \
        math.isfinite(sum(s for _, s in items) if items else 0.0)
