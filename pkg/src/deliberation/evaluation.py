"""Second-pass inference, LM rescoring, WER, side-by-side statistics and reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .data import decoder_io, pad_frames
from .models import lm_score
from .text import EOS, NUM_RESERVED, PAD, SOS, TokenSequence

MAX_HYPS = 4


# batching helpers ------------------------------------------------------------

def pack_nbest_batch(nbests, max_hyps=MAX_HYPS):
    """(B, K, L) framed ids; missing hypotheses are all-pad rows."""
    seqs = [[tuple(h) for h in _sequences(nb)[:max_hyps]] for nb in nbests]
    k = max(len(s) for s in seqs)
    width = max(len(h) for s in seqs for h in s) + 2
    out = np.full((len(seqs), k, width), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        for i, h in enumerate(s):
            out[b, i, 0] = SOS
            out[b, i, 1:len(h) + 1] = h
            out[b, i, len(h) + 1] = EOS
    return out


def _sequences(nbest):
    if hasattr(nbest, "sequences"):
        return nbest.sequences
    return [h[0] if isinstance(h, tuple) and h and isinstance(h[0], tuple) else h for h in nbest]


def batch_memory(model, encs, nbests):
    """Decoder memory for a list of utterances (e arrays and n-best lists)."""
    e, lengths = pad_frames(encs)
    e_mask = np.arange(e.shape[1])[None, :] < lengths[:, None]
    return model.memory(e, e_mask, pack_nbest_batch(nbests))


def _repeat_memory(mem, index):
    """Select/repeat batch rows of a memory (inference only)."""
    out = type(mem)()
    out.audio_k = T.Tensor(mem.audio_k.data[index])
    out.audio_v = T.Tensor(mem.audio_v.data[index])
    out.audio_mask = mem.audio_mask[index]
    out.text_k = T.Tensor(mem.text_k.data[index])
    out.text_v = T.Tensor(mem.text_v.data[index])
    out.text_mask = mem.text_mask[index]
    return out


def sequence_logprobs(model, mem, rows, hyps):
    """Teacher-forced sum of log p(token | prefix) over ``hyps`` + eos.

    ``rows`` maps each hypothesis to its utterance row in ``mem``.
    """
    prev, tgt = decoder_io([list(h) for h in hyps], SOS, EOS, PAD)
    with T.no_grad():
        logits = model.decoder.forward(prev, _repeat_memory(mem, np.asarray(rows)))
        logp = T.log_softmax(logits, axis=-1).data
    lp = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    return np.where(tgt != PAD, lp, 0.0).sum(axis=1)


# deliberation rescoring / re-decoding ------------------------------------------

def delib_rescore(e, nbest, model):
    """Teacher-force each hypothesis; return (best hypothesis, scores).

    Ties go to the earlier (higher first-pass rank) hypothesis.
    """
    hyps = _sequences(nbest)
    if not hyps:
        raise ValueError("empty n-best list")
    hyps = hyps[:MAX_HYPS]
    mem = batch_memory(model, [np.asarray(e)], [hyps])
    scores = sequence_logprobs(model, mem, [0] * len(hyps), hyps)
    best = int(np.argmax(scores))
    return tuple(hyps[best]), [float(s) for s in scores]


def rescore_many(model, encs, nbests, chunk=32):
    """delib_rescore over many utterances, batched. Returns best hypotheses."""
    out = []
    for s in range(0, len(encs), chunk):
        sub_e, sub_nb = encs[s:s + chunk], nbests[s:s + chunk]
        mem = batch_memory(model, sub_e, sub_nb)
        rows, hyps, owner = [], [], []
        for b, nb in enumerate(sub_nb):
            seqs = _sequences(nb)[:MAX_HYPS]
            if not seqs:
                raise ValueError("empty n-best list")
            for h in seqs:
                rows.append(b)
                hyps.append(tuple(h))
                owner.append(b)
        scores = sequence_logprobs(model, mem, rows, hyps)
        best = {}
        for i, b in enumerate(owner):
            if b not in best or scores[i] > scores[best[b]]:
                best[b] = i
        out.extend(hyps[best[b]] for b in range(len(sub_nb)))
    return out


def allowed_tokens(vocab_size):
    return np.array([EOS] + list(range(NUM_RESERVED, vocab_size)), dtype=np.int64)


def beam_search(step_fn, start_state, vocab_size, beam_width, max_len):
    """Generic label beam search over content tokens terminated by eos.

    ``step_fn(prev_tokens, state) -> (logp (B, V), new_state)`` where the state
    is a list of per-layer (h, c) arrays. Returns (tokens, score) of the best
    finished hypothesis. Content beyond ``max_len`` tokens is not allowed.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    allowed = allowed_tokens(vocab_size)
    beams = [((), 0.0)]
    state = start_state
    finished = []
    for t in range(max_len + 1):
        prev = [SOS if not seq else seq[-1] for seq, _ in beams]
        logp, state = step_fn(prev, state)
        cands = []
        for b, (seq, score) in enumerate(beams):
            for tok in allowed if t < max_len else allowed[:1]:
                cands.append((score + float(logp[b, tok]), seq, int(tok), b))
        cands.sort(key=lambda c: (-c[0], c[1] + (c[2],)))
        keep = []
        for score, seq, tok, b in cands[:beam_width]:
            if tok == EOS:
                finished.append((seq, score))
            else:
                keep.append((seq + (tok,), score, b))
        best_done = max((s for _, s in finished), default=-math.inf)
        if not keep or max(s for _, s, _ in keep) <= best_done:
            break
        beams = [(seq, score) for seq, score, _ in keep]
        src = np.array([b for _, _, b in keep])
        state = [(h[src], c[src]) for h, c in state]
    finished.sort(key=lambda f: (-f[1], f[0]))
    return finished[0]


def delib_redecode(e, nbest, model, beam_width=4, max_len=30):
    """Beam search with the deliberation decoder attending to e and the n-best."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    hyps = _sequences(nbest)
    if not hyps:
        raise ValueError("empty n-best list")
    mem = batch_memory(model, [np.asarray(e)], [hyps])
    dec = model.decoder

    def step_fn(prev, state):
        rows = np.zeros(len(prev), dtype=np.int64)
        st = [(T.Tensor(h), T.Tensor(c)) for h, c in state]
        with T.no_grad():
            logits, new = dec.step(prev, st, _repeat_memory(mem, rows))
            logp = T.log_softmax(logits, axis=-1).data
        return logp, [(h.data, c.data) for h, c in new]

    start = [(h.data, c.data) for h, c in dec.start_state(1)]
    tokens, _ = beam_search(step_fn, start, dec.vocab_size, beam_width, max_len)
    return TokenSequence.frame(tokens, max_len + 2)


def exhaustive_sequence_search(step_fn, start_state, vocab_size, max_len):
    """Score every eos-terminated sequence of at most ``max_len`` content tokens."""
    allowed = allowed_tokens(vocab_size)
    best = None
    frontier = [((), 0.0, start_state)]
    for t in range(max_len + 1):
        nxt = []
        for seq, score, st in frontier:
            logp, new = step_fn([SOS if not seq else seq[-1]], st)
            cand = (seq, score + float(logp[0, EOS]))
            if best is None or (-cand[1], cand[0]) < (-best[1], best[0]):
                best = cand
            if t < max_len:
                for tok in allowed[1:]:
                    nxt.append((seq + (int(tok),), score + float(logp[0, tok]), new))
        frontier = nxt
    return best


# LM rescoring baseline -----------------------------------------------------------

def lm_rescore(nbest, lm, lam=0.5, max_len=32):
    """argmax of lam * first-pass log-prob + LM log-prob. Order invariant."""
    items = list(nbest)
    if not items:
        raise ValueError("empty n-best list")
    scored = []
    for seq, fp in items:
        seq = tuple(seq)
        lm_lp = lm_score(TokenSequence.frame(seq, max(max_len, len(seq) + 2)), lm)
        scored.append((lam * fp + lm_lp, seq))
    scored.sort(key=lambda x: (-x[0], x[1]))
    return scored[0][1]


def lm_rescore_many(nbests, lm, lam=0.5):
    """Batched lm_rescore; same results as calling it per utterance."""
    flat, owner = [], []
    for b, nb in enumerate(nbests):
        if not len(nb):
            raise ValueError("empty n-best list")
        for seq, fp in nb:
            flat.append((tuple(seq), fp))
            owner.append(b)
    width = max(len(s) for s, _ in flat) + 2
    ids = np.full((len(flat), width), PAD, dtype=np.int64)
    for i, (s, _) in enumerate(flat):
        ids[i, 0] = SOS
        ids[i, 1:len(s) + 1] = s
        ids[i, len(s) + 1] = EOS
    lm_lp = np.zeros(len(flat))
    for s in range(0, len(flat), 256):
        lm_lp[s:s + 256] = lm.token_logprobs(ids[s:s + 256]).sum(axis=1)
    best = {}
    for i, b in enumerate(owner):
        key = (-(lam * flat[i][1] + lm_lp[i]), flat[i][0])
        if b not in best or key < best[b][0]:
            best[b] = (key, flat[i][0])
    return [best[b][1] for b in range(len(nbests))]


# WER -----------------------------------------------------------------------------

@dataclass
class WerReport:
    insertions: int = 0
    deletions: int = 0
    substitutions: int = 0
    ref_words: int = 0
    alignments: list | None = None

    @property
    def errors(self):
        return self.insertions + self.deletions + self.substitutions

    @property
    def wer(self):
        if self.ref_words == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.ref_words


def align_words(ref, hyp):
    """Unit-cost Levenshtein alignment as a list of (op, ref_word, hyp_word).

    op is one of "=", "S", "I", "D". Among optimal alignments the backtrace
    prefers substitution/match, then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i, j - 1] + 1, dist[i - 1, j] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("=" if ref[i - 1] == hyp[j - 1] else "S", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ops.append(("I", None, hyp[j - 1]))
            j -= 1
        else:
            ops.append(("D", ref[i - 1], None))
            i -= 1
    return ops[::-1]


def wer(refs, hyps, keep_alignments=False):
    """Corpus WER over word lists (or whitespace-separated strings)."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    rep = WerReport(alignments=[] if keep_alignments else None)
    for r, h in zip(refs, hyps):
        r = r.split() if isinstance(r, str) else list(r)
        h = h.split() if isinstance(h, str) else list(h)
        ops = align_words(r, h)
        rep.substitutions += sum(op == "S" for op, _, _ in ops)
        rep.insertions += sum(op == "I" for op, _, _ in ops)
        rep.deletions += sum(op == "D" for op, _, _ in ops)
        rep.ref_words += len(r)
        if keep_alignments:
            rep.alignments.append(ops)
    return rep


# side-by-side --------------------------------------------------------------------

def sign_test_p(wins, losses):
    """Exact two-sided binomial sign test (p = 1/2) as a Fraction."""
    n = wins + losses
    if n == 0:
        return Fraction(1)
    k = min(wins, losses)
    tail = sum(math.comb(n, i) for i in range(k + 1))
    return min(Fraction(1), Fraction(2 * tail, 2 ** n))


@dataclass
class SxsResult:
    wins: int
    losses: int
    neutral: int
    changed_fraction: float
    p_value: float

    @property
    def total(self):
        return self.wins + self.losses + self.neutral

    def to_dict(self):
        return {"wins": self.wins, "losses": self.losses, "neutral": self.neutral,
                "changed_fraction": self.changed_fraction, "p_value": self.p_value}


def sxs_counts(wins, losses, neutral=0, changed_fraction=0.0):
    return SxsResult(wins, losses, neutral, changed_fraction, float(sign_test_p(wins, losses)))


def sxs_eval(refs, hyps_a, hyps_b):
    """Win when only A matches the reference exactly, loss when only B does."""
    if not refs:
        raise ValueError("side-by-side evaluation needs at least one utterance")
    if not len(refs) == len(hyps_a) == len(hyps_b):
        raise ValueError("refs and both hypothesis lists must align")
    norm = [(_words(r), _words(a), _words(b)) for r, a, b in zip(refs, hyps_a, hyps_b)]
    wins = sum(a == r and b != r for r, a, b in norm)
    losses = sum(b == r and a != r for r, a, b in norm)
    changed = sum(a != b for _, a, b in norm) / len(norm)
    return sxs_counts(wins, losses, len(norm) - wins - losses, changed)


def _words(x):
    return tuple(x.split()) if isinstance(x, str) else tuple(x)


# reports -------------------------------------------------------------------------

SET_ORDER = ("head_test", "tail_test", "rpnm_test")
MISSING = "-"


@dataclass
class ResultRow:
    system: str
    description: str = ""
    seed: str = ""
    wers: dict = field(default_factory=dict)  # set name -> WER in percent (float) or None


def _columns(rows):
    names = {k for r in rows for k in r.wers}
    known = [s for s in SET_ORDER if s in names]
    return known + sorted(names - set(known))


def _fmt(v):
    return MISSING if v is None else f"{v:.2f}"


def emit_report(rows, sxs=None, title="Deliberation ablation"):
    """Render rows as (markdown, csv) text. Output depends only on the inputs."""
    if not rows:
        raise ValueError("nothing to report")
    cols = _columns(rows)
    header = ["system", "description", "seed"] + cols
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([r.system, r.description or MISSING, r.seed or MISSING]
                        + [_fmt(r.wers.get(c)) for c in cols])
    md = [f"# {title}", "", "WER (%)", "",
          "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        md.append("| " + " | ".join([r.system, r.description or MISSING, r.seed or MISSING]
                                    + [_fmt(r.wers.get(c)) for c in cols]) + " |")
    if sxs is not None:
        md += ["", "Side-by-side", "", "| wins | losses | neutral | changed | p-value |",
               "|---|---|---|---|---|",
               f"| {sxs.wins} | {sxs.losses} | {sxs.neutral} | {100 * sxs.changed_fraction:.1f}% "
               f"| {sxs.p_value:.3g} |"]
    return "\n".join(md) + "\n", buf.getvalue()


def read_report_csv(text):
    """Parse emit_report CSV back into rows."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    cols = header[3:]
    rows = []
    for rec in reader:
        unmiss = [None if v == MISSING else v for v in rec]
        wers = {c: (None if v is None else float(v)) for c, v in zip(cols, unmiss[3:])}
        rows.append(ResultRow(rec[0], unmiss[1] or "", unmiss[2] or "", wers))
    return rows
