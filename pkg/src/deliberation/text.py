"""Vocabulary, wordpiece tokenization and token corruption for MLM-style training.

Word-initial pieces carry a leading ``WORD_MARK``; continuation pieces do
not. ``<epsilon>`` doubles as the MASK symbol because it never occurs in a
first-pass hypothesis or a reference.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, EPSILON, SOS, EOS, UNK = 0, 1, 2, 3, 4
MASK = EPSILON
RESERVED = ("<pad>", "<epsilon>", "<sos>", "<eos>", "<unk>")
NUM_RESERVED = len(RESERVED)
WORD_MARK = "▁"
DEFAULT_MAX_LEN = 32


class ConfigError(ValueError):
    pass


class TruncationError(ValueError):
    pass


class Vocabulary:
    def __init__(self, content_tokens):
        tokens = list(RESERVED) + list(content_tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self._max_piece = max((len(t) for t in tokens[NUM_RESERVED:]), default=1)

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self):
        return len(self.tokens)

    @property
    def content_ids(self):
        return np.arange(NUM_RESERVED, len(self.tokens))

    def id(self, token):
        return self.index.get(token, UNK)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:NUM_RESERVED]) != RESERVED:
            raise ValueError(f"vocabulary file must start with {RESERVED}")
        return cls(lines[NUM_RESERVED:])


@dataclass(frozen=True)
class TokenSequence:
    """A framed token sequence ``sos ... eos`` right-padded with ``pad``."""

    ids: tuple

    @classmethod
    def frame(cls, content, max_len=DEFAULT_MAX_LEN):
        content = [int(t) for t in content]
        if len(content) > max_len - 2:
            raise TruncationError(f"{len(content)} tokens exceed the limit of {max_len - 2}")
        ids = [SOS] + content + [EOS]
        return cls(tuple(ids + [PAD] * (max_len - len(ids))))

    @property
    def content(self):
        end = self.ids.index(EOS)
        return self.ids[1:end]

    @property
    def length(self):
        """Framed length including sos and eos."""
        return self.ids.index(EOS) + 1

    def array(self):
        return np.asarray(self.ids, dtype=np.int64)

    def validate(self):
        ids = self.ids
        if ids[0] != SOS or ids.count(SOS) != 1 or ids.count(EOS) != 1:
            raise ValueError("sequence must contain exactly one sos (at 0) and one eos")
        end = ids.index(EOS)
        if any(t != PAD for t in ids[end + 1:]) or PAD in ids[:end]:
            raise ValueError("pad allowed only after eos")


def _segment_word(word, vocab):
    out = []
    pos = 0
    n = len(word)
    while pos < n:
        best_tok, best_len = None, 0
        for ln in range(min(vocab._max_piece, n - pos), 0, -1):
            piece = word[pos:pos + ln]
            if pos == 0 and WORD_MARK + piece in vocab.index:
                best_tok, best_len = WORD_MARK + piece, ln
                break
            if piece in vocab.index:
                best_tok, best_len = piece, ln
                break
        if best_tok is None:
            out.append(UNK)
            pos += 1
        else:
            out.append(vocab.index[best_tok])
            pos += best_len
    return out


def tokenize_content(text, vocab):
    """Greedy longest-match wordpiece ids (no framing)."""
    text = text.strip()
    if not text:
        raise ValueError("cannot tokenize empty text")
    ids = []
    for word in text.split():
        ids.extend(_segment_word(word, vocab))
    return ids


def tokenize(text, vocab, max_len=DEFAULT_MAX_LEN):
    return TokenSequence.frame(tokenize_content(text, vocab), max_len)


def detokenize(ids, vocab):
    """Inverse of tokenize on in-vocabulary text. Accepts ids or a TokenSequence."""
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    pieces = []
    for t in ids:
        t = int(t)
        if t == EOS:
            break
        if t == UNK:
            pieces.append(WORD_MARK + "<unk>")
        elif t >= NUM_RESERVED:
            pieces.append(vocab.tokens[t])
    return "".join(pieces).replace(WORD_MARK, " ").strip()


def words(ids, vocab):
    return detokenize(ids, vocab).split()


# corruption ----------------------------------------------------------------

@dataclass(frozen=True)
class MaskRates:
    select: float = 0.15
    mask: float = 0.8
    random: float = 0.1
    keep: float = 0.1

    def validate(self):
        for name in ("select", "mask", "random", "keep"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"MaskRates.{name}={v} outside [0, 1]")
        if abs(self.mask + self.random + self.keep - 1.0) > 1e-9:
            raise ConfigError("MaskRates mask + random + keep must sum to 1")


@dataclass(frozen=True)
class MaskedExample:
    input_ids: TokenSequence
    target_ids: TokenSequence
    loss_positions: tuple


def content_positions(ids):
    """Boolean array marking content tokens (not sos/eos/pad/epsilon) of framed id rows."""
    ids = np.asarray(ids)
    return ids >= NUM_RESERVED


def mlm_corrupt(ids, rng, rates, num_tokens):
    """Vectorized MLM corruption of framed id arrays of any shape.

    Returns (corrupted ids, selected mask). Only content positions are
    eligible; random replacements are uniform over content ids.
    """
    rates.validate()
    ids = np.asarray(ids, dtype=np.int64)
    eligible = content_positions(ids)
    u_sel = rng.random(ids.shape)
    u_kind = rng.random(ids.shape)
    rand_tok = rng.integers(NUM_RESERVED, num_tokens, size=ids.shape)
    selected = eligible & (u_sel < rates.select)
    out = ids.copy()
    to_mask = selected & (u_kind < rates.mask)
    to_rand = selected & (u_kind >= rates.mask) & (u_kind < rates.mask + rates.random)
    out[to_mask] = MASK
    out[to_rand] = rand_tok[to_rand]
    return out, selected


def apply_mlm_mask(seq, rng, rates=MaskRates(), vocab_size=64):
    """Corrupt one TokenSequence for masked-LM training."""
    ids = seq.array()
    out, selected = mlm_corrupt(ids, rng, rates, vocab_size)
    return MaskedExample(TokenSequence(tuple(int(t) for t in out)), seq,
                         tuple(bool(b) for b in selected))


def hypothesis_corrupt(ids, rng, mask_rate=0.02, random_rate=0.0001, num_tokens=64):
    """Per-position corruption of first-pass hypotheses (training only)."""
    ids = np.asarray(ids, dtype=np.int64)
    if mask_rate == 0.0 and random_rate == 0.0:
        return ids.copy()
    eligible = content_positions(ids)
    u = rng.random(ids.shape)
    rand_tok = rng.integers(NUM_RESERVED, num_tokens, size=ids.shape)
    out = ids.copy()
    to_mask = eligible & (u < mask_rate)
    to_rand = eligible & (u >= mask_rate) & (u < mask_rate + random_rate)
    out[to_mask] = MASK
    out[to_rand] = rand_tok[to_rand]
    return out


def apply_hypothesis_mask(seq, rng, mask_rate=0.02, random_rate=0.0001, vocab_size=64):
    out = hypothesis_corrupt(seq.array(), rng, mask_rate, random_rate, vocab_size)
    return TokenSequence(tuple(int(t) for t in out))
