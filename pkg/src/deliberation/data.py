"""In-memory views of the generated corpora."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .text import Vocabulary, tokenize_content
from .world import WorldSpec, load_teacher, pseudo_label, read_features, read_jsonl, FeatureSequence


@dataclass
class Utterance:
    utt_id: str
    domain: str
    tokens: tuple  # content ids (reference or pseudo-label); empty when unknown
    frames: np.ndarray | None = None
    speaker: int = -1
    text: str = ""


@dataclass
class Corpora:
    root: Path
    spec: WorldSpec
    vocab: Vocabulary
    supervised: list = field(default_factory=list)
    text_only: list = field(default_factory=list)
    audio_only: list = field(default_factory=list)
    eval_sets: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def by_domain(self, name):
        """Indices of the named corpus grouped by domain, in file order."""
        groups = {}
        for i, u in enumerate(getattr(self, name)):
            groups.setdefault(u.domain, []).append(i)
        return groups


def _audio(root, rec, vocab, max_len):
    frames = read_features(root / rec["features"])
    text = rec.get("text", "")
    toks = tuple(tokenize_content(text, vocab)) if text else ()
    if len(toks) > max_len - 2:
        raise ValueError(f"{rec['utt_id']}: transcript longer than {max_len - 2} tokens")
    return Utterance(rec["utt_id"], rec["domain"], toks, frames, int(rec.get("speaker", -1)), text)


def load_corpora(corpus_dir, teacher_sub_rate=0.05, teacher_seed=0, eval_only=False):
    """Read a generated corpus directory.

    Audio-only utterances receive teacher pseudo-labels; their hidden
    ground truth is only read through the teacher.
    """
    root = Path(corpus_dir)
    if not (root / "world.json").exists():
        raise FileNotFoundError(f"no corpus at {root} (missing world.json)")
    meta = json.loads((root / "world.json").read_text(encoding="utf-8"))
    spec = WorldSpec.from_dict(meta["spec"])
    vocab = Vocabulary.load(root / "vocab.txt")
    c = Corpora(root, spec, vocab, meta=meta)
    for name in ("head_test", "tail_test", "rpnm_test"):
        path = root / "eval" / f"{name}.jsonl"
        c.eval_sets[name] = [_audio(root, r, vocab, spec.max_len) for r in read_jsonl(path)]
    if eval_only:
        return c
    c.supervised = [_audio(root, r, vocab, spec.max_len) for r in read_jsonl(root / "supervised.jsonl")]
    c.text_only = [Utterance(r["utt_id"], r["domain"], tuple(tokenize_content(r["text"], vocab)),
                             text=r["text"])
                   for r in read_jsonl(root / "text_only.jsonl")]
    teacher = load_teacher(root, teacher_sub_rate, teacher_seed)
    for r in read_jsonl(root / "audio_only.jsonl"):
        u = _audio(root, r, vocab, spec.max_len)
        fs = FeatureSequence(u.frames, u.speaker, spec.sigma_semisup, u.domain, u.utt_id)
        label = pseudo_label(fs, teacher, vocab, spec.max_len)
        u.tokens = tuple(label.content)
        u.text = " ".join(pseudo_label(fs, teacher))
        c.audio_only.append(u)
    return c


def pad_frames(frames_list):
    """Stack (T_i, D) arrays into (B, T_max, D) with lengths."""
    lengths = np.array([f.shape[0] for f in frames_list], dtype=np.int64)
    out = np.zeros((len(frames_list), int(lengths.max()), frames_list[0].shape[1]))
    for i, f in enumerate(frames_list):
        out[i, :f.shape[0]] = f
    return out, lengths


def decoder_io(token_lists, sos, eos, pad):
    """Teacher-forcing inputs (sos + y) and targets (y + eos), padded."""
    width = max(len(t) for t in token_lists) + 1
    prev = np.full((len(token_lists), width), pad, dtype=np.int64)
    tgt = np.full((len(token_lists), width), pad, dtype=np.int64)
    for i, t in enumerate(token_lists):
        prev[i, 0] = sos
        prev[i, 1:len(t) + 1] = t
        tgt[i, :len(t)] = t
        tgt[i, len(t)] = eos
    return prev, tgt
