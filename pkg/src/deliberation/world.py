"""Synthetic speech world: lexicon, domain grammars, feature synthesis, corpora.

Words are built from CV-syllable wordpieces. Syllables come in voicing
pairs (ka/ga, ta/da, ...) whose codebook rows differ only along one
direction, so they are acoustically confusable and must be resolved from
context. Tail words are one-piece voicing mutations of a domain's entity
words; by default they never occur in supervised transcripts.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream
from .text import (NUM_RESERVED, WORD_MARK, ConfigError, TokenSequence, Vocabulary,
                   detokenize, tokenize)

DOMAINS = ("Maps", "News", "Play", "Search", "YouTube")
CONSONANT_PAIRS = (("k", "g"), ("t", "d"), ("p", "b"), ("s", "z"), ("f", "v"), ("c", "j"))
VOWELS = "aeiou"
SLOT = "<slot>"


@dataclass
class WorldSpec:
    seed: int = 0
    vocab_size: int = 64
    max_len: int = 32
    n_head_words: int = 40
    n_tail_words: int = 20
    entities_per_domain: int = 4
    domains: tuple = DOMAINS
    # text-only corpus: sizes proportional to these weights (51M:20M:1.6M:0.6M:11M)
    text_only_weights: tuple = (51.0, 20.0, 1.6, 0.6, 11.0)
    n_text_only: int = 20000
    supervised_weights: tuple = (0.3, 0.2, 0.15, 0.15, 0.2)
    n_supervised: int = 5000
    audio_only_domain: str = "Search"
    n_audio_only: int = 5000
    head_test_domain: str = "Search"
    n_head_test: int = 300
    n_tail_test_per_domain: int = 60
    # probability that an entity slot holds a tail word (text-only / audio-only)
    tail_rate: float = 0.3
    # indices of tail words restricted to text-only corpora; None means all
    tail_exclusive: tuple | None = None
    min_words: int = 2
    max_words: int = 5
    end_prob: float = 0.35
    successors: int = 4
    feature_dim: int = 16
    frames_per_token: int = 3
    confusion_delta: float = 0.6
    speaker_scale: float = 0.3
    n_real_speakers: int = 8
    n_tts_speakers: int = 4
    sigma_real: float = 0.8
    sigma_tts: float = 0.9
    sigma_semisup: float = 0.8

    @classmethod
    def from_dict(cls, d, path="world"):
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(f"{path}.{k}: unknown field")
        kw = dict(d)
        for k in ("domains", "text_only_weights", "supervised_weights", "tail_exclusive"):
            if kw.get(k) is not None:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def validate(self):
        if len(self.text_only_weights) != len(self.domains) or \
                len(self.supervised_weights) != len(self.domains):
            raise ConfigError("world: per-domain weights must match domains")
        if sum(self.text_only_weights) <= 0 and sum(self.supervised_weights) <= 0:
            raise ConfigError("world: domain counts are zero for all domains")
        if any(w < 0 for w in self.text_only_weights + self.supervised_weights):
            raise ConfigError("world: negative domain weight")
        for name in ("audio_only_domain", "head_test_domain"):
            if getattr(self, name) not in self.domains:
                raise ConfigError(f"world.{name}: unknown domain {getattr(self, name)!r}")
        if self.min_words < 1 or self.max_words < self.min_words:
            raise ConfigError("world: bad sentence length range")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    speaker: int
    sigma: float
    domain: str = ""
    utt_id: str = ""

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class Teacher:
    """Oracle-with-error labeler: true transcript, words substituted at ``sub_rate``."""

    truth: dict
    lexicon: list
    sub_rate: float = 0.05
    seed: int = 0


def split_counts(total, weights):
    """Largest-remainder apportionment of ``total`` items by ``weights``."""
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        return [0] * len(w)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(int)
    rem = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return [int(x) for x in base]


def _syllables(n):
    out = []
    for pair in CONSONANT_PAIRS:
        for c in pair:
            for v in VOWELS:
                out.append((c + v, pair, v))
    if n > len(out):
        raise ConfigError(f"vocabulary too large for the syllable inventory ({len(out)})")
    return out[:n]


class World:
    """Everything derivable from a WorldSpec, built deterministically."""

    def __init__(self, spec):
        spec.validate()
        self.spec = spec
        n_content = spec.vocab_size - NUM_RESERVED
        n_init = (n_content + 1) // 2
        n_cont = n_content - n_init
        init = _syllables(n_init)
        cont = _syllables(n_cont)
        pieces = [WORD_MARK + s for s, _, _ in init] + [s for s, _, _ in cont]
        self.vocab = Vocabulary(pieces)
        self._build_codebook(init, cont)
        self._build_partners(init, cont)
        self._build_lexicon()
        self._build_grammars()
        srng = stream(spec.seed, "speakers")
        n_spk = spec.n_real_speakers + spec.n_tts_speakers
        self.speaker_offsets = spec.speaker_scale * srng.normal(size=(n_spk, spec.feature_dim))
        self.speaker_offsets[0] = 0.0

    # construction ----------------------------------------------------------

    def _build_codebook(self, init, cont):
        spec = self.spec
        rng = stream(spec.seed, "codebook")
        d = spec.feature_dim
        pair_vec = {p: rng.normal(size=d) for p in CONSONANT_PAIRS}
        vowel_vec = {v: rng.normal(size=d) for v in VOWELS}
        voice_dir = {}
        for p in CONSONANT_PAIRS:
            u = rng.normal(size=d)
            voice_dir[p] = u / np.linalg.norm(u)
        initial_vec = rng.normal(size=d)
        cb = np.zeros((spec.vocab_size, d))
        for k, (syl, pair, v) in enumerate(init + cont):
            sign = 1.0 if syl[:-1] == pair[0] else -1.0
            row = pair_vec[pair] + vowel_vec[v] + sign * spec.confusion_delta * voice_dir[pair]
            if k < len(init):
                row = row + initial_vec
            cb[NUM_RESERVED + k] = row
        self.codebook = cb

    def _build_partners(self, init, cont):
        partner = {}
        for group, mark in ((init, WORD_MARK), (cont, "")):
            names = {s for s, _, _ in group}
            for s, pair, v in group:
                c = s[:-1]
                other = (pair[1] if c == pair[0] else pair[0]) + v
                if other in names:
                    partner[self.vocab.id(mark + s)] = self.vocab.id(mark + other)
        self.partner = partner

    def _build_lexicon(self):
        spec = self.spec
        rng = stream(spec.seed, "lexicon")
        content = self.vocab.content_ids
        init_ids = [i for i in content if self.vocab.tokens[i].startswith(WORD_MARK)]
        cont_ids = [i for i in content if not self.vocab.tokens[i].startswith(WORD_MARK)]
        seen = set()
        head = []
        while len(head) < spec.n_head_words:
            n_cont = 1 + int(rng.random() < 0.4)
            ids = (int(rng.choice(init_ids)),) + tuple(int(rng.choice(cont_ids)) for _ in range(n_cont))
            if ids in seen:
                continue
            seen.add(ids)
            head.append(ids)
        self.head_ids = head
        n_dom = len(spec.domains)
        n_ent = spec.entities_per_domain
        self.entity_idx = {dom: list(range(k * n_ent, (k + 1) * n_ent)) for k, dom in enumerate(spec.domains)}
        self.general_idx = list(range(n_dom * n_ent, spec.n_head_words))
        if not self.general_idx:
            raise ConfigError("world: no general words left after entities")
        tails = []
        tail_domain = []
        tail_source = []
        attempts = 0
        while len(tails) < spec.n_tail_words:
            attempts += 1
            if attempts > 10000:
                raise ConfigError("world: cannot build enough distinct tail words")
            k = len(tails)
            dom = spec.domains[k % n_dom]
            src = self.entity_idx[dom][(k // n_dom) % n_ent]
            base = list(head[src])
            swappable = [j for j, t in enumerate(base) if t in self.partner]
            if not swappable:
                raise ConfigError("world: entity word without confusable piece")
            j = int(rng.choice(swappable))
            base[j] = self.partner[base[j]]
            # an extra random mutation if the single swap collides
            cand = tuple(base)
            if cand in seen:
                j2 = int(rng.integers(1, len(base))) if len(base) > 1 else 0
                base[j2] = int(rng.choice(cont_ids)) if j2 > 0 else int(rng.choice(init_ids))
                cand = tuple(base)
                if cand in seen:
                    continue
            seen.add(cand)
            tails.append(cand)
            tail_domain.append(dom)
            tail_source.append(src)
        self.tail_ids = tails
        self.tail_domain = tail_domain
        self.tail_source = tail_source
        excl = spec.tail_exclusive
        self.tail_exclusive = [True] * len(tails) if excl is None else \
            [i in set(excl) for i in range(len(tails))]
        self.head_words = [detokenize(w, self.vocab) for w in head]
        self.tail_words = [detokenize(w, self.vocab) for w in tails]
        self.lexicon = self.head_words + self.tail_words

    def _build_grammars(self):
        spec = self.spec
        states = list(self.general_idx) + [SLOT]
        self.grammar = {}
        for dom in spec.domains:
            rng = stream(spec.seed, "grammar", dom)
            k = min(spec.successors, len(states))
            start_states = list(rng.choice(len(states), size=min(5, len(states)), replace=False))
            start_p = rng.dirichlet(np.full(len(start_states), 2.0))
            trans = {}
            for si in range(len(states)):
                succ = list(rng.choice(len(states), size=k, replace=False))
                trans[si] = (succ, rng.dirichlet(np.full(k, 1.5)))
            self.grammar[dom] = (states, start_states, start_p, trans)

    # sampling --------------------------------------------------------------

    def sample_words(self, domain, rng, tail_mode="none"):
        """Sample a sentence (list of words) from the domain grammar.

        tail_mode: "none" (entity slots use head entities), "mix" (tail with
        probability tail_rate), "force" (at least one tail word).
        """
        spec = self.spec
        states, start_states, start_p, trans = self.grammar[domain]
        dom_tails = [i for i, d in enumerate(self.tail_domain) if d == domain]
        if tail_mode == "force" and not dom_tails:
            raise ValueError(f"no tail words for domain {domain}")
        while True:
            seq = [start_states[int(rng.choice(len(start_states), p=start_p))]]
            while len(seq) < spec.max_words:
                if len(seq) >= spec.min_words and rng.random() < spec.end_prob:
                    break
                succ, p = trans[seq[-1]]
                seq.append(succ[int(rng.choice(len(succ), p=p))])
            slots = [j for j, s in enumerate(seq) if states[s] == SLOT]
            if tail_mode == "force" and not slots:
                continue
            break
        forced = int(rng.choice(slots)) if tail_mode == "force" else -1
        out = []
        for j, s in enumerate(seq):
            st = states[s]
            if st != SLOT:
                out.append(self.head_words[st])
                continue
            use_tail = bool(dom_tails) and (j == forced or (
                tail_mode == "mix" and rng.random() < spec.tail_rate))
            if use_tail:
                out.append(self.tail_words[dom_tails[int(rng.integers(len(dom_tails)))]])
            else:
                ents = self.entity_idx[domain]
                out.append(self.head_words[ents[int(rng.integers(len(ents)))]])
        return out

    def encode(self, text):
        return tokenize(text, self.vocab, self.spec.max_len)

    def synth_features(self, tokens, speaker, sigma, rng, domain="", utt_id=""):
        return synth_features(self, tokens, speaker, sigma, rng, domain, utt_id)

    def is_tts_speaker(self, speaker):
        return speaker >= self.spec.n_real_speakers

    def exclusive_tail_words(self):
        return {w for w, ex in zip(self.tail_words, self.tail_exclusive) if ex}


def synth_features(world, tokens, speaker, sigma, rng, domain="", utt_id=""):
    """Per content token: ``frames_per_token`` copies of its codebook row,
    plus the speaker offset, plus N(0, sigma^2) noise."""
    n_spk = world.speaker_offsets.shape[0]
    if not 0 <= int(speaker) < n_spk:
        raise ValueError(f"unknown speaker id {speaker}")
    content = np.asarray(tokens.content if isinstance(tokens, TokenSequence) else tokens, dtype=np.int64)
    if content.size == 0:
        raise ValueError("cannot synthesize features for an empty token sequence")
    fpt = world.spec.frames_per_token
    clean = np.repeat(world.codebook[content], fpt, axis=0) + world.speaker_offsets[int(speaker)]
    noise = rng.normal(size=clean.shape) if sigma > 0 else 0.0
    return FeatureSequence(clean + sigma * noise, int(speaker), float(sigma), domain, utt_id)


def pseudo_label(features, teacher, vocab=None, max_len=32):
    """Teacher transcript for an audio-only utterance (words or TokenSequence)."""
    truth = teacher.truth[features.utt_id].split()
    rng = stream(teacher.seed, "teacher", features.utt_id)
    sub = rng.random(len(truth)) < teacher.sub_rate
    picks = rng.integers(len(teacher.lexicon), size=len(truth))
    out = [teacher.lexicon[int(p)] if s else w for w, s, p in zip(truth, sub, picks)]
    if vocab is None:
        return out
    return tokenize(" ".join(out), vocab, max_len)


# file formats ----------------------------------------------------------------

def write_features(path, frames):
    frames = np.ascontiguousarray(frames, dtype="<f8")
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_features(path):
    blob = Path(path).read_bytes()
    t, d = struct.unpack_from("<QQ", blob, 0)
    return np.frombuffer(blob, dtype="<f8", count=t * d, offset=16).reshape(t, d).astype(np.float64)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


@dataclass
class CorpusPaths:
    root: Path
    files: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.root / self.files[key]


def generate_corpora(spec, out_dir):
    """Write vocabulary, corpora, evaluation sets and feature files under ``out_dir``."""
    world = World(spec)
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    world.vocab.save(out / "vocab.txt")
    nd = len(spec.domains)
    real = spec.n_real_speakers

    def audio_record(kind, utt_id, words, domain, speaker, sigma, with_text=True):
        rng = stream(spec.seed, "synth", utt_id)
        tokens = world.encode(" ".join(words))
        fs = synth_features(world, tokens, speaker, sigma, rng, domain, utt_id)
        rel = f"features/{utt_id}.f64"
        write_features(out / rel, fs.frames)
        rec = {"utt_id": utt_id, "domain": domain, "kind": kind, "features": rel, "speaker": speaker}
        if with_text:
            rec["text"] = " ".join(words)
        return rec

    # supervised
    sup = []
    counts = split_counts(spec.n_supervised, spec.supervised_weights)
    idx = 0
    for d in range(nd):
        dom = spec.domains[d]
        for _ in range(counts[d]):
            utt = f"sup{idx:06d}"
            rng = stream(spec.seed, "supervised", idx)
            words = world.sample_words(dom, rng, "none")
            spk = int(rng.integers(real))
            sup.append(audio_record("supervised", utt, words, dom, spk, spec.sigma_real))
            idx += 1
    # text-only
    txt = []
    counts = split_counts(spec.n_text_only, spec.text_only_weights)
    idx = 0
    for d in range(nd):
        dom = spec.domains[d]
        for _ in range(counts[d]):
            rng = stream(spec.seed, "text_only", idx)
            words = world.sample_words(dom, rng, "mix")
            txt.append({"utt_id": f"txt{idx:06d}", "domain": dom, "kind": "text_only",
                        "text": " ".join(words)})
            idx += 1
    # audio-only (semi-supervised pool) with hidden truth for the oracle teacher
    aud, truth = [], []
    for idx in range(spec.n_audio_only):
        utt = f"aud{idx:06d}"
        rng = stream(spec.seed, "audio_only", idx)
        words = world.sample_words(spec.audio_only_domain, rng, "mix")
        spk = int(rng.integers(real))
        aud.append(audio_record("audio_only", utt, words, spec.audio_only_domain, spk,
                                spec.sigma_semisup, with_text=False))
        truth.append({"utt_id": utt, "text": " ".join(words)})
    # evaluation: head (real speakers) and long-tail (synthesized, tts speakers)
    head = []
    for idx in range(spec.n_head_test):
        utt = f"head{idx:05d}"
        rng = stream(spec.seed, "head_test", idx)
        words = world.sample_words(spec.head_test_domain, rng, "none")
        spk = int(rng.integers(real))
        head.append(audio_record("supervised", utt, words, spec.head_test_domain, spk, spec.sigma_real))
    tail = []
    if spec.n_tail_words == 0:
        warnings.warn("world has no tail words; the long-tail evaluation set is empty")
    else:
        idx = 0
        for dom in spec.domains:
            if dom not in world.tail_domain:
                continue
            for _ in range(spec.n_tail_test_per_domain):
                utt = f"tail{idx:05d}"
                rng = stream(spec.seed, "tail_test", idx)
                words = world.sample_words(dom, rng, "force")
                spk = real + int(rng.integers(spec.n_tts_speakers)) if spec.n_tts_speakers else 0
                tail.append(audio_record("supervised", utt, words, dom, spk, spec.sigma_tts))
                idx += 1
    rpnm = [r for r in tail if r["domain"] == "Maps"]

    files = {
        "vocab": "vocab.txt", "supervised": "supervised.jsonl", "text_only": "text_only.jsonl",
        "audio_only": "audio_only.jsonl", "audio_only_truth": "oracle/audio_only_truth.jsonl",
        "head_test": "eval/head_test.jsonl", "tail_test": "eval/tail_test.jsonl",
        "rpnm_test": "eval/rpnm_test.jsonl", "world": "world.json",
    }
    (out / "oracle").mkdir(exist_ok=True)
    (out / "eval").mkdir(exist_ok=True)
    write_jsonl(out / files["supervised"], sup)
    write_jsonl(out / files["text_only"], txt)
    write_jsonl(out / files["audio_only"], aud)
    write_jsonl(out / files["audio_only_truth"], truth)
    write_jsonl(out / files["head_test"], head)
    write_jsonl(out / files["tail_test"], tail)
    write_jsonl(out / files["rpnm_test"], rpnm)
    meta = {
        "spec": spec.to_dict(),
        "head_words": world.head_words,
        "tail_words": world.tail_words,
        "tail_domain": world.tail_domain,
        "tail_exclusive": world.tail_exclusive,
    }
    (out / files["world"]).write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    return CorpusPaths(out, files)


def audit_exclusivity(corpus_dir):
    """Occurrences of text-only tail words in supervised transcripts (should be empty)."""
    root = Path(corpus_dir)
    meta = json.loads((root / "world.json").read_text(encoding="utf-8"))
    banned = {w for w, ex in zip(meta["tail_words"], meta["tail_exclusive"]) if ex}
    hits = []
    for rec in read_jsonl(root / "supervised.jsonl"):
        for w in rec["text"].split():
            if w in banned:
                hits.append((rec["utt_id"], w))
    return hits


def load_teacher(corpus_dir, sub_rate=0.05, seed=0):
    root = Path(corpus_dir)
    meta = json.loads((root / "world.json").read_text(encoding="utf-8"))
    truth = {r["utt_id"]: r["text"] for r in read_jsonl(root / "oracle" / "audio_only_truth.jsonl")}
    return Teacher(truth, meta["head_words"] + meta["tail_words"], sub_rate, seed)
