"""Experiment plans: configuration, staged artifacts with memoization, ablations."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import checkpoint
from .ctc import NBestList
from .data import load_corpora
from .evaluation import (ResultRow, delib_redecode, emit_report, lm_rescore_many, rescore_many,
                         sxs_eval, wer)
from .firstpass import FirstPassConfig, load_first_pass, run_first_pass, save_first_pass, train_first_pass
from .rng import derive_seed
from .text import ConfigError, detokenize
from .training import (DelibConfig, SourcePool, load_deliberation, load_lm, pretrain_mlm,
                       save_deliberation, save_lm, save_text_encoder, train_deliberation, train_lm)
from .world import WorldSpec, audit_exclusivity, generate_corpora

EVAL_SETS = ("head_test", "tail_test", "rpnm_test")
NBEST_SETS = ("supervised", "audio_only") + EVAL_SETS

DEFAULTS = {
    "seed": 0,
    "world": {},
    "first_pass": {},
    "teacher": {"sub_rate": 0.05},
    "mlm": {"preset": "delib-ptb-large", "steps": 2000, "batch_size": 32, "lr": 1e-3},
    "lm": {"preset": "lm-rescorer", "steps": 1500, "batch_size": 32, "lr": 1e-3, "weight": 0.5},
    "delib": {"steps": 1500, "batch_size": 16, "lr": 1e-3},
    "variants": {
        "B1": {"description": "deliberation", "preset": "delib-base",
               "mix": {"supervised": 1.0, "tts": 0.0, "semisup": 0.0}},
        "E1": {"description": "deliberation + JATD", "preset": "delib-base",
               "mix": {"supervised": 0.9, "tts": 0.1, "semisup": 0.0}},
        "E2": {"description": "+ 12L pretrained text encoder", "preset": "delib-ptb-large",
               "text_encoder_init": "ptb_checkpoint",
               "mix": {"supervised": 0.9, "tts": 0.1, "semisup": 0.0}},
        "E3": {"description": "+ semi-supervised", "preset": "delib-ptb-large",
               "text_encoder_init": "ptb_checkpoint",
               "mix": {"supervised": 0.8, "tts": 0.1, "semisup": 0.1}},
        "PTB-L": {"description": "12L pretrained text encoder", "preset": "delib-ptb-large",
                  "text_encoder_init": "ptb_checkpoint",
                  "mix": {"supervised": 1.0, "tts": 0.0, "semisup": 0.0}},
        "RND-L": {"description": "12L random text encoder", "preset": "delib-ptb-large",
                  "mix": {"supervised": 1.0, "tts": 0.0, "semisup": 0.0}},
        "PTB-L+SS": {"description": "12L pretrained + semi-supervised", "preset": "delib-ptb-large",
                     "text_encoder_init": "ptb_checkpoint",
                     "mix": {"supervised": 0.9, "tts": 0.0, "semisup": 0.1}},
    },
    "eval": {"mode": "rescore", "beam_width": 4, "max_len": 30, "sets": list(EVAL_SETS)},
    "ablate": {"systems": ["B0", "B1", "E1", "E2", "E3", "B2"], "seeds": [],
               "sxs": ["E3", "B2", "head_test"]},
}

BASELINES = {"B0": "cascaded encoder (first pass)", "B2": "LM rescoring"}


# configuration ---------------------------------------------------------------------

def _check(value, default, path):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


# sections whose keys are checked later against their own dataclasses
_OPEN = {"world", "first_pass", "variants"}


def merge(base, update, path=""):
    """Recursively overlay ``update`` on ``base``, rejecting unknown fields."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        p = f"{path}.{k}" if path else k
        top = p.split(".")[0]
        if k not in out:
            if top in _OPEN:
                out[k] = copy.deepcopy(v)
                continue
            raise ConfigError(f"{p}: unknown field")
        _check(v, out[k], p)
        if isinstance(out[k], dict) and isinstance(v, dict) and out[k]:
            out[k] = merge(out[k], v, p)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = value
    for part in reversed(key.strip().split(".")):
        if not part:
            raise ConfigError(f"override {text!r}: empty path component")
        node = {part: node}
    return node


def build_config(file_config=None, overrides=(), seed=None):
    """Defaults < config file < --set overrides < --seed. Validates every section."""
    cfg = merge(DEFAULTS, file_config or {})
    for o in overrides:
        cfg = merge(cfg, parse_override(o))
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg):
    world_spec(cfg, cfg["seed"]).validate()
    first_pass_config(cfg).validate()
    for name in cfg["variants"]:
        delib_config(cfg, name, cfg["seed"]).validate(f"variants.{name}")
    if cfg["eval"]["mode"] not in ("rescore", "redecode"):
        raise ConfigError("eval.mode: expected 'rescore' or 'redecode'")
    for s in cfg["eval"]["sets"]:
        if s not in EVAL_SETS:
            raise ConfigError(f"eval.sets: unknown set {s!r}")
    known = set(cfg["variants"]) | set(BASELINES)
    for s in cfg["ablate"]["systems"]:
        if s not in known:
            raise ConfigError(f"ablate.systems: unknown system {s!r}")
    sxs = cfg["ablate"]["sxs"]
    if sxs and (len(sxs) != 3 or sxs[0] not in known or sxs[1] not in known or sxs[2] not in EVAL_SETS):
        raise ConfigError("ablate.sxs: expected [system_a, system_b, eval_set]")


def world_spec(cfg, seed):
    d = dict(cfg["world"])
    d["seed"] = int(seed)
    return WorldSpec.from_dict(d)


def first_pass_config(cfg):
    try:
        return FirstPassConfig(**cfg["first_pass"])
    except TypeError as exc:
        raise ConfigError(f"first_pass: {exc}") from None


def delib_config(cfg, variant, seed):
    if variant not in cfg["variants"]:
        raise ConfigError(f"variants.{variant}: no such variant")
    d = dict(cfg["delib"])
    v = {k: x for k, x in cfg["variants"][variant].items() if k != "description"}
    d.update(v)
    d["seed"] = derive_seed(seed, "delib", variant)
    return DelibConfig.from_dict(d, f"variants.{variant}")


def digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# staged runner ----------------------------------------------------------------------

class Experiment:
    """Runs stages for one config under ``out_dir``; completed stages are skipped.

    A stage is complete when the manifest holds the same content key (a hash
    of its config and of its inputs' keys) and all its artifacts exist.
    """

    def __init__(self, cfg, out_dir, log=None, jobs=1):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.log = log or (lambda msg: None)
        self.jobs = max(1, int(jobs))
        self.manifest_path = self.out / "manifest.json"
        self._corpora = {}

    # manifest -----------------------------------------------------------

    def _manifest(self):
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {"stages": {}}

    def _record(self, name, key, config, artifacts, seconds):
        man = self._manifest()
        man["stages"][name] = {"key": key, "config": config, "seconds": round(seconds, 3),
                               "artifacts": sorted(str(a.relative_to(self.out)) for a in artifacts)}
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(man, sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(self.manifest_path)

    def _done(self, name, key):
        entry = self._manifest()["stages"].get(name)
        return (entry is not None and entry["key"] == key
                and all((self.out / a).exists() for a in entry["artifacts"]))

    def _stage(self, name, config, inputs, artifacts, run):
        key = digest({"stage": name, "config": config, "inputs": inputs})
        if self._done(name, key):
            self.log(f"{name}: up to date")
            return key
        self.log(f"{name}: running")
        start = time.process_time()
        run()
        seconds = time.process_time() - start
        missing = [a for a in artifacts if not a.exists()]
        if missing:
            raise RuntimeError(f"{name}: stage did not produce {missing[0]}")
        self._record(name, key, config, artifacts, seconds)
        return key

    def stage_seconds(self, name):
        """CPU seconds the named stage took when it last ran (None if never run)."""
        entry = self._manifest()["stages"].get(name)
        return None if entry is None else entry.get("seconds")

    def seed_dir(self, seed):
        return self.out / f"seed-{seed}"

    # stages --------------------------------------------------------------

    def worldgen(self, seed):
        spec = world_spec(self.cfg, seed)
        root = self.seed_dir(seed) / "corpus"

        def run():
            generate_corpora(spec, root)
            hits = audit_exclusivity(root)
            (root / "audit.json").write_text(json.dumps({"exclusive_tail_hits": len(hits)}) + "\n")
            if hits:
                raise RuntimeError(f"exclusivity audit failed: {hits[:3]}")

        return self._stage(f"seed-{seed}/worldgen", spec.to_dict(), [],
                           [root / "world.json", root / "audit.json"], run)

    def corpora(self, seed):
        if seed not in self._corpora:
            self._corpora[seed] = load_corpora(self.seed_dir(seed) / "corpus",
                                               self.cfg["teacher"]["sub_rate"],
                                               derive_seed(seed, "teacher"))
        return self._corpora[seed]

    def paths(self, seed):
        d = self.seed_dir(seed)
        return {"corpus": d / "corpus", "first_pass": d / "first_pass.ckpt", "nbest": d / "nbest",
                "ptb": d / "ptb.ckpt", "lm": d / "lm.ckpt", "delib": d / "delib", "eval": d / "eval"}

    def train_first(self, seed):
        wkey = self.worldgen(seed)
        fcfg = first_pass_config(self.cfg)
        p = self.paths(seed)

        def run():
            c = self.corpora(seed)
            rows = []
            enc, _ = train_first_pass(c.supervised, fcfg, derive_seed(seed, "first_pass"),
                                      c.spec.feature_dim, c.spec.vocab_size,
                                      log=lambda s, l, lr: rows.append((s, l, lr)))
            save_first_pass(p["first_pass"], enc, fcfg, derive_seed(seed, "first_pass"),
                            c.spec.feature_dim, c.spec.vocab_size)
            _write_csv(self.seed_dir(seed) / "first_pass_log.csv", ("step", "loss", "lr"), rows)

        fkey = self._stage(f"seed-{seed}/train-first", fcfg.__dict__, [wkey], [p["first_pass"]], run)

        def run_nbest():
            enc, fc = load_first_pass(p["first_pass"])
            c = self.corpora(seed)
            p["nbest"].mkdir(parents=True, exist_ok=True)
            for name in NBEST_SETS:
                _, nbs = run_first_pass(enc, self._utts(c, name), fc)
                with open(p["nbest"] / f"{name}.jsonl", "w", encoding="utf-8") as f:
                    for u, nb in zip(self._utts(c, name), nbs):
                        f.write(nb.to_json(u.utt_id) + "\n")

        return self._stage(f"seed-{seed}/decode-first", {}, [fkey],
                           [p["nbest"] / f"{n}.jsonl" for n in NBEST_SETS], run_nbest)

    @staticmethod
    def _utts(c, name):
        if name == "supervised":
            return c.supervised
        if name == "audio_only":
            return c.audio_only
        return c.eval_sets[name]

    def pretrain(self, seed):
        wkey = self.worldgen(seed)
        m = self.cfg["mlm"]
        p = self.paths(seed)

        def run():
            c = self.corpora(seed)
            rows = []
            enc, _ = pretrain_mlm([u.tokens for u in c.text_only], m["preset"], m["steps"],
                                  derive_seed(seed, "mlm"), c.spec.vocab_size, m["batch_size"], m["lr"],
                                  log=lambda s, l, lr: rows.append((s, l, lr)))
            save_text_encoder(p["ptb"], enc, m["preset"], derive_seed(seed, "mlm"))
            _write_csv(self.seed_dir(seed) / "mlm_log.csv", ("step", "loss", "lr"), rows)

        return self._stage(f"seed-{seed}/pretrain-mlm", m, [wkey], [p["ptb"]], run)

    def train_lm(self, seed):
        wkey = self.worldgen(seed)
        m = {k: v for k, v in self.cfg["lm"].items() if k != "weight"}
        p = self.paths(seed)

        def run():
            c = self.corpora(seed)
            texts = [u.tokens for u in c.text_only] + [u.tokens for u in c.supervised]
            lm, _ = train_lm(texts, m["steps"], derive_seed(seed, "lm"), c.spec.vocab_size,
                             m["preset"], m["batch_size"], m["lr"])
            save_lm(p["lm"], lm, m["preset"], derive_seed(seed, "lm"))

        return self._stage(f"seed-{seed}/train-lm", m, [wkey], [p["lm"]], run)

    def load_nbest(self, seed, name):
        path = self.paths(seed)["nbest"] / f"{name}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"n-best file not found: {path}")
        out = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                out.append(NBestList.from_json(line)[1])
        return out

    def pools(self, seed, encs_for):
        c = self.corpora(seed)

        def pool(name, us):
            encs = encs_for(name, us)
            return SourcePool([u.tokens for u in us], [u.domain for u in us], [u.utt_id for u in us],
                              encs, self.load_nbest(seed, name), [u.frames for u in us])

        return {"supervised": pool("supervised", c.supervised),
                "semisup": pool("audio_only", c.audio_only),
                "tts": SourcePool([u.tokens for u in c.text_only], [u.domain for u in c.text_only],
                                  [u.utt_id for u in c.text_only])}

    def encoder_outputs(self, seed):
        """Cached non-causal encodings from the frozen first pass, per corpus name."""
        p = self.paths(seed)
        enc, fc = load_first_pass(p["first_pass"])
        cache = {}

        def encs_for(name, us):
            if name not in cache:
                cache[name] = _encode_only(enc, us)
            return cache[name]

        return encs_for

    def train_delib(self, seed, variant):
        dcfg = delib_config(self.cfg, variant, seed)
        fkey = self.train_first(seed)
        inputs = [fkey, self.cfg["teacher"]]
        if dcfg.text_encoder_init == "ptb_checkpoint":
            if self.cfg["mlm"]["preset"] != dcfg.preset:
                raise ConfigError(f"variants.{variant}.preset: pretrained encoder is "
                                  f"{self.cfg['mlm']['preset']!r}, variant asks for {dcfg.preset!r}")
            inputs.append(self.pretrain(seed))
        p = self.paths(seed)
        vdir = p["delib"] / variant

        def run():
            c = self.corpora(seed)
            pools = self.pools(seed, self.encoder_outputs(seed))
            model, metrics = train_deliberation(dcfg, pools, p["first_pass"], c.spec.vocab_size,
                                                p["ptb"] if dcfg.text_encoder_init == "ptb_checkpoint" else None)
            vdir.mkdir(parents=True, exist_ok=True)
            save_deliberation(vdir / "model.ckpt", model, dcfg,
                              {"first_pass_sha256": checkpoint.file_hash(p["first_pass"])})
            _write_csv(vdir / "metrics.csv", ("step", "loss", "source", "lr"), metrics)
            (vdir / "config.json").write_text(json.dumps(dcfg.to_dict(), sort_keys=True, indent=1) + "\n")

        return self._stage(f"seed-{seed}/train-delib/{variant}", dcfg.to_dict(), inputs,
                           [vdir / "model.ckpt", vdir / "metrics.csv"], run)

    # evaluation ------------------------------------------------------------

    def _eval_inputs(self, seed, system):
        p = self.paths(seed)
        if not p["first_pass"].exists():
            raise FileNotFoundError(f"first-pass checkpoint not found: {p['first_pass']}")
        if system == "B2" and not p["lm"].exists():
            raise FileNotFoundError(f"LM checkpoint not found: {p['lm']}")
        if system not in BASELINES:
            ck = p["delib"] / system / "model.ckpt"
            if not ck.exists():
                raise FileNotFoundError(f"deliberation checkpoint not found: {ck}")

    def hypotheses(self, seed, system, set_name):
        """Best hypotheses (content-id tuples) of ``system`` on an evaluation set."""
        self._eval_inputs(seed, system)
        nbests = self.load_nbest(seed, set_name)
        p = self.paths(seed)
        if system == "B0":
            return [nb[0][0] for nb in nbests]
        if system == "B2":
            return lm_rescore_many(nbests, load_lm(p["lm"]), self.cfg["lm"]["weight"])
        model, _ = load_deliberation(p["delib"] / system / "model.ckpt")
        enc, _ = load_first_pass(p["first_pass"])
        encs = _encode_only(enc, self.corpora_eval(seed).eval_sets[set_name])
        if self.cfg["eval"]["mode"] == "redecode":
            e = self.cfg["eval"]
            return [tuple(delib_redecode(x, nb, model, e["beam_width"], e["max_len"]).content)
                    for x, nb in zip(encs, nbests)]
        return rescore_many(model, encs, nbests)

    def corpora_eval(self, seed):
        if seed in self._corpora:
            return self._corpora[seed]
        key = ("eval", seed)
        if key not in self._corpora:
            root = self.seed_dir(seed) / "corpus"
            if not (root / "world.json").exists():
                raise FileNotFoundError(f"corpus not found: {root}")
            self._corpora[key] = load_corpora(root, eval_only=True)
        return self._corpora[key]

    def evaluate(self, seed, system):
        """WER of one system on the configured sets; memoized as eval/<system>.json."""
        self._eval_inputs(seed, system)
        p = self.paths(seed)
        out = p["eval"] / f"{system}.json"
        deps = {"nbest": _file_key(p["nbest"] / "head_test.jsonl"), "eval": self.cfg["eval"]}
        if system == "B2":
            deps["lm"] = _file_key(p["lm"])
            deps["weight"] = self.cfg["lm"]["weight"]
        elif system != "B0":
            deps["model"] = _file_key(p["delib"] / system / "model.ckpt")

        def run():
            c = self.corpora_eval(seed)
            res = {}
            for s in self.cfg["eval"]["sets"]:
                hyps = self.hypotheses(seed, system, s)
                us = c.eval_sets[s]
                words = [detokenize(h, c.vocab) for h in hyps]
                rep = wer([u.text for u in us], words)
                res[s] = {"wer": 100.0 * rep.wer, "substitutions": rep.substitutions,
                          "insertions": rep.insertions, "deletions": rep.deletions,
                          "ref_words": rep.ref_words,
                          "hyps": {u.utt_id: w for u, w in zip(us, words)}}
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(res, sort_keys=True, indent=1) + "\n", encoding="utf-8")

        self._stage(f"seed-{seed}/eval/{system}", deps, [], [out], run)
        return json.loads(out.read_text(encoding="utf-8"))

    def sxs(self, seed, system_a, system_b, set_name):
        ra, rb = self.evaluate(seed, system_a), self.evaluate(seed, system_b)
        if set_name not in ra:
            raise ConfigError(f"ablate.sxs: set {set_name!r} is not among eval.sets")
        c = self.corpora_eval(seed)
        us = c.eval_sets[set_name]
        return sxs_eval([u.text for u in us], [ra[set_name]["hyps"][u.utt_id] for u in us],
                        [rb[set_name]["hyps"][u.utt_id] for u in us])

    # whole plans -------------------------------------------------------------

    def prepare(self, seed, systems):
        """Train everything the listed systems need, in dependency order."""
        self.train_first(seed)
        if "B2" in systems:
            self.train_lm(seed)
        variants = [s for s in systems if s not in BASELINES]
        if any(delib_config(self.cfg, v, seed).text_encoder_init == "ptb_checkpoint" for v in variants):
            self.pretrain(seed)
        pending = [v for v in variants if not self._variant_done(seed, v)]
        if self.jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                list(pool.map(_train_variant_job,
                              [(self.cfg, str(self.out), seed, v) for v in pending]))
        for v in variants:
            self.train_delib(seed, v)

    def _variant_done(self, seed, variant):
        entry = self._manifest()["stages"].get(f"seed-{seed}/train-delib/{variant}")
        return entry is not None and (self.paths(seed)["delib"] / variant / "model.ckpt").exists()

    def seeds(self):
        return list(self.cfg["ablate"]["seeds"]) or [self.cfg["seed"]]

    def ablate(self, systems=None):
        systems = systems or self.cfg["ablate"]["systems"]
        results = {}
        for seed in self.seeds():
            self.prepare(seed, systems)
            for s in systems:
                results[(seed, s)] = {k: v["wer"] for k, v in self.evaluate(seed, s).items()}
        sxs = None
        if self.cfg["ablate"]["sxs"]:
            a, b, set_name = self.cfg["ablate"]["sxs"]
            if a in systems and b in systems:
                sxs = self.sxs(self.seeds()[0], a, b, set_name)
                (self.out / "sxs.json").write_text(
                    json.dumps({"system_a": a, "system_b": b, "set": set_name, "seed": self.seeds()[0],
                                **sxs.to_dict()}, sort_keys=True, indent=1) + "\n")
        self.write_report(results, systems, sxs)
        return results

    def describe(self, system):
        if system in BASELINES:
            return BASELINES[system]
        return self.cfg["variants"][system].get("description", "")

    def write_report(self, results, systems, sxs=None):
        seeds = sorted({s for s, _ in results})
        rows = []
        for seed in seeds:
            for s in systems:
                if (seed, s) in results:
                    rows.append(ResultRow(s, self.describe(s), str(seed), results[(seed, s)]))
        if len(seeds) > 1:
            for row in median_rows(results, systems, seeds):
                row.description = self.describe(row.system)
                rows.append(row)
        md, text = emit_report(rows, sxs)
        (self.out / "report.md").write_text(md, encoding="utf-8")
        (self.out / "report.csv").write_text(text, encoding="utf-8")
        return rows


def median_rows(results, systems, seeds):
    rows = []
    for s in systems:
        sets = sorted({k for seed in seeds for k in results.get((seed, s), {})})
        med = {k: statistics.median(results[(seed, s)][k] for seed in seeds if (seed, s) in results)
               for k in sets}
        rows.append(ResultRow(s, "", "median", med))
    return rows


def collect_results(out_dir, cfg):
    """Read evaluated systems back from an output directory."""
    out = Path(out_dir)
    results = {}
    for seed_dir in sorted(out.glob("seed-*")):
        seed = int(seed_dir.name.split("-", 1)[1])
        for f in sorted((seed_dir / "eval").glob("*.json")):
            data = json.loads(f.read_text(encoding="utf-8"))
            results[(seed, f.stem)] = {k: v["wer"] for k, v in data.items()}
    return results


def _train_variant_job(args):
    cfg, out, seed, variant = args
    Experiment(cfg, out).train_delib(seed, variant)


def _encode_only(encoder, utterances, chunk=64):
    from . import tensor as T
    from .data import pad_frames

    order = sorted(range(len(utterances)), key=lambda i: (utterances[i].frames.shape[0], i))
    out = [None] * len(utterances)
    for s in range(0, len(order), chunk):
        ids = order[s:s + chunk]
        feats, lengths = pad_frames([utterances[i].frames for i in ids])
        with T.no_grad():
            _, e = encoder.encode(feats, lengths)
        for j, i in enumerate(ids):
            out[i] = e.data[j, :int(lengths[j])].copy()
    return out


def _file_key(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"required artifact not found: {path}")
    return checkpoint.file_hash(path)


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in r])
