"""Command line entry point for the experiment lifecycle."""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .evaluation import delib_redecode
from .experiment import BASELINES, EVAL_SETS, Experiment, build_config, collect_results, _encode_only
from .firstpass import load_first_pass
from .text import ConfigError, detokenize
from .training import MissingCorpusError, load_deliberation

USER_ERROR = 1
INTERNAL_ERROR = 2

COMMANDS = ("worldgen", "pretrain-mlm", "train-first", "train-delib", "decode", "rescore",
            "eval", "sxs", "ablate", "report")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. delib.steps=500 (repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="parallel processes for variants")
    common.add_argument("--quiet", action="store_true")

    parser = Parser(prog="deliberation", description="Deliberation rescoring experiments on a synthetic world.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True
    sub.add_parser("worldgen", parents=[common], help="generate corpora and evaluation sets")
    sub.add_parser("pretrain-mlm", parents=[common], help="masked-LM pretraining of the text encoder")
    sub.add_parser("train-first", parents=[common], help="train the CTC first pass and dump n-best lists")
    p = sub.add_parser("train-delib", parents=[common], help="train deliberation variants")
    p.add_argument("--variant", action="append", help="variant name (default: all in ablate.systems)")
    p = sub.add_parser("decode", parents=[common], help="first-pass or deliberation decoding of eval sets")
    p.add_argument("--variant", help="deliberation variant to re-decode with (default: first pass)")
    p = sub.add_parser("rescore", parents=[common], help="rescore first-pass n-best lists")
    p.add_argument("--variant", help="deliberation variant (use B2 for the LM baseline)", required=True)
    p = sub.add_parser("eval", parents=[common], help="WER of trained systems")
    p.add_argument("--system", action="append", help="system name (default: ablate.systems)")
    p = sub.add_parser("sxs", parents=[common], help="side-by-side comparison of two systems")
    p.add_argument("--a", default=None, help="system A (default: ablate.sxs)")
    p.add_argument("--b", default=None, help="system B")
    p.add_argument("--eval-set", default=None, choices=EVAL_SETS)
    sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation matrix")
    sub.add_parser("report", parents=[common], help="re-render report.md/report.csv from results")
    return parser


def _load_config(args):
    file_cfg = None
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        try:
            file_cfg = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    return build_config(file_cfg, args.overrides, args.seed)


def _write_lines(path, lines):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = _load_config(args)
    log = (lambda m: None) if args.quiet else (lambda m: print(m, file=sys.stderr, flush=True))
    exp = Experiment(cfg, args.out, log=log, jobs=args.jobs)
    seed = cfg["seed"]
    cmd = args.command

    if cmd == "worldgen":
        exp.worldgen(seed)
        print(exp.paths(seed)["corpus"])
    elif cmd == "pretrain-mlm":
        exp.pretrain(seed)
        print(exp.paths(seed)["ptb"])
    elif cmd == "train-first":
        exp.train_first(seed)
        print(exp.paths(seed)["first_pass"])
    elif cmd == "train-delib":
        names = args.variant or [s for s in cfg["ablate"]["systems"] if s not in BASELINES]
        for v in names:
            if v not in cfg["variants"]:
                raise ConfigError(f"variants.{v}: no such variant")
        exp.prepare(seed, names)
        for v in names:
            print(exp.paths(seed)["delib"] / v / "model.ckpt")
    elif cmd == "decode":
        _decode(exp, seed, args.variant)
    elif cmd == "rescore":
        _rescore(exp, seed, args.variant)
    elif cmd == "eval":
        systems = args.system or cfg["ablate"]["systems"]
        results = {}
        for s in systems:
            if s not in BASELINES and s not in cfg["variants"]:
                raise ConfigError(f"eval: unknown system {s!r}")
            results[(seed, s)] = {k: v["wer"] for k, v in exp.evaluate(seed, s).items()}
        exp.write_report(results, systems)
        print(args.out / "report.md")
    elif cmd == "sxs":
        a, b, set_name = cfg["ablate"]["sxs"] or ["E3", "B2", "head_test"]
        a, b = args.a or a, args.b or b
        set_name = args.eval_set or set_name
        res = exp.sxs(seed, a, b, set_name)
        path = args.out / "sxs.json"
        path.write_text(json.dumps({"system_a": a, "system_b": b, "set": set_name, "seed": seed,
                                    **res.to_dict()}, sort_keys=True, indent=1) + "\n")
        print(path)
    elif cmd == "ablate":
        exp.ablate()
        print(args.out / "report.csv")
    elif cmd == "report":
        results = collect_results(args.out, cfg)
        if not results:
            raise FileNotFoundError(f"no evaluation results under {args.out}")
        systems = [s for s in cfg["ablate"]["systems"] if any(k[1] == s for k in results)]
        systems += sorted({k[1] for k in results} - set(systems))
        exp.write_report(results, systems)
        print(args.out / "report.md")
    return 0


def _decode(exp, seed, variant):
    p = exp.paths(seed)
    if variant is None:
        # first-pass n-best dumps are written when the first pass is trained
        for s in exp.cfg["eval"]["sets"]:
            exp.load_nbest(seed, s)
            print(p["nbest"] / f"{s}.jsonl")
        return
    exp._eval_inputs(seed, variant)
    model, _ = load_deliberation(p["delib"] / variant / "model.ckpt")
    enc, _ = load_first_pass(p["first_pass"])
    c = exp.corpora_eval(seed)
    e_cfg = exp.cfg["eval"]
    for s in e_cfg["sets"]:
        us = c.eval_sets[s]
        encs = _encode_only(enc, us)
        nbests = exp.load_nbest(seed, s)
        lines = []
        for u, x, nb in zip(us, encs, nbests):
            seq = delib_redecode(x, nb, model, e_cfg["beam_width"], e_cfg["max_len"])
            lines.append(json.dumps({"utt_id": u.utt_id, "hyp": detokenize(seq, c.vocab)}, sort_keys=True))
        out = exp.seed_dir(seed) / "decode" / f"{variant}_{s}.jsonl"
        _write_lines(out, lines)
        print(out)


def _rescore(exp, seed, system):
    if system == "B0":
        raise ConfigError("rescore: B0 is the first pass itself; choose a variant or B2")
    if system not in BASELINES and system not in exp.cfg["variants"]:
        raise ConfigError(f"rescore: unknown system {system!r}")
    c = exp.corpora_eval(seed)
    for s in exp.cfg["eval"]["sets"]:
        hyps = exp.hypotheses(seed, system, s) if system == "B2" else _rescored(exp, seed, system, s)
        lines = [json.dumps({"utt_id": u.utt_id, "hyp": detokenize(h, c.vocab)}, sort_keys=True)
                 for u, h in zip(c.eval_sets[s], hyps)]
        out = exp.seed_dir(seed) / "rescore" / f"{system}_{s}.jsonl"
        _write_lines(out, lines)
        print(out)


def _rescored(exp, seed, system, set_name):
    mode = exp.cfg["eval"]["mode"]
    exp.cfg["eval"]["mode"] = "rescore"
    try:
        return exp.hypotheses(seed, system, set_name)
    finally:
        exp.cfg["eval"]["mode"] = mode


def main(argv=None):
    try:
        return run(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USER_ERROR
    except (ConfigError, FileNotFoundError, MissingCorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USER_ERROR
    except KeyboardInterrupt:
        return INTERNAL_ERROR
    except Exception:  # noqa: BLE001 - report anything else as an internal failure
        traceback.print_exc()
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
