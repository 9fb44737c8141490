"""Command-line entry point: ``lencap {gen-data,train,decode,eval,bench}``.

Exit codes: 0 success, 1 usage/config/input-file error, 2 runtime or
numeric error. Human-readable tables go to stdout; machine-readable
artifacts go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import CORPUS_FORMAT, CORPUS_VERSION, CorpusFormatError, generate_corpus, load_corpus, save_corpus
from .levels import PlanError, parse_plan
from .model import CHECKPOINT_FORMAT, CHECKPOINT_VERSION, CheckpointError, load_checkpoint
from .tensor import NonFiniteError
from .training import ConfigError, TrainConfig, train

log = logging.getLogger("lencap")

FORMATS = (f"corpus: {CORPUS_FORMAT} v{CORPUS_VERSION} (JSON lines + <stem>.vocab.txt); "
           f"checkpoint: {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} (JSON header line + little-endian float32 blobs)")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{path}: no such file")
    return p


def _load_corpus(path: str):
    p = _existing(path)
    try:
        return load_corpus(p)
    except CorpusFormatError as exc:
        raise UsageError(str(exc)) from None


def _load_ckpt(path: str, vocab=None):
    p = _existing(path)
    try:
        return load_checkpoint(p, vocab=vocab)
    except (CheckpointError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    plan = parse_plan(args.plan)
    corpus = generate_corpus(args.seed, args.scenes, plan)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    refs = sum(len(r) for s in corpus.scenes for r in s.references.values())
    print(f"wrote {len(corpus)} scenes, {refs} references to {out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        cfg = TrainConfig.load(_existing(args.config))
    else:
        cfg = TrainConfig()
    if args.objective:
        cfg.objective = "teacher_forcing" if args.objective == "ar" else "masked"
    if args.plan:
        cfg.plan = args.plan
    if args.iterations:
        cfg.iterations = args.iterations
    cfg.validate()
    corpus = _load_corpus(args.corpus)
    res = train(cfg, corpus, out_dir=args.out)
    print(f"trained {cfg.objective} model for {cfg.iterations} iterations; "
          f"final loss {res.losses[-1]:.4f}; checkpoint {res.checkpoint}")
    return 0


def cmd_decode(args) -> int:
    from .decoding import DecodeConfig, decode_ar_batch, decode_nar_batch, write_trace

    corpus = _load_corpus(args.corpus)
    params, plan, header = _load_ckpt(args.ckpt, corpus.vocab)
    if not 1 <= args.level <= plan.k:
        raise UsageError(f"--level {args.level}: checkpoint has levels 1..{plan.k}")
    scenes = corpus.scenes[:args.limit] if args.limit else corpus.scenes
    if header["objective"] == "teacher_forcing":
        decoded = decode_ar_batch(params, scenes, args.level, plan)
    else:
        cfg = DecodeConfig.for_level(args.level, plan, steps=args.steps, gamma=args.gamma,
                                     global_update=not args.no_global_update, eos_decay=not args.no_eos_decay)
        decoded = []
        for i in range(0, len(scenes), 50):
            decoded += decode_nar_batch(params, scenes[i:i + 50], cfg, plan)
    with Path(args.out).open("w") as fh:
        for i, d in enumerate(decoded):
            fh.write(json.dumps({"scene": i, "level": d.level, "tokens": d.caption, "length": d.length,
                                 "passes": d.passes, "text": corpus.vocab.decode(d.caption)}) + "\n")
    if args.trace_out:
        write_trace(args.trace_out, decoded, corpus.vocab)
    lo, hi = plan.bounds(args.level)
    inside = sum(lo <= d.length <= hi for d in decoded)
    print(f"decoded {len(decoded)} scenes at level {args.level} [{lo},{hi}]: "
          f"{inside}/{len(decoded)} in range -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, format_table, write_reports

    corpus = _load_corpus(args.corpus)
    eval_plan = parse_plan(args.plan)
    reports = []
    for path in args.ckpt:
        params, plan, header = _load_ckpt(path, corpus.vocab)
        reports.append(evaluate(params, plan, header["objective"], corpus, eval_plan,
                                name=Path(path).parent.name or Path(path).name, threads=args.threads))
    print(format_table(reports, eval_plan))
    if args.report_out:
        write_reports(args.report_out, reports, eval_plan)
    return 0


def cmd_bench(args) -> int:
    from .bench import format_bench, run_bench, write_bench

    corpus = _load_corpus(args.corpus)
    params, plan, header = _load_ckpt(args.ckpt, corpus.vocab)
    if header["objective"] != "masked":
        raise UsageError(f"{args.ckpt}: --ckpt must be a masked (NAR) checkpoint")
    ar = None
    if args.ar_ckpt:
        ar_params, ar_plan, _ = _load_ckpt(args.ar_ckpt, corpus.vocab)
        ar = (ar_params, ar_plan)
    level = args.level or plan.k
    try:
        steps = [int(s) for s in args.steps_list.split(",")]
    except ValueError:
        raise UsageError(f"--steps-list {args.steps_list!r}: expected comma-separated integers") from None
    rows = run_bench(params, plan, corpus.scenes[:args.scenes], level, steps, args.reps, ar=ar,
                     threads=args.threads)
    print(format_bench(rows, level))
    if args.report_out:
        write_bench(args.report_out, rows, level)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lencap", description="Length-controllable caption generation toolkit.",
                epilog=f"File formats: {FORMATS}")
    p.add_argument("--version", action="version", version=f"lencap {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus",
                       description=f"Write a synthetic corpus ({CORPUS_FORMAT} v{CORPUS_VERSION}) "
                                   "and its sidecar vocabulary file <stem>.vocab.txt.")
    g.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    g.add_argument("--scenes", type=int, default=1000, help="number of scenes (default: 1000)")
    g.add_argument("--plan", default="4-level",
                   help="level plan for the references: 4-level, 5-level, single, or '1-9,10-14,...' "
                        "(default: 4-level)")
    g.add_argument("--out", required=True, help="corpus path, e.g. data/train.jsonl")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a NAR (masked) or AR (teacher forcing) model",
                       description="Train a model. Reads a corpus and an optional JSON config whose keys are "
                                   "the TrainConfig fields (unknown keys are errors). Writes <out>/model.bin "
                                   f"({CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}), periodic ckpt-<iter>.bin and "
                                   "loss.log (iteration, loss, lr).")
    t.add_argument("--config", help="JSON training config (default: built-in defaults)")
    t.add_argument("--corpus", required=True, help="training corpus")
    t.add_argument("--objective", choices=["masked", "ar"], help="override the config objective")
    t.add_argument("--plan", help="override the config level plan (e.g. single)")
    t.add_argument("--iterations", type=int, help="override the config iteration count")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode captions for every scene of a corpus",
                       description="Decode a corpus at one level. Writes JSON lines (scene, level, tokens, "
                                   "length, passes, text); --trace-out writes lencap-trace v1 step records.")
    d.add_argument("--ckpt", required=True, help="checkpoint file")
    d.add_argument("--corpus", required=True, help="corpus to decode")
    d.add_argument("--level", type=int, default=1, help="commanded length level (default: 1)")
    d.add_argument("--steps", type=int, help="refine steps T (default: 10/15/20/25 for 4-level, else L_high)")
    d.add_argument("--gamma", type=float, help="EOS decay factor (default: 0.88 lvl 2, 0.95 lvl 3, else 1)")
    d.add_argument("--no-global-update", action="store_true", help="update confidences of masked slots only")
    d.add_argument("--no-eos-decay", action="store_true", help="disable EOS decay")
    d.add_argument("--limit", type=int, default=0, help="decode only the first N scenes")
    d.add_argument("--out", default="decodes.jsonl", help="output file (default: decodes.jsonl)")
    d.add_argument("--trace-out", help="write per-step refinement traces here")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="compare checkpoints on a held-out corpus",
                       description="Control precision, BLEU@1-4, Div-1/2 and length histograms for each "
                                   "checkpoint. Writes a lencap-eval v1 JSON report.")
    e.add_argument("--ckpt", nargs="+", required=True, help="one or more checkpoints")
    e.add_argument("--corpus", required=True, help="held-out corpus")
    e.add_argument("--plan", default="4-level", help="plan used to bucket lengths (default: 4-level)")
    e.add_argument("--report-out", help="JSON report path")
    e.add_argument("--threads", type=int, default=1, help="decode levels in parallel (default: 1)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="forward-pass and latency benchmark",
                       description="Pass counts and wall-clock per decode for several refine-step budgets, "
                                   "with an optional AR baseline. Writes a lencap-bench v1 JSON report.")
    b.add_argument("--ckpt", required=True, help="masked (NAR) checkpoint")
    b.add_argument("--ar-ckpt", help="teacher-forcing (AR) checkpoint for the baseline row")
    b.add_argument("--corpus", required=True, help="corpus supplying the workload")
    b.add_argument("--steps-list", default="10,12,15,20,25", help="refine budgets (default: 10,12,15,20,25)")
    b.add_argument("--reps", type=int, default=3, help="timed repetitions per scene (default: 3)")
    b.add_argument("--level", type=int, help="commanded level (default: the longest)")
    b.add_argument("--scenes", type=int, default=20, help="workload size (default: 20)")
    b.add_argument("--threads", type=int, default=1, help=">1 also reports threaded throughput")
    b.add_argument("--report-out", help="JSON report path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for line in exc.problems:
            print(f"config error: {line}", file=sys.stderr)
        return 1
    except (UsageError, PlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
