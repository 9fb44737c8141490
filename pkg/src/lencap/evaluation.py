"""Decode a held-out corpus with one or more checkpoints and summarise it.

Multi-level models are commanded at every level, which gives one caption
per (image, level). A single-level model has only one control value, so
its per-image caption set comes from decoding with each refine-step
budget of the 4-level setting instead; the diversity numbers compare
the two sets directly.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import Corpus, Scene, caption_length
from .decoding import LEVEL_STEPS, DecodeConfig, Decoded, decode_ar_batch, decode_nar_batch
from .levels import LengthLevelPlan
from .metrics import control_precision, corpus_bleu, distinct_fraction, length_histogram, mean_div_n
from .model import ModelParams, load_checkpoint

REPORT_FORMAT = "lencap-eval"
REPORT_VERSION = 1
DECODE_BATCH = 50


@dataclass
class EvalReport:
    name: str
    objective: str
    plan: list
    control_precision: dict[int, float]
    bleu: dict[int, list[float]]  # level -> [B@1, B@2, B@3, B@4]
    mean_length: dict[int, float]
    div1: float
    div2: float
    distinct: float
    length_histogram: dict[int, int]
    num_decodes: int
    captions: dict[int, list[list[int]]] = field(default_factory=dict, repr=False)

    def to_dict(self, with_captions: bool = False) -> dict:
        d = asdict(self)
        if not with_captions:
            d.pop("captions")
        return d


def references_for(scene: Scene, plan: LengthLevelPlan, level: int) -> list[list[int]]:
    """Reference captions (without EOS) whose length fits ``level``; all of them if none fit."""
    refs = [r[:caption_length(r)] for rs in scene.references.values() for r in rs]
    fitting = [r for r in refs if plan.contains(level, len(r))]
    return fitting or refs


def _chunks(items, n):
    for i in range(0, len(items), n):
        yield items[i:i + n]


def decode_corpus(params: ModelParams, plan: LengthLevelPlan, objective: str, scenes: list[Scene],
                  level: int, steps: int | None = None, gamma: float | None = None,
                  global_update: bool = True, eos_decay: bool = True) -> list[Decoded]:
    out: list[Decoded] = []
    for chunk in _chunks(scenes, DECODE_BATCH):
        if objective == "teacher_forcing":
            out += decode_ar_batch(params, chunk, level, plan)
        else:
            cfg = DecodeConfig.for_level(level, plan, steps=steps, gamma=gamma,
                                         global_update=global_update, eos_decay=eos_decay)
            out += decode_nar_batch(params, chunk, cfg, plan)
    return out


def _variants(plan: LengthLevelPlan, objective: str) -> list[tuple[int, int | None]]:
    """(level, steps) pairs that make up one image's caption set."""
    if plan.k > 1 or objective == "teacher_forcing":
        return [(lvl, None) for lvl in range(1, plan.k + 1)]
    return [(1, t) for t in sorted(LEVEL_STEPS.values())]


def evaluate(params: ModelParams, plan: LengthLevelPlan, objective: str, corpus: Corpus,
             eval_plan: LengthLevelPlan, name: str = "model", threads: int = 1) -> EvalReport:
    scenes = corpus.scenes
    variants = _variants(plan, objective)

    def run(v):
        lvl, steps = v
        return decode_corpus(params, plan, objective, scenes, lvl, steps=steps)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, variants))
    else:
        results = [run(v) for v in variants]

    precision_pairs = []
    bleu_scores: dict[int, list[float]] = {}
    mean_len: dict[int, float] = {}
    by_level: dict[int, list[Decoded]] = {}
    for (lvl, _), decs in zip(variants, results):
        by_level.setdefault(lvl, []).extend(decs)
    for lvl, decs in sorted(by_level.items()):
        precision_pairs += [(lvl, d.length) for d in decs]
        cands = [d.caption for d in decs]
        refs = [references_for(s, plan, lvl) for s in scenes] * (len(decs) // len(scenes))
        bleu_scores[lvl] = [corpus_bleu(cands, refs, max_n=n) for n in range(1, 5)]
        mean_len[lvl] = sum(d.length for d in decs) / len(decs)

    groups = [[decs[i].caption for decs in results] for i in range(len(scenes))]
    all_lengths = [d.length for decs in results for d in decs]
    return EvalReport(
        name=name,
        objective=objective,
        plan=plan.to_list(),
        control_precision=control_precision(precision_pairs, plan),
        bleu=bleu_scores,
        mean_length=mean_len,
        div1=mean_div_n(groups, 1),
        div2=mean_div_n(groups, 2),
        distinct=distinct_fraction(groups),
        length_histogram=length_histogram(all_lengths, eval_plan),
        num_decodes=len(all_lengths),
        captions={i: g for i, g in enumerate(groups)},
    )


def evaluate_checkpoint(path, corpus: Corpus, eval_plan: LengthLevelPlan, threads: int = 1) -> EvalReport:
    params, plan, header = load_checkpoint(path, vocab=corpus.vocab)
    return evaluate(params, plan, header["objective"], corpus, eval_plan, name=Path(path).name, threads=threads)


def write_reports(path, reports: list[EvalReport], eval_plan: LengthLevelPlan) -> None:
    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "eval_plan": eval_plan.to_list(),
        "models": [r.to_dict() for r in reports],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def format_table(reports: list[EvalReport], eval_plan: LengthLevelPlan) -> str:
    lines = []
    header = f"{'model':<24} {'lvl':>3} {'range':>7} {'prec':>6} {'len':>6} {'B@1':>6} {'B@4':>6}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        for lvl, p in r.control_precision.items():
            lo, hi = r.plan[lvl - 1]
            b = r.bleu[lvl]
            lines.append(f"{r.name:<24} {lvl:>3} {f'{lo}-{hi}':>7} {p:>6.3f} {r.mean_length[lvl]:>6.2f} "
                         f"{b[0]:>6.3f} {b[3]:>6.3f}")
    lines.append("")
    bucket_names = [f"{lo}-{hi}" for lo, hi in eval_plan.levels]
    header = f"{'model':<24} {'Div-1':>6} {'Div-2':>6} {'dist':>6}  " + " ".join(f"{b:>7}" for b in bucket_names)
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        n = max(1, r.num_decodes)
        shares = " ".join(f"{r.length_histogram[k] / n:>7.1%}" for k in range(1, eval_plan.k + 1))
        lines.append(f"{r.name:<24} {r.div1:>6.3f} {r.div2:>6.3f} {r.distinct:>6.3f}  {shares}")
    return "\n".join(lines)
