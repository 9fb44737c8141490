"""Control precision, n-gram diversity, BLEU and length histograms."""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

from .levels import LengthLevelPlan, assign_level


def control_precision(decodes: Iterable[tuple[int, int]], plan: LengthLevelPlan) -> dict[int, float]:
    """Per commanded level, the fraction of effective lengths inside its range.

    ``decodes`` holds ``(level, effective_length)`` pairs.
    """
    hit: Counter = Counter()
    total: Counter = Counter()
    for level, length in decodes:
        lo, hi = plan.bounds(level)
        total[level] += 1
        hit[level] += lo <= length <= hi
    return {lvl: hit[lvl] / total[lvl] for lvl in sorted(total)}


def ngrams(tokens: Sequence, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def div_n(captions: Sequence[Sequence], n: int) -> float:
    """Distinct n-grams over total n-grams across one set of captions."""
    if not captions:
        raise ValueError("div_n needs at least one caption")
    grams = [g for c in captions for g in ngrams(list(c), n)]
    if not grams:
        raise ValueError(f"every caption is shorter than {n}")
    return len(set(grams)) / len(grams)


def mean_div_n(groups: Iterable[Sequence[Sequence]], n: int) -> float:
    """``div_n`` per image (one caption set each), averaged over images.

    Images whose captions are all shorter than ``n`` are skipped.
    """
    vals = []
    for caps in groups:
        try:
            vals.append(div_n(caps, n))
        except ValueError:
            continue
    if not vals:
        raise ValueError("no image has an n-gram to score")
    return sum(vals) / len(vals)


def distinct_fraction(groups: Iterable[Sequence[Sequence]]) -> float:
    """Mean over images of (distinct captions / captions)."""
    vals = [len({tuple(c) for c in caps}) / len(caps) for caps in groups if caps]
    return sum(vals) / len(vals)


def _clipped_counts(candidate: Sequence, references: Sequence[Sequence], n: int) -> tuple[int, int]:
    cand = Counter(ngrams(list(candidate), n))
    if not cand:
        return 0, 0
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in Counter(ngrams(list(ref), n)).items():
            if c > max_ref[g]:
                max_ref[g] = c
    matched = sum(min(c, max_ref[g]) for g, c in cand.items())
    return matched, sum(cand.values())


def _closest_ref_length(c: int, references: Sequence[Sequence]) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def _combine(matched: list[int], totals: list[int], c: int, r: int) -> float:
    if c == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, totals)) / len(matched)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu(candidate: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Sentence BLEU: clipped n-gram precisions, geometric mean, brevity penalty.

    No smoothing: a zero precision at any order gives 0.
    """
    if not references:
        raise ValueError("bleu needs at least one reference")
    if not candidate:
        return 0.0
    matched, totals = zip(*(_clipped_counts(candidate, references, n) for n in range(1, max_n + 1)))
    return _combine(list(matched), list(totals), len(candidate), _closest_ref_length(len(candidate), references))


def corpus_bleu(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]], max_n: int = 4) -> float:
    """Corpus BLEU: n-gram statistics and lengths pooled before combining."""
    if len(candidates) != len(references):
        raise ValueError("one reference set per candidate")
    matched = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("bleu needs at least one reference")
        c_len += len(cand)
        r_len += _closest_ref_length(len(cand), refs)
        for n in range(1, max_n + 1):
            m, t = _clipped_counts(cand, refs, n)
            matched[n - 1] += m
            totals[n - 1] += t
    return _combine(matched, totals, c_len, r_len)


def length_histogram(lengths: Iterable[int], plan: LengthLevelPlan) -> dict[int, int]:
    """Count effective lengths per level of ``plan``.

    Key ``0`` collects empty captions and lengths beyond the plan maximum,
    so the counts always sum to the number of decodes.
    """
    hist = {lvl: 0 for lvl in range(1, plan.k + 1)}
    hist[0] = 0
    for n in lengths:
        if 1 <= n <= plan.max_length:
            hist[assign_level(plan, n)] += 1
        else:
            hist[0] += 1
    return hist
