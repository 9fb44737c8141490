"""Brute-force reference implementations used to check the metrics.

Written independently of ``lencap.metrics``: n-grams are enumerated with
explicit index loops and counted with ``list.count``.
"""

import math


def grams(seq, n):
    out = []
    for i in range(len(seq)):
        if i + n <= len(seq):
            out.append(tuple(seq[j] for j in range(i, i + n)))
    return out


def modified_precision(cand, refs, n):
    cg = grams(cand, n)
    matched = 0
    for g in set(cg):
        best = 0
        for r in refs:
            best = max(best, grams(r, n).count(g))
        matched += min(cg.count(g), best)
    return matched, len(cg)


def closest_length(c, refs):
    best = None
    for r in refs:
        key = (abs(len(r) - c), len(r))
        if best is None or key < best:
            best = key
    return best[1]


def brute_bleu(cand, refs, max_n=4):
    if len(cand) == 0:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        m, t = modified_precision(cand, refs, n)
        if m == 0:
            return 0.0
        logs.append(math.log(m) - math.log(t))
    r = closest_length(len(cand), refs)
    bp = 1.0 if len(cand) > r else math.exp(1 - r / len(cand))
    return bp * math.exp(sum(logs) / max_n)


def brute_corpus_bleu(cands, refss, max_n=4):
    ms, ts = [0] * max_n, [0] * max_n
    c = r = 0
    for cand, refs in zip(cands, refss):
        c += len(cand)
        r += closest_length(len(cand), refs)
        for n in range(1, max_n + 1):
            m, t = modified_precision(cand, refs, n)
            ms[n - 1] += m
            ts[n - 1] += t
    if c == 0 or 0 in ms:
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(math.log(m / t) for m, t in zip(ms, ts)) / max_n)


def brute_div(captions, n):
    all_grams = []
    for c in captions:
        all_grams += grams(c, n)
    distinct = []
    for g in all_grams:
        if g not in distinct:
            distinct.append(g)
    return len(distinct) / len(all_grams)
