"""Forward-pass counts and wall-clock latency of the two decoders.

Pass counts are exact and machine independent; they are the primary
speedup measure. Wall-clock numbers depend on the host and are reported
alongside them.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Scene
from .decoding import DecodeConfig, Decoded, decode_ar_batch, decode_nar_batch
from .levels import LengthLevelPlan
from .model import ModelParams

Decoder = Callable[[Sequence[Scene]], list[Decoded]]

BENCH_FORMAT = "lencap-bench"
BENCH_VERSION = 1
DEFAULT_STEPS = (10, 12, 15, 20, 25)


def nar_decoder(params: ModelParams, plan: LengthLevelPlan, config: DecodeConfig) -> Decoder:
    return lambda scenes: decode_nar_batch(params, list(scenes), config, plan)


def ar_decoder(params: ModelParams, plan: LengthLevelPlan, level: int) -> Decoder:
    return lambda scenes: decode_ar_batch(params, list(scenes), level, plan)


def count_forward_passes(decoder: Decoder, workload: Sequence[Scene]) -> list[int]:
    """Per-decode forward-pass counts (each scene decoded on its own)."""
    return [decoder([s])[0].passes for s in workload]


def wallclock(decoder: Decoder, workload: Sequence[Scene], repetitions: int = 3, warmup: int = 1) -> dict:
    """Median and 90th-percentile seconds per single-scene decode."""
    for s in list(workload)[:warmup]:
        decoder([s])
    times = []
    for _ in range(repetitions):
        for s in workload:
            t0 = time.perf_counter()
            decoder([s])
            times.append(time.perf_counter() - t0)
    arr = np.asarray(times)
    return {"median": float(np.median(arr)), "p90": float(np.percentile(arr, 90)), "n": len(times)}


def throughput(decoder: Decoder, workload: Sequence[Scene], threads: int) -> float:
    """Decodes per second with ``threads`` workers sharing the parameters."""
    t0 = time.perf_counter()
    with ThreadPoolExecutor(threads) as ex:
        list(ex.map(lambda s: decoder([s]), workload))
    return len(workload) / (time.perf_counter() - t0)


@dataclass
class BenchRow:
    label: str
    steps: int | None
    passes_mean: float
    passes_max: int
    median_ms: float
    p90_ms: float
    pass_speedup: float = 1.0
    wall_speedup: float = 1.0
    throughput: float | None = None


def run_bench(params: ModelParams, plan: LengthLevelPlan, workload: Sequence[Scene], level: int,
              steps_list: Sequence[int] = DEFAULT_STEPS, repetitions: int = 3,
              ar: tuple[ModelParams, LengthLevelPlan] | None = None, threads: int = 1) -> list[BenchRow]:
    """Rows of refine-step budgets (plus the AR baseline), speedups relative to the largest budget."""
    rows = []
    for T in sorted(steps_list):
        cfg = DecodeConfig.for_level(level, plan, steps=T)
        dec = nar_decoder(params, plan, cfg)
        counts = count_forward_passes(dec, workload)
        wc = wallclock(dec, workload, repetitions)
        rows.append(BenchRow(f"{T} refine steps", T, float(np.mean(counts)), int(max(counts)),
                             wc["median"] * 1e3, wc["p90"] * 1e3,
                             throughput=throughput(dec, workload, threads) if threads > 1 else None))
    if ar is not None:
        ar_params, ar_plan = ar
        dec = ar_decoder(ar_params, ar_plan, min(level, ar_plan.k))
        counts = count_forward_passes(dec, workload)
        wc = wallclock(dec, workload, repetitions)
        rows.append(BenchRow("AR baseline", None, float(np.mean(counts)), int(max(counts)),
                             wc["median"] * 1e3, wc["p90"] * 1e3,
                             throughput=throughput(dec, workload, threads) if threads > 1 else None))
    ref = max((r for r in rows if r.steps is not None), key=lambda r: r.steps)
    for r in rows:
        r.pass_speedup = ref.passes_mean / r.passes_mean
        r.wall_speedup = ref.median_ms / r.median_ms
    return rows


def format_bench(rows: list[BenchRow], level: int) -> str:
    head = f"{'Lvl ' + str(level):<18} {'passes':>7} {'med ms':>8} {'p90 ms':>8} {'speedup':>8} {'wall x':>7}"
    if any(r.throughput for r in rows):
        head += f" {'dec/s':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        line = (f"{r.label:<18} {r.passes_mean:>7.2f} {r.median_ms:>8.2f} {r.p90_ms:>8.2f} "
                f"{'x' + format(r.pass_speedup, '.2f'):>8} {r.wall_speedup:>7.2f}")
        if r.throughput:
            line += f" {r.throughput:>7.1f}"
        lines.append(line)
    return "\n".join(lines)


def write_bench(path, rows: list[BenchRow], level: int) -> None:
    doc = {"format": BENCH_FORMAT, "version": BENCH_VERSION, "level": level, "rows": [asdict(r) for r in rows]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
