"""Mask-predict-update refinement and the greedy autoregressive baseline.

The NAR decoder keeps a fixed canvas of ``L_high`` slots for the
commanded level. Step 1 predicts the all-``[MASK]`` canvas; every later
step re-masks the least confident slots, re-predicts them in one forward
pass and refreshes the confidences. The number of forward passes is
bounded by the step budget ``T`` and does not depend on ``L_high``.

The AR decoder feeds ``[BOS]`` and appends one argmax token per forward
pass until ``[EOS]``, so it needs ``length + 1`` passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .data import BOS, EOS, MASK, Scene, caption_length, collate_regions
from .levels import LengthLevelPlan, plan_4_level
from .model import ModelParams, forward_ar, forward_nar

# refine-step budgets and EOS decay used with the 4-level plan
LEVEL_STEPS = {1: 10, 2: 15, 3: 20, 4: 25}
LEVEL_GAMMA = {2: 0.88, 3: 0.95}


def default_steps(level: int, plan: LengthLevelPlan) -> int:
    if plan == plan_4_level():
        return LEVEL_STEPS[level]
    return plan.high(level)


def default_gamma(level: int, plan: LengthLevelPlan) -> float:
    if plan == plan_4_level():
        return LEVEL_GAMMA.get(level, 1.0)
    return 1.0


@dataclass
class DecodeConfig:
    steps: int
    gamma: float = 1.0
    level: int = 1
    seed: int = 0
    global_update: bool = True
    eos_decay: bool = True
    early_stop: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    @classmethod
    def for_level(cls, level: int, plan: LengthLevelPlan, **overrides) -> "DecodeConfig":
        kw = {"steps": default_steps(level, plan), "gamma": default_gamma(level, plan), "level": level}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass
class CaptionState:
    tokens: np.ndarray  # [L_high] int
    confidences: np.ndarray  # [L_high] float in [0, 1]
    step: int = 1

    def __post_init__(self):
        if self.tokens.shape != self.confidences.shape:
            raise ValueError("tokens and confidences must share the canvas length")


@dataclass
class TraceStep:
    step: int
    masked: list[int]
    tokens: list[int]
    confidences: list[float]

    def to_dict(self) -> dict:
        return {"step": self.step, "masked": self.masked, "tokens": self.tokens, "confidences": self.confidences}


@dataclass
class Decoded:
    tokens: list[int]  # full canvas (NAR) or generated tokens incl. EOS (AR)
    caption: list[int]  # tokens before the first EOS
    passes: int
    level: int
    trace: list[TraceStep] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.caption)


def init_canvas(level: int, plan: LengthLevelPlan) -> CaptionState:
    high = plan.high(level)
    return CaptionState(np.full(high, MASK, dtype=np.int64), np.zeros(high, dtype=np.float64), step=1)


def num_masks(t: int, T: int, L_high: int) -> int:
    """``floor((T - t) / T * L_high)``, in exact integer arithmetic."""
    if not 1 <= t <= T:
        raise ValueError(f"step {t} outside 1..{T}")
    return (T - t) * L_high // T


def eos_decay_factors(gamma: float, L_low: int, L_high: int) -> np.ndarray:
    """Per-position multiplier for p([EOS]); positions are 1-based."""
    i = np.arange(1, L_high + 1)
    return np.where(i >= L_low, np.power(float(gamma), L_high - i), 1.0)


def apply_eos_decay(probs: np.ndarray, gamma: float, L_low: int, L_high: int) -> np.ndarray:
    """Scale p_i([EOS]) by ``gamma ** (L_high - i)`` for ``L_low <= i <= L_high``.

    Rows are not renormalised. ``probs`` is ``[..., L_high, V]``.
    """
    if probs.shape[-2] != L_high:
        raise ValueError(f"expected {L_high} positions, got {probs.shape[-2]}")
    out = np.array(probs, dtype=np.float64, copy=True)
    out[..., EOS] *= eos_decay_factors(gamma, L_low, L_high)
    return out


def _probs(logits: tc.Tensor) -> np.ndarray:
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def lowest_confidence(confidences: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` lowest confidences per row, ties to the lower index."""
    order = np.argsort(confidences, axis=-1, kind="stable")
    return order[..., :n]


class _NarBatch:
    """Shared state of a batch of same-level decodes."""

    def __init__(self, params: ModelParams, scenes: list[Scene], config: DecodeConfig, plan: LengthLevelPlan):
        self.params = params
        self.config = config
        self.low, self.high = plan.bounds(config.level)
        self.regions = collate_regions(scenes)
        B = len(scenes)
        canvas = init_canvas(config.level, plan)
        self.tokens = np.tile(canvas.tokens, (B, 1))
        self.conf = np.tile(canvas.confidences, (B, 1))
        self.levels = np.full(B, config.level)
        self.passes = 0
        self.step = 1
        self.traces: list[list[TraceStep]] = [[] for _ in range(B)]

    def predict(self):
        with tc.no_grad():
            logits = forward_nar(self.params, self.regions, self.tokens, self.levels)
        self.passes += 1
        p = _probs(logits)
        if self.config.eos_decay:
            p = apply_eos_decay(p, self.config.gamma, self.low, self.high)
        return p.argmax(axis=-1), p.max(axis=-1)

    def update(self, masked: np.ndarray):
        """``masked`` is a boolean ``[B, L_high]`` array of re-predicted slots."""
        best, maxp = self.predict()
        self.tokens = np.where(masked, best, self.tokens)
        if self.config.global_update:
            self.conf = np.where(masked, maxp, (self.conf + maxp) / 2.0)
        else:
            self.conf = np.where(masked, maxp, self.conf)
        for b, tr in enumerate(self.traces):
            tr.append(TraceStep(self.step, np.flatnonzero(masked[b]).tolist(),
                                self.tokens[b].tolist(), self.conf[b].tolist()))

    def refine(self) -> int:
        """One mask-predict-update round; returns the number of masks used."""
        self.step += 1
        n = num_masks(self.step, self.config.steps, self.high)
        masked = np.zeros_like(self.tokens, dtype=bool)
        if n:
            idx = lowest_confidence(self.conf, n)
            np.put_along_axis(masked, idx, True, axis=1)
            self.tokens = np.where(masked, MASK, self.tokens)
        self.update(masked)
        return n

    def results(self) -> list[Decoded]:
        out = []
        for b in range(len(self.traces)):
            toks = self.tokens[b].tolist()
            n = caption_length(toks)
            out.append(Decoded(toks, toks[:n], self.passes, self.config.level, self.traces[b]))
        return out


def refine_step(state: CaptionState, params: ModelParams, scene: Scene, config: DecodeConfig,
                plan: LengthLevelPlan) -> CaptionState:
    """Apply one mask-predict-update round (``state.step + 1``) to a single canvas."""
    if state.step < 1:
        raise ValueError("refine_step continues from a predicted canvas (step >= 1)")
    run = _NarBatch(params, [scene], config, plan)
    if state.tokens.shape[0] != run.high:
        raise ValueError("canvas length does not match the level's L_high")
    run.tokens = state.tokens[None].copy()
    run.conf = state.confidences[None].astype(np.float64)
    run.step = state.step
    run.refine()
    return CaptionState(run.tokens[0], run.conf[0], run.step)


def decode_nar_batch(params: ModelParams, scenes: list[Scene], config: DecodeConfig,
                     plan: LengthLevelPlan) -> list[Decoded]:
    """Decode every scene at ``config.level`` with at most ``config.steps`` passes."""
    if params.config.num_levels != plan.k:
        raise ValueError(f"checkpoint has {params.config.num_levels} levels, plan has {plan.k}")
    run = _NarBatch(params, scenes, config, plan)
    run.update(np.ones_like(run.tokens, dtype=bool))
    while run.step < config.steps:
        n = run.refine()
        # with no masks left the canvas can no longer change
        if n == 0 and config.early_stop:
            break
    return run.results()


def decode_nar(params: ModelParams, scene: Scene, config: DecodeConfig, plan: LengthLevelPlan) -> Decoded:
    return decode_nar_batch(params, [scene], config, plan)[0]


def decode_ar_batch(params: ModelParams, scenes: list[Scene], level: int, plan: LengthLevelPlan,
                    max_length: int | None = None) -> list[Decoded]:
    """Greedy decoding from ``[BOS]``; one token per forward pass.

    Generation stops at ``[EOS]``; a caption that reaches ``max_length``
    (the plan's global maximum by default) gets one more pass, and is
    truncated if that pass does not produce ``[EOS]`` either.
    """
    if params.config.num_levels != plan.k:
        raise ValueError(f"checkpoint has {params.config.num_levels} levels, plan has {plan.k}")
    plan.bounds(level)
    max_length = max_length or plan.max_length
    B = len(scenes)
    regions = collate_regions(scenes)
    levels = np.full(B, level)
    seq = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    passes = np.zeros(B, dtype=int)
    for _ in range(max_length + 1):
        with tc.no_grad():
            logits = forward_ar(params, regions, seq, levels)
        passes += ~done
        nxt = logits.data[:, -1].argmax(axis=-1)
        nxt = np.where(done, EOS, nxt)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for b in range(B):
        gen = seq[b, 1:].tolist()
        n = min(caption_length(gen), max_length)
        out.append(Decoded(gen[:n + 1], gen[:n], int(passes[b]), level))
    return out


def decode_ar(params: ModelParams, scene: Scene, level: int, plan: LengthLevelPlan,
              max_length: int | None = None) -> Decoded:
    return decode_ar_batch(params, [scene], level, plan, max_length)[0]


def write_trace(path, decoded: list[Decoded], vocab=None) -> None:
    """One JSON record per refinement step: decode index, step, masked slots, tokens, confidences."""
    with Path(path).open("w") as fh:
        fh.write(json.dumps({"format": "lencap-trace", "version": 1}) + "\n")
        for i, d in enumerate(decoded):
            for st in d.trace:
                rec = {"decode": i, "level": d.level, **st.to_dict()}
                if vocab is not None:
                    rec["text"] = " ".join(vocab.tokens[t] for t in st.tokens)
                fh.write(json.dumps(rec) + "\n")
