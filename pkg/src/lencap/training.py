"""Objectives, masking, AdamW and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tc
from .data import BOS, EOS, MASK, NATURAL_LEVEL_WEIGHTS, Corpus, collate_regions, caption_length
from .levels import LengthLevelPlan, assign_level, parse_plan
from .model import ModelConfig, ModelParams, forward_ar, forward_nar, init_params, no_decay, save_checkpoint

log = logging.getLogger(__name__)

OBJECTIVES = ("masked", "teacher_forcing")


class ConfigError(ValueError):
    """Carries every violated constraint, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(problems))


@dataclass
class TrainConfig:
    objective: str = "masked"
    plan: str = "4-level"
    batch_size: int = 32
    iterations: int = 6000
    peak_lr: float = 3e-4
    warmup: int = 500
    weight_decay: float = 1e-2
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_positions: int = 32
    level_weights: list[float] | None = None
    checkpoint_every: int = 0
    log_every: int = 100

    def problems(self) -> list[str]:
        out = []
        if self.objective not in OBJECTIVES:
            out.append(f"objective: must be one of {OBJECTIVES}, got {self.objective!r}")
        try:
            parse_plan(self.plan)
        except ValueError as exc:
            out.append(f"plan: {exc}")
        for name in ("batch_size", "iterations", "d_model", "n_layers", "n_heads", "d_ff", "max_positions"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                out.append(f"{name}: must be a positive integer")
        for name in ("peak_lr", "grad_clip", "adam_eps"):
            if not getattr(self, name) > 0:
                out.append(f"{name}: must be positive")
        if not (isinstance(self.warmup, int) and self.warmup >= 0):
            out.append("warmup: must be a non-negative integer")
        elif isinstance(self.iterations, int) and self.warmup >= self.iterations:
            out.append(f"warmup: {self.warmup} must be smaller than iterations {self.iterations}")
        if self.weight_decay < 0:
            out.append("weight_decay: must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            out.append("label_smoothing: must lie in [0, 1)")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                out.append(f"{name}: must lie in [0, 1)")
        if isinstance(self.d_model, int) and isinstance(self.n_heads, int) and self.n_heads > 0 \
                and self.d_model % self.n_heads:
            out.append("d_model: must be divisible by n_heads")
        if self.level_weights is not None and (
                not self.level_weights or any(w < 0 for w in self.level_weights) or sum(self.level_weights) <= 0):
            out.append("level_weights: must be non-negative with a positive sum")
        if self.checkpoint_every < 0 or self.log_every < 0:
            out.append("checkpoint_every/log_every: must be non-negative")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        problems = [f"{k}: unknown key" for k in sorted(set(d) - known)]
        try:
            cfg = cls(**{k: v for k, v in d.items() if k in known})
        except TypeError as exc:
            raise ConfigError(problems + [str(exc)]) from None
        problems += cfg.problems()
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON: {exc}"]) from None
        if not isinstance(d, dict):
            raise ConfigError([f"{path}: top level must be an object"])
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, num_levels=parse_plan(self.plan).k, d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff, max_positions=self.max_positions)


# --------------------------------------------------------------------------
# batches


@dataclass
class TokenBatch:
    regions: tuple
    inputs: np.ndarray  # [B, L]
    targets: np.ndarray  # [B, L]
    flags: np.ndarray  # [B, L] bool: positions that enter the loss
    levels: np.ndarray  # [B] 1-based


def make_masked_example(reference, plan: LengthLevelPlan, rng: np.random.Generator, m: int | None = None):
    """Pad ``reference`` with EOS to its level's ``L_high`` and mask ``m`` positions.

    ``m`` is drawn uniformly from ``[1, L_high]`` unless given. Returns
    ``(inputs, targets, flags, level)``.
    """
    n = caption_length(reference)
    level = assign_level(plan, n)
    high = plan.high(level)
    target = np.full(high, EOS, dtype=np.int64)
    target[:n] = np.asarray(reference[:n], dtype=np.int64)
    if m is None:
        m = int(rng.integers(1, high + 1))
    if not 1 <= m <= high:
        raise ValueError(f"m={m} outside [1, {high}]")
    pos = rng.choice(high, size=m, replace=False)
    flags = np.zeros(high, dtype=bool)
    flags[pos] = True
    inputs = np.where(flags, MASK, target)
    return inputs, target, flags, level


def make_masked_batch(scenes, references, plan: LengthLevelPlan, rng: np.random.Generator) -> TokenBatch:
    rows = [make_masked_example(r, plan, rng) for r in references]
    lengths = {len(r[0]) for r in rows}
    if len(lengths) != 1:
        raise ValueError("a masked batch must share one canvas length")
    return TokenBatch(
        regions=collate_regions(scenes),
        inputs=np.stack([r[0] for r in rows]),
        targets=np.stack([r[1] for r in rows]),
        flags=np.stack([r[2] for r in rows]),
        levels=np.array([r[3] for r in rows]),
    )


def make_ar_batch(scenes, references, plan: LengthLevelPlan) -> TokenBatch:
    """Inputs ``[BOS] + ref``, targets ``ref + [EOS]``, right-padded with EOS."""
    lens = [caption_length(r) for r in references]
    width = max(lens) + 1
    B = len(references)
    inputs = np.full((B, width), EOS, dtype=np.int64)
    targets = np.full((B, width), EOS, dtype=np.int64)
    flags = np.zeros((B, width), dtype=bool)
    for b, (r, n) in enumerate(zip(references, lens)):
        inputs[b, 0] = BOS
        inputs[b, 1:n + 1] = r[:n]
        targets[b, :n] = r[:n]
        flags[b, :n + 1] = True
    levels = np.array([assign_level(plan, n) for n in lens])
    return TokenBatch(collate_regions(scenes), inputs, targets, flags, levels)


def _flat(logits: tc.Tensor) -> tc.Tensor:
    return tc.reshape(logits, (-1, logits.shape[-1]))


def masked_loss(params: ModelParams, batch: TokenBatch, label_smoothing: float = 0.0) -> tc.Tensor:
    logits = forward_nar(params, batch.regions, batch.inputs, batch.levels)
    return tc.cross_entropy(_flat(logits), batch.targets.reshape(-1), batch.flags.reshape(-1), label_smoothing)


def teacher_forcing_loss(params: ModelParams, batch: TokenBatch, label_smoothing: float = 0.0) -> tc.Tensor:
    logits = forward_ar(params, batch.regions, batch.inputs, batch.levels)
    return tc.cross_entropy(_flat(logits), batch.targets.reshape(-1), batch.flags.reshape(-1), label_smoothing)


def masked_step(params: ModelParams, batch: TokenBatch, label_smoothing: float = 0.0) -> float:
    """Masked-position cross-entropy; leaves gradients on ``params``."""
    params.zero_grad()
    loss = masked_loss(params, batch, label_smoothing)
    tc.backward(loss)
    return loss.item()


def teacher_forcing_step(params: ModelParams, batch: TokenBatch, label_smoothing: float = 0.0) -> float:
    params.zero_grad()
    loss = teacher_forcing_loss(params, batch, label_smoothing)
    tc.backward(loss)
    return loss.item()


# --------------------------------------------------------------------------
# optimiser


def learning_rate(it: int, peak: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``peak`` at ``it == warmup``, cosine decay to 0 at ``total``."""
    if warmup > 0 and it <= warmup:
        return peak * it / warmup
    progress = (it - warmup) / max(1, total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def optimizer_step(params: ModelParams, state: AdamWState, config: TrainConfig, it: int) -> dict:
    """Clip by global norm, then one decoupled-weight-decay Adam update."""
    tc.check_grads_finite(list(params.values()))
    norm = global_grad_norm(params)
    clip = min(1.0, config.grad_clip / (norm + 1e-12)) if norm > config.grad_clip else 1.0
    lr = learning_rate(it, config.peak_lr, config.warmup, config.iterations)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        dt = p.data.dtype.type
        g = p.grad * dt(clip) if clip != 1.0 else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        if config.weight_decay and not no_decay(name):
            p.data *= dt(1.0 - lr * config.weight_decay)
        denom = np.sqrt(v / dt(bc2)) + dt(config.adam_eps)
        p.data -= dt(lr / bc1) * m / denom
    return {"lr": lr, "grad_norm": norm}


# --------------------------------------------------------------------------
# sampling


class ReferenceSampler:
    """Draws same-level batches of (scene, reference) pairs.

    Each reference carries the weight of its corpus level under a length
    prior (by default most captions are short, as in real caption data)
    split evenly across that level's references. A batch first draws a
    model level in proportion to its total weight, then ``B`` references
    from that level.
    """

    def __init__(self, corpus: Corpus, plan: LengthLevelPlan, level_weights=None):
        if level_weights is None:
            level_weights = NATURAL_LEVEL_WEIGHTS if corpus.plan.k == len(NATURAL_LEVEL_WEIGHTS) \
                else [1.0] * corpus.plan.k
        if len(level_weights) != corpus.plan.k:
            raise ConfigError([f"level_weights: need {corpus.plan.k} entries for the corpus plan"])
        counts = {lvl: 0 for lvl in range(1, corpus.plan.k + 1)}
        for s in corpus.scenes:
            for lvl, refs in s.references.items():
                counts[lvl] += len(refs)
        groups: dict[int, list] = {}
        for si, s in enumerate(corpus.scenes):
            for lvl, refs in sorted(s.references.items()):
                w = level_weights[lvl - 1] / counts[lvl]
                for r in refs:
                    n = caption_length(r)
                    if n > plan.max_length:
                        continue
                    groups.setdefault(assign_level(plan, n), []).append((si, r, w))
        self.corpus = corpus
        self.levels = sorted(l for l in groups if sum(w for _, _, w in groups[l]) > 0)
        self.items = {l: groups[l] for l in self.levels}
        totals = np.array([sum(w for _, _, w in self.items[l]) for l in self.levels])
        self.level_probs = totals / totals.sum()
        self.item_probs = {l: np.array([w for _, _, w in self.items[l]]) / t
                           for l, t in zip(self.levels, totals)}

    def sample(self, rng: np.random.Generator, batch_size: int):
        level = self.levels[int(rng.choice(len(self.levels), p=self.level_probs))]
        idx = rng.choice(len(self.items[level]), size=batch_size, p=self.item_probs[level])
        picked = [self.items[level][i] for i in idx]
        return [self.corpus.scenes[si] for si, _, _ in picked], [r for _, r, _ in picked]


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: ModelParams
    plan: LengthLevelPlan
    losses: list[float]
    checkpoint: Path | None = None


def train(config: TrainConfig, corpus: Corpus, plan: LengthLevelPlan | None = None, out_dir=None,
          on_log: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Train one model; deterministic given ``config.seed``.

    With ``out_dir`` set, writes ``loss.log`` (iteration, loss, lr),
    periodic ``ckpt-<iter>.bin`` files and the final ``model.bin``.
    """
    config.validate()
    plan = plan or parse_plan(config.plan)
    rng = np.random.default_rng(config.seed)
    params = init_params(config.model_config(len(corpus.vocab)), seed=int(rng.integers(2**31)))
    sampler = ReferenceSampler(corpus, plan, config.level_weights)
    state = AdamWState()
    step_fn = masked_step if config.objective == "masked" else teacher_forcing_step

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "loss.log").open("w")
        log_fh.write("# iteration\tloss\tlr\n")
    meta = {"train_config": config.to_dict(), "corpus_seed": corpus.seed, "corpus_scenes": len(corpus)}
    losses = []
    try:
        for it in range(1, config.iterations + 1):
            scenes, refs = sampler.sample(rng, config.batch_size)
            if config.objective == "masked":
                batch = make_masked_batch(scenes, refs, plan, rng)
            else:
                batch = make_ar_batch(scenes, refs, plan)
            loss = step_fn(params, batch, config.label_smoothing)
            if not math.isfinite(loss):
                raise tc.NonFiniteError(f"non-finite loss at iteration {it}")
            info = optimizer_step(params, state, config, it)
            losses.append(loss)
            if log_fh is not None:
                log_fh.write(f"{it}\t{loss!r}\t{info['lr']!r}\n")
            if config.log_every and it % config.log_every == 0:
                recent = float(np.mean(losses[-config.log_every:]))
                log.info("iter %d  loss %.4f  lr %.2e", it, recent, info["lr"])
                if on_log is not None:
                    on_log(it, recent, info["lr"])
            if out is not None and config.checkpoint_every and it % config.checkpoint_every == 0 \
                    and it != config.iterations:
                save_checkpoint(out / f"ckpt-{it}.bin", params, plan, corpus.vocab, config.objective,
                                dict(meta, iteration=it))
    finally:
        if log_fh is not None:
            log_fh.close()
    path = None
    params.zero_grad()
    if out is not None:
        path = out / "model.bin"
        save_checkpoint(path, params, plan, corpus.vocab, config.objective,
                        dict(meta, iteration=config.iterations))
    return TrainResult(params=params, plan=plan, losses=losses, checkpoint=path)
