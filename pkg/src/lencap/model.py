"""Length-aware conditional transformer shared by the NAR and AR decoders.

Input layout is ``[regions ; text]``. Text tokens are embedded as
``level + word + position``; regions as a projection of the appearance
vector plus a projection of the (parameter-free) layer-normalised class
distribution and box geometry, plus a shared image-segment vector.
Regions carry no position embedding, so the trunk is equivariant to
region order.

The NAR model attends bidirectionally over everything. The AR model uses
a causal mask over the text; regions attend only to regions, which keeps
every text prefix independent of later tokens.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tc
from .data import APPEARANCE_DIM, NUM_CLASSES, Vocabulary
from .levels import LengthLevelPlan, custom_plan
from .tensor import Tensor

CHECKPOINT_FORMAT = "lencap-checkpoint"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02
MASK_VALUE = -1e9


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_levels: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_positions: int = 32
    d_appearance: int = APPEARANCE_DIM
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d = cfg.d_model
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["word_table"] = (cfg.vocab_size, d)
    shapes["position_table"] = (cfg.max_positions, d)
    shapes["level_table"] = (cfg.num_levels, d)
    shapes["region_proj"] = (cfg.d_appearance, d)
    shapes["geom_class_proj"] = (cfg.num_classes + 5, d)
    shapes["segment_img"] = (d,)
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (d, d)
            shapes[p + f"attn.b{w}"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ff.w1"] = (d, cfg.d_ff)
        shapes[p + "ff.b1"] = (cfg.d_ff,)
        shapes[p + "ff.w2"] = (cfg.d_ff, d)
        shapes[p + "ff.b2"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["classifier.weight"] = (d, cfg.vocab_size)
    shapes["classifier.bias"] = (cfg.vocab_size,)
    return shapes


def no_decay(name: str) -> bool:
    """Biases and layer-norm affine terms are exempt from weight decay."""
    last = name.rsplit(".", 1)[-1]
    return last in ("gain", "bias", "bq", "bk", "bv", "bo", "b1", "b2")


class ModelParams:
    """All learnable tensors, keyed by dotted name."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True, name=k)) for k, v in self.tensors.items()))

    @property
    def dtype(self):
        return self["word_table"].dtype


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif no_decay(name):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# --------------------------------------------------------------------------
# embeddings


def embed_tokens(params: ModelParams, tokens, levels) -> Tensor:
    """``level + word + position`` for every text position.

    ``tokens`` is ``[B, L]``; ``levels`` holds one 1-based level per row.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    levels = np.asarray(levels).reshape(-1)
    B, L = tokens.shape
    if L > cfg.max_positions:
        raise ValueError(f"text length {L} exceeds max_positions={cfg.max_positions}")
    if levels.shape[0] != B:
        raise ValueError("need one level per sequence")
    if levels.min() < 1 or levels.max() > cfg.num_levels:
        raise IndexError(f"level outside 1..{cfg.num_levels}")
    word = tc.embedding(params["word_table"], tokens)
    pos = tc.embedding(params["position_table"], np.arange(L))
    lvl = tc.embedding(params["level_table"], (levels - 1)[:, None])
    return tc.add(lvl, tc.add(word, pos))


def embed_regions(params: ModelParams, appearance, class_probs, geometry) -> Tensor:
    """Project region descriptors: ``f_e W_e + [LN(f_c), LN(f_l)] W_p + e_img``."""
    dt = params.dtype
    app = Tensor(np.asarray(appearance, dtype=dt))
    cls = Tensor(np.asarray(class_probs, dtype=dt))
    geo = Tensor(np.asarray(geometry, dtype=dt))
    cfg = params.config
    if app.shape[-1] != cfg.d_appearance or cls.shape[-1] != cfg.num_classes or geo.shape[-1] != 5:
        raise ValueError(
            f"region feature dims {app.shape[-1]}/{cls.shape[-1]}/{geo.shape[-1]} "
            f"do not match config {cfg.d_appearance}/{cfg.num_classes}/5")
    visual = tc.matmul(app, params["region_proj"])
    loc_in = tc.concat([tc.layer_norm(cls), tc.layer_norm(geo)], axis=-1)
    location = tc.matmul(loc_in, params["geom_class_proj"])
    return tc.add(tc.add(visual, location), params["segment_img"])


# --------------------------------------------------------------------------
# trunk


def attention_mask(present: np.ndarray, text_len: int, causal: bool, dtype) -> np.ndarray:
    """Additive mask ``[B, 1, S, S]`` with ``S = M + text_len``."""
    B, M = present.shape
    S = M + text_len
    allowed = np.zeros((B, S, S), dtype=bool)
    key_ok = np.concatenate([present, np.ones((B, text_len), dtype=bool)], axis=1)
    if not causal:
        allowed[:] = key_ok[:, None, :]
    else:
        # regions see regions; text sees regions and its own prefix
        allowed[:, :, :M] = present[:, None, :]
        allowed[:, M:, M:] = np.tril(np.ones((text_len, text_len), dtype=bool))
    mask = np.where(allowed, 0.0, MASK_VALUE).astype(dtype)
    return mask[:, None, :, :]


def _attention(params: ModelParams, prefix: str, x: Tensor, mask: Tensor) -> Tensor:
    cfg = params.config
    B, S, d = x.shape
    h = cfg.n_heads
    dh = d // h

    def heads(t: Tensor) -> Tensor:
        return tc.transpose(tc.reshape(t, (B, S, h, dh)), (0, 2, 1, 3))

    q = heads(tc.linear(x, params[prefix + "wq"], params[prefix + "bq"]))
    k = heads(tc.linear(x, params[prefix + "wk"], params[prefix + "bk"]))
    v = heads(tc.linear(x, params[prefix + "wv"], params[prefix + "bv"]))
    scores = tc.add(tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / np.sqrt(dh)), mask)
    ctx = tc.matmul(tc.softmax(scores, axis=-1), v)
    ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (B, S, d))
    return tc.linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def _block(params: ModelParams, i: int, x: Tensor, mask: Tensor) -> Tensor:
    p = f"blocks.{i}."
    a = tc.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
    x = tc.add(x, _attention(params, p + "attn.", a, mask))
    f = tc.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
    f = tc.linear(tc.gelu(tc.linear(f, params[p + "ff.w1"], params[p + "ff.b1"])), params[p + "ff.w2"], params[p + "ff.b2"])
    return tc.add(x, f)


def forward(params: ModelParams, regions, tokens, levels, causal: bool) -> Tensor:
    """Logits ``[B, L, V]`` for every text position.

    ``regions`` is the tuple returned by :func:`lencap.data.collate_regions`.
    """
    appearance, class_probs, geometry, present = regions
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, L], got shape {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= params.config.vocab_size:
        raise IndexError("token index outside vocabulary")
    B, L = tokens.shape
    if np.asarray(present).shape[0] != B:
        raise ValueError("batch size of regions and tokens differ")
    xr = embed_regions(params, appearance, class_probs, geometry)
    xt = embed_tokens(params, tokens, levels)
    M = xr.shape[1]
    x = tc.concat([xr, xt], axis=1)
    mask = Tensor(attention_mask(np.asarray(present, dtype=bool), L, causal, params.dtype))
    for i in range(params.config.n_layers):
        x = _block(params, i, x, mask)
    x = tc.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    text = tc.slice_axis(x, M, M + L, axis=1)
    logits = tc.linear(text, params["classifier.weight"], params["classifier.bias"])
    return logits


def forward_nar(params: ModelParams, regions, tokens, levels) -> Tensor:
    return forward(params, regions, tokens, levels, causal=False)


def forward_ar(params: ModelParams, regions, tokens, levels) -> Tensor:
    """``logits[:, i]`` parameterises the token after input position ``i``."""
    return forward(params, regions, tokens, levels, causal=True)


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: one JSON header line, then the raw little-endian float32 blobs in
# header order. The header's "tensors" list gives each blob's name, shape
# and byte offset relative to the end of the header line.


def save_checkpoint(path, params: ModelParams, plan: LengthLevelPlan, vocab: Vocabulary,
                    objective: str, meta: dict | None = None) -> None:
    if plan.k != params.config.num_levels:
        raise CheckpointError("plan level count does not match model config")
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "objective": objective,
        "plan": plan.to_list(),
        "vocab_digest": vocab.digest(),
        "meta": meta or {},
        "tensors": entries,
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, vocab: Vocabulary | None = None):
    """Return ``(params, plan, header)``; every blob is checked against the config."""
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    plan = custom_plan(header["plan"])
    if plan.k != config.num_levels:
        raise CheckpointError(f"{path}: plan has {plan.k} levels, config expects {config.num_levels}")
    if vocab is not None:
        if len(vocab) != config.vocab_size or vocab.digest() != header.get("vocab_digest"):
            raise CheckpointError(f"{path}: vocabulary mismatch")
    expected = param_shapes(config)
    listed = {e["name"]: e for e in header["tensors"]}
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    body = raw[nl + 1:]
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in expected.items():
        e = listed[name]
        if tuple(e["shape"]) != shape:
            raise CheckpointError(f"{path}: {name} has shape {tuple(e['shape'])}, expected {shape}")
        nbytes = int(np.prod(shape)) * 4
        if e["nbytes"] != nbytes or e["offset"] + nbytes > len(body):
            raise CheckpointError(f"{path}: {name} blob truncated or mis-sized")
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(shape)), offset=e["offset"]).reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return ModelParams(config, tensors), plan, header


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

