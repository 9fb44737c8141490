"""Synthetic scene-captioning corpus.

Each scene is a handful of objects (category, colour, size) placed in the
unit square. The model never sees the objects directly: it sees detector
style region descriptors built from them (a noisy appearance vector, a
class distribution and a 5-tuple box geometry). Reference captions come
from a small grammar whose verbosity grows with the requested length
level, so short captions name the most salient object and long ones add
more objects, attributes, spatial relations and locations.

Per-scene randomness is derived from the corpus seed with splitmix64, so
scene ``i`` is the same no matter how many scenes are generated or in
what order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .levels import LengthLevelPlan, custom_plan, plan_4_level

CORPUS_FORMAT = "lencap-corpus"
CORPUS_VERSION = 1
VOCAB_HEADER = "# lencap-vocab v1"

BOS, EOS, MASK = 0, 1, 2
SPECIALS = ["[BOS]", "[EOS]", "[MASK]"]

CATEGORIES = [
    "ball", "box", "cup", "dog", "cat", "car", "tree", "chair",
    "lamp", "book", "bird", "vase", "shoe", "hat", "bottle", "clock",
]
COLORS = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple"]
SIZES = ["small", "medium", "large"]
FUNCTION_WORDS = [
    "a", "and", "left", "right", "of", "higher", "lower", "than",
    "on", "at", "in", "the", "top", "bottom", "middle", "there", "is", "picture",
]

APPEARANCE_DIM = 64
NUM_CLASSES = len(CATEGORIES)
MAX_REGIONS = 8
APPEARANCE_NOISE = 0.1
# fixed projection of one-hot(category, colour, size); independent of corpus seed
PROJECTION_SEED = 0x5EED_CAFE
# area thresholds for the size attribute
SIZE_EDGES = (0.04, 0.12)
MAX_ATTEMPTS = 64

# natural-length prior over the 4-level corpus levels: most captions are short.
NATURAL_LEVEL_WEIGHTS = (0.30, 0.45, 0.15, 0.10)


class SparseSceneError(RuntimeError):
    """The grammar cannot produce a caption in the requested range."""


class CorpusFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# seeds

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    """Chain splitmix64 over ``master`` and each element of ``path``."""
    s = splitmix64(master & _MASK64)
    for p in path:
        s = splitmix64(s ^ (p & _MASK64))
    return s


# --------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Bijective token <-> index map; the specials occupy indices 0..2."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if self.tokens[:3] != SPECIALS:
            raise ValueError("vocabulary must start with [BOS], [EOS], [MASK]")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(SPECIALS + CATEGORIES + COLORS + SIZES + FUNCTION_WORDS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index[w] for w in words]

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if stop_at_eos and i == EOS:
                break
            out.append(self.tokens[i])
        return " ".join(out)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(VOCAB_HEADER + "\n" + "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise CorpusFormatError(f"{path}: line 1: expected header {VOCAB_HEADER!r}")
        return cls(lines[1:])


VOCAB = Vocabulary.default()


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class Region:
    appearance: np.ndarray
    class_probs: np.ndarray
    geometry: np.ndarray
    salience: float


@dataclass
class Scene:
    """Region descriptors plus the latent objects and reference captions.

    ``objects`` rows are ``(category, colour, size)`` indices. References
    map a 1-based level to token lists that end with ``EOS``.
    """

    appearance: np.ndarray  # [M, APPEARANCE_DIM] float32
    class_probs: np.ndarray  # [M, NUM_CLASSES] float32
    geometry: np.ndarray  # [M, 5] float32: x1, y1, x2, y2, area
    salience: np.ndarray  # [M] float32 in (0, 1]
    objects: np.ndarray  # [M, 3] int
    seed: int = 0
    references: dict[int, list[list[int]]] = field(default_factory=dict)

    @property
    def num_regions(self) -> int:
        return int(self.appearance.shape[0])

    @property
    def regions(self) -> list[Region]:
        return [
            Region(self.appearance[i], self.class_probs[i], self.geometry[i], float(self.salience[i]))
            for i in range(self.num_regions)
        ]

    def salience_order(self) -> list[int]:
        # stable so equal salience keeps region order
        return [int(i) for i in np.argsort(-self.salience, kind="stable")]


@dataclass
class Corpus:
    scenes: list[Scene]
    plan: LengthLevelPlan
    seed: int
    vocab: Vocabulary = field(default_factory=Vocabulary.default)

    def __len__(self) -> int:
        return len(self.scenes)


def _projection() -> np.ndarray:
    rng = np.random.default_rng(PROJECTION_SEED)
    n_in = NUM_CLASSES + len(COLORS) + len(SIZES)
    return rng.standard_normal((n_in, APPEARANCE_DIM)) / np.sqrt(3.0)


_PROJ = _projection()


def _size_index(area: float) -> int:
    return int(np.searchsorted(SIZE_EDGES, area, side="right"))


def sample_scene(seed: int) -> Scene:
    """Sample objects and their region descriptors from one scene seed."""
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, MAX_REGIONS + 1))
    cats = rng.choice(NUM_CLASSES, size=m, replace=False)
    colors = rng.integers(0, len(COLORS), size=m)

    w = rng.uniform(0.08, 0.5, size=m)
    h = rng.uniform(0.08, 0.5, size=m)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    geom = np.stack([x1, y1, x1 + w, y1 + h], axis=1).astype(np.float32)
    area = (geom[:, 2] - geom[:, 0]) * (geom[:, 3] - geom[:, 1])
    geometry = np.concatenate([geom, area[:, None]], axis=1).astype(np.float32)
    sizes = np.array([_size_index(a) for a in area])
    salience = (area / area.max()).astype(np.float32)

    onehot = np.zeros((m, _PROJ.shape[0]))
    onehot[np.arange(m), cats] = 1.0
    onehot[np.arange(m), NUM_CLASSES + colors] = 1.0
    onehot[np.arange(m), NUM_CLASSES + len(COLORS) + sizes] = 1.0
    appearance = onehot @ _PROJ + APPEARANCE_NOISE * rng.standard_normal((m, APPEARANCE_DIM))

    logits = 4.0 * (np.arange(NUM_CLASSES)[None, :] == cats[:, None]) + 0.5 * rng.standard_normal((m, NUM_CLASSES))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)

    return Scene(
        appearance=appearance.astype(np.float32),
        class_probs=probs.astype(np.float32),
        geometry=geometry,
        salience=salience,
        objects=np.stack([cats, colors, sizes], axis=1).astype(np.int64),
        seed=seed,
    )


# --------------------------------------------------------------------------
# grammar

_LOCATIONS = {
    "left": ["on", "the", "left"],
    "right": ["on", "the", "right"],
    "top": ["at", "the", "top"],
    "bottom": ["at", "the", "bottom"],
    "middle": ["in", "the", "middle"],
}


def _center(scene: Scene, j: int) -> tuple[float, float]:
    x1, y1, x2, y2, _ = scene.geometry[j]
    return (x1 + x2) / 2.0, (y1 + y2) / 2.0


def _location_words(scene: Scene, j: int) -> list[str]:
    cx, cy = _center(scene, j)
    if cx < 1 / 3:
        return _LOCATIONS["left"]
    if cx > 2 / 3:
        return _LOCATIONS["right"]
    if cy < 1 / 3:
        return _LOCATIONS["top"]
    if cy > 2 / 3:
        return _LOCATIONS["bottom"]
    return _LOCATIONS["middle"]


def _relation_words(scene: Scene, prev: int, cur: int) -> list[str]:
    """Where the previously mentioned object sits relative to ``cur``."""
    px, py = _center(scene, prev)
    cx, cy = _center(scene, cur)
    dx, dy = px - cx, py - cy
    if abs(dx) >= abs(dy):
        return ["left", "of"] if dx < 0 else ["right", "of"]
    # image y grows downwards
    return ["higher", "than"] if dy < 0 else ["lower", "than"]


def _ladder(m: int) -> list[tuple]:
    """Detail units in the order they are added as captions get longer."""
    head = min(m, 2)
    units: list[tuple] = []
    for j in range(head):
        units += [("mention", j), ("color", j)]
    units += [("size", j) for j in range(head)]
    units += [("relation", j) for j in range(1, head)]
    for j in range(head, m):
        units += [("mention", j), ("color", j)]
    units += [("size", j) for j in range(head, m)]
    units += [("relation", j) for j in range(head, m)]
    units += [("location", j) for j in range(m)]
    units += [("prefix",), ("suffix",)]
    return units


def _realize(scene: Scene, order: list[int], active: set) -> list[str]:
    words: list[str] = []
    if ("prefix",) in active:
        words += ["there", "is"]
    for j, obj in enumerate(order):
        if ("mention", j) not in active:
            break
        if j > 0:
            if ("relation", j) in active:
                words += _relation_words(scene, order[j - 1], obj)
            else:
                words.append("and")
        cat, color, size = scene.objects[obj]
        words.append("a")
        if ("size", j) in active:
            words.append(SIZES[size])
        if ("color", j) in active:
            words.append(COLORS[color])
        words.append(CATEGORIES[cat])
        if ("location", j) in active:
            words += _location_words(scene, obj)
    if ("suffix",) in active:
        words += ["in", "the", "picture"]
    return words


def caption_ladder(scene: Scene) -> list[list[str]]:
    """All captions of the scene, shortest first; each extends the previous."""
    order = scene.salience_order()
    active: set = set()
    out = []
    for unit in _ladder(len(order)):
        active.add(unit)
        out.append(_realize(scene, order, active))
    return out


def caption_grammar(scene: Scene, level: int, seed: int, plan: LengthLevelPlan | None = None,
                    vocab: Vocabulary = VOCAB) -> list[int]:
    """One reference caption for ``level``, as token ids ending in EOS.

    Raises :class:`SparseSceneError` when no caption of the scene fits the
    level's range (the caller regenerates the scene).
    """
    plan = plan or plan_4_level()
    lo, hi = plan.bounds(level)
    fits = [c for c in caption_ladder(scene) if lo <= len(c) <= hi]
    if not fits:
        raise SparseSceneError(f"no caption of length {lo}..{hi} for a {scene.num_regions}-object scene")
    rng = np.random.default_rng(seed)
    words = fits[int(rng.integers(len(fits)))]
    return vocab.encode(words) + [EOS]


def caption_length(tokens) -> int:
    """Number of tokens before the first EOS (all of them if there is none)."""
    for i, t in enumerate(tokens):
        if int(t) == EOS:
            return i
    return len(tokens)


REFS_PER_LEVEL = 2


def make_scene(master_seed: int, index: int, plan: LengthLevelPlan, refs_per_level: int = REFS_PER_LEVEL) -> Scene:
    for attempt in range(MAX_ATTEMPTS):
        seed = derive_seed(master_seed, index, attempt)
        scene = sample_scene(seed)
        try:
            scene.references = {
                lvl: [caption_grammar(scene, lvl, derive_seed(seed, lvl, r), plan) for r in range(refs_per_level)]
                for lvl in range(1, plan.k + 1)
            }
        except SparseSceneError:
            continue
        return scene
    raise SparseSceneError(f"scene {index}: no usable scene after {MAX_ATTEMPTS} attempts")


def generate_corpus(seed: int, num_scenes: int, plan: LengthLevelPlan | None = None) -> Corpus:
    if num_scenes < 1:
        raise ValueError("num_scenes must be >= 1")
    plan = plan or plan_4_level()
    scenes = [make_scene(seed, i, plan) for i in range(num_scenes)]
    return Corpus(scenes=scenes, plan=plan, seed=seed)


# --------------------------------------------------------------------------
# batching helpers


def collate_regions(scenes: list[Scene], max_regions: int = MAX_REGIONS):
    """Stack region descriptors, zero-padding to ``max_regions``.

    Returns ``(appearance, class_probs, geometry, present)`` where
    ``present`` is a boolean ``[B, max_regions]`` array.
    """
    B = len(scenes)
    m = max(max_regions, max(s.num_regions for s in scenes))
    app = np.zeros((B, m, APPEARANCE_DIM), dtype=np.float32)
    cls = np.zeros((B, m, NUM_CLASSES), dtype=np.float32)
    geo = np.zeros((B, m, 5), dtype=np.float32)
    present = np.zeros((B, m), dtype=bool)
    for b, s in enumerate(scenes):
        k = s.num_regions
        app[b, :k] = s.appearance
        cls[b, :k] = s.class_probs
        geo[b, :k] = s.geometry
        present[b, :k] = True
    return app, cls, geo, present


# --------------------------------------------------------------------------
# files


def _f32_list(a: np.ndarray):
    return np.asarray(a, dtype=np.float32).astype(np.float64).tolist()


def _scene_to_record(index: int, s: Scene) -> dict:
    return {
        "index": index,
        "seed": s.seed,
        "objects": s.objects.tolist(),
        "appearance": _f32_list(s.appearance),
        "class_probs": _f32_list(s.class_probs),
        "geometry": _f32_list(s.geometry),
        "salience": _f32_list(s.salience),
        "references": {str(k): v for k, v in sorted(s.references.items())},
    }


def _record_to_scene(rec: dict) -> Scene:
    m = len(rec["objects"])
    scene = Scene(
        appearance=np.asarray(rec["appearance"], dtype=np.float32).reshape(m, APPEARANCE_DIM),
        class_probs=np.asarray(rec["class_probs"], dtype=np.float32).reshape(m, NUM_CLASSES),
        geometry=np.asarray(rec["geometry"], dtype=np.float32).reshape(m, 5),
        salience=np.asarray(rec["salience"], dtype=np.float32).reshape(m),
        objects=np.asarray(rec["objects"], dtype=np.int64).reshape(m, 3),
        seed=int(rec["seed"]),
        references={int(k): [list(map(int, r)) for r in v] for k, v in rec["references"].items()},
    )
    return scene


def vocab_path_for(corpus_path) -> Path:
    p = Path(corpus_path)
    return p.with_name(p.stem + ".vocab.txt")


def save_corpus(corpus: Corpus, path) -> None:
    """Write the corpus as JSON lines plus a sidecar vocabulary file."""
    path = Path(path)
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "seed": corpus.seed,
        "plan": corpus.plan.to_list(),
        "num_scenes": len(corpus.scenes),
        "vocab_size": len(corpus.vocab),
        "vocab_digest": corpus.vocab.digest(),
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, s in enumerate(corpus.scenes):
            fh.write(json.dumps(_scene_to_record(i, s)) + "\n")
    corpus.vocab.save(vocab_path_for(path))


def load_corpus(path) -> Corpus:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: line 1: bad header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError(f"{path}: line 1: not a {CORPUS_FORMAT} file")
    if header.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}: line 1: unsupported version {header.get('version')}")

    vpath = vocab_path_for(path)
    vocab = Vocabulary.load(vpath) if vpath.exists() else Vocabulary.default()
    if vocab.digest() != header.get("vocab_digest", vocab.digest()):
        raise CorpusFormatError(f"{vpath}: vocabulary does not match corpus header")

    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            scenes.append(_record_to_scene(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}: line {lineno} (record {lineno - 2}): {exc}") from None
    if len(scenes) != header.get("num_scenes", len(scenes)):
        raise CorpusFormatError(f"{path}: header promises {header['num_scenes']} scenes, found {len(scenes)}")
    return Corpus(scenes=scenes, plan=custom_plan(header["plan"]), seed=int(header["seed"]), vocab=vocab)
