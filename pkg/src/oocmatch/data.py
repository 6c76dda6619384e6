"""Synthetic captioned scenes, the oracle detector, crops, augmentations and JSONL I/O.

A scene is a small RGB image holding a few flat-colored shapes on a noisy dark
background. Each scene comes with a caption naming one rendered object by its
color and shape (twice, plus two descriptive words), words from a news-like
topic and one masked entity token (GPE, DATE, ...). Captions therefore look like entity-masked news
captions while staying grounded in exactly one object.

Train records pair a scene with its own caption and a caption from another
scene. Test records pair it with its caption and a second caption that either
re-describes the same object in another story (out of context), paraphrases
the first, or describes a different object in the scene.
"""

from __future__ import annotations

import base64
import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import GenerationError, SchemaError

MAX_DETECTIONS = 10
PATCH_SIZE = 16

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "magenta": (0.85, 0.15, 0.85),
    "cyan": (0.10, 0.85, 0.90),
    "orange": (1.00, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ("square", "circle", "triangle", "diamond")

TOPICS: dict[str, tuple[str, ...]] = {
    "protest": ("rally", "crowd", "banner", "police"),
    "election": ("ballot", "vote", "candidate", "campaign"),
    "storm": ("flood", "wind", "rain", "evacuation"),
    "sports": ("match", "goal", "stadium", "fans"),
    "market": ("stocks", "trade", "prices", "investors"),
    "wildfire": ("smoke", "blaze", "firefighters", "ash"),
}
# descriptive words that restate the subject's attributes
SHAPE_WORDS = {"square": "boxy", "circle": "round", "triangle": "pointed", "diamond": "angled"}
COLOR_WORDS = {"red": "scarlet", "green": "leafy", "blue": "navy", "yellow": "golden",
               "magenta": "pinkish", "cyan": "aqua", "orange": "amber", "white": "pale"}
ENTITY_TOKENS = ("GPE", "DATE", "PERSON", "ORG")
TOPIC_WORDS_PER_CAPTION = 3
TOPIC_SLOT = 4  # index of the first topic word in a caption's tokens

AUGMENTATIONS = ("rotate", "hflip", "grayscale", "brightness", "noise", "crop_resize", "translate")


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)`` tagged with its object id."""

    x0: int
    y0: int
    x1: int
    y1: int
    object_id: int = 0

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ValueError(f"box {self} outside a {width}x{height} image")
        if self.width < 4 or self.height < 4:
            raise ValueError(f"box {self} smaller than 4x4 pixels")


@dataclass(frozen=True)
class Caption:
    tokens: tuple[str, ...]
    subject: int
    attrs: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("caption token list is empty")
        object.__setattr__(self, "tokens", tuple(self.tokens))


@dataclass
class Scene:
    image: np.ndarray  # (height, width, 3) float32 in [0, 1]
    boxes: list[BoundingBox]
    caption: Caption
    objects: list[tuple[str, str]] = field(default_factory=list)  # (color, shape) by object id

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass
class PairedSample:
    """One image with two captions.

    In train/val records ``caption_1`` is the matched caption and
    ``caption_2`` was drawn from another scene. Test records carry an
    out-of-context label and ``match_index`` saying which caption is the
    image's own.
    """

    id: str
    image: np.ndarray
    boxes: list[BoundingBox]
    caption_1: Caption
    caption_2: Caption
    ooc_label: bool | None = None
    match_index: int | None = None

    @property
    def is_test(self) -> bool:
        return self.ooc_label is not None

    @property
    def caption_m(self) -> Caption:
        return self.caption_2 if self.match_index == 2 else self.caption_1

    @property
    def caption_r(self) -> Caption:
        return self.caption_1 if self.match_index == 2 else self.caption_2

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairedSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and self.boxes == other.boxes
            and self.caption_1 == other.caption_1
            and self.caption_2 == other.caption_2
            and self.ooc_label == other.ooc_label
            and self.match_index == other.match_index
        )


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    n_objects: int = 4
    min_size: int = 10
    max_size: int = 18
    margin: int = 2
    gap: int = 1
    max_attempts: int = 400
    background_noise: float = 0.15
    color_jitter: float = 0.05


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from integers and strings."""
    words = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _position(box: BoundingBox, width: int, height: int) -> str:
    cx = (box.x0 + box.x1) / 2 / width
    cy = (box.y0 + box.y1) / 2 / height
    if abs(cx - 0.5) < 0.17 and abs(cy - 0.5) < 0.17:
        return "center"
    if abs(cx - 0.5) >= abs(cy - 0.5):
        return "left" if cx < 0.5 else "right"
    return "top" if cy < 0.5 else "bottom"


def _shape_mask(shape: str, size_w: int, size_h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size_h, 0:size_w]
    u = (xs + 0.5) / size_w * 2 - 1  # [-1, 1]
    v = (ys + 0.5) / size_h * 2 - 1
    if shape == "square":
        return np.ones((size_h, size_w), dtype=bool)
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        return np.abs(u) <= (v + 1) / 2
    raise ValueError(f"unknown shape {shape!r}")


def make_caption(color: str, shape: str, subject: int, rng: np.random.Generator,
                 topic: str | None = None, position: str = "") -> Caption:
    if topic is None:
        topic = sorted(TOPICS)[int(rng.integers(len(TOPICS)))]
    words = [str(w) for w in rng.choice(TOPICS[topic], size=TOPIC_WORDS_PER_CAPTION, replace=False)]
    entity = ENTITY_TOKENS[int(rng.integers(len(ENTITY_TOKENS)))]
    # the subject is named, described, then named again after the story words
    tokens = (color, shape, SHAPE_WORDS[shape], COLOR_WORDS[color], *words, color, shape, entity)
    attrs = {"color": color, "shape": shape, "position": position, "topic": topic}
    return Caption(tokens, subject, attrs)


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Render ``spec.n_objects`` non-overlapping shapes and caption one of them.

    Color/shape combinations are unique within a scene so a caption names
    exactly one object.
    """
    if not 1 <= spec.n_objects <= MAX_DETECTIONS:
        raise GenerationError(f"n_objects must be in 1..{MAX_DETECTIONS}, got {spec.n_objects}")
    if spec.n_objects > len(COLORS) * len(SHAPES):
        raise GenerationError("more objects than distinct color/shape combinations")
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, spec.background_noise, size=(spec.height, spec.width, 3))
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(combos), size=spec.n_objects, replace=False)

    placed: list[BoundingBox] = []
    lo = spec.margin
    for object_id in range(spec.n_objects):
        for _ in range(spec.max_attempts):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x_hi = spec.width - spec.margin - size
            y_hi = spec.height - spec.margin - size
            if x_hi < lo or y_hi < lo:
                raise GenerationError(f"object size {size} does not fit a {spec.width}x{spec.height} scene")
            x0 = int(rng.integers(lo, x_hi + 1))
            y0 = int(rng.integers(lo, y_hi + 1))
            cand = BoundingBox(x0, y0, x0 + size, y0 + size, object_id)
            if all(_separated(cand, b, spec.gap) for b in placed):
                placed.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place object {object_id} of {spec.n_objects} after {spec.max_attempts} attempts"
            )

    for box, pick in zip(placed, picks):
        color, shape = combos[pick]
        rgb = np.clip(np.array(COLORS[color]) + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3), 0.0, 1.0)
        mask = _shape_mask(shape, box.width, box.height)
        region = image[box.y0:box.y1, box.x0:box.x1]
        region[mask] = rgb

    subject = int(rng.integers(spec.n_objects))
    color, shape = combos[picks[subject]]
    caption = make_caption(color, shape, subject, rng,
                           position=_position(placed[subject], spec.width, spec.height))
    return Scene(image.astype(np.float32), placed, caption, [combos[p] for p in picks])


def _separated(a: BoundingBox, b: BoundingBox, gap: int) -> bool:
    return (a.x1 + gap <= b.x0 or b.x1 + gap <= a.x0
            or a.y1 + gap <= b.y0 or b.y1 + gap <= a.y0)


def generate_corpus(n: int, seed: int, min_objects: int = 2, max_objects: int = 4,
                    spec: SceneSpec = SceneSpec()) -> list[Scene]:
    """``n`` scenes with object counts uniform in ``[min_objects, max_objects]``."""
    scenes = []
    for i in range(n):
        s = derive_seed(seed, "scene", i)
        n_obj = min_objects + s % (max_objects - min_objects + 1)
        scenes.append(generate_scene(replace(spec, n_objects=n_obj), s))
    return scenes


def make_pair(index: int, corpus: list[Scene], seed: int, prefix: str = "train") -> PairedSample:
    """Pair scene ``index`` with its caption and a caption of a uniformly chosen other scene."""
    if len(corpus) < 2:
        raise ValueError("make_pair needs a corpus of at least 2 scenes")
    rng = np.random.default_rng(derive_seed(seed, "pair", index))
    other = int(rng.integers(len(corpus) - 1))
    if other >= index:
        other += 1
    scene = corpus[index]
    return PairedSample(
        id=f"{prefix}-{index:05d}",
        image=scene.image,
        boxes=list(scene.boxes),
        caption_1=scene.caption,
        caption_2=corpus[other].caption,
    )


TEST_KINDS = ("ooc", "paraphrase", "other_object")


def make_test_sample(index: int, scene: Scene, seed: int, kind: str | None = None) -> PairedSample:
    """Labelled record: the scene's caption plus a second caption of the given kind.

    ``ooc``: same object, different story. ``paraphrase``: same object and
    story with one topic word swapped for an unused word of that topic.
    ``other_object``: another object of the scene, different story.
    """
    rng = np.random.default_rng(derive_seed(seed, "test", index))
    if kind is None:
        kind = TEST_KINDS[int(rng.choice(3, p=[0.5, 0.25, 0.25]))]
    if kind == "other_object" and len(scene.boxes) < 2:
        kind = "ooc"
    cap = scene.caption
    topic = cap.attrs["topic"]
    others = [t for t in sorted(TOPICS) if t != topic]
    if kind == "ooc":
        second = make_caption(cap.attrs["color"], cap.attrs["shape"], cap.subject, rng,
                              topic=others[int(rng.integers(len(others)))],
                              position=cap.attrs["position"])
    elif kind == "paraphrase":
        tokens = list(cap.tokens)
        slot = TOPIC_SLOT + int(rng.integers(TOPIC_WORDS_PER_CAPTION))
        unused = [w for w in TOPICS[topic] if w not in tokens]
        tokens[slot] = unused[int(rng.integers(len(unused)))]
        second = Caption(tuple(tokens), cap.subject, dict(cap.attrs))
    elif kind == "other_object":
        choices = [b.object_id for b in scene.boxes if b.object_id != cap.subject]
        obj = choices[int(rng.integers(len(choices)))]
        color, shape = scene.objects[obj]
        box = scene.boxes[obj]
        second = make_caption(color, shape, obj, rng, topic=others[int(rng.integers(len(others)))],
                              position=_position(box, scene.width, scene.height))
    else:
        raise ValueError(f"unknown test kind {kind!r}")
    match_index = 1 + int(rng.integers(2))
    c1, c2 = (cap, second) if match_index == 1 else (second, cap)
    return PairedSample(f"test-{index:05d}", scene.image, list(scene.boxes), c1, c2,
                        ooc_label=(kind == "ooc"), match_index=match_index)


def generate_train_split(n: int, seed: int, **corpus_kwargs) -> list[PairedSample]:
    corpus = generate_corpus(n, derive_seed(seed, "train-corpus"), **corpus_kwargs)
    return [make_pair(i, corpus, seed) for i in range(n)]


def generate_test_split(n: int, seed: int, **corpus_kwargs) -> list[PairedSample]:
    corpus_kwargs.setdefault("min_objects", 2)
    corpus = generate_corpus(n, derive_seed(seed, "test-corpus"), **corpus_kwargs)
    return [make_test_sample(i, scene, seed) for i, scene in enumerate(corpus)]


# ---------------------------------------------------------------------------
# detection, crops, augmentation
# ---------------------------------------------------------------------------


def detect_objects_oracle(sample: PairedSample | Scene) -> list[BoundingBox]:
    """Ground-truth boxes, at most 10, largest first (ties by x0 then y0)."""
    boxes = sorted(sample.boxes, key=lambda b: (-b.area, b.x0, b.y0))
    return boxes[:MAX_DETECTIONS]


def _bilinear(region: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample an (h, w, c) array with pixel-centre alignment and edge clamping."""
    h, w = region.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = region[y0][:, x0] * (1 - fx) + region[y0][:, x1] * fx
    bottom = region[y1][:, x0] * (1 - fx) + region[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_box(image: np.ndarray, box: BoundingBox, size: int = PATCH_SIZE) -> np.ndarray:
    """Bilinear resample of the box region to a ``size x size x 3`` float64 patch."""
    h, w = image.shape[:2]
    if not (0 <= box.x0 < box.x1 <= w and 0 <= box.y0 < box.y1 <= h):
        raise ValueError(f"box {box} outside a {w}x{h} image")
    region = np.asarray(image[box.y0:box.y1, box.x0:box.x1], dtype=np.float64)
    return np.clip(_bilinear(region, size, size), 0.0, 1.0)


def rotate(patch: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.rot90(patch, k=quarter_turns, axes=(0, 1)).copy()


def hflip(patch: np.ndarray) -> np.ndarray:
    return patch[:, ::-1].copy()


def grayscale(patch: np.ndarray) -> np.ndarray:
    lum = patch @ np.array([0.299, 0.587, 0.114])
    return np.repeat(lum[..., None], 3, axis=-1)


def brightness(patch: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(patch * scale, 0.0, 1.0)


def add_noise(patch: np.ndarray, rng: np.random.Generator, sigma: float = 0.05) -> np.ndarray:
    return np.clip(patch + rng.normal(0.0, sigma, size=patch.shape), 0.0, 1.0)


def crop_resize(patch: np.ndarray, rng: np.random.Generator, fraction: float = 0.8) -> np.ndarray:
    size = patch.shape[0]
    side = max(1, int(round(size * fraction)))
    oy, ox = rng.integers(0, size - side + 1, size=2)
    return np.clip(_bilinear(patch[oy:oy + side, ox:ox + side], size, size), 0.0, 1.0)


def translate(patch: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content by (dx, dy) pixels, filling with replicated edge pixels."""
    pad = max(abs(dx), abs(dy))
    if pad == 0:
        return patch.copy()
    padded = np.pad(patch, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    h, w = patch.shape[:2]
    return padded[pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()


def augmentation_name(seed: int) -> str:
    return AUGMENTATIONS[int(np.random.default_rng(seed).integers(len(AUGMENTATIONS)))]


def augment(patch: np.ndarray, seed: int) -> np.ndarray:
    """Apply one augmentation chosen uniformly by ``seed``."""
    rng = np.random.default_rng(seed)
    name = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
    if name == "rotate":
        return rotate(patch, int(rng.integers(1, 4)))
    if name == "hflip":
        return hflip(patch)
    if name == "grayscale":
        return grayscale(patch)
    if name == "brightness":
        return brightness(patch, float(rng.uniform(0.6, 1.4)))
    if name == "noise":
        return add_noise(patch, rng)
    if name == "crop_resize":
        return crop_resize(patch, rng)
    dx, dy = (int(v) for v in rng.integers(-2, 3, size=2))
    return translate(patch, dx, dy)


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def _caption_to_json(c: Caption) -> dict:
    return {"tokens": list(c.tokens), "subject": c.subject, "attrs": dict(c.attrs)}


def sample_to_json(s: PairedSample) -> dict:
    pixels = np.ascontiguousarray(s.image, dtype="<f4")
    record = {
        "id": s.id,
        "image": {
            "width": int(pixels.shape[1]),
            "height": int(pixels.shape[0]),
            "pixels_b64": base64.b64encode(pixels.tobytes()).decode("ascii"),
        },
        "boxes": [[b.x0, b.y0, b.x1, b.y1, b.object_id] for b in s.boxes],
        "caption_1": _caption_to_json(s.caption_1),
        "caption_2": _caption_to_json(s.caption_2),
        "ooc_label": s.ooc_label,
    }
    if s.match_index is not None:
        record["match_index"] = s.match_index
    return record


def _require(obj: dict, key: str, kind, line: int | None, path: str = ""):
    name = f"{path}{key}"
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field {name!r}", line, name)
    value = obj[key]
    if (not isinstance(value, kind)) or (kind is int and isinstance(value, bool)):
        raise SchemaError(f"field {name!r} has wrong type {type(value).__name__}", line, name)
    return value


def _caption_from_json(obj, line, name) -> Caption:
    if not isinstance(obj, dict):
        raise SchemaError(f"field {name!r} must be an object", line, name)
    tokens = _require(obj, "tokens", list, line, name + ".")
    if not tokens or not all(isinstance(t, str) for t in tokens):
        raise SchemaError(f"field {name}.tokens must be a non-empty list of strings", line, name + ".tokens")
    subject = _require(obj, "subject", int, line, name + ".")
    attrs = obj.get("attrs", {})
    if not isinstance(attrs, dict):
        raise SchemaError(f"field {name}.attrs must be an object", line, name + ".attrs")
    return Caption(tuple(tokens), subject, attrs)


def sample_from_json(obj: dict, line: int | None = None) -> PairedSample:
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", line)
    sid = _require(obj, "id", str, line)
    img = _require(obj, "image", dict, line)
    width = _require(img, "width", int, line, "image.")
    height = _require(img, "height", int, line, "image.")
    b64 = _require(img, "pixels_b64", str, line, "image.")
    try:
        raw = base64.b64decode(b64, validate=True)
    except ValueError as exc:
        raise SchemaError(f"image.pixels_b64 is not valid base64: {exc}", line, "image.pixels_b64") from None
    if len(raw) != width * height * 3 * 4:
        raise SchemaError(f"image.pixels_b64 holds {len(raw)} bytes, expected {width * height * 12}",
                          line, "image.pixels_b64")
    pixels = np.frombuffer(raw, dtype="<f4").reshape(height, width, 3).astype(np.float32)

    raw_boxes = _require(obj, "boxes", list, line)
    boxes = []
    for k, b in enumerate(raw_boxes):
        if (not isinstance(b, list) or len(b) != 5
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in b)):
            raise SchemaError(f"boxes[{k}] must be [x0, y0, x1, y1, object_id] integers", line, f"boxes[{k}]")
        box = BoundingBox(*b)
        try:
            box.validate(width, height)
        except ValueError as exc:
            raise SchemaError(f"boxes[{k}]: {exc}", line, f"boxes[{k}]") from None
        boxes.append(box)

    c1 = _caption_from_json(_require(obj, "caption_1", dict, line), line, "caption_1")
    c2 = _caption_from_json(_require(obj, "caption_2", dict, line), line, "caption_2")
    if "ooc_label" not in obj:
        raise SchemaError("missing field 'ooc_label'", line, "ooc_label")
    label = obj["ooc_label"]
    if label is not None and not isinstance(label, bool):
        raise SchemaError("field 'ooc_label' must be a boolean or null", line, "ooc_label")
    match_index = obj.get("match_index")
    if label is not None and match_index not in (1, 2):
        raise SchemaError("labelled records need 'match_index' in {1, 2}", line, "match_index")
    if label is None and match_index is not None:
        raise SchemaError("'match_index' is only allowed on labelled records", line, "match_index")
    return PairedSample(sid, pixels, boxes, c1, c2, label, match_index)


def write_jsonl(samples: Iterable[PairedSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[PairedSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed JSON: {exc.msg}", lineno) from None
            out.append(sample_from_json(obj, lineno))
    return out


def dataset_digest(samples: Iterable[PairedSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(sample_to_json(s), sort_keys=True).encode())
    return h.hexdigest()
