"""Out-of-context decision: align each caption to an object, compare boxes and captions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BoundingBox, Caption, PairedSample, crop_box, detect_objects_oracle
from .encoders import HashingEmbedder, Model, encode_objects, encode_texts


@dataclass(frozen=True)
class Thresholds:
    iou_threshold: float = 0.5
    # generated out-of-context pairs share the subject's words and reach at most ~0.91,
    # paraphrases sit at ~0.96
    sim_threshold: float = 0.93

    def __post_init__(self):
        for name in ("iou_threshold", "sim_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class AlignmentResult:
    best_box: BoundingBox
    best_score: float
    index: int


def object_embeddings(model: Model, image: np.ndarray, boxes: list[BoundingBox]) -> np.ndarray:
    """Un-augmented crop embeddings, one row per box."""
    if not boxes:
        raise ValueError("no boxes to embed")
    patches = np.stack([crop_box(image, b, model.patch_size) for b in boxes])
    with T.no_grad():
        return encode_objects(model.obj, patches).data


def caption_embeddings(model: Model, captions: list[Caption], embedder: HashingEmbedder) -> np.ndarray:
    with T.no_grad():
        return encode_texts(model.text, np.stack([embedder(c) for c in captions])).data


def _align(obj_embs: np.ndarray, caption_emb: np.ndarray, boxes: list[BoundingBox]) -> AlignmentResult:
    scores = obj_embs @ caption_emb
    k = int(np.argmax(scores))  # first maximum: ties go to the lowest index
    return AlignmentResult(boxes[k], float(scores[k]), k)


def align_caption(model: Model, image: np.ndarray, boxes: list[BoundingBox], caption: Caption,
                  embedder: HashingEmbedder | None = None) -> AlignmentResult:
    """The box whose object embedding has the largest dot product with the caption."""
    if not boxes:
        raise ValueError("align_caption needs at least one box")
    embedder = embedder or model.make_embedder()
    z = object_embeddings(model, image, boxes)
    c = caption_embeddings(model, [caption], embedder)[0]
    return _align(z, c, boxes)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def text_similarity(c1: Caption, c2: Caption, embedder: HashingEmbedder | None = None) -> float:
    """Caption cosine remapped from [-1, 1] to [0, 1]."""
    embedder = embedder or HashingEmbedder()
    cos = float(embedder(c1) @ embedder(c2))
    return float(np.clip((cos + 1.0) / 2.0, 0.0, 1.0))


def ooc_decide(iou_score: float, sim_score: float, thresholds: Thresholds = Thresholds()) -> bool:
    """Out of context iff both captions land on the same object yet disagree in meaning."""
    return iou_score > thresholds.iou_threshold and sim_score < thresholds.sim_threshold


def pooled_image_vector(obj_embs: np.ndarray) -> np.ndarray:
    mean = obj_embs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm <= T.NORM_EPS:
        raise ValueError("pooled image vector is degenerate")
    return mean / norm


def _pick_caption(image_vec: np.ndarray, c1: np.ndarray, c2: np.ndarray) -> int:
    return 2 if float(image_vec @ c2) > float(image_vec @ c1) else 1


def classify_true_caption(model: Model, image: np.ndarray, boxes: list[BoundingBox], c1: Caption,
                          c2: Caption, embedder: HashingEmbedder | None = None) -> int:
    """1 or 2: whichever caption is closer to the pooled object embedding (ties pick 1)."""
    if not boxes:
        raise ValueError("classify_true_caption needs at least one box")
    embedder = embedder or model.make_embedder()
    v = pooled_image_vector(object_embeddings(model, image, boxes))
    caps = caption_embeddings(model, [c1, c2], embedder)
    return _pick_caption(v, caps[0], caps[1])


@dataclass
class Prediction:
    id: str
    iou: float
    s_sim: float
    verdict: bool
    box_1: BoundingBox
    box_2: BoundingBox
    true_caption_pred: int

    def to_json(self) -> dict:
        def box(b):
            return [b.x0, b.y0, b.x1, b.y1, b.object_id]

        return {"id": self.id, "iou": self.iou, "s_sim": self.s_sim, "verdict": self.verdict,
                "box_1": box(self.box_1), "box_2": box(self.box_2),
                "true_caption_pred": self.true_caption_pred}


def predict(model: Model, sample: PairedSample, thresholds: Thresholds = Thresholds(),
            embedder: HashingEmbedder | None = None) -> Prediction:
    embedder = embedder or model.make_embedder()
    boxes = detect_objects_oracle(sample)
    z = object_embeddings(model, sample.image, boxes)
    caps = caption_embeddings(model, [sample.caption_1, sample.caption_2], embedder)
    a1 = _align(z, caps[0], boxes)
    a2 = _align(z, caps[1], boxes)
    overlap = iou(a1.best_box, a2.best_box)
    sim = text_similarity(sample.caption_1, sample.caption_2, embedder)
    return Prediction(
        id=sample.id,
        iou=overlap,
        s_sim=sim,
        verdict=ooc_decide(overlap, sim, thresholds),
        box_1=a1.best_box,
        box_2=a2.best_box,
        true_caption_pred=_pick_caption(pooled_image_vector(z), caps[0], caps[1]),
    )
