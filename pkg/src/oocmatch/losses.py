"""Contrastive (InfoNCE) and max-margin matching objectives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BatchTooSmallError, ShapeError
from .tensor import Tensor

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    gamma: float = 0.2

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


@dataclass
class ContrastBatch:
    """2M unit embeddings of augmented views; ``pair_index[i]`` is i's sibling view."""

    embeddings: Tensor
    pair_index: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.pair_index = np.asarray(self.pair_index, dtype=np.int64)
        n = self.embeddings.shape[0]
        j = self.pair_index
        if j.shape != (n,) or np.any(j < 0) or np.any(j >= n):
            raise ValueError("pair_index must map every view to a view of the batch")
        if np.any(j == np.arange(n)) or np.any(j[j] != np.arange(n)):
            raise ValueError("pair_index must be a fixed-point-free involution")

    @classmethod
    def adjacent(cls, embeddings: Tensor, provenance=None) -> ContrastBatch:
        """Views ordered as sibling pairs (0, 1), (2, 3), ..."""
        n = embeddings.shape[0]
        if n % 2:
            raise ValueError("an odd number of views cannot form sibling pairs")
        return cls(embeddings, np.arange(n) ^ 1, provenance or [])

    @property
    def num_objects(self) -> int:
        return self.embeddings.shape[0] // 2


def cosine_matrix(Z: Tensor) -> Tensor:
    """All pairwise dot products of unit rows."""
    Z = T.as_tensor(Z)
    if Z.ndim != 2:
        raise ShapeError(f"cosine_matrix needs a matrix of row vectors, got shape {Z.shape}")
    norms = np.linalg.norm(Z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"cosine_matrix needs unit rows; largest norm deviation {np.max(np.abs(norms - 1)):.3g}")
    return Z @ Z.T


def info_nce(batch: ContrastBatch, tau: float) -> Tensor:
    """Mean over anchors of -log softmax of the positive among all other views."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    n = batch.embeddings.shape[0]
    if n < 4:
        raise BatchTooSmallError(f"InfoNCE needs at least 2 source objects, got {n // 2}")
    logits = cosine_matrix(batch.embeddings) * (1.0 / tau)
    rows = np.repeat(np.arange(n), n - 1).reshape(n, n - 1)
    offsets = np.arange(n - 1)[None, :]
    cols = offsets + (offsets >= np.arange(n)[:, None])  # every column except the anchor
    lse = T.logsumexp(T.take(logits, (rows, cols)), axis=1)
    positive = T.take(logits, (np.arange(n), batch.pair_index))
    return T.mean(lse - positive)


def match_scores(object_embs: Tensor, caption_emb: Tensor) -> tuple[Tensor, int]:
    """Best dot product between any object and the caption, with its index."""
    object_embs, caption_emb = T.as_tensor(object_embs), T.as_tensor(caption_emb)
    if object_embs.ndim != 2 or object_embs.shape[0] == 0:
        raise ValueError("match_scores needs at least one object embedding")
    scores = object_embs @ caption_emb
    return T.max_(scores), int(np.argmax(scores.data))


def margin_loss(s_m, s_r, gamma: float) -> Tensor:
    """Hinge [s_r - s_m + gamma]_+."""
    return T.relu(T.sub(s_r, s_m) + gamma)


def batch_margin_loss(object_embs: Tensor, segments: list[tuple[int, int]],
                      matched: Tensor, random: Tensor, gamma: float) -> Tensor:
    """Mean hinge over samples.

    ``object_embs`` stacks every sample's object embeddings; sample ``k`` owns
    rows ``segments[k]`` and caption rows ``matched[k]`` and ``random[k]``.
    """
    scores = object_embs @ T.concat([matched, random]).T  # (objects, 2N)
    n = len(segments)
    hinges = []
    for k, (lo, hi) in enumerate(segments):
        s_m = T.max_(T.take(scores, (slice(lo, hi), k)))
        s_r = T.max_(T.take(scores, (slice(lo, hi), n + k)))
        hinges.append(margin_loss(s_m, s_r, gamma))
    return T.mean(T.stack(hinges))
