"""Batch assembly, Adam, and the cross / joint / baseline training schedules.

Schedules
---------
cross
    Each epoch runs a contrastive phase that updates only the object encoder
    on the InfoNCE loss, then a matching phase that updates only the text
    encoder on the margin loss while the object encoder is frozen.
joint
    One optimizer over both encoders minimizing
    ``L_CL / mean_epoch(L_CL) + L_match``; the normalizer is the running mean
    of the contrastive loss in the current epoch and carries no gradient.
baseline
    Ablation with the contrastive loss switched off: both encoders trained on
    the margin loss alone.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PairedSample, augment, crop_box, derive_seed, detect_objects_oracle
from .encoders import (
    HashingEmbedder,
    Model,
    as_leaves,
    encode_objects,
    encode_texts,
    leaf_grads,
    param_arrays,
)
from .losses import ContrastBatch, batch_margin_loss, info_nce

log = logging.getLogger(__name__)

SCHEDULES = ("cross", "joint", "baseline")
NORMALIZER_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "joint"
    tau: float = 0.1
    gamma: float = 0.2
    seed: int = 0
    hidden: int = 128
    dim: int = 300
    patch_size: int = 16

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 images")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not self.tau > 0 or not self.gamma >= 0:
            raise ValueError("need tau > 0 and gamma >= 0")

    @classmethod
    def from_mapping(cls, mapping: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    views: np.ndarray            # (2M, 3P^2) augmented views, siblings adjacent
    pair_index: np.ndarray       # (2M,)
    provenance: list             # (sample id, object id) per view
    crops: np.ndarray            # (M, 3P^2) un-augmented object crops
    segments: list               # per sample, its row range in ``crops``
    caption_m: np.ndarray        # (N, 512)
    caption_r: np.ndarray        # (N, 512)
    sample_ids: list

    @property
    def num_objects(self) -> int:
        return len(self.crops)


def build_batch(samples: Sequence[PairedSample], seed: int, embedder: HashingEmbedder | None = None,
                patch_size: int = 16, views: bool = True) -> TrainBatch:
    """Crop every detected object and augment it twice.

    Augmentation seeds depend only on (seed, sample id, object id, view).
    """
    if len(samples) < 2:
        raise ValueError("a batch needs at least 2 images")
    embedder = embedder or HashingEmbedder()
    crops, view_list, provenance, segments = [], [], [], []
    for s in samples:
        boxes = detect_objects_oracle(s)
        if not boxes:
            raise ValueError(f"sample {s.id} has no detected objects")
        lo = len(crops)
        for box in boxes:
            patch = crop_box(s.image, box, patch_size)
            crops.append(patch.reshape(-1))
            if views:
                for v in (0, 1):
                    view_list.append(augment(patch, derive_seed(seed, s.id, box.object_id, v)).reshape(-1))
                    provenance.append((s.id, box.object_id))
        segments.append((lo, len(crops)))
    n_views = len(view_list)
    return TrainBatch(
        views=np.array(view_list) if views else np.empty((0, 3 * patch_size ** 2)),
        pair_index=np.arange(n_views) ^ 1,
        provenance=provenance,
        crops=np.array(crops),
        segments=segments,
        caption_m=np.array([embedder(s.caption_m) for s in samples]),
        caption_r=np.array([embedder(s.caption_r) for s in samples]),
        sample_ids=[s.id for s in samples],
    )


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, phase: str) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch with fewer than 2 images is dropped."""
    order = np.random.default_rng(derive_seed(seed, "order", epoch, phase)).permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if len(c) >= 2]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays."""
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient names differ: {sorted(params)} vs {sorted(grads)}")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(grads[name])}, parameter {np.shape(p)}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return out


def _apply(params, grads: dict, state: AdamState, config: TrainConfig):
    return type(params)(**adam_step(param_arrays(params), grads, state, config))


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def contrastive_loss(model_obj, batch: TrainBatch, tau: float) -> T.Tensor:
    z = encode_objects(model_obj, batch.views)
    return info_nce(ContrastBatch(z, batch.pair_index, batch.provenance), tau)


def matching_loss(model_obj, model_text, batch: TrainBatch, gamma: float) -> T.Tensor:
    z = encode_objects(model_obj, batch.crops)
    cm = encode_texts(model_text, batch.caption_m)
    cr = encode_texts(model_text, batch.caption_r)
    return batch_margin_loss(z, batch.segments, cm, cr, gamma)


def contrastive_step(model: Model, batch: TrainBatch, state: AdamState, config: TrainConfig) -> float:
    """Update the object encoder on InfoNCE; the text encoder is untouched."""
    leaves = as_leaves(model.obj)
    loss = contrastive_loss(leaves, batch, config.tau)
    T.backward(loss)
    model.obj = _apply(model.obj, leaf_grads(leaves), state, config)
    return loss.item()


def match_step(model: Model, batch: TrainBatch, state: AdamState, config: TrainConfig,
               train_object: bool = False) -> float:
    """Update the text encoder (and the object encoder if ``train_object``) on the margin loss."""
    text_leaves = as_leaves(model.text)
    if train_object:
        obj_leaves = as_leaves(model.obj)
        loss = matching_loss(obj_leaves, text_leaves, batch, config.gamma)
    else:
        with T.no_grad():
            z = encode_objects(model.obj, batch.crops)
        cm = encode_texts(text_leaves, batch.caption_m)
        cr = encode_texts(text_leaves, batch.caption_r)
        loss = batch_margin_loss(z, batch.segments, cm, cr, config.gamma)
    T.backward(loss)
    grads = {f"text.{k}": g for k, g in leaf_grads(text_leaves).items()}
    params = {f"text.{k}": v for k, v in param_arrays(model.text).items()}
    if train_object:
        grads.update({f"object.{k}": g for k, g in leaf_grads(obj_leaves).items()})
        params.update({f"object.{k}": v for k, v in param_arrays(model.obj).items()})
    _unflatten(model, adam_step(params, grads, state, config))
    return loss.item()


def joint_objective(obj_leaves, text_leaves, batch: TrainBatch, config: TrainConfig,
                    normalizer: float) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """(total, L_CL, L_match) with total = L_CL / normalizer + L_match."""
    l_cl = contrastive_loss(obj_leaves, batch, config.tau)
    l_match = matching_loss(obj_leaves, text_leaves, batch, config.gamma)
    total = l_cl * (1.0 / max(normalizer, NORMALIZER_EPS)) + l_match
    return total, l_cl, l_match


def joint_step(model: Model, batch: TrainBatch, state: AdamState, config: TrainConfig,
               running: list[float]) -> tuple[float, float]:
    """One joint update; ``running`` collects this epoch's contrastive losses."""
    obj_leaves, text_leaves = as_leaves(model.obj), as_leaves(model.text)
    l_cl = contrastive_loss(obj_leaves, batch, config.tau)
    running.append(l_cl.item())
    normalizer = max(float(np.mean(running)), NORMALIZER_EPS)
    l_match = matching_loss(obj_leaves, text_leaves, batch, config.gamma)
    T.backward(l_cl * (1.0 / normalizer) + l_match)
    grads = {f"object.{k}": g for k, g in leaf_grads(obj_leaves).items()}
    grads.update({f"text.{k}": g for k, g in leaf_grads(text_leaves).items()})
    params = {f"object.{k}": v for k, v in param_arrays(model.obj).items()}
    params.update({f"text.{k}": v for k, v in param_arrays(model.text).items()})
    _unflatten(model, adam_step(params, grads, state, config))
    return l_cl.item(), l_match.item()


def _unflatten(model: Model, flat: dict) -> None:
    obj = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("object.")}
    text = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("text.")}
    if obj:
        model.obj = type(model.obj)(**obj)
    if text:
        model.text = type(model.text)(**text)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass
class LossRecord:
    epoch: int
    batch: int
    phase: str
    loss_cl: float | None
    loss_match: float | None


@dataclass
class TrainResult:
    model: Model
    records: list[LossRecord]          # one row per optimizer step
    epoch_trace: list[tuple[int, str, float]]  # (epoch, phase, mean active loss)

    def write_losses_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "batch", "phase", "loss_cl", "loss_match"])
            for r in self.records:
                w.writerow([r.epoch, r.batch, r.phase,
                            "" if r.loss_cl is None else repr(r.loss_cl),
                            "" if r.loss_match is None else repr(r.loss_match)])


def _new_model(config: TrainConfig) -> Model:
    return Model.init(derive_seed(config.seed, "init"), patch_size=config.patch_size,
                      hidden=config.hidden, dim=config.dim, tau=config.tau, gamma=config.gamma)


def _check(dataset, config: TrainConfig, schedule: str) -> None:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(dataset) < 2:
        raise ValueError("training needs at least 2 samples to form a batch")
    if config.schedule != schedule:
        raise ValueError(f"config schedule is {config.schedule!r}, expected {schedule!r}")


def cross_train(dataset: Sequence[PairedSample], config: TrainConfig) -> TrainResult:
    _check(dataset, config, "cross")
    model = _new_model(config)
    embedder = model.make_embedder()
    obj_state, text_state = AdamState(), AdamState()
    records, trace = [], []
    for epoch in range(config.epochs):
        losses = []
        for b, idx in enumerate(epoch_batches(len(dataset), config.batch_size, config.seed, epoch, "contrastive")):
            batch = build_batch([dataset[i] for i in idx], derive_seed(config.seed, epoch, b, "contrastive"),
                                embedder, config.patch_size)
            loss = contrastive_step(model, batch, obj_state, config)
            records.append(LossRecord(epoch, b, "contrastive", loss, None))
            losses.append(loss)
        trace.append((epoch, "contrastive", float(np.mean(losses))))
        losses = []
        for b, idx in enumerate(epoch_batches(len(dataset), config.batch_size, config.seed, epoch, "match")):
            batch = build_batch([dataset[i] for i in idx], derive_seed(config.seed, epoch, b, "match"),
                                embedder, config.patch_size, views=False)
            loss = match_step(model, batch, text_state, config)
            records.append(LossRecord(epoch, b, "match", None, loss))
            losses.append(loss)
        trace.append((epoch, "match", float(np.mean(losses))))
        log.debug("cross epoch %d: %s", epoch, trace[-2:])
    return TrainResult(model, records, trace)


def joint_train(dataset: Sequence[PairedSample], config: TrainConfig) -> TrainResult:
    _check(dataset, config, "joint")
    model = _new_model(config)
    embedder = model.make_embedder()
    state = AdamState()
    records, trace = [], []
    for epoch in range(config.epochs):
        running: list[float] = []
        matches = []
        for b, idx in enumerate(epoch_batches(len(dataset), config.batch_size, config.seed, epoch, "joint")):
            batch = build_batch([dataset[i] for i in idx], derive_seed(config.seed, epoch, b, "joint"),
                                embedder, config.patch_size)
            l_cl, l_match = joint_step(model, batch, state, config, running)
            records.append(LossRecord(epoch, b, "joint", l_cl, l_match))
            matches.append(l_match)
        trace.append((epoch, "contrastive", float(np.mean(running))))
        trace.append((epoch, "match", float(np.mean(matches))))
        log.debug("joint epoch %d: %s", epoch, trace[-2:])
    return TrainResult(model, records, trace)


def baseline_train(dataset: Sequence[PairedSample], config: TrainConfig) -> TrainResult:
    _check(dataset, config, "baseline")
    model = _new_model(config)
    embedder = model.make_embedder()
    state = AdamState()
    records, trace = [], []
    for epoch in range(config.epochs):
        losses = []
        for b, idx in enumerate(epoch_batches(len(dataset), config.batch_size, config.seed, epoch, "match")):
            batch = build_batch([dataset[i] for i in idx], derive_seed(config.seed, epoch, b, "match"),
                                embedder, config.patch_size, views=False)
            loss = match_step(model, batch, state, config, train_object=True)
            records.append(LossRecord(epoch, b, "match", None, loss))
            losses.append(loss)
        trace.append((epoch, "match", float(np.mean(losses))))
    return TrainResult(model, records, trace)


def train(dataset: Sequence[PairedSample], config: TrainConfig) -> TrainResult:
    return {"cross": cross_train, "joint": joint_train, "baseline": baseline_train}[config.schedule](dataset, config)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
