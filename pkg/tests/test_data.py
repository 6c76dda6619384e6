import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oocmatch import data as D
from oocmatch.data import BoundingBox, PairedSample, SceneSpec
from oocmatch.errors import GenerationError, SchemaError


# --- scenes -----------------------------------------------------------------

def test_generate_scene_deterministic():
    a, b = D.generate_scene(SceneSpec(), 7), D.generate_scene(SceneSpec(), 7)
    assert np.array_equal(a.image, b.image) and a.boxes == b.boxes and a.caption == b.caption


def test_generate_scene_single_object():
    scene = D.generate_scene(SceneSpec(n_objects=1), 3)
    assert len(scene.boxes) == 1 and scene.caption.subject == 0


def test_generate_scene_ten_objects_audit():
    spec = SceneSpec(n_objects=10, min_size=8, max_size=12)
    for seed in range(5):
        scene = D.generate_scene(spec, seed)
        assert len(scene.boxes) == 10
        for box in scene.boxes:
            box.validate(spec.width, spec.height)
            assert box.area >= 16
            # border-exclusion zone
            assert box.x0 >= spec.margin and box.y0 >= spec.margin
            assert box.x1 <= spec.width - spec.margin and box.y1 <= spec.height - spec.margin
        for i, a in enumerate(scene.boxes):
            for b in scene.boxes[i + 1:]:
                assert D._separated(a, b, 0)


def test_generate_scene_overcrowded_raises():
    with pytest.raises(GenerationError):
        D.generate_scene(SceneSpec(n_objects=10, min_size=20, max_size=24, max_attempts=50), 0)


@pytest.mark.parametrize("n", [0, 11])
def test_generate_scene_object_count_bounds(n):
    with pytest.raises(GenerationError):
        D.generate_scene(SceneSpec(n_objects=n), 0)


def test_caption_describes_rendered_subject():
    for seed in range(20):
        scene = D.generate_scene(SceneSpec(n_objects=4), seed)
        cap = scene.caption
        color, shape = scene.objects[cap.subject]
        assert (cap.attrs["color"], cap.attrs["shape"]) == (color, shape)
        assert color in cap.tokens and shape in cap.tokens
        assert cap.tokens[-1] in D.ENTITY_TOKENS
        # the subject's colour is actually painted inside its box
        box = scene.boxes[cap.subject]
        region = scene.image[box.y0:box.y1, box.x0:box.x1].reshape(-1, 3)
        dist = np.abs(region - np.array(D.COLORS[color])).max(axis=1)
        assert (dist < 0.06).sum() > 0.3 * box.area


def test_pixels_in_unit_range():
    for scene in D.generate_corpus(10, 1):
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        assert scene.image.shape == (64, 64, 3)


def test_unique_color_shape_per_scene():
    for scene in D.generate_corpus(30, 2, min_objects=4, max_objects=4):
        assert len(set(scene.objects)) == len(scene.objects)


# --- pairs ------------------------------------------------------------------

def test_make_pair_two_scene_corpus_forced():
    corpus = D.generate_corpus(2, 0)
    for seed in range(10):
        assert D.make_pair(0, corpus, seed).caption_2 == corpus[1].caption
        assert D.make_pair(1, corpus, seed).caption_2 == corpus[0].caption


def test_make_pair_singleton_corpus():
    with pytest.raises(ValueError):
        D.make_pair(0, D.generate_corpus(1, 0), 0)


def test_make_pair_never_self():
    corpus = D.generate_corpus(6, 4)
    for seed in range(50):
        for i in range(6):
            p = D.make_pair(i, corpus, seed)
            assert p.caption_2 is not corpus[i].caption and p.caption_1 == corpus[i].caption


def test_make_pair_uniform_over_other_scenes():
    corpus = D.generate_corpus(5, 9)
    n = 10_000
    counts = Counter()
    for seed in range(n):
        p = D.make_pair(0, corpus, seed)
        counts[next(k for k in range(1, 5) if corpus[k].caption is p.caption_2)] += 1
    expected = n / 4
    se = np.sqrt(n * 0.25 * 0.75)
    assert set(counts) == {1, 2, 3, 4}
    for k in range(1, 5):
        assert abs(counts[k] - expected) < 5 * se


def test_test_split_labels_and_match_index():
    split = D.generate_test_split(60, 3)
    assert all(s.is_test and s.match_index in (1, 2) for s in split)
    for s in split:
        own = s.caption_m
        other = s.caption_r
        if s.ooc_label:
            # same object, different story
            assert other.subject == own.subject and other.attrs["topic"] != own.attrs["topic"]
        else:
            assert other.subject != own.subject or other.attrs["topic"] == own.attrs["topic"]


def test_train_split_unlabelled():
    assert all(not s.is_test and s.match_index is None for s in D.generate_train_split(5, 0))


# --- detector ---------------------------------------------------------------

def _fake_sample(boxes):
    cap = D.Caption(("red", "square"), 0, {})
    return PairedSample("x", np.zeros((64, 64, 3), np.float32), boxes, cap, cap)


def test_detector_pass_through():
    scene = D.generate_scene(SceneSpec(n_objects=3), 11)
    assert sorted(D.detect_objects_oracle(scene), key=lambda b: b.object_id) == scene.boxes


def test_detector_truncates_to_ten_largest():
    boxes = [BoundingBox(k * 5, 0, k * 5 + 4, 4 + k, k) for k in range(12)]
    got = D.detect_objects_oracle(_fake_sample(boxes))
    assert len(got) == 10
    assert {b.object_id for b in got} == set(range(2, 12))
    assert [b.area for b in got] == sorted((b.area for b in got), reverse=True)


def test_detector_tie_order():
    boxes = [BoundingBox(20, 5, 25, 10, 0), BoundingBox(3, 9, 8, 14, 1), BoundingBox(3, 2, 8, 7, 2)]
    assert [b.object_id for b in D.detect_objects_oracle(_fake_sample(boxes))] == [2, 1, 0]


# --- crops ------------------------------------------------------------------

def test_crop_exact_copy(rng):
    image = rng.uniform(size=(64, 64, 3))
    box = BoundingBox(10, 20, 26, 36)
    np.testing.assert_array_equal(D.crop_box(image, box), image[20:36, 10:26])


def test_crop_constant_region():
    image = np.zeros((64, 64, 3))
    image[5:30, 5:30] = (0.2, 0.4, 0.6)
    patch = D.crop_box(image, BoundingBox(5, 5, 30, 30))
    np.testing.assert_allclose(patch, np.broadcast_to((0.2, 0.4, 0.6), (16, 16, 3)), atol=1e-15)


def test_crop_linear_gradient_downsample():
    # f(x, y) = a*x + b*y + c is reproduced exactly by bilinear sampling at pixel centres
    ys, xs = np.mgrid[0:64, 0:64]
    a, b, c = 0.01, 0.005, 0.1
    image = np.repeat((a * xs + b * ys + c)[..., None], 3, axis=-1)
    box = BoundingBox(8, 16, 40, 48)
    patch = D.crop_box(image, box)
    centres = (np.arange(16) + 0.5) * 2 - 0.5
    expected = a * (box.x0 + centres)[None, :] + b * (box.y0 + centres)[:, None] + c
    np.testing.assert_allclose(patch[..., 0], expected, atol=1e-6)


def test_crop_outside_image():
    with pytest.raises(ValueError):
        D.crop_box(np.zeros((64, 64, 3)), BoundingBox(60, 60, 70, 70))


# --- augmentations ----------------------------------------------------------

def test_rotate_180_involution(rng):
    patch = rng.uniform(size=(16, 16, 3))
    np.testing.assert_array_equal(D.rotate(D.rotate(patch, 2), 2), patch)


def test_grayscale_equal_channels(rng):
    g = D.grayscale(rng.uniform(size=(16, 16, 3)))
    assert np.array_equal(g[..., 0], g[..., 1]) and np.array_equal(g[..., 1], g[..., 2])


def test_noise_moments():
    patch = np.full((100, 100, 3), 0.5)
    dev = (D.add_noise(patch, np.random.default_rng(0)) - patch).ravel()
    # at 0.5 the [0, 1] clamp sits 10 sigma away, so the deviation is Normal(0, 0.05)
    assert abs(dev.mean()) < 3 * 0.05 / np.sqrt(dev.size)
    assert abs(dev.std() - 0.05) < 0.002


def test_noise_clamped_near_boundary():
    patch = np.zeros((100, 100, 3))
    out = D.add_noise(patch, np.random.default_rng(1))
    assert out.min() == 0.0
    # clamped Normal(0, s) at 0 has mean s / sqrt(2 pi)
    assert abs(out.mean() - 0.05 / np.sqrt(2 * np.pi)) < 0.001


def test_translate_edge_padding():
    patch = np.arange(16 * 16 * 3, dtype=float).reshape(16, 16, 3) / 768
    moved = D.translate(patch, 2, 0)
    np.testing.assert_array_equal(moved[:, 2:], patch[:, :-2])
    np.testing.assert_array_equal(moved[:, 0], patch[:, 0])


def test_every_augmentation_is_reachable():
    assert {D.augmentation_name(s) for s in range(200)} == set(D.AUGMENTATIONS)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_augment_preserves_shape_and_range(seed):
    patch = np.random.default_rng(seed % 97).uniform(size=(16, 16, 3))
    out = D.augment(patch, seed)
    assert out.shape == patch.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    np.testing.assert_array_equal(out, D.augment(patch, seed))


# --- JSONL ------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path, small_train, small_test):
    for split in (small_train, small_test):
        path = tmp_path / "d.jsonl"
        D.write_jsonl(split, path)
        assert D.read_jsonl(path) == split
        assert len(path.read_text().splitlines()) == len(split)


def test_jsonl_empty(tmp_path):
    path = tmp_path / "e.jsonl"
    D.write_jsonl([], path)
    assert path.read_text() == "" and D.read_jsonl(path) == []


def test_jsonl_schema_keys(small_test):
    rec = D.sample_to_json(small_test[0])
    assert set(rec) == {"id", "image", "boxes", "caption_1", "caption_2", "ooc_label", "match_index"}
    assert set(rec["image"]) == {"width", "height", "pixels_b64"}


def _lines(samples):
    return [json.dumps(D.sample_to_json(s)) for s in samples]


def test_jsonl_missing_caption_reports_line(tmp_path, small_train):
    lines = _lines(small_train[:3])
    bad = json.loads(lines[1])
    del bad["caption_2"]
    lines[1] = json.dumps(bad)
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError) as err:
        D.read_jsonl(path)
    assert err.value.line == 2 and err.value.field == "caption_2"
    assert "line 2" in str(err.value)


def test_jsonl_malformed_line(tmp_path, small_train):
    lines = _lines(small_train[:2]) + ["{not json"]
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="line 3"):
        D.read_jsonl(path)


@pytest.mark.parametrize("mutate,field", [
    (lambda r: r["boxes"].append([0, 0, 2, 2, 9]), "boxes[2]"),
    (lambda r: r["image"].update(width=7), "image.pixels_b64"),
    (lambda r: r["caption_1"].update(tokens=[]), "caption_1.tokens"),
    (lambda r: r.update(ooc_label="yes"), "ooc_label"),
    (lambda r: r.update(match_index=2), "match_index"),
])
def test_jsonl_validation_names_field(mutate, field):
    scene = D.generate_scene(SceneSpec(n_objects=2), 0)
    rec = D.sample_to_json(PairedSample("a", scene.image, scene.boxes, scene.caption, scene.caption))
    mutate(rec)
    with pytest.raises(SchemaError) as err:
        D.sample_from_json(rec, line=4)
    assert err.value.field == field


def test_dataset_digest_stable(small_train):
    assert D.dataset_digest(small_train) == D.dataset_digest(D.generate_train_split(24, seed=5))
    assert D.dataset_digest(small_train) != D.dataset_digest(small_train[:-1])


def test_derive_seed_stable_and_distinct():
    assert D.derive_seed(1, "a", 2) == D.derive_seed(1, "a", 2)
    assert len({D.derive_seed(1, "a", k) for k in range(100)}) == 100
