import numpy as np
import pytest

from memreid.data import (DatasetSpec, DetectionNoise, gen_dataset, load_dataset, sample_gallery,
                          save_dataset, simulate_detections)
from memreid.evalproto import iou
from memreid.model import Annotation, Box, SceneImage, roi_extract

SMALL = DatasetSpec(n_identities=30, n_unlabeled_distractors=40, n_scenes=60, seed=3)


@pytest.fixture(scope="module")
def small():
    return gen_dataset(SMALL)


def test_zero_noise_patches_identical():
    spec = DatasetSpec(n_identities=12, n_unlabeled_distractors=20, n_scenes=40, sigma=0.0,
                       nuisance_scale=0.0, box_height_range=(0.7, 0.7), seed=1)
    ds = gen_dataset(spec)
    crops = {}
    for scene in ds.train:
        for a in scene.annotations:
            if a.identity is None:
                continue
            x1, y1, x2, y2 = (int(v) for v in a.box.as_tuple())
            crops.setdefault(a.identity, []).append(scene.pixels[y1:y2, x1:x2])
    repeated = [c for c in crops.values() if len(c) > 1]
    assert repeated
    for group in repeated:
        for c in group[1:]:
            assert np.array_equal(c, group[0])


def test_generation_is_deterministic(small):
    again = gen_dataset(SMALL)
    for a, b in zip(small.train + small.gallery, again.train + again.gallery):
        assert a.scene_id == b.scene_id
        assert np.array_equal(a.pixels, b.pixels)
        assert [(x.box, x.identity) for x in a.annotations] == [(x.box, x.identity) for x in b.annotations]
    assert small.queries == again.queries


def test_every_query_has_gallery_positive():
    ds = gen_dataset(DatasetSpec(n_identities=10, n_unlabeled_distractors=20, n_scenes=50, seed=0))
    assert ds.queries
    for q in ds.queries:
        hits = [s.scene_id for s in ds.gallery
                if any(a.identity == q.identity for a in s.annotations)]
        assert len(hits) >= 1


def test_infeasible_spec_rejected():
    with pytest.raises(ValueError):
        gen_dataset(DatasetSpec(persons_per_scene=10, labeled_per_scene=2))
    with pytest.raises(ValueError):
        DatasetSpec(sigma=-1.0)


def test_split_hygiene(small):
    split = {i.id: i.split for i in small.identities}
    for scene in small.train:
        for a in scene.annotations:
            assert a.identity is None or split[a.identity] == "train"
    for scene in small.gallery:
        for a in scene.annotations:
            assert a.identity is None or split[a.identity] != "train"
    assert all(split[q.identity] == "query" for q in small.queries)
    for i in small.identities:
        assert np.linalg.norm(i.latent) == pytest.approx(1.0)
    ids = [i.id for i in small.identities]
    assert len(ids) == len(set(ids))


def _nn_rank1(ds):
    roi = (16, 8)
    gal, gal_ids = [], []
    for s in ds.gallery:
        for a in s.annotations:
            gal.append(roi_extract(s, a.box, roi).ravel())
            gal_ids.append(a.identity)
    gal = np.array(gal)
    gal = (gal - gal.mean(1, keepdims=True))
    gal /= np.linalg.norm(gal, axis=1, keepdims=True)
    correct = 0
    for q in ds.queries:
        v = roi_extract(ds.query_scenes[q.scene_id], q.box, roi).ravel()
        v = v - v.mean()
        v /= np.linalg.norm(v)
        correct += gal_ids[int(np.argmax(gal @ v))] == q.identity
    return correct / len(ds.queries)


def test_difficulty_monotone_in_sigma():
    base = dict(n_identities=100, n_unlabeled_distractors=200, n_scenes=200, nuisance_scale=0.3, seed=5)
    easy = _nn_rank1(gen_dataset(DatasetSpec(sigma=0.0, **base)))
    hard = _nn_rank1(gen_dataset(DatasetSpec(sigma=0.5, **base)))
    assert easy > hard


def test_noiseless_detections_equal_gt(small):
    scene = small.gallery[0]
    dets = simulate_detections(scene, DetectionNoise())
    assert [b for b, _ in dets] == [a.box for a in scene.annotations]
    assert all(0 < s <= 1 for _, s in dets)


def test_full_miss_rate(small):
    scene = small.gallery[0]
    assert simulate_detections(scene, DetectionNoise(box_sigma=1.0, miss_rate=1.0)) == []


def test_false_positives_scored_and_clipped(small):
    noise = DetectionNoise(false_positive_rate=5.0, seed=2)
    for scene in small.gallery[:10]:
        H, W = scene.pixels.shape[:2]
        for box, score in simulate_detections(scene, noise):
            assert 0 < score <= 1
            assert 0 <= box.x1 < box.x2 <= W and 0 <= box.y1 < box.y2 <= H


def test_jitter_mean_iou_matches_monte_carlo():
    gt = Box(68.0, 68.0, 132.0, 132.0)
    scene = SceneImage(0, np.zeros((200, 200, 1)), [Annotation(gt, 1)])
    rng = np.random.default_rng(11)
    noise = DetectionNoise(box_sigma=2.0)
    ious = [iou(simulate_detections(scene, noise, rng)[0][0], gt) for _ in range(1000)]

    # independent oracle: 200k jittered boxes, vectorized overlap arithmetic
    orng = np.random.default_rng(99)
    j = np.array(gt.as_tuple()) + 2.0 * orng.standard_normal((200_000, 4))
    iw = np.minimum(j[:, 2], gt.x2) - np.maximum(j[:, 0], gt.x1)
    ih = np.minimum(j[:, 3], gt.y2) - np.maximum(j[:, 1], gt.y1)
    inter = iw * ih
    union = (j[:, 2] - j[:, 0]) * (j[:, 3] - j[:, 1]) + gt.area - inter
    oracle = inter / union
    se = oracle.std() / np.sqrt(1000)
    assert abs(np.mean(ious) - oracle.mean()) < 4 * se


def test_sample_gallery_nested_and_keeps_positives():
    ids = list(range(100))
    small_g = sample_gallery(ids, [3, 70], 10, seed=0, query_id=5)
    big_g = sample_gallery(ids, [3, 70], 40, seed=0, query_id=5)
    assert len(small_g) == 10 and len(big_g) == 40
    assert {3, 70} <= set(small_g) and set(small_g) <= set(big_g)
    assert sample_gallery(ids, [3], 100, 0, 5) == ids
    with pytest.raises(ValueError):
        sample_gallery(ids, [3], 101, 0, 5)


def test_save_load_roundtrip(small, tmp_path):
    save_dataset(small, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.spec == small.spec
    assert loaded.queries == small.queries
    for a, b in zip(small.gallery, loaded.gallery):
        assert np.array_equal(a.pixels, b.pixels)
        assert [(x.box, x.identity) for x in a.annotations] == [(x.box, x.identity) for x in b.annotations]
    assert len(loaded.train) == len(small.train)
