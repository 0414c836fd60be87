"""Synthetic person-search scenes and a stand-in for detector output.

Each identity owns a unit-norm appearance latent. A person instance is drawn
as ``latent + sigma * noise`` concatenated with an instance-specific
nuisance code, pushed through one fixed random linear map to a small pixel
template, squashed to [0, 1] and resized into its box. Background pixels are
low-amplitude noise around mid-grey.

Splits follow the usual person-search layout: training identities appear in
training scenes only; each query identity gets one query scene plus at least
one gallery scene; unlabeled distractors carry no identity and come from a
latent pool disjoint from the labeled one.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Annotation, Box, SceneImage, roi_extract

SCHEMA_VERSION = 1
TEMPLATE_SIZE = (16, 8)


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    latent: np.ndarray
    split: str  # "train" | "query" | "gallery-only"


@dataclass(frozen=True)
class DatasetSpec:
    n_identities: int = 240
    n_unlabeled_distractors: int = 600
    n_scenes: int = 1500
    persons_per_scene: int = 4
    labeled_per_scene: int = 2
    image_size: tuple = (48, 96)  # (H, W)
    sigma: float = 0.1
    seed: int = 0
    query_fraction: float = 0.2
    gallery_only_fraction: float = 0.0
    gallery_fraction: float = 0.3
    gallery_appearances: int = 2
    latent_dim: int = 16
    nuisance_dim: int = 16
    nuisance_scale: float = 1.0
    channels: int = 3
    box_height_range: tuple = (0.6, 0.75)  # fraction of image height

    def __post_init__(self):
        for name in ("n_identities", "n_unlabeled_distractors", "n_scenes",
                     "persons_per_scene", "latent_dim", "channels", "gallery_appearances"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0 or self.nuisance_scale < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0 <= self.labeled_per_scene <= self.persons_per_scene:
            raise ValueError("labeled_per_scene must be in [0, persons_per_scene]")
        if not 0 < self.gallery_fraction < 1 or not 0 < self.query_fraction < 1:
            raise ValueError("split fractions must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["box_height_range"] = list(self.box_height_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["box_height_range"] = tuple(d["box_height_range"])
        return cls(**d)


@dataclass(frozen=True)
class DetectionNoise:
    box_sigma: float = 0.0
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.box_sigma < 0 or self.false_positive_rate < 0:
            raise ValueError("box_sigma and false_positive_rate must be non-negative")
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must lie in [0, 1]")


# Detector stand-in used by the desk-scale experiments.
DESK_DETECTION_NOISE = DetectionNoise(box_sigma=1.5, miss_rate=0.05, false_positive_rate=0.5, seed=0)


@dataclass(frozen=True)
class Query:
    query_id: int
    scene_id: int
    identity: int
    box: Box


@dataclass
class Dataset:
    spec: DatasetSpec
    identities: list
    train: list
    query_scenes: dict
    queries: list
    gallery: list
    _gt: Optional[dict] = field(default=None, repr=False)

    @property
    def gallery_gt(self) -> dict:
        """scene_id -> {identity: Box} over labeled gallery persons."""
        if self._gt is None:
            self._gt = {
                s.scene_id: {a.identity: a.box for a in s.annotations if a.identity is not None}
                for s in self.gallery
            }
        return self._gt

    def positive_scenes(self, identity: int) -> list:
        return sorted(sid for sid, people in self.gallery_gt.items() if identity in people)

    def scene(self, scene_id: int) -> SceneImage:
        for group in (self.train, self.gallery, self.query_scenes.values()):
            for s in group:
                if s.scene_id == scene_id:
                    return s
        raise KeyError(scene_id)

    def train_identities(self) -> list:
        return [i.id for i in self.identities if i.split == "train"]


def _unit_rows(rng, n, k):
    x = rng.standard_normal((n, k))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class _Renderer:
    def __init__(self, spec: DatasetSpec, rng):
        self.spec = spec
        th, tw = TEMPLATE_SIZE
        k = spec.latent_dim + spec.nuisance_dim
        self.proj = rng.standard_normal((th * tw * spec.channels, k))

    def person(self, latent, rng) -> np.ndarray:
        s = self.spec
        code = np.concatenate([
            latent + s.sigma * rng.standard_normal(s.latent_dim),
            s.nuisance_scale / np.sqrt(max(s.nuisance_dim, 1)) * rng.standard_normal(s.nuisance_dim),
        ])
        th, tw = TEMPLATE_SIZE
        return (0.5 + 0.5 * np.tanh(self.proj @ code)).reshape(th, tw, s.channels)

    def scene(self, scene_id, people, rng) -> SceneImage:
        """``people`` is a list of (latent, identity-or-None)."""
        s = self.spec
        H, W = s.image_size
        pixels = np.clip(0.5 + 0.05 * rng.standard_normal((H, W, s.channels)), 0.0, 1.0)
        slot = W // s.persons_per_scene
        annotations = []
        for k, (latent, identity) in enumerate(people):
            lo, hi = s.box_height_range
            bh = int(rng.integers(int(lo * H), int(hi * H) + 1))
            bw = max(2, bh // 2)
            x = k * slot + int(rng.integers(0, slot - bw + 1))
            y = int(rng.integers(0, H - bh + 1))
            template = self.person(latent, rng)
            th, tw = TEMPLATE_SIZE
            pixels[y:y + bh, x:x + bw] = roi_extract(template, Box(0, 0, tw, th), (bh, bw))
            annotations.append(Annotation(Box(x, y, x + bw, y + bh), identity))
        return SceneImage(scene_id, pixels, annotations)


def _check_feasible(spec: DatasetSpec):
    H, W = spec.image_size
    lo, hi = spec.box_height_range
    if not 0 < lo <= hi <= 1:
        raise ValueError("box_height_range must satisfy 0 < lo <= hi <= 1")
    if W // spec.persons_per_scene < max(2, int(hi * H) // 2) or int(lo * H) < 2:
        raise ValueError(
            f"{spec.persons_per_scene} persons per scene do not fit in a {H}x{W} image"
        )
    n_unl = spec.persons_per_scene - spec.labeled_per_scene
    if spec.n_unlabeled_distractors < spec.persons_per_scene and n_unl > 0:
        raise ValueError("need at least persons_per_scene unlabeled distractors")


def gen_dataset(spec: DatasetSpec) -> Dataset:
    _check_feasible(spec)
    rng = np.random.default_rng(spec.seed)
    renderer = _Renderer(spec, rng)

    n = spec.n_identities
    n_query = max(1, int(round(spec.query_fraction * n)))
    n_gonly = int(round(spec.gallery_only_fraction * n))
    if n_query + n_gonly >= n:
        raise ValueError("no identities left for training")
    latents = _unit_rows(rng, n, spec.latent_dim)
    distractors = _unit_rows(rng, spec.n_unlabeled_distractors, spec.latent_dim)
    order = rng.permutation(n)
    split = {}
    for rank, i in enumerate(order):
        split[int(i)] = "query" if rank < n_query else ("gallery-only" if rank < n_query + n_gonly else "train")
    identities = [IdentitySpec(i, latents[i], split[i]) for i in range(n)]
    train_ids = [i for i in range(n) if split[i] == "train"]
    query_ids = [i for i in range(n) if split[i] == "query"]
    gonly_ids = [i for i in range(n) if split[i] == "gallery-only"]

    n_gallery = int(round(spec.gallery_fraction * spec.n_scenes))
    n_train = spec.n_scenes - n_gallery
    k_lab = spec.labeled_per_scene
    if n_train < 1 or n_gallery < 1:
        raise ValueError("n_scenes too small for a train/gallery split")

    # Gallery labeled slots: every query identity in >= 1 distinct scene.
    slots = [[] for _ in range(n_gallery)]
    placements = [(i, min(spec.gallery_appearances, n_gallery)) for i in query_ids]
    placements += [(i, 1) for i in gonly_ids]
    for identity, count in placements:
        free = [g for g in range(n_gallery) if len(slots[g]) < k_lab]
        if len(free) < count:
            if len(free) == 0 and identity in query_ids:
                raise ValueError("not enough gallery slots to place every query identity")
            count = len(free)
        for g in rng.choice(free, size=count, replace=False):
            slots[int(g)].append(identity)

    # Training labeled slots: cycle shuffled decks of training identities.
    deck: list = []
    train_slots = []
    for _ in range(n_train):
        chosen = []
        while len(chosen) < min(k_lab, len(train_ids)):
            if not deck:
                deck = [int(i) for i in rng.permutation(train_ids)]
            i = deck.pop()
            if i in chosen:
                deck.insert(0, i)
                continue
            chosen.append(i)
        train_slots.append(chosen)

    def people_for(labeled_ids):
        n_unl = spec.persons_per_scene - len(labeled_ids)
        unl = rng.choice(spec.n_unlabeled_distractors, size=n_unl, replace=False) if n_unl else []
        people = [(latents[i], i) for i in labeled_ids] + [(distractors[j], None) for j in unl]
        perm = rng.permutation(len(people))
        return [people[p] for p in perm]

    scene_id = 0
    train = []
    for ids in train_slots:
        train.append(renderer.scene(scene_id, people_for(ids), rng))
        scene_id += 1
    gallery = []
    for ids in slots:
        gallery.append(renderer.scene(scene_id, people_for(ids), rng))
        scene_id += 1
    query_scenes = []
    queries = []
    for qid, identity in enumerate(query_ids):
        scene = renderer.scene(scene_id, people_for([identity]), rng)
        box = next(a.box for a in scene.annotations if a.identity == identity)
        query_scenes.append(scene)
        queries.append(Query(qid, scene_id, identity, box))
        scene_id += 1
    return Dataset(spec, identities, train, {s.scene_id: s for s in query_scenes}, queries, gallery)


def simulate_detections(scene: SceneImage, noise: DetectionNoise, rng=None) -> list:
    """Noisy stand-in for detector output on one scene: list of (Box, score).

    Ground-truth boxes are dropped with ``miss_rate`` or jittered by gaussian
    ``box_sigma`` and clipped; a Poisson(``false_positive_rate``) number of
    random boxes is appended with lower scores.
    """
    if rng is None:
        rng = np.random.default_rng([noise.seed, scene.scene_id])
    H, W = scene.pixels.shape[:2]
    out = []
    for ann in scene.annotations:
        missed = rng.random() < noise.miss_rate
        jitter = rng.standard_normal(4) * noise.box_sigma
        score = 1.0 - 0.5 * rng.random()
        if missed:
            continue
        x1, y1, x2, y2 = np.asarray(ann.box.as_tuple()) + jitter
        x1, y1, x2, y2 = max(0.0, x1), max(0.0, y1), min(float(W), x2), min(float(H), y2)
        if x1 < x2 and y1 < y2:
            out.append((Box(float(x1), float(y1), float(x2), float(y2)), float(score)))
    for _ in range(rng.poisson(noise.false_positive_rate)):
        bh = rng.uniform(0.5, 0.8) * H
        bw = min(bh / 2.0, W - 1.0)
        x = rng.uniform(0, W - bw)
        y = rng.uniform(0, H - bh)
        out.append((Box(x, y, x + bw, y + bh), float(0.5 * (1.0 - rng.random()))))
    return out


def detect_gallery(dataset: Dataset, noise: DetectionNoise) -> dict:
    return {s.scene_id: simulate_detections(s, noise) for s in dataset.gallery}


def sample_gallery(all_scene_ids, positive_ids, size: int, seed: int, query_id: int) -> list:
    """Per-query gallery of ``size`` scenes.

    Positive scenes are always included; the rest come from a per-query
    seeded permutation of the negatives, so galleries are nested in ``size``.
    """
    all_ids = sorted(int(s) for s in all_scene_ids)
    if size > len(all_ids):
        raise ValueError(f"gallery size {size} exceeds the {len(all_ids)} available scenes")
    pos = set(int(p) for p in positive_ids)
    negatives = np.array([s for s in all_ids if s not in pos], dtype=np.int64)
    rng = np.random.default_rng([int(seed), int(query_id)])
    negatives = negatives[rng.permutation(len(negatives))]
    n_neg = max(0, size - len(pos))
    return sorted(pos | set(int(s) for s in negatives[:n_neg]))


# --- persistence -----------------------------------------------------------

def _scene_record(scene: SceneImage, split: str) -> dict:
    return {
        "scene_id": scene.scene_id,
        "split": split,
        "file": f"scenes/{scene.scene_id:06d}.npy",
        "persons": [{"box": list(a.box.as_tuple()), "identity": a.identity}
                    for a in scene.annotations],
    }


def save_dataset(dataset: Dataset, directory) -> Path:
    """One ``.npy`` image per scene plus ``annotations.json``."""
    root = Path(directory)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    records = []
    for split, scenes in (("train", dataset.train), ("gallery", dataset.gallery),
                          ("query", list(dataset.query_scenes.values()))):
        for s in scenes:
            rec = _scene_record(s, split)
            np.save(root / rec["file"], s.pixels)
            records.append(rec)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "spec": dataset.spec.to_dict(),
        "identities": [{"id": i.id, "split": i.split, "latent": i.latent.tolist()}
                       for i in dataset.identities],
        "scenes": records,
        "queries": [{"query_id": q.query_id, "scene_id": q.scene_id,
                     "identity": q.identity, "box": list(q.box.as_tuple())}
                    for q in dataset.queries],
    }
    path = root / "annotations.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, path)
    return path


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    doc = json.loads((root / "annotations.json").read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported annotation schema {doc.get('schema_version')}")
    groups = {"train": [], "gallery": [], "query": []}
    for rec in doc["scenes"]:
        anns = [Annotation(Box(*p["box"]), p["identity"]) for p in rec["persons"]]
        pixels = np.load(root / rec["file"])
        groups[rec["split"]].append(SceneImage(rec["scene_id"], pixels, anns))
    identities = [IdentitySpec(i["id"], np.asarray(i["latent"]), i["split"]) for i in doc["identities"]]
    queries = [Query(q["query_id"], q["scene_id"], q["identity"], Box(*q["box"])) for q in doc["queries"]]
    return Dataset(DatasetSpec.from_dict(doc["spec"]), identities, groups["train"],
                   {s.scene_id: s for s in groups["query"]}, queries, groups["gallery"])
