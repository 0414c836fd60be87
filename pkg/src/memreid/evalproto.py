"""Person-search retrieval metrics: IoU-gated matching, per-query AP, mAP,
CMC and gallery-size sweeps.

A gallery detection counts as a hit for a query only if its scene holds the
query identity, its IoU with that person's ground-truth box is strictly
above the threshold, and no higher-ranked detection already claimed that
box. AP is non-interpolated: the sum of precision at each hit divided by the
number of ground-truth instances in the gallery.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import sample_gallery
from .model import Box

REPORT_SCHEMA_VERSION = 1
BENCHMARK_GALLERY_SIZES = (50, 100, 500, 1000, 2000, 4000)


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    cmc_ks: tuple = (1, 5, 10)
    gallery_sizes: tuple = (10, 20, 50, 100)

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        sizes = list(self.gallery_sizes)
        if any(s <= 0 for s in sizes) or sizes != sorted(set(sizes)):
            raise ValueError("gallery sizes must be positive and strictly ascending")


@dataclass
class GalleryScene:
    """Detections of one gallery scene with their features."""

    scene_id: int
    boxes: list
    features: np.ndarray  # (n_detections, d)


@dataclass
class QueryResult:
    query_id: int
    identity: int
    ap: float
    first_hit_rank: Optional[int]  # 1-based, None if nothing matched
    n_positives: int
    n_hits: int


@dataclass
class EvalReport:
    mAP: float
    cmc: dict
    per_query_ap: dict
    gallery_size: Optional[int]
    per_query: list = field(default_factory=list)
    excluded: list = field(default_factory=list)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def average_precision(ranked_hits: Sequence[bool], total_positives: int) -> float:
    """Non-interpolated AP of a ranked hit/miss list."""
    if total_positives < 1:
        raise ValueError("AP is undefined without positives")
    hits = np.asarray(ranked_hits, dtype=bool)
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.sum() / total_positives)


def rank_gallery(query_feature, gallery: Sequence[GalleryScene]):
    """Flatten and rank detections by cosine similarity.

    Ties break on (scene id, box index). Returns a list of
    ``(similarity, scene_id, box_index, box)`` in ranked order.
    """
    q = np.asarray(query_feature, dtype=np.float64)
    sims, scene_ids, idxs, boxes = [], [], [], []
    for g in gallery:
        if not g.boxes:
            continue
        s = np.asarray(g.features, dtype=np.float64) @ q
        sims.append(s)
        scene_ids.append(np.full(len(g.boxes), g.scene_id))
        idxs.append(np.arange(len(g.boxes)))
        boxes.extend(g.boxes)
    if not sims:
        return []
    sims = np.concatenate(sims)
    scene_ids = np.concatenate(scene_ids)
    idxs = np.concatenate(idxs)
    order = np.lexsort((idxs, scene_ids, -sims))
    return [(float(sims[i]), int(scene_ids[i]), int(idxs[i]), boxes[i]) for i in order]


def match_ranked(ranked, identity: int, gt: dict, iou_threshold: float) -> list:
    """Greedy one-to-one hit labels for a ranked detection list."""
    claimed = set()
    hits = []
    for _, scene_id, _, box in ranked:
        target = gt.get(scene_id, {}).get(identity)
        hit = (target is not None and scene_id not in claimed
               and iou(box, target) > iou_threshold)
        if hit:
            claimed.add(scene_id)
        hits.append(hit)
    return hits


def evaluate_query(query_id: int, identity: int, query_feature, gallery: Sequence[GalleryScene],
                   gt: dict, config: EvalConfig = EvalConfig()) -> Optional[QueryResult]:
    """AP and first-hit rank for one query; ``None`` if the identity is
    absent from this gallery."""
    scene_ids = {g.scene_id for g in gallery}
    n_pos = sum(1 for sid in scene_ids if identity in gt.get(sid, {}))
    if n_pos == 0:
        return None
    ranked = rank_gallery(query_feature, gallery)
    hits = match_ranked(ranked, identity, gt, config.iou_threshold)
    hit_ranks = np.flatnonzero(hits)
    first = int(hit_ranks[0]) + 1 if len(hit_ranks) else None
    return QueryResult(query_id, identity, average_precision(hits, n_pos) if hits else 0.0,
                       first, n_pos, len(hit_ranks))


def summarize(results: Sequence[QueryResult], config: EvalConfig,
              gallery_size: Optional[int], excluded=()) -> EvalReport:
    if not results:
        raise ValueError("no evaluable queries")
    per_query_ap = {r.query_id: r.ap for r in results}
    cmc = {k: float(np.mean([r.first_hit_rank is not None and r.first_hit_rank <= k
                             for r in results])) for k in config.cmc_ks}
    return EvalReport(float(np.mean(list(per_query_ap.values()))), cmc, per_query_ap,
                      gallery_size, list(results), list(excluded))


def evaluate(queries, query_features, gallery: Sequence[GalleryScene], gt: dict,
             config: EvalConfig = EvalConfig(), gallery_size: Optional[int] = None,
             seed: int = 0) -> EvalReport:
    """Evaluate all queries against the gallery.

    ``queries`` carry ``query_id`` and ``identity``; ``query_features`` is
    aligned with them. With ``gallery_size`` set, each query sees its own
    sampled sub-gallery (positives always kept).
    """
    by_id = {g.scene_id: g for g in gallery}
    results, excluded = [], []
    for q, feat in zip(queries, query_features):
        if gallery_size is None:
            sub = gallery
        else:
            pos = [sid for sid in by_id if q.identity in gt.get(sid, {})]
            sub = [by_id[s] for s in sample_gallery(by_id, pos, gallery_size, seed, q.query_id)]
        r = evaluate_query(q.query_id, q.identity, feat, sub, gt, config)
        if r is None:
            excluded.append(q.query_id)
        else:
            results.append(r)
    return summarize(results, config, gallery_size, excluded)


def gallery_sweep(queries, query_features, gallery, gt, sizes=None,
                  config: EvalConfig = EvalConfig(), seed: int = 0) -> list:
    sizes = list(config.gallery_sizes if sizes is None else sizes)
    n = len(gallery)
    for s in sizes:
        if s > n:
            raise ValueError(f"gallery size {s} exceeds the {n} available scenes")
    return [evaluate(queries, query_features, gallery, gt, config, s, seed) for s in sizes]


def write_report(reports: Sequence[EvalReport], path) -> Path:
    """CSV with one row per (gallery size, query) and one summary row per
    gallery size (``query_id == "summary"``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ks = sorted({k for r in reports for k in r.cmc})
    cols = ["schema", "gallery_size", "query_id", "identity", "ap", "first_hit_rank",
            "n_positives", "n_hits"] + [f"cmc@{k}" for k in ks]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for rep in reports:
            size = "full" if rep.gallery_size is None else rep.gallery_size
            for r in rep.per_query:
                rank = "" if r.first_hit_rank is None else r.first_hit_rank
                w.writerow([REPORT_SCHEMA_VERSION, size, r.query_id, r.identity, repr(r.ap), rank,
                            r.n_positives, r.n_hits]
                           + [int(r.first_hit_rank is not None and r.first_hit_rank <= k) for k in ks])
            w.writerow([REPORT_SCHEMA_VERSION, size, "summary", "", repr(rep.mAP), "",
                        "", ""] + [repr(rep.cmc.get(k, float("nan"))) for k in ks])
    return path
