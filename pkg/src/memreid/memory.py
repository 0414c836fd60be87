"""Queue-style feature memory and the per-identity look-up table baseline.

The bank keeps two FIFO queues of recently encoded embeddings: one for
labeled persons (carrying identity ids) and one for unlabeled persons.
Queues start empty, grow until they reach capacity and then displace the
oldest entries first.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

# Norm deviation accepted on ingest; within it entries are re-normalized.
INGEST_NORM_TOL = 1e-4


def _as_unit(vec, d: Optional[int] = None, tol: float = INGEST_NORM_TOL) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    if d is not None and v.shape[0] != d:
        raise ValueError(f"embedding has dimension {v.shape[0]}, expected {d}")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding contains non-finite values")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"embedding norm {norm:.6g} deviates from 1 by more than {tol}")
    return v / norm


@dataclass
class FeatureEntry:
    embedding: np.ndarray
    identity: Optional[int] = None
    iteration_tag: int = 0

    @property
    def labeled(self) -> bool:
        return self.identity is not None


def cosine_similarities(anchor, entries) -> np.ndarray:
    """Dot products of ``anchor`` with each row of ``entries``.

    Inputs are expected to be unit vectors already, so the dot product is the
    cosine similarity. No normalization is applied here.
    """
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    e = np.asarray(entries, dtype=np.float64)
    if e.size == 0:
        return np.zeros(0)
    e = np.atleast_2d(e)
    if e.shape[1] != a.shape[0]:
        raise ValueError(f"dimension mismatch: anchor {a.shape[0]} vs entries {e.shape[1]}")
    return e @ a


class MemoryBank:
    """Labeled queue of capacity ``labeled_capacity`` and unlabeled queue of
    capacity ``unlabeled_capacity``, both over ``d``-dimensional unit vectors."""

    def __init__(self, d: int, labeled_capacity: int, unlabeled_capacity: int):
        if d < 1:
            raise ValueError("d must be positive")
        if labeled_capacity < 0 or unlabeled_capacity < 0:
            raise ValueError("queue capacities must be non-negative")
        self.d = int(d)
        self.labeled: deque[FeatureEntry] = deque(maxlen=int(labeled_capacity))
        self.unlabeled: deque[FeatureEntry] = deque(maxlen=int(unlabeled_capacity))
        self._snapshot = None

    @property
    def labeled_capacity(self) -> int:
        return self.labeled.maxlen

    @property
    def unlabeled_capacity(self) -> int:
        return self.unlabeled.maxlen

    def __len__(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def enqueue(self, entries: Iterable[FeatureEntry]) -> "MemoryBank":
        """Append entries to the queue matching their label status.

        The whole batch is validated before anything is appended, so a
        rejected batch leaves the bank untouched.
        """
        checked = []
        last_tag = {
            True: self.labeled[-1].iteration_tag if self.labeled else None,
            False: self.unlabeled[-1].iteration_tag if self.unlabeled else None,
        }
        for entry in entries:
            emb = _as_unit(entry.embedding, self.d)
            tag = int(entry.iteration_tag)
            prev = last_tag[entry.labeled]
            if prev is not None and tag < prev:
                raise ValueError(f"iteration tag {tag} is older than queue tail {prev}")
            last_tag[entry.labeled] = tag
            identity = None if entry.identity is None else int(entry.identity)
            checked.append(FeatureEntry(emb, identity, tag))
        for entry in checked:
            (self.labeled if entry.labeled else self.unlabeled).append(entry)
        if checked:
            self._snapshot = None
        return self

    def snapshot(self):
        """Return ``(labeled_matrix, labeled_ids, unlabeled_matrix)``.

        Cached until the next enqueue.
        """
        if self._snapshot is None:
            lab = (np.stack([e.embedding for e in self.labeled])
                   if self.labeled else np.zeros((0, self.d)))
            ids = np.array([e.identity for e in self.labeled], dtype=np.int64)
            unl = (np.stack([e.embedding for e in self.unlabeled])
                   if self.unlabeled else np.zeros((0, self.d)))
            self._snapshot = (lab, ids, unl)
        return self._snapshot

    def split_pairs(self, anchor_identity: int):
        """Positive and negative memory embeddings for an anchor identity.

        Positives are labeled entries sharing the identity; everything else,
        including the whole unlabeled queue, is negative. Returns two arrays of
        shape ``(K, d)`` and ``(J, d)``.
        """
        lab, ids, unl = self.snapshot()
        mask = ids == int(anchor_identity)
        return lab[mask], np.concatenate([lab[~mask], unl], axis=0)

    def state_dict(self) -> dict:
        lab, ids, unl = self.snapshot()
        return {
            "d": np.int64(self.d),
            "labeled_capacity": np.int64(self.labeled_capacity),
            "unlabeled_capacity": np.int64(self.unlabeled_capacity),
            "labeled_embeddings": lab,
            "labeled_ids": ids,
            "labeled_tags": np.array([e.iteration_tag for e in self.labeled], dtype=np.int64),
            "unlabeled_embeddings": unl,
            "unlabeled_tags": np.array([e.iteration_tag for e in self.unlabeled], dtype=np.int64),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        bank = cls(int(state["d"]), int(state["labeled_capacity"]), int(state["unlabeled_capacity"]))
        bank.enqueue(
            FeatureEntry(e, int(i), int(t))
            for e, i, t in zip(state["labeled_embeddings"], state["labeled_ids"], state["labeled_tags"])
        )
        bank.enqueue(
            FeatureEntry(e, None, int(t))
            for e, t in zip(state["unlabeled_embeddings"], state["unlabeled_tags"])
        )
        return bank


@dataclass
class LookupTable:
    """One moving-average proxy per identity (OIM-style baseline memory)."""

    momentum: float = 0.5
    proxies: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"table momentum must be in [0, 1], got {self.momentum}")

    def __contains__(self, identity) -> bool:
        return int(identity) in self.proxies

    def __len__(self) -> int:
        return len(self.proxies)

    def update(self, identity: int, feature) -> "LookupTable":
        f = _as_unit(feature)
        identity = int(identity)
        old = self.proxies.get(identity)
        if old is None:
            self.proxies[identity] = f
            return self
        if f.shape != old.shape:
            raise ValueError("feature dimension does not match stored proxy")
        p = self.momentum * old + (1.0 - self.momentum) * f
        norm = np.linalg.norm(p)
        # Antipodal proxy and feature at momentum 0.5 cancel; keep the new feature.
        self.proxies[identity] = p / norm if norm > 0 else f
        return self

    def matrix(self):
        """Identity ids in insertion order and the stacked proxy matrix."""
        ids = list(self.proxies)
        if not ids:
            return [], np.zeros((0, 0))
        return ids, np.stack([self.proxies[i] for i in ids])

    def state_dict(self) -> dict:
        ids, mat = self.matrix()
        return {"momentum": np.float64(self.momentum),
                "ids": np.array(ids, dtype=np.int64), "proxies": mat}

    @classmethod
    def from_state_dict(cls, state: dict) -> "LookupTable":
        table = cls(float(state["momentum"]))
        for i, p in zip(state["ids"], state["proxies"]):
            table.proxies[int(i)] = np.asarray(p, dtype=np.float64)
        return table


def lut_update(table: LookupTable, identity: int, feature) -> LookupTable:
    return table.update(identity, feature)
