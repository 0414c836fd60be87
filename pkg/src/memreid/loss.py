"""Pairwise log-sum-exp metric loss over memory similarities, and the OIM
softmax baseline.

For an anchor with positive similarities ``s_p`` (K of them) and negative
similarities ``s_n`` (J of them) the loss is

    log(1 + sum_i sum_j exp(gamma * (s_n[j] - s_p[i])))

evaluated with a max shift so that ``gamma * (s_n - s_p)`` anywhere in
``[-1e4, 1e4]`` stays finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import LookupTable

DEFAULT_GAMMA = 16.0


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_s_p: np.ndarray
    grad_s_n: np.ndarray


def _similarities(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(arr)):
        raise ValueError(f"{name} contains NaN")
    return arr


def pairwise_loss(s_p, s_n, gamma: float = DEFAULT_GAMMA) -> LossResult:
    s_p = _similarities(s_p, "s_p")
    s_n = _similarities(s_n, "s_n")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if s_p.size == 0 or s_n.size == 0:
        return LossResult(0.0, np.zeros_like(s_p), np.zeros_like(s_n))

    z = gamma * (s_n[None, :] - s_p[:, None])  # (K, J)
    zmax = float(z.max())
    if zmax <= 0.0:
        # The implicit exp(0) term dominates; log1p keeps tiny losses exact.
        value = float(np.log1p(np.exp(z).sum()))
    else:
        value = zmax + float(np.log(np.exp(-zmax) + np.exp(z - zmax).sum()))
    w = np.exp(z - value)
    return LossResult(value, -gamma * w.sum(axis=1), gamma * w.sum(axis=0))


def anchor_gradient(result: LossResult, positives, negatives) -> np.ndarray:
    """Gradient of the loss w.r.t. the anchor embedding.

    Memory embeddings enter as constants: s = <anchor, entry>, so the anchor
    gradient is the similarity gradients weighted onto the entries.
    """
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if pos.ndim != 2 or neg.ndim != 2:
        raise ValueError("positives and negatives must be 2-D arrays of embeddings")
    if pos.shape[0] != result.grad_s_p.shape[0] or neg.shape[0] != result.grad_s_n.shape[0]:
        raise ValueError(
            f"got {pos.shape[0]} positives / {neg.shape[0]} negatives for a loss over "
            f"K={result.grad_s_p.shape[0]}, J={result.grad_s_n.shape[0]}"
        )
    d = max(pos.shape[1], neg.shape[1])
    grad = np.zeros(d)
    if pos.shape[0]:
        grad += result.grad_s_p @ pos
    if neg.shape[0]:
        grad += result.grad_s_n @ neg
    return grad


def oim_loss(anchor, table: LookupTable, unlabeled, target: int, temperature: float):
    """Softmax cross-entropy of the anchor against all identity proxies plus
    the unlabeled queue, labeled with ``target``.

    Returns ``(value, anchor_gradient)``; proxies and queue are constants.
    """
    if int(target) not in table:
        raise KeyError(f"identity {target} has no proxy in the look-up table")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    ids, proxies = table.matrix()
    unl = np.asarray(unlabeled, dtype=np.float64).reshape(-1, a.shape[0])
    bank = np.concatenate([proxies, unl], axis=0)
    logits = bank @ a / temperature
    t = ids.index(int(target))
    shift = logits.max()
    e = np.exp(logits - shift)
    lse = shift + np.log(e.sum())
    value = float(lse - logits[t])
    prob = e / e.sum()
    prob[t] -= 1.0
    return value, (prob @ bank) / temperature
