"""Slow-moving average of the online encoder parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MOMENTUM = 0.999


def _check_momentum(m: float) -> float:
    m = float(m)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    return m


def _as_params(theta) -> np.ndarray:
    v = np.asarray(theta, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains non-finite values")
    return v


@dataclass(frozen=True)
class DualEncoderState:
    online: np.ndarray
    average: np.ndarray
    momentum: float

    def __post_init__(self):
        if self.online.shape != self.average.shape:
            raise ValueError("online and average parameter vectors differ in length")


def init_dual(theta, m: float = DEFAULT_MOMENTUM) -> DualEncoderState:
    """The average starts as an exact copy of the online parameters."""
    m = _check_momentum(m)
    theta = _as_params(theta).copy()
    return DualEncoderState(online=theta, average=theta.copy(), momentum=m)


def ema_update(state: DualEncoderState, new_theta) -> DualEncoderState:
    """average <- m * average + (1 - m) * new_theta; online <- new_theta."""
    theta = _as_params(new_theta)
    if theta.shape != state.average.shape:
        raise ValueError(
            f"parameter length {theta.shape[0]} does not match state length {state.average.shape[0]}"
        )
    m = state.momentum
    average = m * state.average + (1.0 - m) * theta
    return DualEncoderState(online=theta.copy(), average=average, momentum=m)
