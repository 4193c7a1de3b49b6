"""Oscillation tracking and iterative freezing of latent binary weights.

A weight oscillates at step t when its sign flips at t and also flipped in
the opposite direction at t-1.  The oscillation frequency is an EMA over
optimizer steps; once it exceeds a threshold (after a start epoch) the weight
is pinned to its sign for the rest of training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LatentMatrix, sign


@dataclass
class OscillationState:
    prev_sign: np.ndarray
    prev_delta: np.ndarray
    freq: np.ndarray
    momentum: float = 0.01
    threshold: float = 0.02
    start_epoch: int = 15

    @classmethod
    def create(cls, values, momentum=0.01, threshold=0.02, start_epoch=15) -> "OscillationState":
        values = np.asarray(values)
        return cls(
            prev_sign=sign(values),
            prev_delta=np.zeros(values.shape),
            freq=np.zeros(values.shape),
            momentum=momentum,
            threshold=threshold,
            start_epoch=start_epoch,
        )


def update_oscillation(state: OscillationState, values) -> OscillationState:
    """Advance the tracker by one optimizer step (call after the update)."""
    values = np.asarray(values)
    if values.shape != state.prev_sign.shape:
        raise ValueError(f"shape mismatch: {values.shape} vs {state.prev_sign.shape}")
    current = sign(values)
    delta = current - state.prev_sign
    osc = (delta != state.prev_delta) & (delta * state.prev_delta != 0)
    m = state.momentum
    state.freq = m * osc + (1.0 - m) * state.freq
    state.prev_sign = current
    state.prev_delta = delta
    return state


def apply_freezing(state: OscillationState, latent: LatentMatrix, epoch: int) -> LatentMatrix:
    """Freeze entries whose oscillation frequency exceeds the threshold."""
    if epoch >= state.start_epoch:
        latent.freeze(state.freq > state.threshold)
    return latent
