"""Smoothing of generated motion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .motion_io import MotionSequence, hip_center


@dataclass(frozen=True)
class OneEuroParams:
    min_cutoff: float = 1.0
    beta: float = 0.01
    d_cutoff: float = 1.0

    def __post_init__(self):
        if not self.min_cutoff > 0 or not self.d_cutoff > 0:
            raise ValueError("min_cutoff and d_cutoff must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def moving_average(m: MotionSequence, window: int = 5) -> MotionSequence:
    """Centred mean over ``window`` frames; the window shrinks at the ends."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if window == 1 or m.n_frames == 0:
        return m.with_positions(m.positions.copy())
    return m.with_positions(kernels.moving_average(np.ascontiguousarray(m.positions), window // 2))


def one_euro(m: MotionSequence, params: OneEuroParams = OneEuroParams()) -> MotionSequence:
    if m.fps <= 0:
        raise ValueError("fps must be positive")
    out = kernels.one_euro(
        np.ascontiguousarray(m.positions), float(m.fps), params.min_cutoff, params.beta, params.d_cutoff
    )
    return m.with_positions(out)


def smooth_pipeline(
    m: MotionSequence,
    hip_joint: int | None = None,
    window: int | None = None,
    euro: OneEuroParams | None = None,
) -> MotionSequence:
    """Hip-centre, then One-Euro, then moving average; each step only if requested."""
    if hip_joint is not None:
        m = hip_center(m, hip_joint)
    if euro is not None:
        m = one_euro(m, euro)
    if window is not None:
        m = moving_average(m, window)
    return m
