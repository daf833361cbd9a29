"""HU windowing and z-axis fusion of adjacent frames into 3-channel inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CtStack

HU_LO = -40.0
HU_HI = 90.0


@dataclass(frozen=True)
class WindowedStack:
    """Stack after dynamic-range windowing: values in [0, 255], float."""

    stack_id: str
    values: np.ndarray


@dataclass(frozen=True)
class FusedFrame:
    """3 x H x W input image: (previous, center, next) windowed frames."""

    channels: np.ndarray
    frame_index: int


def hu_window(v):
    """Clip HU at [-40, 90] and rescale linearly to [0, 255], kept real-valued."""
    v = np.asarray(v, dtype=np.float64)
    out = (np.clip(v, HU_LO, HU_HI) - HU_LO) / (HU_HI - HU_LO) * 255.0
    if out.ndim == 0:
        return float(out)
    return out


def window_stack(stack: CtStack) -> WindowedStack:
    return WindowedStack(stack_id=stack.stack_id, values=hu_window(stack.frames))


def fuse_z(stack: WindowedStack, i: int) -> FusedFrame:
    """Stack (frame i-1, frame i, frame i+1) as channels.

    Missing neighbors at stack boundaries are replaced by the center frame.
    """
    d = stack.values.shape[0]
    if not 0 <= i < d:
        raise ValueError(f"frame index {i} out of range for D={d}")
    prev = stack.values[i - 1] if i > 0 else stack.values[i]
    nxt = stack.values[i + 1] if i < d - 1 else stack.values[i]
    channels = np.stack([prev, stack.values[i], nxt], axis=0)
    return FusedFrame(channels=channels, frame_index=i)
