"""Foreground-centered patch sampling and batch composition.

A batch is N distinct source frames with K patches cropped from each,
B = N * K patches total. Patch centers land on ground-truth-positive
pixels when the frame has any, otherwise on the head region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CtStack
from .preprocess import WindowedStack, fuse_z, window_stack

HEAD_HU_THRESHOLD = -500


@dataclass(frozen=True)
class BatchSpec:
    crop_size: int
    images_per_batch: int
    patches_per_image: int

    @property
    def batch_size(self) -> int:
        return self.images_per_batch * self.patches_per_image

    def validate(self):
        if self.crop_size <= 0 or self.images_per_batch <= 0 or self.patches_per_image <= 0:
            raise ValueError(f"all BatchSpec fields must be positive: {self}")


@dataclass(frozen=True)
class PatchSample:
    input: np.ndarray  # 3 x C x C, windowed values in [0, 255]
    target: np.ndarray  # C x C binary
    stack_id: str
    frame_index: int
    top_left: tuple[int, int]


class TrainingSet:
    """Loaded stacks with cached windowed volumes, indexed by (stack, frame)."""

    def __init__(self, stacks: list[CtStack]):
        if not stacks:
            raise ValueError("empty dataset")
        self.stacks = stacks
        self.windowed: list[WindowedStack] = [window_stack(s) for s in stacks]
        self.frame_index: list[tuple[int, int]] = [
            (si, fi) for si, s in enumerate(stacks) for fi in range(s.depth)
        ]

    @property
    def n_frames(self) -> int:
        return len(self.frame_index)


def sample_center(stack: CtStack, frame: int, rng: np.random.Generator):
    """Pick a patch center: uniform over positive mask pixels, falling back to
    the head region (HU > -500), then to the whole frame."""
    if not 0 <= frame < stack.depth:
        raise ValueError(f"frame {frame} out of range")
    if stack.mask is not None:
        rows, cols = np.nonzero(stack.mask[frame])
        if rows.size:
            j = int(rng.integers(rows.size))
            return int(rows[j]), int(cols[j])
    rows, cols = np.nonzero(stack.frames[frame] > HEAD_HU_THRESHOLD)
    if rows.size:
        j = int(rng.integers(rows.size))
        return int(rows[j]), int(cols[j])
    h, w = stack.frames.shape[1:]
    return int(rng.integers(h)), int(rng.integers(w))


def crop_origin(center, crop_size: int, height: int, width: int):
    """Top-left corner of a C x C crop around center, clamped inside the frame."""
    if crop_size > height or crop_size > width:
        raise ValueError(f"crop size {crop_size} exceeds frame {height}x{width}")
    r = min(max(center[0] - crop_size // 2, 0), height - crop_size)
    c = min(max(center[1] - crop_size // 2, 0), width - crop_size)
    return r, c


def crop_patch(
    dataset: TrainingSet, stack_idx: int, frame: int, center, crop_size: int
) -> PatchSample:
    stack = dataset.stacks[stack_idx]
    h, w = stack.height, stack.width
    r, c = crop_origin(center, crop_size, h, w)
    fused = fuse_z(dataset.windowed[stack_idx], frame)
    patch = fused.channels[:, r : r + crop_size, c : c + crop_size]
    if stack.mask is not None:
        target = stack.mask[frame, r : r + crop_size, c : c + crop_size]
    else:
        target = np.zeros((crop_size, crop_size), dtype=np.uint8)
    return PatchSample(
        input=patch,
        target=target,
        stack_id=stack.stack_id,
        frame_index=frame,
        top_left=(r, c),
    )


def make_batch(
    dataset: TrainingSet, spec: BatchSpec, rng: np.random.Generator
) -> list[PatchSample]:
    """Draw N distinct frames uniformly over all frames, then K patches each."""
    spec.validate()
    n = spec.images_per_batch
    if n > dataset.n_frames:
        raise ValueError(
            f"images_per_batch={n} exceeds available frames ({dataset.n_frames})"
        )
    picks = rng.choice(dataset.n_frames, size=n, replace=False)
    batch = []
    for idx in picks:
        stack_idx, frame = dataset.frame_index[int(idx)]
        for _ in range(spec.patches_per_image):
            center = sample_center(dataset.stacks[stack_idx], frame, rng)
            batch.append(crop_patch(dataset, stack_idx, frame, center, spec.crop_size))
    return batch
