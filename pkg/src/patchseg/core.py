"""Domain types, on-disk stack format, and fold splitting.

A "stack" is one full head CT scan: D axial frames of H x W signed
Hounsfield units, optionally paired with a per-voxel binary mask.
Stacks are stored one directory per stack: a small JSON header plus raw
little-endian binary payloads (int16 HU, uint8 mask, float32 scores).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HU_DTYPE = np.dtype("<i2")
MASK_DTYPE = np.dtype("u1")
SCORE_DTYPE = np.dtype("<f4")


class StackFormatError(Exception):
    """Missing or malformed stack header."""


class StackCorruptionError(Exception):
    """Header and payload disagree (shape / size mismatch)."""


@dataclass(frozen=True)
class CtStack:
    """A D x H x W signed-HU volume with an optional binary mask."""

    stack_id: str
    frames: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be 3-D, got shape {self.frames.shape}")
        d, h, w = self.frames.shape
        if d < 1:
            raise ValueError("stack needs at least one frame")
        if h != w:
            raise ValueError(f"frames must be square, got {h}x{w}")
        if self.mask is not None:
            if self.mask.shape != self.frames.shape:
                raise ValueError("mask shape must match frames")
            vals = np.unique(self.mask)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")

    @property
    def depth(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def label(self) -> int:
        """Stack-level positivity: any positive voxel in the mask."""
        if self.mask is None:
            return 0
        return int(self.mask.any())


@dataclass(frozen=True)
class ScoreVolume:
    """Per-voxel probability volume aligned with its source stack."""

    stack_id: str
    scores: np.ndarray

    def __post_init__(self):
        if self.scores.ndim != 3:
            raise ValueError("scores must be 3-D")
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")


@dataclass(frozen=True)
class ScoreSummary:
    """Frame-average scores, L^p frame scores, and the stack score."""

    frame_avg: np.ndarray
    frame_lp: np.ndarray
    stack_score: float
    p: float

    def to_dict(self) -> dict:
        return {
            "frame_avg": [float(v) for v in self.frame_avg],
            "frame_lp": [float(v) for v in self.frame_lp],
            "stack_score": float(self.stack_score),
            "p": float(self.p),
        }


@dataclass(frozen=True)
class FoldSplit:
    """Partition of stack ids into near-equal folds."""

    fold_count: int
    assignment: dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)


def split_folds(stack_ids: list[str], fold_count: int, seed: int) -> FoldSplit:
    """Seeded shuffle then round-robin assignment into fold_count folds."""
    if fold_count < 1:
        raise ValueError("fold_count must be positive")
    if fold_count > len(stack_ids):
        raise ValueError(
            f"fold_count={fold_count} exceeds number of stacks ({len(stack_ids)})"
        )
    order = list(stack_ids)
    random.Random(seed).shuffle(order)
    return FoldSplit(
        fold_count=fold_count,
        assignment={sid: i % fold_count for i, sid in enumerate(order)},
    )


def save_stack(stack: CtStack, path: str | Path) -> Path:
    """Write a stack directory: header.json, frames.bin, optional mask.bin."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    d, h, w = stack.frames.shape
    header = {
        "stack_id": stack.stack_id,
        "D": d,
        "H": h,
        "W": w,
        "hu_dtype": "int16-le",
        "has_mask": stack.mask is not None,
    }
    (path / "header.json").write_text(json.dumps(header, indent=2))
    stack.frames.astype(HU_DTYPE).tofile(path / "frames.bin")
    if stack.mask is not None:
        stack.mask.astype(MASK_DTYPE).tofile(path / "mask.bin")
    return path


def load_stack(path: str | Path) -> CtStack:
    """Load a stack directory written by save_stack. Round-trips bit-exactly."""
    path = Path(path)
    header_path = path / "header.json"
    if not header_path.is_file():
        raise StackFormatError(f"no header.json in {path}")
    try:
        header = json.loads(header_path.read_text())
        d, h, w = int(header["D"]), int(header["H"]), int(header["W"])
        stack_id = header["stack_id"]
        has_mask = bool(header["has_mask"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise StackFormatError(f"garbled header in {path}: {e}") from e
    if header.get("hu_dtype") != "int16-le":
        raise StackFormatError(f"unsupported hu_dtype {header.get('hu_dtype')!r}")

    frames_raw = np.fromfile(path / "frames.bin", dtype=HU_DTYPE)
    if frames_raw.size != d * h * w:
        raise StackCorruptionError(
            f"frames.bin holds {frames_raw.size} values, header declares {d * h * w}"
        )
    frames = frames_raw.reshape(d, h, w)

    mask = None
    if has_mask:
        mask_path = path / "mask.bin"
        if not mask_path.is_file():
            raise StackCorruptionError(f"header declares mask but {mask_path} missing")
        mask_raw = np.fromfile(mask_path, dtype=MASK_DTYPE)
        if mask_raw.size != d * h * w:
            raise StackCorruptionError(
                f"mask.bin holds {mask_raw.size} values, header declares {d * h * w}"
            )
        mask = mask_raw.reshape(d, h, w)
    return CtStack(stack_id=stack_id, frames=frames, mask=mask)


def save_scores(volume: ScoreVolume, path: str | Path) -> Path:
    """Write a score volume directory: header.json + scores.bin (float32-le)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    d, h, w = volume.scores.shape
    header = {
        "stack_id": volume.stack_id,
        "D": d,
        "H": h,
        "W": w,
        "dtype": "float32-le",
    }
    (path / "header.json").write_text(json.dumps(header, indent=2))
    volume.scores.astype(SCORE_DTYPE).tofile(path / "scores.bin")
    return path


def load_scores(path: str | Path) -> ScoreVolume:
    path = Path(path)
    header_path = path / "header.json"
    if not header_path.is_file():
        raise StackFormatError(f"no header.json in {path}")
    try:
        header = json.loads(header_path.read_text())
        d, h, w = int(header["D"]), int(header["H"]), int(header["W"])
        stack_id = header["stack_id"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise StackFormatError(f"garbled header in {path}: {e}") from e
    raw = np.fromfile(path / "scores.bin", dtype=SCORE_DTYPE)
    if raw.size != d * h * w:
        raise StackCorruptionError(
            f"scores.bin holds {raw.size} values, header declares {d * h * w}"
        )
    return ScoreVolume(stack_id=stack_id, scores=raw.reshape(d, h, w))
