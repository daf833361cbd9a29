"""Sliding-window and fully-convolutional inference, overlap averaging,
ensembling, and the pixel -> frame -> stack score pooling hierarchy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import CtStack, ScoreSummary, ScoreVolume
from .preprocess import fuse_z, window_stack

DEFAULT_BETA = 3.0
DEFAULT_P = 256.0


@dataclass(frozen=True)
class WindowGrid:
    crop_size: int
    beta: float
    windows_per_axis: int
    starts: list[tuple[int, int]]


def window_grid(height: int, crop_size: int, beta: float) -> WindowGrid:
    """Evenly spaced window grid with ceil(beta*H/C) windows per axis.

    The first window is flush with the top/left border, the last with the
    bottom/right border, so every pixel is covered without padding.
    """
    if crop_size > height:
        raise ValueError(f"crop size {crop_size} exceeds image size {height}")
    if beta < 1:
        raise ValueError("beta must be >= 1")
    k = math.ceil(beta * height / crop_size)
    if k == 1:
        axis = [0]
    else:
        axis = [int(round(i * (height - crop_size) / (k - 1))) for i in range(k)]
    starts = [(r, c) for r in axis for c in axis]
    return WindowGrid(crop_size=crop_size, beta=beta, windows_per_axis=k, starts=starts)


def _as_models(backbones) -> list[torch.nn.Module]:
    if isinstance(backbones, torch.nn.Module):
        backbones = [backbones]
    models = list(backbones)
    if not models:
        raise ValueError("need at least one backbone")
    for m in models:
        m.eval()
    return models


def sliding_infer(
    stack: CtStack,
    backbones,
    crop_size: int,
    beta: float = DEFAULT_BETA,
    batch_windows: int = 64,
) -> ScoreVolume:
    """Evaluate every window of the grid and average per-pixel probabilities
    over covering windows; with an ensemble, additionally average over models."""
    grid = window_grid(stack.height, crop_size, beta)
    models = _as_models(backbones)
    windowed = window_stack(stack)
    c = crop_size
    # Coincident windows (e.g. C=H) contribute identical scores; evaluate
    # each distinct window once.
    starts = sorted(set(grid.starts))

    out = np.empty(stack.frames.shape, dtype=np.float32)
    with torch.no_grad():
        for fi in range(stack.depth):
            image = fuse_z(windowed, fi).channels.astype(np.float32)
            acc = np.zeros((stack.height, stack.width), dtype=np.float64)
            cnt = np.zeros((stack.height, stack.width), dtype=np.float64)
            crops = np.stack(
                [image[:, r : r + c, cc : cc + c] for r, cc in starts]
            )
            probs = np.empty((len(models), len(starts), c, c), dtype=np.float64)
            for mi, model in enumerate(models):
                for lo in range(0, len(starts), batch_windows):
                    x = torch.from_numpy(crops[lo : lo + batch_windows])
                    probs[mi, lo : lo + batch_windows] = (
                        torch.sigmoid(model(x)).double().numpy()
                    )
            mean_probs = probs.mean(axis=0)
            for wi, (r, cc) in enumerate(starts):
                acc[r : r + c, cc : cc + c] += mean_probs[wi]
                cnt[r : r + c, cc : cc + c] += 1.0
            out[fi] = (acc / cnt).astype(np.float32)
    return ScoreVolume(stack_id=stack.stack_id, scores=out)


def fullconv_infer(stack: CtStack, backbones) -> ScoreVolume:
    """Single whole-frame forward per frame (the standard FCN baseline)."""
    models = _as_models(backbones)
    windowed = window_stack(stack)
    out = np.empty(stack.frames.shape, dtype=np.float32)
    with torch.no_grad():
        for fi in range(stack.depth):
            x = torch.from_numpy(
                fuse_z(windowed, fi).channels.astype(np.float32)
            ).unsqueeze(0)
            probs = np.stack(
                [torch.sigmoid(m(x))[0].double().numpy() for m in models]
            )
            out[fi] = probs.mean(axis=0).astype(np.float32)
    return ScoreVolume(stack_id=stack.stack_id, scores=out)


def frame_avg_score(scores: np.ndarray) -> float:
    """Arithmetic mean of a frame's pixel scores."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("empty frame")
    return float(scores.mean(dtype=np.float64))


def frame_lp_score(scores: np.ndarray, p: float = DEFAULT_P) -> float:
    """Unnormalized L^p norm of a frame's pixel scores.

    Computed as m * (sum((s/m)^p))^(1/p) with m = max score, which is stable
    for large p where s^p underflows directly.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("empty frame")
    m = float(scores.max())
    if m == 0.0:
        return 0.0
    return float(m * np.power(np.power(scores / m, p).sum(), 1.0 / p))


def stack_score(frame_lp: np.ndarray) -> float:
    """Maximum L^p frame score within the stack."""
    frame_lp = np.asarray(frame_lp)
    if frame_lp.size == 0:
        raise ValueError("empty stack")
    return float(frame_lp.max())


def summarize(volume: ScoreVolume, p: float = DEFAULT_P) -> ScoreSummary:
    """Pixel -> frame -> stack pooling for one score volume."""
    frame_avg = np.array([frame_avg_score(f) for f in volume.scores])
    frame_lp = np.array([frame_lp_score(f, p) for f in volume.scores])
    return ScoreSummary(
        frame_avg=frame_avg,
        frame_lp=frame_lp,
        stack_score=stack_score(frame_lp),
        p=p,
    )
