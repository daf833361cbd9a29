"""Evaluation metrics with independent brute-force oracles.

Dice / Jaccard at a fixed threshold, average precision, ROC AUC
(Mann-Whitney form), pooled evaluation over a test corpus, and k-fold
cross-validation aggregation. The *_oracle functions deliberately use
naive enumeration so the fast implementations can be checked against them.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CtStack, FoldSplit, ScoreVolume, split_folds
from .inference import frame_avg_score


class UndefinedMetricError(ValueError):
    """Metric has no defined value for this input (e.g. single-class labels)."""


@dataclass
class EvalReport:
    dice: float
    jaccard: float
    pixel_ap: float
    frame_ap: float
    stack_auc: float
    tp: int
    fp: int
    fn: int
    threshold: float = 0.5
    per_fold: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def dice_jaccard(scores: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5):
    """Overlap metrics after binarizing scores; (1, 1) when both sets empty."""
    scores = np.asarray(scores)
    gt_mask = np.asarray(gt_mask)
    if scores.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {gt_mask.shape}")
    pred = scores >= threshold
    gt = gt_mask > 0
    inter = int((pred & gt).sum())
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0, 1.0
    union = p + g - inter
    dice = 2.0 * inter / (p + g)
    jaccard = inter / union if union else 1.0
    return dice, jaccard


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve (non-interpolated).

    Items with equal scores enter the curve as one group (tie-averaging):
    precision is evaluated at each distinct-score cut, weighted by the
    recall gained at that cut.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision undefined without positives")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.int64)
    cum_tp = np.cumsum(y)
    cum_n = np.arange(1, s.size + 1)
    # Last index of each distinct-score group = a valid threshold cut.
    cut = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = cum_tp[cut]
    precision = tp / cum_n[cut]
    d_tp = np.diff(np.concatenate(([0], tp)))
    return float((precision * d_tp).sum() / n_pos)


def average_precision_oracle(scores, labels) -> float:
    """Exhaustive threshold sweep over all distinct scores."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision undefined without positives")
    ap = 0.0
    prev_tp = 0
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = int((pred & labels).sum())
        precision = tp / int(pred.sum())
        ap += precision * (tp - prev_tp)
        prev_tp = tp
    return ap / n_pos


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC undefined for single-class labels")
    # Midranks handle ties exactly.
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_oracle(scores, labels) -> float:
    """Direct enumeration over all (positive, negative) pairs."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("ROC AUC undefined for single-class labels")
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (pos.size * neg.size)


def evaluate(
    volumes: list[ScoreVolume],
    stacks: list[CtStack],
    stack_labels: dict[str, int] | None = None,
    threshold: float = 0.5,
    stack_scores: dict[str, float] | None = None,
) -> EvalReport:
    """Pooled pixel metrics + frame AP + stack ROC AUC over a test corpus.

    Pixel metrics pool every test pixel globally. Frame labels are "any
    positive ground-truth pixel in the frame"; stack labels come from the
    manifest when given, else from the mask. Stack scores default to the
    max L^p frame score (p=256) unless supplied.
    """
    by_id = {s.stack_id: s for s in stacks}
    if {v.stack_id for v in volumes} != set(by_id):
        raise ValueError("score volumes and ground-truth stacks have unmatched ids")

    all_scores, all_masks = [], []
    frame_scores, frame_labels = [], []
    stk_scores, stk_labels = [], []
    from .inference import summarize  # local to avoid cycle at import time

    for vol in volumes:
        stack = by_id[vol.stack_id]
        if stack.mask is None:
            raise ValueError(f"stack {stack.stack_id} has no ground-truth mask")
        if vol.scores.shape != stack.mask.shape:
            raise ValueError(f"shape mismatch for stack {stack.stack_id}")
        all_scores.append(vol.scores.ravel())
        all_masks.append(stack.mask.ravel())
        for fi in range(stack.depth):
            frame_scores.append(frame_avg_score(vol.scores[fi]))
            frame_labels.append(int(stack.mask[fi].any()))
        if stack_scores is not None:
            stk_scores.append(stack_scores[vol.stack_id])
        else:
            stk_scores.append(summarize(vol).stack_score)
        if stack_labels is not None:
            stk_labels.append(int(stack_labels[vol.stack_id]))
        else:
            stk_labels.append(stack.label)

    pixel_scores = np.concatenate(all_scores)
    pixel_gt = np.concatenate(all_masks)
    dice, jaccard = dice_jaccard(pixel_scores, pixel_gt, threshold)
    pred = pixel_scores >= threshold
    gt = pixel_gt > 0
    return EvalReport(
        dice=dice,
        jaccard=jaccard,
        pixel_ap=average_precision(pixel_scores, pixel_gt),
        frame_ap=average_precision(frame_scores, frame_labels),
        stack_auc=roc_auc(stk_scores, stk_labels),
        tp=int((pred & gt).sum()),
        fp=int((pred & ~gt).sum()),
        fn=int((~pred & gt).sum()),
        threshold=threshold,
    )


METRIC_NAMES = ("dice", "jaccard", "pixel_ap", "frame_ap", "stack_auc")


def cross_validate(
    stack_ids: list[str],
    fold_count: int,
    seed: int,
    run_fold,
) -> dict:
    """k-fold aggregation: run_fold(train_ids, test_ids, fold) -> EvalReport.

    Returns per-metric mean and population standard deviation across folds,
    plus the per-fold reports.
    """
    if fold_count < 2:
        raise ValueError("need at least 2 folds")
    split: FoldSplit = split_folds(stack_ids, fold_count, seed)
    reports = {}
    for fold in range(fold_count):
        test_ids = split.fold_ids(fold)
        train_ids = [s for s in stack_ids if split.assignment[s] != fold]
        reports[fold] = run_fold(train_ids, test_ids, fold)

    summary = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(reports[f], name) for f in reports])
        summary[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return {"folds": {f: r.to_dict() for f, r in reports.items()}, "summary": summary}
