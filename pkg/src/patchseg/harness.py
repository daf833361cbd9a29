"""Ablation grids with controlled-variable audits, gradient saliency maps,
and prediction/ground-truth overlay rendering."""

from __future__ import annotations

import dataclasses
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import label as cc_label

from .core import CtStack, ScoreVolume, save_scores
from .inference import fullconv_infer, sliding_infer, summarize
from .metrics import EvalReport, evaluate
from .model import LossConfig
from .preprocess import fuse_z, hu_window, window_stack
from .sampler import BatchSpec, TrainingSet
from .trainer import TrainConfig, equalize_budget, train

# Desk-scale geometry: H=128 frames, crop sizes kept at the same C/H ratios
# as the 512-pixel clinical grids (80..480 -> 20..120).
DESK_H = 128
DESK_REF_CROP = 60
DESK_REF_BATCH = 16


@dataclass(frozen=True)
class ExperimentCell:
    name: str
    crop_size: int
    images_per_batch: int
    patches_per_image: int
    total_steps: int
    seed: int
    infer_modes: tuple[str, ...] = ("sliding",)

    @property
    def batch_size(self) -> int:
        return self.images_per_batch * self.patches_per_image


@dataclass(frozen=True)
class GridSpec:
    name: str
    rule: str  # pixel_budget | batch_diversity | fixed_batch_steps | inference_mode | custom
    cells: tuple[ExperimentCell, ...]


class GridAuditError(AssertionError):
    """A grid violates its controlled-variable rule."""


def audit_grid(grid: GridSpec):
    """Assert the controlled-variable contract of each grid family."""
    cells = grid.cells
    if not cells:
        raise GridAuditError("empty grid")
    steps = {c.total_steps for c in cells}
    if grid.rule in ("pixel_budget", "inference_mode"):
        budgets = {c.batch_size * c.crop_size**2 for c in cells}
        if len(budgets) != 1:
            raise GridAuditError(f"input-pixel budget varies: {sorted(budgets)}")
        if len(steps) != 1:
            raise GridAuditError(f"gradient-step count varies: {sorted(steps)}")
    elif grid.rule == "batch_diversity":
        bs = {c.batch_size for c in cells}
        cs = {c.crop_size for c in cells}
        if len(bs) != 1 or len(cs) != 1:
            raise GridAuditError(f"batch size / crop size must be fixed: B={bs}, C={cs}")
        for c in cells:
            if c.images_per_batch * c.patches_per_image != c.batch_size:
                raise GridAuditError(f"N*K != B in cell {c.name}")
        if len(steps) != 1:
            raise GridAuditError(f"gradient-step count varies: {sorted(steps)}")
    elif grid.rule == "fixed_batch_steps":
        bs = {c.batch_size for c in cells}
        if len(bs) != 1 or len(steps) != 1:
            raise GridAuditError(f"batch size / steps must be fixed: B={bs}, steps={steps}")
    elif grid.rule != "custom":
        raise GridAuditError(f"unknown grid rule {grid.rule!r}")


def patch_size_grid(total_steps: int = 300, seed: int = 0) -> GridSpec:
    """Crop-size sweep at constant input pixels per batch and constant steps."""
    crops = [20, 30, 40, DESK_REF_CROP, 120]
    budgets = equalize_budget(crops, ref_crop=DESK_REF_CROP, ref_batch=DESK_REF_BATCH,
                              ref_epochs=total_steps)
    cells = tuple(
        ExperimentCell(
            name=f"C{c}",
            crop_size=c,
            images_per_batch=budgets[c][0],
            patches_per_image=1,
            total_steps=total_steps,
            seed=seed + i,
        )
        for i, c in enumerate(crops)
    )
    return GridSpec(name="table1", rule="pixel_budget", cells=cells)


def batch_diversity_grid(total_steps: int = 300, seed: int = 0) -> GridSpec:
    """(N, K) sweep at fixed B=16 and fixed crop size."""
    combos = [(16, 1), (8, 2), (4, 4), (2, 8)]
    cells = tuple(
        ExperimentCell(
            name=f"N{n}K{k}",
            crop_size=DESK_REF_CROP,
            images_per_batch=n,
            patches_per_image=k,
            total_steps=total_steps,
            seed=seed + i,
        )
        for i, (n, k) in enumerate(combos)
    )
    return GridSpec(name="table2", rule="batch_diversity", cells=cells)


def context_grid(total_steps: int = 300, seed: int = 0) -> GridSpec:
    """Crop-size sweep at fixed batch size and fixed steps (pixels vary)."""
    crops = [16, 30, DESK_REF_CROP, 90, 120]
    cells = tuple(
        ExperimentCell(
            name=f"C{c}",
            crop_size=c,
            images_per_batch=DESK_REF_BATCH,
            patches_per_image=1,
            total_steps=total_steps,
            seed=seed + i,
        )
        for i, c in enumerate(crops)
    )
    return GridSpec(name="table3", rule="fixed_batch_steps", cells=cells)


def inference_mode_grid(total_steps: int = 300, seed: int = 0) -> GridSpec:
    """Patch-size grid with each checkpoint evaluated in both inference modes."""
    base = patch_size_grid(total_steps, seed)
    cells = tuple(
        dataclasses.replace(c, infer_modes=("sliding", "fullconv")) for c in base.cells
    )
    return GridSpec(name="table4", rule="inference_mode", cells=cells)


GRID_BUILDERS = {
    "table1": patch_size_grid,
    "table2": batch_diversity_grid,
    "table3": context_grid,
    "table4": inference_mode_grid,
}


def grid_from_json(path: str | Path) -> GridSpec:
    d = json.loads(Path(path).read_text())
    cells = tuple(
        ExperimentCell(**{**c, "infer_modes": tuple(c.get("infer_modes", ("sliding",)))})
        for c in d["cells"]
    )
    return GridSpec(name=d.get("name", "custom"), rule=d.get("rule", "custom"), cells=cells)


def run_cell(
    cell: ExperimentCell,
    train_stacks: list[CtStack],
    test_stacks: list[CtStack],
    out_dir: Path,
    stack_labels: dict[str, int] | None = None,
    beta: float = 3.0,
    p: float = 256.0,
    width_preset: str = "small",
) -> dict[str, EvalReport]:
    """Train one cell and evaluate it in each configured inference mode."""
    cfg = TrainConfig(
        spec=BatchSpec(cell.crop_size, cell.images_per_batch, cell.patches_per_image),
        total_steps=cell.total_steps,
        loss=LossConfig(),
        seed=cell.seed,
        width_preset=width_preset,
    )
    model, _ = train(TrainingSet(train_stacks), cfg, out_dir / "train")
    reports = {}
    for mode in cell.infer_modes:
        volumes = []
        stack_scores = {}
        for stack in test_stacks:
            if mode == "sliding":
                vol = sliding_infer(stack, model, cell.crop_size, beta)
            elif mode == "fullconv":
                vol = fullconv_infer(stack, model)
            else:
                raise ValueError(f"unknown inference mode {mode!r}")
            volumes.append(vol)
            stack_scores[stack.stack_id] = summarize(vol, p).stack_score
        report = evaluate(volumes, test_stacks, stack_labels, stack_scores=stack_scores)
        report.save(out_dir / f"report_{mode}.json")
        reports[mode] = report
    return reports


def run_grid(
    grid: GridSpec,
    train_stacks: list[CtStack],
    test_stacks: list[CtStack],
    out_dir: str | Path,
    stack_labels: dict[str, int] | None = None,
    beta: float = 3.0,
    p: float = 256.0,
    width_preset: str = "small",
) -> dict:
    """Audit then run every cell; failures are recorded and the grid continues."""
    audit_grid(grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {"grid": grid.name, "rule": grid.rule, "cells": {}, "failed": []}
    for cell in grid.cells:
        cell_dir = out_dir / cell.name
        try:
            reports = run_cell(
                cell, train_stacks, test_stacks, cell_dir, stack_labels,
                beta=beta, p=p, width_preset=width_preset,
            )
            results["cells"][cell.name] = {
                "config": dataclasses.asdict(cell),
                "reports": {m: r.to_dict() for m, r in reports.items()},
            }
        except Exception as e:  # noqa: BLE001 - cell isolation is the contract
            (cell_dir / "error.txt").parent.mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.txt").write_text(traceback.format_exc())
            results["failed"].append({"cell": cell.name, "error": str(e)})
    (out_dir / "results.json").write_text(json.dumps(results, indent=2))
    (out_dir / "results.txt").write_text(format_results_table(results))
    return results


def format_results_table(results: dict) -> str:
    """Text table: one column per cell, one row per metric; for dual-mode
    cells the sliding-minus-fullconv gap is shown next to the fullconv value."""
    metrics = ("dice", "jaccard", "pixel_ap", "frame_ap", "stack_auc")
    names = list(results["cells"])
    lines = [f"grid: {results['grid']} (rule: {results['rule']})"]
    header = "metric".ljust(22) + "".join(n.rjust(18) for n in names)
    lines.append(header)
    for metric in metrics:
        for mode in ("sliding", "fullconv"):
            row = []
            present = False
            for n in names:
                reports = results["cells"][n]["reports"]
                if mode not in reports:
                    row.append("-".rjust(18))
                    continue
                present = True
                val = reports[mode][metric]
                cellstr = f"{val:.3f}"
                if mode == "fullconv" and "sliding" in reports:
                    gap = val - reports["sliding"][metric]
                    cellstr += f" ({gap:+.3f})"
                row.append(cellstr.rjust(18))
            if present:
                lines.append(f"{metric} [{mode}]".ljust(22) + "".join(row))
    if results["failed"]:
        lines.append("failed cells: " + ", ".join(f["cell"] for f in results["failed"]))
    return "\n".join(lines) + "\n"


def select_component(mask_frame: np.ndarray, component: int = 0) -> np.ndarray:
    """Boolean mask of the component-th connected region of a frame's mask."""
    labeled, n = cc_label(mask_frame > 0)
    if n == 0:
        raise ValueError("frame mask has no positive region")
    if not 0 <= component < n:
        raise ValueError(f"component {component} out of range (frame has {n})")
    return labeled == component + 1


def saliency(model, stack: CtStack, frame: int, region: np.ndarray) -> dict:
    """Gradient of the region's summed logits w.r.t. the fused input frame.

    Returns the per-channel gradient (3 x H x W) and the channel-summed
    absolute magnitude (H x W).
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("empty saliency region")
    windowed = window_stack(stack)
    image = fuse_z(windowed, frame).channels
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(image[None]).to(dtype).requires_grad_(True)
    model.eval()
    logits = model(x)[0]
    objective = logits[torch.from_numpy(region)].sum()
    objective.backward()
    grad = x.grad[0].numpy()
    return {"grad": grad, "magnitude": np.abs(grad).sum(axis=0)}


def render_overlay(
    stack: CtStack,
    volume: ScoreVolume,
    out_dir: str | Path,
    threshold: float = 0.5,
) -> list[Path]:
    """Per-frame side-by-side PNGs: prediction overlay (left), ground truth (right)."""
    if volume.scores.shape != stack.frames.shape:
        raise ValueError("score volume shape does not match stack")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fi in range(stack.depth):
        base = hu_window(stack.frames[fi]).astype(np.uint8)
        gray = np.stack([base] * 3, axis=-1)

        pred_panel = gray.copy()
        pred = volume.scores[fi] >= threshold
        pred_panel[pred] = (0.4 * pred_panel[pred] + 0.6 * np.array([255, 0, 0])).astype(
            np.uint8
        )
        gt_panel = gray.copy()
        if stack.mask is not None:
            gt = stack.mask[fi] > 0
            gt_panel[gt] = (0.4 * gt_panel[gt] + 0.6 * np.array([0, 255, 0])).astype(
                np.uint8
            )
        panel = np.concatenate([pred_panel, gt_panel], axis=1)
        path = out_dir / f"{stack.stack_id}_frame{fi:03d}.png"
        Image.fromarray(panel).save(path)
        paths.append(path)
    return paths
