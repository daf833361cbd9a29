import dataclasses
import json

import numpy as np
import pytest
import torch

from patchseg.harness import (
    ExperimentCell,
    GridAuditError,
    GridSpec,
    audit_grid,
    batch_diversity_grid,
    context_grid,
    format_results_table,
    grid_from_json,
    inference_mode_grid,
    patch_size_grid,
    render_overlay,
    run_cell,
    run_grid,
    saliency,
    select_component,
)
from patchseg.core import ScoreVolume


def test_patch_size_grid_audit():
    grid = patch_size_grid(total_steps=100)
    audit_grid(grid)
    budgets = {c.batch_size * c.crop_size**2 for c in grid.cells}
    assert len(budgets) == 1


def test_batch_diversity_grid_cells():
    grid = batch_diversity_grid(total_steps=100)
    audit_grid(grid)
    combos = [(c.images_per_batch, c.patches_per_image) for c in grid.cells]
    assert combos == [(16, 1), (8, 2), (4, 4), (2, 8)]
    assert {c.batch_size for c in grid.cells} == {16}


def test_context_grid_audit():
    grid = context_grid(total_steps=100)
    audit_grid(grid)
    assert {c.batch_size for c in grid.cells} == {16}
    assert len({c.crop_size for c in grid.cells}) == len(grid.cells)


def test_inference_mode_grid_dual_modes():
    grid = inference_mode_grid(total_steps=100)
    audit_grid(grid)
    for cell in grid.cells:
        assert cell.infer_modes == ("sliding", "fullconv")


def test_audit_rejects_budget_violation():
    cells = (
        ExperimentCell("a", 32, 16, 1, 100, 0),
        ExperimentCell("b", 64, 16, 1, 100, 1),
    )
    with pytest.raises(GridAuditError):
        audit_grid(GridSpec("bad", "pixel_budget", cells))


def test_audit_rejects_diversity_violation():
    cells = (
        ExperimentCell("a", 32, 16, 1, 100, 0),
        ExperimentCell("b", 32, 8, 1, 100, 1),  # B changes
    )
    with pytest.raises(GridAuditError):
        audit_grid(GridSpec("bad", "batch_diversity", cells))


def test_audit_rejects_step_violation():
    cells = (
        ExperimentCell("a", 32, 16, 1, 100, 0),
        ExperimentCell("b", 32, 16, 1, 200, 1),
    )
    with pytest.raises(GridAuditError):
        audit_grid(GridSpec("bad", "fixed_batch_steps", cells))


def test_grid_json_roundtrip(tmp_path):
    spec = {
        "name": "mini",
        "rule": "custom",
        "cells": [
            {
                "name": "only",
                "crop_size": 32,
                "images_per_batch": 4,
                "patches_per_image": 1,
                "total_steps": 5,
                "seed": 0,
            }
        ],
    }
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(spec))
    grid = grid_from_json(path)
    assert grid.cells[0].crop_size == 32
    audit_grid(grid)


def test_single_cell_grid_matches_direct_run(small_corpus, tmp_path):
    cell = ExperimentCell("only", 32, 4, 1, 8, seed=5)
    grid = GridSpec("mini", "custom", (cell,))
    train_stacks = small_corpus["stacks"][:6]
    test_stacks = small_corpus["stacks"][6:]
    results = run_grid(
        grid, train_stacks, test_stacks, tmp_path / "grid",
        small_corpus["labels"], width_preset="tiny",
    )
    direct = run_cell(
        cell, train_stacks, test_stacks, tmp_path / "direct",
        small_corpus["labels"], width_preset="tiny",
    )
    assert results["cells"]["only"]["reports"]["sliding"] == direct["sliding"].to_dict()
    assert (tmp_path / "grid" / "results.txt").is_file()


def test_grid_continues_after_cell_failure(small_corpus, tmp_path):
    cells = (
        ExperimentCell("bad", 999, 4, 1, 2, seed=0),  # crop larger than frame
        ExperimentCell("good", 32, 4, 1, 2, seed=1),
    )
    grid = GridSpec("mix", "custom", cells)
    results = run_grid(
        grid, small_corpus["stacks"][:6], small_corpus["stacks"][6:],
        tmp_path / "g", small_corpus["labels"], width_preset="tiny",
    )
    assert [f["cell"] for f in results["failed"]] == ["bad"]
    assert "good" in results["cells"]


def test_format_results_table_shows_gaps():
    results = {
        "grid": "t4",
        "rule": "inference_mode",
        "cells": {
            "C32": {
                "config": {},
                "reports": {
                    "sliding": {"dice": 0.8, "jaccard": 0.7, "pixel_ap": 0.9,
                                "frame_ap": 0.9, "stack_auc": 1.0},
                    "fullconv": {"dice": 0.7, "jaccard": 0.6, "pixel_ap": 0.8,
                                 "frame_ap": 0.85, "stack_auc": 0.9},
                },
            }
        },
        "failed": [],
    }
    table = format_results_table(results)
    assert "(-0.100)" in table  # fullconv dice gap vs sliding


def test_select_component():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[1:3, 1:3] = 1
    mask[5:7, 5:7] = 1
    a = select_component(mask, 0)
    b = select_component(mask, 1)
    assert a.sum() == 4 and b.sum() == 4
    assert not (a & b).any()
    with pytest.raises(ValueError):
        select_component(mask, 2)
    with pytest.raises(ValueError):
        select_component(np.zeros((4, 4)), 0)


def positive_frame(stack):
    for fi in range(stack.depth):
        if stack.mask[fi].any():
            return fi
    raise AssertionError("no positive frame")


def test_saliency_shapes(trained_tiny, small_corpus):
    stack = next(s for s in small_corpus["stacks"] if s.label)
    fi = positive_frame(stack)
    region = select_component(stack.mask[fi], 0)
    result = saliency(trained_tiny["model"], stack, fi, region)
    assert result["grad"].shape == (3, stack.height, stack.width)
    assert result["magnitude"].shape == (stack.height, stack.width)


def test_saliency_deterministic_and_additive(trained_tiny, small_corpus):
    stack = next(s for s in small_corpus["stacks"] if s.label)
    fi = positive_frame(stack)
    region = select_component(stack.mask[fi], 0)
    a = saliency(trained_tiny["model"], stack, fi, region)
    b = saliency(trained_tiny["model"], stack, fi, region)
    assert np.array_equal(a["grad"], b["grad"])

    # Linearity of differentiation: splitting the region splits the gradient.
    rows = np.nonzero(region.any(axis=1))[0]
    part1 = region.copy()
    part1[rows[0]] = False
    part2 = region & ~part1
    if part1.any() and part2.any():
        g1 = saliency(trained_tiny["model"], stack, fi, part1)["grad"]
        g2 = saliency(trained_tiny["model"], stack, fi, part2)["grad"]
        assert np.allclose(g1 + g2, a["grad"], atol=1e-5)


def test_saliency_empty_region(trained_tiny, small_corpus):
    stack = small_corpus["stacks"][0]
    with pytest.raises(ValueError):
        saliency(trained_tiny["model"], stack, 0, np.zeros((64, 64), dtype=bool))


def test_saliency_matches_finite_differences(trained_tiny, small_corpus):
    stack = next(s for s in small_corpus["stacks"] if s.label)
    fi = positive_frame(stack)
    region = select_component(stack.mask[fi], 0)
    model = dataclasses_replace_double(trained_tiny["model"])
    result = saliency(model, stack, fi, region)

    from patchseg.preprocess import fuse_z, window_stack

    image = fuse_z(window_stack(stack), fi).channels
    rng = np.random.default_rng(0)
    h = 1e-4
    region_t = torch.from_numpy(region)
    # Probe pixels inside the region where the gradient is well away from 0.
    rows, cols = np.nonzero(region)
    for _ in range(10):
        j = int(rng.integers(rows.size))
        ch = int(rng.integers(3))
        r, c = int(rows[j]), int(cols[j])
        vals = []
        for delta in (h, -h):
            pert = image.copy()
            pert[ch, r, c] += delta
            x = torch.from_numpy(pert[None]).double()
            with torch.no_grad():
                vals.append(float(model(x)[0][region_t].sum()))
        fd = (vals[0] - vals[1]) / (2 * h)
        grad = result["grad"][ch, r, c]
        assert abs(fd - grad) <= 1e-3 * max(abs(grad), abs(fd), 1e-6)


def dataclasses_replace_double(model):
    import copy

    m = copy.deepcopy(model).double().eval()
    return m


def test_render_overlay(trained_tiny, small_corpus, tmp_path):
    stack = small_corpus["stacks"][0]
    scores = np.zeros(stack.frames.shape, dtype=np.float32)
    vol = ScoreVolume(stack.stack_id, scores)
    paths = render_overlay(stack, vol, tmp_path / "ov")
    assert len(paths) == stack.depth
    for p in paths:
        assert p.is_file() and p.suffix == ".png"


def test_render_overlay_shape_mismatch(small_corpus, tmp_path):
    stack = small_corpus["stacks"][0]
    vol = ScoreVolume(stack.stack_id, np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        render_overlay(stack, vol, tmp_path / "ov")
