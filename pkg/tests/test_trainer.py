import json

import numpy as np
import pytest
import torch

from patchseg.model import LossConfig
from patchseg.sampler import BatchSpec, TrainingSet
from patchseg.trainer import (
    TrainConfig,
    epochs_for_steps,
    equalize_budget,
    lr_at,
    train,
)


def cfg_with(total_steps, **kw):
    return TrainConfig(
        spec=BatchSpec(32, 4, 1), total_steps=total_steps, width_preset="tiny", **kw
    )


def test_lr_schedule_values():
    cfg = cfg_with(1000)
    assert lr_at(100, cfg) == 0.005
    assert lr_at(500, cfg) == pytest.approx(0.0005)
    assert lr_at(900, cfg) == pytest.approx(0.00005)


def test_lr_schedule_breakpoints_exact():
    cfg = cfg_with(1000)
    assert lr_at(399, cfg) == 0.005
    assert lr_at(400, cfg) == pytest.approx(0.0005)
    assert lr_at(799, cfg) == pytest.approx(0.0005)
    assert lr_at(800, cfg) == pytest.approx(0.00005)


def test_lr_schedule_three_plateaus():
    for t in (10, 37, 100, 999):
        cfg = cfg_with(t)
        values = [lr_at(s, cfg) for s in range(t)]
        assert (np.diff(values) <= 0).all()
        assert len(set(values)) == 3


def test_lr_out_of_range():
    cfg = cfg_with(100)
    with pytest.raises(ValueError):
        lr_at(100, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_equalize_budget_reference_rows():
    budgets = equalize_budget([80, 120, 160, 240, 480])
    assert budgets[80] == (144, 3600)
    assert budgets[120] == (64, 1600)
    assert budgets[160] == (36, 900)
    assert budgets[240] == (16, 400)
    assert budgets[480] == (4, 100)


def test_equalize_budget_constant_pixels():
    budgets = equalize_budget([80, 120, 160, 240, 480])
    pixels = {b * c * c for c, (b, _) in budgets.items()}
    assert pixels == {16 * 240 * 240}


def test_momentum_sgd_matches_hand_recursion():
    # One-parameter quadratic: loss = 0.5 * w^2, gradient = w.
    w = torch.tensor([2.0], requires_grad=True)
    opt = torch.optim.SGD([w], lr=0.1, momentum=0.9)
    w_ref, v_ref = 2.0, 0.0
    for _ in range(5):
        opt.zero_grad()
        loss = 0.5 * w**2
        loss.backward()
        g = w_ref  # gradient at current reference point
        opt.step()
        v_ref = 0.9 * v_ref + g
        w_ref = w_ref - 0.1 * v_ref
        assert w.item() == pytest.approx(w_ref, abs=1e-7)


def test_invalid_configs():
    with pytest.raises(ValueError):
        cfg_with(0)
    with pytest.raises(ValueError):
        cfg_with(10, lr0=-1.0)


def test_epochs_for_steps():
    assert epochs_for_steps(400, 16, BatchSpec(64, 16, 1)) == 400.0


def test_training_is_deterministic(small_corpus, tmp_path):
    dataset = TrainingSet(small_corpus["stacks"])
    cfg = TrainConfig(
        spec=BatchSpec(32, 4, 1), total_steps=10, seed=7, width_preset="tiny"
    )
    _, rec_a = train(dataset, cfg, tmp_path / "a")
    _, rec_b = train(dataset, cfg, tmp_path / "b")
    assert [(r["step"], r["lr"], r["loss"]) for r in rec_a] == [
        (r["step"], r["lr"], r["loss"]) for r in rec_b
    ]


def test_training_log_and_checkpoint_written(trained_tiny):
    out = trained_tiny["out"]
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == trained_tiny["cfg"].total_steps
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "lr", "loss", "wallclock"}
    assert (out / "ckpt_final" / "manifest.json").is_file()


def test_training_loss_decreases(trained_tiny):
    records = trained_tiny["records"]
    first = np.mean([r["loss"] for r in records[:5]])
    last = np.mean([r["loss"] for r in records[-5:]])
    assert last < first


def test_loss_config_echo_in_checkpoint(trained_tiny):
    manifest = json.loads(
        (trained_tiny["out"] / "ckpt_final" / "manifest.json").read_text()
    )
    assert manifest["config"]["loss"]["alpha"] == LossConfig().alpha
