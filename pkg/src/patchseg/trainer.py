"""SGD training loop with the staged learning-rate schedule, controlled-budget
bookkeeping for the ablation grids, and checkpointing."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import LossConfig, reference_net, save_checkpoint, weighted_bce
from .sampler import BatchSpec, TrainingSet, make_batch


@dataclass(frozen=True)
class TrainConfig:
    spec: BatchSpec
    total_steps: int
    lr0: float = 0.005
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    width_preset: str = "small"
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        self.spec.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["spec"] = BatchSpec(**d["spec"])
        d["loss"] = LossConfig(**d.get("loss", {}))
        return TrainConfig(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Staged schedule: x0.1 after 40% and again after 80% of total steps."""
    t = cfg.total_steps
    if not 0 <= step < t:
        raise ValueError(f"step {step} out of range for total_steps={t}")
    if step < (4 * t) // 10:
        return cfg.lr0
    if step < (8 * t) // 10:
        return cfg.lr0 * 0.1
    return cfg.lr0 * 0.01


def epochs_for_steps(total_steps: int, n_frames: int, spec: BatchSpec) -> float:
    """One epoch = n_frames / images_per_batch gradient steps."""
    return total_steps * spec.images_per_batch / n_frames


def equalize_budget(
    crop_sizes: list[int],
    ref_crop: int = 240,
    ref_batch: int = 16,
    ref_epochs: int = 400,
) -> dict[int, tuple[int, int]]:
    """Per-crop (batch_size, epochs) holding input pixels per batch and total
    gradient steps constant relative to the reference row.

    Batch sizes that do not divide evenly are rounded to the nearest integer
    >= 1; the rounding shows up in the returned exact values.
    """
    out = {}
    for c in crop_sizes:
        if c <= 0:
            raise ValueError("crop size must be positive")
        b = max(1, int(round(ref_batch * (ref_crop / c) ** 2)))
        epochs = max(1, int(round(ref_epochs * b / ref_batch)))
        out[c] = (b, epochs)
    return out


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, dump_path: Path | None):
        self.step = step
        self.dump_path = dump_path
        super().__init__(f"non-finite loss {loss} at step {step} (dump: {dump_path})")


def train(
    dataset: TrainingSet,
    cfg: TrainConfig,
    out_dir: str | Path,
    model: torch.nn.Module | None = None,
    log_every: int = 1,
):
    """Run the training loop; returns (model, log records).

    Writes `train_log.jsonl` ({step, lr, loss, wallclock} per record) and a
    final checkpoint under out_dir. Fully reproducible for a fixed seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = reference_net(cfg.width_preset, seed=cfg.seed)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum)

    records = []
    t0 = time.monotonic()
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as log:
        for step in range(cfg.total_steps):
            lr = lr_at(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr

            rng = np.random.default_rng([cfg.seed, step])
            batch = make_batch(dataset, cfg.spec, rng)
            x = torch.from_numpy(
                np.stack([s.input for s in batch]).astype(np.float32)
            )
            y = torch.from_numpy(np.stack([s.target for s in batch]).astype(np.float32))

            opt.zero_grad()
            logits = model(x)
            loss = weighted_bce(logits, y, cfg.loss)
            loss_val = float(loss.item())
            if not np.isfinite(loss_val):
                dump = out_dir / "diverged"
                save_checkpoint(model, dump, cfg.to_dict())
                raise TrainingDiverged(step, loss_val, dump)
            loss.backward()
            opt.step()

            if step % log_every == 0 or step == cfg.total_steps - 1:
                rec = {
                    "step": step,
                    "lr": lr,
                    "loss": loss_val,
                    "wallclock": time.monotonic() - t0,
                }
                records.append(rec)
                log.write(json.dumps(rec) + "\n")

            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"ckpt_{step + 1:06d}", cfg.to_dict())

    model.eval()
    save_checkpoint(model, out_dir / "ckpt_final", cfg.to_dict())
    return model, records
