"""Segmentation backbone and class-reweighted loss.

The backbone contract: forward maps a batch of 3 x C x C inputs (windowed
values in [0, 255]) to a batch of C x C logits, for any C. Crop sizes not
divisible by the network stride are reflection-padded on the right/bottom
and the logits cropped back, so the contract holds for every crop size
used in the ablation grids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

WIDTH_PRESETS = {"tiny": 8, "small": 16, "base": 32}


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 3.0  # positive-class weight

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def weighted_bce(logits: torch.Tensor, targets: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Pixel-mean BCE with the positive-class term weighted by alpha."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    pos_weight = torch.as_tensor(cfg.alpha, dtype=logits.dtype, device=logits.device)
    return F.binary_cross_entropy_with_logits(
        logits, targets.to(logits.dtype), pos_weight=pos_weight
    )


def _block(cin, cout, bias):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=bias),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=bias),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ReferenceNet(nn.Module):
    """Compact batch-normalized encoder-decoder FCN, total stride 8.

    Inputs are divided by 255 in the stem; the head emits one logit per pixel.
    """

    stride = 8
    is_translation_covariant = True

    def __init__(self, width_preset: str = "small", bias: bool = True):
        super().__init__()
        if width_preset not in WIDTH_PRESETS:
            raise ValueError(f"unknown width preset {width_preset!r}")
        w = WIDTH_PRESETS[width_preset]
        self.width_preset = width_preset
        self.bias = bias

        self.stem = _block(3, w, bias)
        self.down1 = _block(w, 2 * w, bias)
        self.down2 = _block(2 * w, 4 * w, bias)
        self.down3 = _block(4 * w, 8 * w, bias)
        self.up3 = _block(8 * w + 4 * w, 4 * w, bias)
        self.up2 = _block(4 * w + 2 * w, 2 * w, bias)
        self.up1 = _block(2 * w + w, w, bias)
        self.head = nn.Conv2d(w, 1, 1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected batch of 3-channel images, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        pad_h = (-h) % self.stride
        pad_w = (-w) % self.stride
        if pad_h or pad_w:
            if h < 2 or w < 2:
                raise ValueError(f"input {h}x{w} too small to pad to a stride multiple")
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")

        x = x / 255.0
        e0 = self.stem(x)
        e1 = self.down1(F.max_pool2d(e0, 2))
        e2 = self.down2(F.max_pool2d(e1, 2))
        e3 = self.down3(F.max_pool2d(e2, 2))
        d2 = self.up3(torch.cat([F.interpolate(e3, scale_factor=2, mode="nearest"), e2], 1))
        d1 = self.up2(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], 1))
        d0 = self.up1(torch.cat([F.interpolate(d1, scale_factor=2, mode="nearest"), e0], 1))
        logits = self.head(d0)[:, 0]
        return logits[:, :h, :w]


def reference_net(width_preset: str = "small", bias: bool = True, seed: int | None = None) -> ReferenceNet:
    """Build the reference backbone; seeding makes initialization reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return ReferenceNet(width_preset=width_preset, bias=bias)


def save_checkpoint(model: ReferenceNet, path: str | Path, config_echo: dict | None = None) -> Path:
    """Checkpoint directory: manifest.json + one raw little-endian blob per entry."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        fname = name.replace(".", "__") + ".bin"
        arr.tofile(path / fname)
        entries.append(
            {"name": name, "file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
    manifest = {
        "width_preset": model.width_preset,
        "bias": model.bias,
        "entries": entries,
        "config": config_echo or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path: str | Path) -> ReferenceNet:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    model = ReferenceNet(width_preset=manifest["width_preset"], bias=manifest["bias"])
    state = {}
    for entry in manifest["entries"]:
        arr = np.fromfile(path / entry["file"], dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model
