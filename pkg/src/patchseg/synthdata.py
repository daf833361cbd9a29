"""Deterministic CT-like phantom generator.

Each stack is a head-shaped ellipse of soft-tissue HU with band-limited
texture noise, on an air background, optionally containing 1-3 ellipsoid
"bleed" blobs whose intensity falls off smoothly around the support
boundary. Ground-truth masks are the thresholded blob supports, so pixel
labels are exact by construction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .core import CtStack, save_stack
from .preprocess import hu_window


@dataclass(frozen=True)
class PhantomParams:
    height: int = 128
    width: int = 128
    depth_range: tuple[int, int] = (4, 8)
    head_hu: float = 30.0
    head_hu_sd: float = 10.0
    background_hu: float = -1000.0
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_hu: float = 60.0
    lesion_hu_sd: float = 15.0
    lesion_radius_range: tuple[float, float] = (8.0, 16.0)
    positive_rate: float = 0.5
    seed: int = 0


def render_blob(shape, center, radii):
    """Ellipsoid blob on a D x H x W grid.

    Returns (mask, weight): mask is the binary support (normalized squared
    distance <= 1, so a frame cross-section is an exact disc), weight is a
    smooth falloff that is near 1 over the interior, 0.5 exactly at the
    support boundary, and decays quickly outside, keeping the mask edge
    learnable while leaving a soft halo that defeats plain thresholding.
    """
    d, h, w = shape
    zz, yy, xx = np.ogrid[:d, :h, :w]
    cz, cy, cx = center
    rz, ry, rx = radii
    d2 = ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    weight = expit((1.0 - d2) * 8.0)
    return d2 <= 1.0, weight


def _render_stack(params: PhantomParams, rng: np.random.Generator):
    h, w = params.height, params.width
    d = int(rng.integers(params.depth_range[0], params.depth_range[1] + 1))

    # Head ellipse, shared across frames.
    cy, cx = h / 2 + rng.uniform(-3, 3), w / 2 + rng.uniform(-3, 3)
    ry = h * rng.uniform(0.36, 0.44)
    rx = w * rng.uniform(0.36, 0.44)
    yy, xx = np.ogrid[:h, :w]
    head2d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    head = np.broadcast_to(head2d, (d, h, w))

    noise = rng.normal(size=(d, h, w))
    noise = gaussian_filter(noise, sigma=(0, 2.0, 2.0))
    noise *= params.head_hu_sd / max(noise.std(), 1e-9)

    hu = np.full((d, h, w), params.background_hu)
    hu[head] = params.head_hu + noise[head]

    lo, hi = params.lesion_count_range
    n_lesions = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    mask = np.zeros((d, h, w), dtype=np.uint8)
    for _ in range(n_lesions):
        r = rng.uniform(*params.lesion_radius_range)
        if r >= min(ry, rx):
            raise ValueError(
                f"lesion radius {r:.1f} exceeds head radius {min(ry, rx):.1f}"
            )
        # Keep the blob center well inside the head and the z-extent wide
        # enough that the lesion always spans >= 2 adjacent frames.
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0, 0.55)
        bc_y = cy + rad * ry * np.sin(ang)
        bc_x = cx + rad * rx * np.cos(ang)
        bc_z = rng.uniform(0.5, d - 1.5) if d >= 2 else 0.0
        rz = rng.uniform(1.2, 2.5)
        blob, weight = render_blob((d, h, w), (bc_z, bc_y, bc_x), (rz, r, r))
        blob = blob & head
        lesion_hu = np.clip(rng.normal(params.lesion_hu, params.lesion_hu_sd), 50, 95)
        hu = hu + (lesion_hu - params.head_hu) * weight * head
        mask[blob] = 1

    frames = np.clip(np.rint(hu), -1024, 3071).astype(np.int16)
    return CtStack(stack_id="", frames=frames, mask=mask), head2d


def generate_stack(params: PhantomParams, stack_seed: int) -> CtStack:
    """Deterministic phantom stack; all randomness flows from (params.seed, stack_seed)."""
    for attempt in range(8):
        rng = np.random.default_rng([params.seed, stack_seed, attempt])
        stack, _ = _render_stack(params, rng)
        if not _valid(stack, params):
            continue
        return CtStack(
            stack_id=f"stack_{stack_seed:04d}", frames=stack.frames, mask=stack.mask
        )
    raise RuntimeError(f"could not render a valid stack for seed {stack_seed}")


def _valid(stack: CtStack, params: PhantomParams) -> bool:
    """Lesions must span >=2 adjacent frames and stand out after windowing."""
    if params.lesion_count_range[1] == 0:
        return True
    mask = stack.mask
    frames_pos = mask.any(axis=(1, 2))
    if stack.depth >= 2:
        adjacent = (frames_pos[:-1] & frames_pos[1:]).any()
        if not adjacent:
            return False
    windowed = hu_window(stack.frames)
    tissue = (stack.frames > -500) & (mask == 0)
    if not mask.any() or not tissue.any():
        return False
    return windowed[mask == 1].mean() > windowed[tissue].mean()


def generate_dataset(
    params: PhantomParams, n_stacks: int, out_dir: str | Path
) -> dict:
    """Write n_stacks phantom stacks plus a manifest.json listing labels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_pos = int(round(params.positive_rate * n_stacks))
    rng = np.random.default_rng([params.seed, 0xD5])
    positive = np.zeros(n_stacks, dtype=bool)
    positive[rng.permutation(n_stacks)[:n_pos]] = True

    neg_params = dataclasses.replace(params, lesion_count_range=(0, 0))
    entries = []
    for i in range(n_stacks):
        stack = generate_stack(params if positive[i] else neg_params, i)
        save_stack(stack, out_dir / stack.stack_id)
        entries.append({"stack_id": stack.stack_id, "label": int(positive[i])})

    manifest = {"params": dataclasses.asdict(params), "stacks": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
