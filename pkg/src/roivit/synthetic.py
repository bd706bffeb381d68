"""Seeded synthetic benchmark: colored shapes over textured clutter.

Four shape classes (disk, square, triangle, cross), each with a signature
color, drawn at a random position and scale over a procedurally textured
background. Higher `clutter` adds more distractor blobs, streaks and
speckle; `scale_range` controls how much of the frame the target covers,
so small-object/complex-background regimes can be dialed in. Ground-truth
silhouette masks are written alongside the images.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ppm import write_ppm

CLASS_NAMES = ("disk", "square", "triangle", "cross")
_CLASS_COLORS = {
    "disk": (0.88, 0.16, 0.12),
    "square": (0.15, 0.78, 0.18),
    "triangle": (0.16, 0.32, 0.90),
    "cross": (0.92, 0.86, 0.14),
}


@dataclass
class SyntheticItem:
    image_path: Path
    mask_path: Path
    label: int


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "cross":
        arm = max(r / 3.0, 1.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {kind}")


def _box_blur(img: np.ndarray, passes: int = 2) -> np.ndarray:
    out = img
    for _ in range(passes):
        acc = out.copy()
        acc[:, 1:, :] += out[:, :-1, :]
        acc[:, :-1, :] += out[:, 1:, :]
        acc[:, :, 1:] += out[:, :, :-1]
        acc[:, :, :-1] += out[:, :, 1:]
        out = acc / 5.0
    return out


def _textured_background(rng: np.random.Generator, size: int, clutter: float) -> np.ndarray:
    base = rng.uniform(0.15, 0.75, size=3)[:, None, None] * np.ones((3, size, size))
    noise = rng.normal(0.0, 0.22 + 0.25 * clutter, size=(3, size, size))
    img = base + _box_blur(noise, passes=2)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_blobs = int(round(2 + 9 * clutter))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, size=2)
        ax, ay = rng.uniform(1.0, size / 4.0, size=2)
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        blob = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        color = rng.uniform(0.05, 0.9, size=3)
        alpha = rng.uniform(0.35, 0.8)
        img[:, blob] = (1 - alpha) * img[:, blob] + alpha * color[:, None]

    n_streaks = int(round(1 + 6 * clutter))
    for _ in range(n_streaks):
        x0, y0 = rng.uniform(0, size, size=2)
        angle = rng.uniform(0, np.pi)
        d = np.abs((xx - x0) * np.sin(angle) - (yy - y0) * np.cos(angle))
        streak = d <= rng.uniform(0.5, 1.3)
        color = rng.uniform(0.05, 0.95, size=3)
        img[:, streak] = 0.5 * img[:, streak] + 0.5 * color[:, None]

    img += rng.normal(0.0, 0.02 + 0.05 * clutter, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_sample(
    rng: np.random.Generator,
    label: int,
    size: int,
    scale_range: tuple[float, float],
    clutter: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image [3,S,S], mask [S,S]) pair in [0,1]."""
    kind = CLASS_NAMES[label]
    img = _textured_background(rng, size, clutter)
    r = rng.uniform(*scale_range) * size / 2.0
    r = max(r, 2.0)
    margin = r + 1.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    mask = _shape_mask(kind, size, cx, cy, r)
    color = np.array(_CLASS_COLORS[kind]) + rng.normal(0.0, 0.03, size=3)
    color = np.clip(color, 0.0, 1.0)
    img[:, mask] = color[:, None]
    return img, mask.astype(np.float64)


def generate(
    root,
    seed: int,
    per_class: int = 10,
    image_size: int = 32,
    scale_range: tuple[float, float] = (0.3, 0.5),
    clutter: float = 0.4,
    split: str = "train",
) -> list[SyntheticItem]:
    """Write `<root>/<split>/<class>/*.ppm` plus `<root>/<split>_masks/...`.

    Deterministic for a given seed; returns the manifest.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    items: list[SyntheticItem] = []
    for label, name in enumerate(CLASS_NAMES):
        for i in range(per_class):
            img, mask = render_sample(rng, label, image_size, scale_range, clutter)
            image_path = root / split / name / f"img{i:03d}.ppm"
            mask_path = root / f"{split}_masks" / name / f"img{i:03d}.ppm"
            write_ppm(image_path, np.rint(img.transpose(1, 2, 0) * 255).astype(np.uint8))
            mask_rgb = np.repeat(mask[:, :, None], 3, axis=2)
            write_ppm(mask_path, np.rint(mask_rgb * 255).astype(np.uint8))
            items.append(SyntheticItem(image_path=image_path, mask_path=mask_path, label=label))
    return items


def mask_lookup(items: list[SyntheticItem]) -> dict[Path, Path]:
    return {item.image_path: item.mask_path for item in items}
