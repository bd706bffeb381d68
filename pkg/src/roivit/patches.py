"""Token sequences: patch embedding, CLS token, ROI input rendering.

An input image (or a rendered ROI map) becomes a sequence of patch tokens
via a strided projection with kernel = stride = patch size, a learned CLS
token is stacked on top, and a learned absolute positional embedding is
added once to the whole stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .roi import RoiMap
from .tensor import Tensor, add, concat, narrow, reshape, strided_conv2d, transpose


@dataclass
class PatchEmbedding:
    patch_size: int
    kernel: Tensor  # [C, in_channels, patch, patch]
    bias: Tensor  # [C]
    cls_token: Tensor  # [1, C]
    pos_embedding: Tensor  # [N + 1, C]

    @property
    def width(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


@dataclass
class TokenSequence:
    """One branch's state: CLS plus N patch tokens with grid metadata."""

    cls: Tensor  # [1, C]
    patches: Tensor  # [N, C]
    grid: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        if rows * cols != self.patches.shape[0]:
            raise ShapeError(f"grid {self.grid} inconsistent with {self.patches.shape[0]} patches")
        if self.cls.shape[0] != 1 or self.cls.shape[1] != self.patches.shape[1]:
            raise ShapeError(f"cls shape {self.cls.shape} != (1, {self.patches.shape[1]})")

    @property
    def width(self) -> int:
        return self.cls.shape[1]

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    def full(self) -> Tensor:
        """[N + 1, C] stack with CLS first."""
        if self.count == 0:
            return self.cls
        return concat([self.cls, self.patches], axis=0)


def split_sequence(full: Tensor, grid: tuple[int, int]) -> TokenSequence:
    n = full.shape[0] - 1
    cls = narrow(full, 0, 0, 1)
    patches = narrow(full, 0, 1, n)
    return TokenSequence(cls=cls, patches=patches, grid=grid)


def tokenize(img: Tensor, emb: PatchEmbedding) -> TokenSequence:
    """Patchify an image into the initial token sequence."""
    if img.ndim != 3:
        raise ShapeError(f"tokenize expects [C, H, W], got {img.shape}")
    c_in, h, w = img.shape
    p = emb.patch_size
    if c_in != emb.in_channels:
        raise ShapeError(f"image channels {c_in} != embedding channels {emb.in_channels}")
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    n = rows * cols
    if emb.pos_embedding.shape[0] != n + 1:
        raise ShapeError(
            f"positional embedding holds {emb.pos_embedding.shape[0]} tokens, image yields {n + 1}"
        )
    grid_feat = strided_conv2d(img, emb.kernel, stride=p, padding=0, bias=emb.bias)  # [C, rows, cols]
    tokens = transpose(reshape(grid_feat, (emb.width, n)), (1, 0))  # [N, C]
    stack = add(concat([emb.cls_token, tokens], axis=0), emb.pos_embedding)
    return split_sequence(stack, (rows, cols))


# ---------------------------------------------------------------------------
# ROI input rendering
# ---------------------------------------------------------------------------


def colormap_jet(values: np.ndarray) -> np.ndarray:
    """Blue -> cyan -> green -> yellow -> red ramp with pure endpoints.

    Maps [0,1] scalars to [3, H, W] RGB.
    """
    v = np.asarray(values, dtype=np.float32)
    r = np.clip(4.0 * v - 2.0, 0.0, 1.0)
    g = np.clip(np.minimum(4.0 * v, 4.0 - 4.0 * v), 0.0, 1.0)
    b = np.clip(2.0 - 4.0 * v, 0.0, 1.0)
    return np.stack([r, g, b], axis=0)


def render_roi_input(roi: RoiMap, img: Tensor | np.ndarray, mode: str) -> Tensor:
    """Turn a RoiMap into the ROI branch's 3-channel input image.

    cam: equal blend of the image with the colormapped map.
    seg: the map itself, replicated across the input channels.
    """
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
    if roi.values.shape != data.shape[1:]:
        raise ShapeError(f"roi {roi.values.shape} does not match image plane {data.shape[1:]}")
    if mode == "cam":
        rendered = 0.5 * data + 0.5 * colormap_jet(roi.values)
    elif mode == "seg":
        rendered = np.broadcast_to(roi.values, data.shape).copy()
    else:
        raise ShapeError(f"unknown roi render mode {mode!r}")
    return Tensor(np.clip(rendered, 0.0, 1.0).astype(data.dtype, copy=False))
