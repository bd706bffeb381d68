"""Region-of-interest map generation.

Two generator families produce the [0,1] spatial map fed to the model's
ROI branch: a gradient-free class-activation approach (mask each activation
map of an auxiliary classifier, score the masked images, softmax the scores
into weights) and a pluggable soft-segmentation interface with a built-in
global-threshold baseline. Maps are cached on disk, content-addressed by
image path, generator mode and generator fingerprint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .checkpoint import load_blob, save_blob
from .data import DatasetIndex, load_image
from .errors import GeneratorError
from .tensor import (
    Tensor,
    mean_over,
    minmax_normalize,
    relu,
    reshape,
    strided_conv2d,
    trunc_normal,
    upsample_bilinear,
)


@dataclass
class RoiMap:
    """Single-channel [0,1] map over the image plane."""

    values: np.ndarray
    source: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise GeneratorError(f"RoiMap must be 2-D, got shape {self.values.shape}")
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < 0.0 or hi > 1.0:
            raise GeneratorError(f"RoiMap values outside [0,1]: min={lo}, max={hi}")


class AuxiliaryClassifier(Protocol):
    """A model exposing class scores and one internal activation stack."""

    def class_scores(self, img: np.ndarray) -> np.ndarray: ...

    def activations(self, img: np.ndarray) -> np.ndarray: ...

    def fingerprint(self) -> str: ...


Segmenter = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Score-CAM
# ---------------------------------------------------------------------------


def score_cam(img: np.ndarray, model: AuxiliaryClassifier, target_class: int | str = "auto") -> RoiMap:
    """Class-activation ROI: weight each upsampled activation map by the
    softmaxed class score of the correspondingly masked image, keep the
    positive part, normalize to [0,1]."""
    img = np.asarray(img, dtype=np.float32)
    _, h, w = img.shape
    acts = np.asarray(model.activations(img))
    if acts.ndim != 3 or acts.shape[0] == 0:
        raise GeneratorError(f"auxiliary classifier produced no activation stack: shape {acts.shape}")
    if target_class == "auto":
        target = int(np.argmax(model.class_scores(img)))
    else:
        target = int(target_class)

    ups = upsample_bilinear(Tensor(acts.astype(np.float32)), h, w)  # [K_maps, H, W]
    scores = np.empty(acts.shape[0], dtype=np.float64)
    for k in range(acts.shape[0]):
        mask = minmax_normalize(Tensor(ups.data[k]))
        masked = img * mask.data
        scores[k] = float(model.class_scores(masked)[target])

    z = scores - scores.max()
    e = np.exp(z)
    weights = e / e.sum()

    combined = (weights[:, None, None] * ups.data).sum(axis=0)
    roi = minmax_normalize(relu(Tensor(combined.astype(np.float32))))
    return RoiMap(values=roi.data, source="cam")


def score_cam_weights(scores: np.ndarray) -> np.ndarray:
    """Softmax of raw masked-image scores; exposed for verification."""
    z = np.asarray(scores, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def segment(img: np.ndarray, seg: Segmenter) -> RoiMap:
    """Run a soft segmenter and clamp its output into a RoiMap."""
    img = np.asarray(img, dtype=np.float32)
    out = np.asarray(seg(img), dtype=np.float32)
    if out.shape != img.shape[1:]:
        raise GeneratorError(f"segmenter returned shape {out.shape}, expected {img.shape[1:]}")
    return RoiMap(values=np.clip(out, 0.0, 1.0), source="seg")


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class ThresholdSegmenter:
    """Global-threshold foreground baseline.

    Foreground = pixels whose luminance distance from the border-pixel mean
    exceeds mean + 0.5 * stddev of that distance over the whole image.
    """

    def __call__(self, img: np.ndarray) -> np.ndarray:
        lum = np.tensordot(_LUMA, np.asarray(img, dtype=np.float32), axes=(0, 0))
        border = np.concatenate([lum[0, :], lum[-1, :], lum[1:-1, 0], lum[1:-1, -1]])
        dist = np.abs(lum - border.mean())
        threshold = dist.mean() + 0.5 * dist.std()
        return (dist > threshold).astype(np.float32)

    def fingerprint(self) -> str:
        return "threshold-segmenter-v1"


# ---------------------------------------------------------------------------
# Built-in auxiliary classifier
# ---------------------------------------------------------------------------


class SmallCnn:
    """Reference auxiliary classifier: conv-relu-pool x2, conv, GAP, affine.

    The last convolution's output is the activation stack used for CAM
    generation. Trainable with the shared optimizer; `params` maps names to
    tensors in deterministic order.
    """

    def __init__(self, num_classes: int, in_channels: int = 3, seed: int = 0, dtype=np.float32):
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = (16, 32, 32)
        self.params: dict[str, Tensor] = {}

        def param(name, shape, zero=False):
            arr = np.zeros(shape, dtype=dtype) if zero else trunc_normal(rng, shape, 0.02, dtype)
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        self.conv1_w = param("conv1.w", (widths[0], in_channels, 3, 3))
        self.conv1_b = param("conv1.b", (widths[0],), zero=True)
        self.conv2_w = param("conv2.w", (widths[1], widths[0], 3, 3))
        self.conv2_b = param("conv2.b", (widths[1],), zero=True)
        self.conv3_w = param("conv3.w", (widths[2], widths[1], 3, 3))
        self.conv3_b = param("conv3.b", (widths[2],), zero=True)
        self.head_w = param("head.w", (widths[2], num_classes))
        self.head_b = param("head.b", (num_classes,), zero=True)
        self._pool_kernels: dict[int, Tensor] = {}

    def _avg_pool(self, x: Tensor) -> Tensor:
        c = x.shape[0]
        k = self._pool_kernels.get(c)
        if k is None:
            k = Tensor(np.full((c, 1, 2, 2), 0.25, dtype=self.dtype))
            self._pool_kernels[c] = k
        return strided_conv2d(x, k, stride=2, padding=0, groups=c)

    def features(self, img: Tensor) -> Tensor:
        h = relu(strided_conv2d(img, self.conv1_w, 1, 1, bias=self.conv1_b))
        h = self._avg_pool(h)
        h = relu(strided_conv2d(h, self.conv2_w, 1, 1, bias=self.conv2_b))
        h = self._avg_pool(h)
        return strided_conv2d(h, self.conv3_w, 1, 1, bias=self.conv3_b)

    def logits(self, img: Tensor) -> Tensor:
        pooled = mean_over(self.features(img), (1, 2))
        out = reshape(pooled, (1, -1)) @ self.head_w
        return reshape(out, (self.num_classes,)) + self.head_b

    # AuxiliaryClassifier interface ------------------------------------------

    def class_scores(self, img: np.ndarray) -> np.ndarray:
        z = self.logits(Tensor(np.asarray(img, dtype=self.dtype))).data
        e = np.exp(z - z.max())
        return e / e.sum()

    def activations(self, img: np.ndarray) -> np.ndarray:
        return self.features(Tensor(np.asarray(img, dtype=self.dtype))).data

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            arr = tensors[name]
            if arr.shape != t.shape:
                raise GeneratorError(f"aux param {name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)


# ---------------------------------------------------------------------------
# Providers and cache
# ---------------------------------------------------------------------------


class CamRoiProvider:
    """ROI source backed by Score-CAM over an auxiliary classifier.

    `target` selects the class whose score weights the maps: "label" uses
    the ground-truth label handed in (training), "auto" the classifier's
    own argmax (inference on unlabeled data).
    """

    render_mode = "cam"
    cache_tag = "cam"

    def __init__(self, classifier: AuxiliaryClassifier, target: str = "label"):
        self.classifier = classifier
        self.target = target

    def generate(self, img: np.ndarray, label: int | None = None) -> RoiMap:
        if self.target == "label" and label is not None:
            return score_cam(img, self.classifier, target_class=label)
        return score_cam(img, self.classifier, target_class="auto")

    def fingerprint(self) -> str:
        return f"{self.classifier.fingerprint()}|target={self.target}"


class SegRoiProvider:
    render_mode = "seg"
    cache_tag = "seg"

    def __init__(self, segmenter: Segmenter | None = None):
        self.segmenter = segmenter if segmenter is not None else ThresholdSegmenter()

    def generate(self, img: np.ndarray, label: int | None = None) -> RoiMap:
        return segment(img, self.segmenter)

    def fingerprint(self) -> str:
        fp = getattr(self.segmenter, "fingerprint", None)
        return fp() if fp is not None else self.segmenter.__class__.__name__


class MaskFileRoiProvider:
    """ROI source reading pre-rendered mask images (mean channel / 255).

    Used when ground-truth masks exist alongside the dataset, e.g. for the
    synthetic benchmark; renders like a segmentation map. Lookup is by
    image path, so this provider only works through `generate_for_path`.
    """

    render_mode = "seg"
    cache_tag = "mask"

    def __init__(self, mask_paths: dict[Path, Path], image_size: int):
        self.mask_paths = {Path(k): Path(v) for k, v in mask_paths.items()}
        self.image_size = image_size

    def generate_for_path(self, image_path, img: np.ndarray, label: int | None = None) -> RoiMap:
        mask_path = self.mask_paths.get(Path(image_path))
        if mask_path is None:
            raise GeneratorError(f"no mask registered for image {image_path}")
        mask_img = load_image(mask_path, self.image_size)
        return RoiMap(values=mask_img.mean(axis=0), source="seg")

    def generate(self, img: np.ndarray, label: int | None = None) -> RoiMap:
        raise GeneratorError("MaskFileRoiProvider resolves masks by path; use generate_for_path")

    def fingerprint(self) -> str:
        return "mask-files-v1"


def roi_cache_key(relative_path: str, mode: str, generator_hash: str) -> str:
    digest = hashlib.sha256(f"{relative_path}|{mode}|{generator_hash}".encode("utf-8"))
    return digest.hexdigest()


def precompute_rois(
    index: DatasetIndex,
    provider,
    cache_dir,
    image_size: int,
    use_labels: bool = True,
) -> tuple[dict[Path, RoiMap], dict[str, int]]:
    """Generate (or reload) one ROI map per image.

    Cache files use the manifest+blob container with a single f32 tensor;
    existing files are trusted, so a second run over unchanged inputs
    performs zero generator forwards. Returns the maps keyed by image path
    plus hit/computed counters.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = provider.fingerprint()
    maps: dict[Path, RoiMap] = {}
    stats = {"computed": 0, "cached": 0}
    for path, label in index.items():
        rel = str(Path(path).resolve().relative_to(Path(index.root).resolve()))
        key = roi_cache_key(rel, provider.cache_tag, fingerprint)
        cache_file = cache_dir / f"{key}.roi"
        if cache_file.exists():
            tensors, _ = load_blob(cache_file)
            maps[path] = RoiMap(values=tensors["roi"], source=provider.render_mode)
            stats["cached"] += 1
            continue
        img = load_image(path, image_size)
        by_path = getattr(provider, "generate_for_path", None)
        if by_path is not None:
            roi = by_path(path, img, label if use_labels else None)
        else:
            roi = provider.generate(img, label if use_labels else None)
        try:
            save_blob(
                cache_file,
                {"roi": roi.values.astype(np.float32)},
                meta={"image": rel, "mode": provider.cache_tag, "generator": fingerprint},
            )
        except OSError as e:
            raise GeneratorError(f"cannot write ROI cache file {cache_file}: {e}") from e
        maps[path] = roi
        stats["computed"] += 1
    return maps, stats
