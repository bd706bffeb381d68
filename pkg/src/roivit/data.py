"""Dataset indexing and image loading.

Datasets are directory trees `root/<class>/<image>.ppm`; class labels are
the sorted directory names, so indices are stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .ppm import nearest_resize, read_ppm, to_unit_image


@dataclass
class DatasetIndex:
    root: Path
    class_names: list[str]
    paths_by_class: list[list[Path]]
    split: str = "train"

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return sum(len(p) for p in self.paths_by_class)

    def items(self) -> list[tuple[Path, int]]:
        """Flat (path, label) pairs in deterministic order."""
        out = []
        for label, paths in enumerate(self.paths_by_class):
            out.extend((p, label) for p in paths)
        return out


def load_dataset(root, split: str = "train") -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} contains no class directories")
    names = []
    paths = []
    for d in class_dirs:
        images = sorted(d.glob("*.ppm"))
        if not images:
            raise DatasetError(f"class directory {d} contains no .ppm images")
        names.append(d.name)
        paths.append(images)
    return DatasetIndex(root=root, class_names=names, paths_by_class=paths, split=split)


def load_image(path, image_size: int, dtype=np.float32) -> np.ndarray:
    """Decode one image to [3, size, size] float in [0, 1]."""
    pixels = read_ppm(path)
    if pixels.shape[0] != image_size or pixels.shape[1] != image_size:
        pixels = nearest_resize(pixels, image_size, image_size)
    return to_unit_image(pixels, dtype=dtype)
