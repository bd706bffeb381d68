"""PPM codec and dataset indexing."""

import numpy as np
import pytest

from roivit.data import load_dataset, load_image
from roivit.errors import DatasetError, FormatError
from roivit.ppm import from_unit_image, nearest_resize, read_ppm, to_unit_image, write_ppm


def write_raw(path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


class TestPpm:
    def test_hand_written_fixture(self, tmp_path):
        # 2x2 P6 with pixel bytes 0..11.
        payload = b"P6\n2 2\n255\n" + bytes(range(12))
        p = tmp_path / "img.ppm"
        write_raw(p, payload)
        arr = read_ppm(p)
        assert arr.shape == (2, 2, 3)
        np.testing.assert_array_equal(arr.reshape(-1), np.arange(12, dtype=np.uint8))
        unit = to_unit_image(arr)
        np.testing.assert_allclose(unit.transpose(1, 2, 0).reshape(-1), np.arange(12) / 255.0, atol=1e-7)

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        pixels = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
        p = tmp_path / "rt.ppm"
        write_ppm(p, pixels)
        np.testing.assert_array_equal(read_ppm(p), pixels)

    def test_comments_and_whitespace(self, tmp_path):
        payload = b"P6 # a comment\n# another\n 2\t1 #x\n255 " + bytes(6)
        p = tmp_path / "c.ppm"
        write_raw(p, payload)
        assert read_ppm(p).shape == (1, 2, 3)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ppm"
        write_raw(p, b"P5\n1 1\n255\n\x00")
        with pytest.raises(FormatError):
            read_ppm(p)

    def test_bad_maxval(self, tmp_path):
        p = tmp_path / "bad.ppm"
        write_raw(p, b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            read_ppm(p)

    def test_truncated_pixels(self, tmp_path):
        p = tmp_path / "bad.ppm"
        write_raw(p, b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(FormatError):
            read_ppm(p)

    def test_nearest_resize(self):
        src = np.arange(4, dtype=np.uint8).reshape(2, 2, 1).repeat(3, axis=2)
        out = nearest_resize(src, 4, 4)
        assert out.shape == (4, 4, 3)
        np.testing.assert_array_equal(out[:2, :2, 0], np.zeros((2, 2)))
        assert out[3, 3, 0] == 3

    def test_unit_image_round_trip(self):
        rng = np.random.default_rng(5)
        pixels = rng.integers(0, 256, size=(6, 5, 3), dtype=np.uint8)
        np.testing.assert_array_equal(from_unit_image(to_unit_image(pixels)), pixels)


def make_tree(root, classes, per_class, size=4, seed=0):
    rng = np.random.default_rng(seed)
    for name in classes:
        for i in range(per_class):
            img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            write_ppm(root / name / f"img{i:03d}.ppm", img)


class TestDataset:
    def test_index_layout(self, tmp_path):
        make_tree(tmp_path, ["beetle", "aphid"], 3)
        idx = load_dataset(tmp_path)
        assert idx.class_names == ["aphid", "beetle"]
        assert len(idx) == 6
        labels = sorted({label for _, label in idx.items()})
        assert labels == [0, 1]

    def test_scan_is_deterministic(self, tmp_path):
        make_tree(tmp_path, ["a", "b", "c"], 2)
        one = load_dataset(tmp_path).items()
        two = load_dataset(tmp_path).items()
        assert one == two

    def test_empty_class_dir(self, tmp_path):
        make_tree(tmp_path, ["a"], 1)
        (tmp_path / "empty").mkdir()
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nope")

    def test_load_image_resizes(self, tmp_path):
        make_tree(tmp_path, ["a"], 1, size=8)
        idx = load_dataset(tmp_path)
        path, _ = idx.items()[0]
        img = load_image(path, 4)
        assert img.shape == (3, 4, 4)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0
