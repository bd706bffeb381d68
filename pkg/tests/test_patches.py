"""Patch embedding, tokenization, and ROI input rendering."""

import numpy as np
import pytest

from roivit.errors import ShapeError
from roivit.patches import PatchEmbedding, colormap_jet, render_roi_input, tokenize
from roivit.roi import RoiMap
from roivit.tensor import Tensor, trunc_normal


def make_embedding(rng, image_size, patch=4, width=8, in_channels=3, dtype=np.float64):
    n = (image_size // patch) ** 2
    return PatchEmbedding(
        patch_size=patch,
        kernel=Tensor(trunc_normal(rng, (width, in_channels, patch, patch), dtype=dtype)),
        bias=Tensor(np.zeros(width, dtype=dtype)),
        cls_token=Tensor(rng.standard_normal((1, width)).astype(dtype)),
        pos_embedding=Tensor(rng.standard_normal((n + 1, width)).astype(dtype)),
    )


class TestTokenize:
    def test_large_image_token_count(self):
        rng = np.random.default_rng(0)
        emb = make_embedding(rng, 224, patch=4, width=4)
        img = Tensor(rng.random((3, 224, 224)))
        seq = tokenize(img, emb)
        assert seq.count == 56 * 56 == 3136
        assert seq.grid == (56, 56)

    def test_small_image_grid(self):
        rng = np.random.default_rng(1)
        emb = make_embedding(rng, 16)
        seq = tokenize(Tensor(rng.random((3, 16, 16))), emb)
        assert seq.count == 16 and seq.grid == (4, 4)

    def test_zero_image_zero_params(self):
        rng = np.random.default_rng(2)
        emb = make_embedding(rng, 8)
        emb.pos_embedding = Tensor(np.zeros_like(emb.pos_embedding.data))
        seq = tokenize(Tensor(np.zeros((3, 8, 8))), emb)
        np.testing.assert_array_equal(seq.patches.data, 0.0)
        np.testing.assert_array_equal(seq.cls.data, emb.cls_token.data)

    def test_linearity_in_image(self):
        rng = np.random.default_rng(3)
        emb = make_embedding(rng, 8)
        img = rng.random((3, 8, 8))
        base = tokenize(Tensor(np.zeros_like(img)), emb).full().data
        one = tokenize(Tensor(img), emb).full().data
        scaled = tokenize(Tensor(2.5 * img), emb).full().data
        np.testing.assert_allclose(scaled - base, 2.5 * (one - base), atol=1e-9)

    def test_patch_values_match_direct_projection(self):
        rng = np.random.default_rng(4)
        emb = make_embedding(rng, 8, patch=4, width=5)
        emb.pos_embedding = Tensor(np.zeros_like(emb.pos_embedding.data))
        img = rng.random((3, 8, 8))
        seq = tokenize(Tensor(img), emb)
        # patch (row 0, col 1) flattens row-major to token index 1
        block = img[:, 0:4, 4:8]
        expect = np.tensordot(emb.kernel.data, block, axes=([1, 2, 3], [0, 1, 2]))
        np.testing.assert_allclose(seq.patches.data[1], expect, atol=1e-9)

    def test_indivisible_image_raises(self):
        rng = np.random.default_rng(5)
        emb = make_embedding(rng, 8)
        with pytest.raises(ShapeError):
            tokenize(Tensor(np.zeros((3, 9, 9))), emb)

    def test_wrong_pos_embedding_raises(self):
        rng = np.random.default_rng(6)
        emb = make_embedding(rng, 8)
        with pytest.raises(ShapeError):
            tokenize(Tensor(np.zeros((3, 16, 16))), emb)


class TestRenderRoiInput:
    def test_seg_all_ones(self):
        roi = RoiMap(values=np.ones((4, 4), dtype=np.float32), source="seg")
        img = Tensor(np.zeros((3, 4, 4)))
        out = render_roi_input(roi, img, "seg")
        np.testing.assert_array_equal(out.data, np.ones((3, 4, 4)))

    def test_cam_zero_map_blends_toward_blue(self):
        rng = np.random.default_rng(7)
        img = rng.random((3, 4, 4)).astype(np.float32)
        roi = RoiMap(values=np.zeros((4, 4), dtype=np.float32), source="cam")
        out = render_roi_input(roi, Tensor(img), "cam")
        blue = np.zeros((3, 4, 4), dtype=np.float32)
        blue[2] = 1.0
        np.testing.assert_allclose(out.data, 0.5 * img + 0.5 * blue, atol=1e-6)

    def test_cam_blend_formula(self):
        rng = np.random.default_rng(8)
        img = rng.random((3, 6, 6)).astype(np.float32)
        values = img.mean(axis=0)
        roi = RoiMap(values=np.clip(values, 0, 1), source="cam")
        out = render_roi_input(roi, Tensor(img), "cam")
        expect = np.clip(0.5 * img + 0.5 * colormap_jet(roi.values), 0.0, 1.0)
        np.testing.assert_allclose(out.data, expect, atol=1e-6)

    def test_output_stays_in_unit_range(self):
        rng = np.random.default_rng(9)
        for mode in ("cam", "seg"):
            img = rng.random((3, 5, 5)).astype(np.float32)
            roi = RoiMap(values=rng.random((5, 5)).astype(np.float32), source=mode)
            out = render_roi_input(roi, Tensor(img), mode)
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_dimension_mismatch(self):
        roi = RoiMap(values=np.zeros((4, 4), dtype=np.float32), source="seg")
        with pytest.raises(ShapeError):
            render_roi_input(roi, Tensor(np.zeros((3, 5, 5))), "seg")

    def test_colormap_endpoints(self):
        ramp = colormap_jet(np.array([[0.0, 0.25, 0.5, 0.75, 1.0]]))
        np.testing.assert_allclose(ramp[:, 0, 0], [0, 0, 1], atol=1e-6)  # blue
        np.testing.assert_allclose(ramp[:, 0, 2], [0, 1, 0], atol=1e-6)  # green
        np.testing.assert_allclose(ramp[:, 0, 4], [1, 0, 0], atol=1e-6)  # red
