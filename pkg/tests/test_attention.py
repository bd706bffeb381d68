"""Pooling attention, transformer block, and cross-attention fusion."""

import math

import numpy as np
import pytest

from roivit import tensor as T
from roivit.attention import (
    AttentionParams,
    DualBlockParams,
    FfnParams,
    FusionParams,
    PoolingSpec,
    TransformerBlockParams,
    capture_attention,
    cross_attention_fuse,
    dual_block,
    mhpa,
    transformer_block,
)
from roivit.errors import ShapeError
from roivit.patches import TokenSequence
from roivit.tensor import Tensor


def make_seq(rng, n_rows, n_cols, width, dtype=np.float64):
    n = n_rows * n_cols
    return TokenSequence(
        cls=Tensor(rng.standard_normal((1, width)).astype(dtype), requires_grad=True),
        patches=Tensor(rng.standard_normal((n, width)).astype(dtype), requires_grad=True),
        grid=(n_rows, n_cols),
    )


def identity_pool_kernel(d, dtype=np.float64):
    k = np.zeros((d, 1, 3, 3), dtype=dtype)
    k[:, 0, 1, 1] = 1.0
    return Tensor(k)


def make_attention(
    rng, c_in, c_out, heads=1, q_stride=1, kv_stride=1, identity=False, dtype=np.float64
):
    d = c_out // heads

    def mat(rows, cols):
        if identity and rows == cols:
            return Tensor(np.eye(rows, dtype=dtype), requires_grad=True)
        return Tensor((rng.standard_normal((rows, cols)) * 0.2).astype(dtype), requires_grad=True)

    def pool():
        if identity:
            return identity_pool_kernel(d, dtype)
        k = np.zeros((d, 1, 3, 3), dtype=dtype)
        k[:, 0, 1, 1] = 1.0
        k += (rng.standard_normal(k.shape) * 0.05).astype(dtype)
        return Tensor(k, requires_grad=True)

    return AttentionParams(
        w_q=mat(c_in, c_out),
        w_k=mat(c_in, c_out),
        w_v=mat(c_in, c_out),
        w_o=mat(c_out, c_out),
        pool_q=pool(),
        pool_k=pool(),
        pool_v=pool(),
        heads=heads,
        pooling=PoolingSpec(q_stride=q_stride, kv_stride=kv_stride),
        w_residual=None if c_in == c_out else mat(c_in, c_out),
    )


def make_block(rng, c_in, c_out, heads=1, q_stride=1, kv_stride=1, zero=False, dtype=np.float64):
    hidden = 4 * c_out

    def mat(rows, cols):
        scale = 0.0 if zero else 0.2
        return Tensor((rng.standard_normal((rows, cols)) * scale).astype(dtype), requires_grad=True)

    def vec(n, value=0.0):
        return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

    attn = make_attention(rng, c_in, c_out, heads, q_stride, kv_stride, dtype=dtype)
    if zero:
        for t in (attn.w_q, attn.w_k, attn.w_v, attn.w_o):
            t.data = np.zeros_like(t.data)
    return TransformerBlockParams(
        ln1_gain=vec(c_in, 0.0 if zero else 1.0),
        ln1_bias=vec(c_in),
        attn=attn,
        ln2_gain=vec(c_out, 0.0 if zero else 1.0),
        ln2_bias=vec(c_out),
        ffn=FfnParams(w1=mat(c_out, hidden), b1=vec(hidden), w2=mat(hidden, c_out), b2=vec(c_out)),
        skip_proj=None if c_in == c_out else mat(c_in, c_out),
    )


def make_fusion(rng, c, heads=1, dtype=np.float64, w_v_zero=False):
    def mat():
        return Tensor((rng.standard_normal((c, c)) * 0.2).astype(dtype), requires_grad=True)

    p = FusionParams(
        ln_gain=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        ln_bias=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        w_q=mat(),
        w_k=mat(),
        w_v=mat(),
        w_o=mat(),
        heads=heads,
    )
    if w_v_zero:
        p.w_v.data = np.zeros_like(p.w_v.data)
    return p


class TestMhpa:
    def test_single_token_identity_params_doubles(self):
        # CLS-only sequence, identity projections: attention returns v = x,
        # the pooling-path residual returns x, so the output is 2x.
        seq = TokenSequence(
            cls=Tensor(np.array([[1.5, -2.0, 0.5, 3.0]])),
            patches=Tensor(np.zeros((0, 4), dtype=np.float64)),
            grid=(0, 0),
        )
        rng = np.random.default_rng(0)
        p = make_attention(rng, 4, 4, heads=1, identity=True)
        out = mhpa(seq, p)
        np.testing.assert_allclose(out.cls.data, 2.0 * seq.cls.data, atol=1e-6)

    def test_stride_two_grid_halves(self):
        rng = np.random.default_rng(1)
        seq = make_seq(rng, 8, 8, 8)
        p = make_attention(rng, 8, 16, heads=2, q_stride=2, kv_stride=2)
        out = mhpa(seq, p)
        assert out.grid == (4, 4)
        assert out.count == 16
        assert out.width == 16

    def test_table_one_grid_sequence(self):
        # grid 56 -> 28 under the stride-2 pooling formula
        rng = np.random.default_rng(2)
        seq = make_seq(rng, 14, 14, 4)
        p = make_attention(rng, 4, 8, heads=1, q_stride=2, kv_stride=2)
        assert mhpa(seq, p).grid == (7, 7)

    def test_zero_input_zero_params_gives_zero(self):
        rng = np.random.default_rng(3)
        seq = TokenSequence(
            cls=Tensor(np.zeros((1, 4))),
            patches=Tensor(np.zeros((4, 4))),
            grid=(2, 2),
        )
        p = make_attention(rng, 4, 4, heads=1)
        for t in (p.w_q, p.w_k, p.w_v, p.w_o, p.pool_q, p.pool_k, p.pool_v):
            t.data = np.zeros_like(t.data)
        out = mhpa(seq, p)
        np.testing.assert_array_equal(out.full().data, 0.0)

    def test_reduces_to_plain_attention_with_identity_pooling(self):
        rng = np.random.default_rng(4)
        seq = make_seq(rng, 3, 3, 6)
        heads = 2
        p = make_attention(rng, 6, 6, heads=heads, identity=False)
        p.pool_q = identity_pool_kernel(3)
        p.pool_k = identity_pool_kernel(3)
        p.pool_v = identity_pool_kernel(3)

        out = mhpa(seq, p)

        # reference multi-head attention, straight numpy
        x = np.concatenate([seq.cls.data, seq.patches.data], axis=0)
        q = (x @ p.w_q.data).reshape(10, heads, 3).transpose(1, 0, 2)
        k = (x @ p.w_k.data).reshape(10, heads, 3).transpose(1, 0, 2)
        v = (x @ p.w_v.data).reshape(10, heads, 3).transpose(1, 0, 2)
        logits = q @ k.transpose(0, 2, 1) / math.sqrt(3)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        ref = (a @ v).transpose(1, 0, 2).reshape(10, 6) @ p.w_o.data + x
        np.testing.assert_allclose(out.full().data, ref, atol=1e-6)

    def test_width_mismatch_raises(self):
        rng = np.random.default_rng(5)
        seq = make_seq(rng, 2, 2, 4)
        p = make_attention(rng, 8, 8)
        with pytest.raises(ShapeError):
            mhpa(seq, p)

    def test_argmax_invariant_under_query_scaling(self):
        rng = np.random.default_rng(6)
        seq = make_seq(rng, 3, 3, 6)
        p = make_attention(rng, 6, 6, heads=1)
        p.pool_q = identity_pool_kernel(6)
        p.pool_k = identity_pool_kernel(6)
        p.pool_v = identity_pool_kernel(6)
        with capture_attention() as rows:
            mhpa(seq, p)
        base = np.argmax(rows[0], axis=-1)
        p.w_q.data = 3.7 * p.w_q.data
        with capture_attention() as rows2:
            mhpa(seq, p)
        np.testing.assert_array_equal(np.argmax(rows2[0], axis=-1), base)


class TestTransformerBlock:
    def test_zero_params_identity_on_square_block(self):
        rng = np.random.default_rng(7)
        seq = make_seq(rng, 3, 3, 4)
        p = make_block(rng, 4, 4, zero=True)
        out = transformer_block(seq, p)
        np.testing.assert_allclose(out.full().data, seq.full().data, atol=1e-12)

    def test_token_count_preserved_at_stride_one(self):
        rng = np.random.default_rng(8)
        seq = make_seq(rng, 4, 4, 4)
        out = transformer_block(seq, make_block(rng, 4, 4))
        assert out.count == seq.count and out.grid == seq.grid

    def test_gradient_through_block(self):
        rng = np.random.default_rng(9)

        arrays = {
            "cls": rng.standard_normal((1, 4)),
            "patches": rng.standard_normal((4, 4)),
        }
        p = make_block(rng, 4, 8, heads=2, q_stride=2, kv_stride=2)
        target = rng.standard_normal((2, 8))  # grid (2,2) pools to (1,1): CLS + 1 patch

        def build(arr):
            cls = Tensor(arr["cls"], requires_grad=True)
            pat = Tensor(arr["patches"], requires_grad=True)
            seq = TokenSequence(cls=cls, patches=pat, grid=(2, 2))
            out = transformer_block(seq, p)
            loss = T.sum_all(T.mul(out.full(), Tensor(target)))
            return loss, {"cls": cls, "patches": pat}

        coords = [("cls", i) for i in range(4)] + [("patches", i) for i in range(16)]
        errs = T.gradcheck_coordinates(build, arrays, coords, h_scale=1e-5)
        assert max(errs) < 1e-5


class TestCrossAttentionFuse:
    def test_patches_bitwise_unchanged(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            pest = make_seq(rng, 2, 3, 6)
            roi = make_seq(rng, 2, 3, 6)
            pp, pr = make_fusion(rng, 6, heads=2), make_fusion(rng, 6, heads=2)
            pest2, roi2, _, _ = cross_attention_fuse(pest, roi, pp, pr)
            assert pest2.patches is pest.patches
            assert roi2.patches is roi.patches
            assert pest2.patches.data.tobytes() == pest.patches.data.tobytes()

    def test_cls_only_degenerate(self):
        rng = np.random.default_rng(11)
        c = 4
        pest = TokenSequence(Tensor(rng.standard_normal((1, c))), Tensor(np.zeros((0, c))), (0, 0))
        roi = TokenSequence(Tensor(rng.standard_normal((1, c))), Tensor(np.zeros((0, c))), (0, 0))
        pp, pr = make_fusion(rng, c), make_fusion(rng, c)
        pest2, _, trace, _ = cross_attention_fuse(pest, roi, pp, pr)

        np.testing.assert_allclose(trace.a, np.ones((1, 1, 1)), atol=1e-12)
        # straight-line evaluation: ln(cls) -> v -> w_o, added back onto cls
        x = pest.cls.data
        mu, var = x.mean(), x.var()
        z = (x - mu) / np.sqrt(var + 1e-5)
        expected = x + (z @ pp.w_v.data) @ pp.w_o.data
        np.testing.assert_allclose(pest2.cls.data, expected, atol=1e-10)

    def test_zero_value_weights_leave_cls_unchanged(self):
        rng = np.random.default_rng(12)
        pest = make_seq(rng, 2, 2, 4)
        roi = make_seq(rng, 2, 2, 4)
        pp = make_fusion(rng, 4, w_v_zero=True)
        pr = make_fusion(rng, 4, w_v_zero=True)
        pest2, roi2, _, _ = cross_attention_fuse(pest, roi, pp, pr)
        np.testing.assert_array_equal(pest2.cls.data, pest.cls.data)
        np.testing.assert_array_equal(roi2.cls.data, roi.cls.data)

    def test_reads_pre_fusion_inputs(self):
        # the ROI-side update must attend over the *input* pest patches,
        # which equals running the sides in either order
        rng = np.random.default_rng(13)
        pest = make_seq(rng, 2, 2, 4)
        roi = make_seq(rng, 2, 2, 4)
        pp, pr = make_fusion(rng, 4), make_fusion(rng, 4)
        _, roi2, _, tr_roi = cross_attention_fuse(pest, roi, pp, pr)
        _, roi3, _, tr_roi2 = cross_attention_fuse(pest, roi, pp, pr)
        np.testing.assert_array_equal(roi2.cls.data, roi3.cls.data)
        np.testing.assert_array_equal(tr_roi.a, tr_roi2.a)

    def test_attention_shape_covers_cls_and_patches(self):
        rng = np.random.default_rng(14)
        pest = make_seq(rng, 2, 3, 6)
        roi = make_seq(rng, 2, 3, 6)
        _, _, trace, _ = cross_attention_fuse(pest, roi, make_fusion(rng, 6, 2), make_fusion(rng, 6, 2))
        assert trace.a.shape == (2, 1, 7)  # heads, query, N + 1
        np.testing.assert_allclose(trace.a.sum(axis=-1), 1.0, atol=1e-5)

    def test_mismatched_widths_raise(self):
        rng = np.random.default_rng(15)
        with pytest.raises(ShapeError):
            cross_attention_fuse(
                make_seq(rng, 2, 2, 4), make_seq(rng, 2, 2, 6), make_fusion(rng, 4), make_fusion(rng, 6)
            )

    def test_mismatched_token_counts_raise(self):
        rng = np.random.default_rng(15)
        with pytest.raises(ShapeError):
            cross_attention_fuse(
                make_seq(rng, 2, 2, 4), make_seq(rng, 3, 3, 4), make_fusion(rng, 4), make_fusion(rng, 4)
            )


class TestDualBlock:
    def _params(self, rng, c, w_v_zero=False):
        return DualBlockParams(
            pest_tb=make_block(rng, c, c),
            roi_tb=make_block(rng, c, c),
            pest_fuse=make_fusion(rng, c, w_v_zero=w_v_zero),
            roi_fuse=make_fusion(rng, c, w_v_zero=w_v_zero),
        )

    def test_zero_value_weights_degenerate_to_independent_tbs(self):
        rng = np.random.default_rng(16)
        pest = make_seq(rng, 2, 2, 4)
        roi = make_seq(rng, 2, 2, 4)
        p = self._params(rng, 4, w_v_zero=True)
        pest2, roi2, _ = dual_block(pest, roi, p)
        ref_p = transformer_block(pest, p.pest_tb)
        ref_r = transformer_block(roi, p.roi_tb)
        np.testing.assert_array_equal(pest2.full().data, ref_p.full().data)
        np.testing.assert_array_equal(roi2.full().data, ref_r.full().data)

    def test_output_shapes_match_tb_outputs(self):
        rng = np.random.default_rng(17)
        pest = make_seq(rng, 3, 3, 4)
        roi = make_seq(rng, 3, 3, 4)
        p = self._params(rng, 4)
        pest2, roi2, _ = dual_block(pest, roi, p)
        ref = transformer_block(pest, p.pest_tb)
        assert pest2.grid == ref.grid and pest2.width == ref.width
        assert roi2.grid == ref.grid and roi2.width == ref.width

    def test_end_to_end_gradient_on_two_token_instance(self):
        rng = np.random.default_rng(18)
        p = self._params(rng, 4)
        target_p = rng.standard_normal((3, 4))
        target_r = rng.standard_normal((3, 4))
        arrays = {
            "pc": rng.standard_normal((1, 4)),
            "pp": rng.standard_normal((2, 4)),
            "rc": rng.standard_normal((1, 4)),
            "rp": rng.standard_normal((2, 4)),
        }

        def build(arr):
            tensors = {k: Tensor(v, requires_grad=True) for k, v in arr.items()}
            pest = TokenSequence(tensors["pc"], tensors["pp"], (1, 2))
            roi = TokenSequence(tensors["rc"], tensors["rp"], (1, 2))
            pest2, roi2, _ = dual_block(pest, roi, p)
            loss = T.add(
                T.sum_all(T.mul(pest2.full(), Tensor(target_p))),
                T.sum_all(T.mul(roi2.full(), Tensor(target_r))),
            )
            return loss, tensors

        coords = [(name, i) for name in arrays for i in range(arrays[name].size)]
        errs = T.gradcheck_coordinates(build, arrays, coords, h_scale=1e-5)
        assert max(errs) < 1e-5

    def test_attention_rows_normalized_everywhere(self):
        rng = np.random.default_rng(19)
        pest = make_seq(rng, 3, 3, 6)
        roi = make_seq(rng, 3, 3, 6)
        p = DualBlockParams(
            pest_tb=make_block(rng, 6, 6, heads=2),
            roi_tb=make_block(rng, 6, 6, heads=2),
            pest_fuse=make_fusion(rng, 6, heads=2),
            roi_fuse=make_fusion(rng, 6, heads=2),
        )
        with capture_attention() as rows:
            dual_block(pest, roi, p)
        assert len(rows) == 4  # two TB attentions + two fusion sides
        for a in rows:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)
            assert np.all(a >= 0)
