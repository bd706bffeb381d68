"""Attention mechanisms: pooling attention, transformer block, and the
CLS-token cross-attention fusion of the dual block.

Pooling attention projects tokens, spatially pools the query/key/value
grids with learned depthwise 3x3 convolutions (stride 1 or 2; the CLS
token has no spatial position and bypasses pooling), runs scaled dot-
product attention per head, and adds a residual carried along the query
pooling path -- spatial subsampling of the input tokens, followed by a
learned linear projection whenever the channel width changes.

Cross-attention fusion updates only each branch's CLS token: the CLS is
concatenated with the *other* branch's patch tokens, layer-normalized, and
used as the query over that stack; patch tokens pass through bitwise
unchanged.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .patches import TokenSequence, split_sequence
from .tensor import (
    Tensor,
    add,
    concat,
    gelu,
    grid_subsample,
    layer_norm,
    matmul,
    narrow,
    reshape,
    scale,
    softmax_last,
    strided_conv2d,
    tile0,
    transpose,
)

# Optional sink receiving every softmaxed attention matrix (tests use this
# to assert row normalization across all blocks of a forward pass).
_attention_sink: list | None = None


@contextmanager
def capture_attention():
    """Collect every attention-weight array produced while active."""
    global _attention_sink
    previous = _attention_sink
    _attention_sink = sink = []
    try:
        yield sink
    finally:
        _attention_sink = previous


def _record_attention(a: Tensor) -> None:
    if _attention_sink is not None:
        _attention_sink.append(a.data.copy())


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class PoolingSpec:
    """Strides of the query and key/value pooling paths (kernel 3, pad 1)."""

    q_stride: int = 1
    kv_stride: int = 1

    def __post_init__(self):
        if self.q_stride not in (1, 2) or self.kv_stride not in (1, 2):
            raise ShapeError(f"pooling strides must be 1 or 2, got {self}")


@dataclass
class AttentionParams:
    w_q: Tensor  # [C_in, C_out]
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # [C_out, C_out]
    pool_q: Tensor  # [head_dim, 1, 3, 3], shared across heads
    pool_k: Tensor
    pool_v: Tensor
    heads: int
    pooling: PoolingSpec
    w_residual: Tensor | None = None  # [C_in, C_out] when widths differ

    @property
    def c_in(self) -> int:
        return self.w_q.shape[0]

    @property
    def c_out(self) -> int:
        return self.w_q.shape[1]


@dataclass
class FfnParams:
    w1: Tensor  # [C, hidden]
    b1: Tensor
    w2: Tensor  # [hidden, C]
    b2: Tensor


@dataclass
class TransformerBlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn: FfnParams
    skip_proj: Tensor | None = None  # [C_in, C_out] when the block changes width


@dataclass
class FusionParams:
    ln_gain: Tensor
    ln_bias: Tensor
    w_q: Tensor  # [C, C]
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int


@dataclass
class DualBlockParams:
    pest_tb: TransformerBlockParams
    roi_tb: TransformerBlockParams
    pest_fuse: FusionParams
    roi_fuse: FusionParams


@dataclass
class AttentionTrace:
    """Diagnostic record of one cross-attention evaluation."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray


# ---------------------------------------------------------------------------
# Head plumbing
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, c = x.shape
    return transpose(reshape(x, (t, heads, c // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, t, d = x.shape
    return reshape(transpose(x, (1, 0, 2)), (t, h * d))


def _tokens_to_grid(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    rows, cols = grid
    return transpose(reshape(tokens, (rows, cols, tokens.shape[1])), (2, 0, 1))


def _grid_to_tokens(grid_map: Tensor) -> Tensor:
    c, rows, cols = grid_map.shape
    return transpose(reshape(grid_map, (c, rows * cols)), (1, 0))


def _pool_patches(patches: Tensor, grid, kernel: Tensor, stride: int, heads: int):
    """Depthwise-pool patch tokens on their spatial grid."""
    c = patches.shape[1]
    img = _tokens_to_grid(patches, grid)
    weight = tile0(kernel, heads)  # [C, 1, 3, 3]
    pooled = strided_conv2d(img, weight, stride=stride, padding=1, groups=c)
    return _grid_to_tokens(pooled), (pooled.shape[1], pooled.shape[2])


def _subsample_tokens(x: TokenSequence, stride: int):
    """CLS plus every stride-th patch row/column (the pooling-path residual)."""
    if x.count == 0 or stride == 1:
        return x.full(), x.grid
    sub = grid_subsample(_tokens_to_grid(x.patches, x.grid), stride)
    grid = (sub.shape[1], sub.shape[2])
    return concat([x.cls, _grid_to_tokens(sub)], axis=0), grid


# ---------------------------------------------------------------------------
# Multi-head pooling attention
# ---------------------------------------------------------------------------


def mhpa(x: TokenSequence, p: AttentionParams) -> TokenSequence:
    """Pooling attention over one branch's tokens; shrinks the grid by the
    query stride and may widen channels."""
    if x.width != p.c_in:
        raise ShapeError(f"mhpa: sequence width {x.width} != projection input {p.c_in}")
    if p.c_out % p.heads:
        raise ShapeError(f"mhpa: width {p.c_out} not divisible by {p.heads} heads")
    head_dim = p.c_out // p.heads

    full = x.full()
    projections = {
        "q": (matmul(full, p.w_q), p.pool_q, p.pooling.q_stride),
        "k": (matmul(full, p.w_k), p.pool_k, p.pooling.kv_stride),
        "v": (matmul(full, p.w_v), p.pool_v, p.pooling.kv_stride),
    }
    pooled = {}
    grids = {}
    for name, (proj, kernel, stride) in projections.items():
        cls_row = narrow(proj, 0, 0, 1)
        if x.count == 0:
            pooled[name], grids[name] = cls_row, (0, 0)
            continue
        pat, new_grid = _pool_patches(narrow(proj, 0, 1, x.count), x.grid, kernel, stride, p.heads)
        pooled[name] = concat([cls_row, pat], axis=0)
        grids[name] = new_grid

    qh = _split_heads(pooled["q"], p.heads)
    kh = _split_heads(pooled["k"], p.heads)
    vh = _split_heads(pooled["v"], p.heads)
    attn = softmax_last(scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(head_dim)))
    _record_attention(attn)
    out = matmul(_merge_heads(matmul(attn, vh)), p.w_o)

    residual, res_grid = _subsample_tokens(x, p.pooling.q_stride)
    if p.w_residual is not None:
        residual = matmul(residual, p.w_residual)
    if res_grid != grids["q"]:
        raise ShapeError(f"mhpa: residual grid {res_grid} != pooled grid {grids['q']}")
    return split_sequence(add(out, residual), grids["q"])


# ---------------------------------------------------------------------------
# Transformer block
# ---------------------------------------------------------------------------


def _ffn_apply(z: Tensor, f: FfnParams) -> Tensor:
    hidden = gelu(add(matmul(z, f.w1), f.b1))
    return add(matmul(hidden, f.w2), f.b2)


def transformer_block(x: TokenSequence, p: TransformerBlockParams) -> TokenSequence:
    """Pre-norm block: pooling attention then feed-forward, each under a
    residual; the outer residual follows the pooled/projected path whenever
    the block changes token count or width."""
    z = split_sequence(layer_norm(x.full(), p.ln1_gain, p.ln1_bias), x.grid)
    attn_out = mhpa(z, p.attn)

    skip, skip_grid = _subsample_tokens(x, p.attn.pooling.q_stride)
    if p.skip_proj is not None:
        skip = matmul(skip, p.skip_proj)
    y = split_sequence(add(skip, attn_out.full()), attn_out.grid)

    yf = y.full()
    out = add(yf, _ffn_apply(layer_norm(yf, p.ln2_gain, p.ln2_bias), p.ffn))
    return split_sequence(out, y.grid)


# ---------------------------------------------------------------------------
# Cross-attention fusion / dual block
# ---------------------------------------------------------------------------


def _fuse_side(cls: Tensor, other_patches: Tensor, p: FusionParams):
    """Update one branch's CLS by attending over [CLS || other patches]."""
    c = cls.shape[1]
    head_dim = c // p.heads
    stack = concat([cls, other_patches], axis=0) if other_patches.shape[0] else cls
    z = layer_norm(stack, p.ln_gain, p.ln_bias)
    q = _split_heads(matmul(narrow(z, 0, 0, 1), p.w_q), p.heads)  # [h, 1, d]
    k = _split_heads(matmul(z, p.w_k), p.heads)
    v = _split_heads(matmul(z, p.w_v), p.heads)
    a = softmax_last(scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(head_dim)))
    _record_attention(a)
    ca = matmul(_merge_heads(matmul(a, v)), p.w_o)
    trace = AttentionTrace(q=q.data.copy(), k=k.data.copy(), v=v.data.copy(), a=a.data.copy())
    return add(cls, ca), trace


def cross_attention_fuse(
    pest: TokenSequence,
    roi: TokenSequence,
    p_pest: FusionParams,
    p_roi: FusionParams,
):
    """Exchange CLS updates between branches; patch tokens are returned
    bitwise unchanged and both updates read the pre-fusion inputs."""
    if pest.width != roi.width:
        raise ShapeError(f"fusion: branch widths differ, {pest.width} vs {roi.width}")
    if pest.count != roi.count:
        raise ShapeError(f"fusion: branch token counts differ, {pest.count} vs {roi.count}")
    new_pest_cls, trace_pest = _fuse_side(pest.cls, roi.patches, p_pest)
    new_roi_cls, trace_roi = _fuse_side(roi.cls, pest.patches, p_roi)
    pest_out = TokenSequence(cls=new_pest_cls, patches=pest.patches, grid=pest.grid)
    roi_out = TokenSequence(cls=new_roi_cls, patches=roi.patches, grid=roi.grid)
    return pest_out, roi_out, trace_pest, trace_roi


def dual_block(pest: TokenSequence, roi: TokenSequence, p: DualBlockParams):
    """One transformer block per branch, then cross-attention fusion.

    Returns both updated branches and the Pest-side fusion trace.
    """
    pest2 = transformer_block(pest, p.pest_tb)
    roi2 = transformer_block(roi, p.roi_tb)
    pest3, roi3, trace_pest, _ = cross_attention_fuse(pest2, roi2, p.pest_fuse, p.roi_fuse)
    return pest3, roi3, trace_pest
