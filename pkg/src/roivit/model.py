"""Dual-branch four-stage backbone with CLS-token fusion.

Both branches share the architecture (independent parameters): a patch
embedding, then four stages of transformer blocks ending in dual blocks.
Each stage past the first opens with a scale-conversion block (query
stride 2, channel width doubled), so token grids shrink 2x per stage while
widths double; the classifier head is a single affine map on the Pest
branch's final CLS token.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .attention import (
    AttentionParams,
    DualBlockParams,
    FfnParams,
    FusionParams,
    PoolingSpec,
    TransformerBlockParams,
    dual_block,
    transformer_block,
)
from .checkpoint import load_blob, save_blob
from .errors import ConfigError, FormatError, GeneratorError, ShapeError
from .patches import PatchEmbedding, TokenSequence, render_roi_input, tokenize
from .roi import RoiMap, SmallCnn
from .tensor import Tensor, add, matmul, reshape, trunc_normal

NUM_STAGES = 4
FFN_RATIO = 4
IN_CHANNELS = 3  # both branches; seg maps are replicated to 3 channels


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 4
    base_width: int = 64
    base_heads: int = 1
    stage_tb_counts: tuple[int, ...] = (1, 2, 10, 1)
    stage_db_counts: tuple[int, ...] = (1, 1, 1, 1)
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        self.stage_tb_counts = tuple(int(v) for v in self.stage_tb_counts)
        self.stage_db_counts = tuple(int(v) for v in self.stage_db_counts)

    def validate(self) -> "ModelConfig":
        if self.patch_size < 1 or self.image_size < self.patch_size:
            raise ConfigError(f"invalid image/patch sizes {self.image_size}/{self.patch_size}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if len(self.stage_tb_counts) != NUM_STAGES or len(self.stage_db_counts) != NUM_STAGES:
            raise ConfigError("stage block counts must have exactly four entries")
        for s in range(NUM_STAGES):
            if self.stage_tb_counts[s] < 0 or self.stage_db_counts[s] < 0:
                raise ConfigError("block counts must be nonnegative")
            if self.stage_tb_counts[s] + self.stage_db_counts[s] < 1:
                raise ConfigError(f"stage {s} has no blocks")
        if self.base_width < 1 or self.base_heads < 1 or self.base_width % self.base_heads:
            raise ConfigError(
                f"base width {self.base_width} must be a positive multiple of heads {self.base_heads}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"need at least two classes, got {self.num_classes}")
        return self

    def canonical_text(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parts.append(f"{f.name}={v}")
        return "\n".join(parts) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def stage_widths(config: ModelConfig) -> list[int]:
    return [config.base_width * 2**s for s in range(NUM_STAGES)]


def stage_heads(config: ModelConfig) -> list[int]:
    return [config.base_heads * 2**s for s in range(NUM_STAGES)]


def _halve(extent: int) -> int:
    # output extent of the kernel-3 / pad-1 / stride-2 pooling conv
    return (extent - 1) // 2 + 1


def stage_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    """Per-stage (patch token count, width) after each stage."""
    g = config.image_size // config.patch_size
    shapes = []
    for s, w in enumerate(stage_widths(config)):
        if s > 0:
            g = _halve(g)
        shapes.append((g * g, w))
    return shapes


@dataclass
class StageParams:
    tb_pairs: list[tuple[TransformerBlockParams, TransformerBlockParams]] = field(default_factory=list)
    dbs: list[DualBlockParams] = field(default_factory=list)


class RoiVit:
    """Built model: parameter tensors plus the stage structure.

    Parameters live in `params`, an insertion-ordered name->Tensor mapping
    that drives initialization, checkpointing and optimization. A built
    model is immutable during forward passes.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.seed)
        self._build()
        del self._rng

    # -- construction -------------------------------------------------------

    def _param(self, name: str, shape, init: str = "tn") -> Tensor:
        if init == "tn":
            arr = trunc_normal(self._rng, shape, 0.02, self.dtype)
        elif init == "zeros":
            arr = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            arr = np.ones(shape, dtype=self.dtype)
        elif init == "pool":
            # identity tap plus noise: pooling starts out as subsampling
            arr = trunc_normal(self._rng, shape, 0.02, self.dtype)
            arr[:, :, 1, 1] += 1.0
        else:
            raise ConfigError(f"unknown init {init}")
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    def _make_embed(self, prefix: str, tokens: int) -> PatchEmbedding:
        c = self.config.base_width
        p = self.config.patch_size
        return PatchEmbedding(
            patch_size=p,
            kernel=self._param(f"{prefix}.kernel", (c, IN_CHANNELS, p, p)),
            bias=self._param(f"{prefix}.bias", (c,), "zeros"),
            cls_token=self._param(f"{prefix}.cls", (1, c), "zeros"),
            pos_embedding=self._param(f"{prefix}.pos", (tokens + 1, c)),
        )

    def _make_tb(self, prefix, c_in, c_out, heads, q_stride, kv_stride) -> TransformerBlockParams:
        d = c_out // heads
        hidden = FFN_RATIO * c_out
        attn = AttentionParams(
            w_q=self._param(f"{prefix}.attn.wq", (c_in, c_out)),
            w_k=self._param(f"{prefix}.attn.wk", (c_in, c_out)),
            w_v=self._param(f"{prefix}.attn.wv", (c_in, c_out)),
            w_o=self._param(f"{prefix}.attn.wo", (c_out, c_out)),
            pool_q=self._param(f"{prefix}.attn.pool_q", (d, 1, 3, 3), "pool"),
            pool_k=self._param(f"{prefix}.attn.pool_k", (d, 1, 3, 3), "pool"),
            pool_v=self._param(f"{prefix}.attn.pool_v", (d, 1, 3, 3), "pool"),
            heads=heads,
            pooling=PoolingSpec(q_stride=q_stride, kv_stride=kv_stride),
            w_residual=self._param(f"{prefix}.attn.wr", (c_in, c_out)) if c_in != c_out else None,
        )
        return TransformerBlockParams(
            ln1_gain=self._param(f"{prefix}.ln1.gain", (c_in,), "ones"),
            ln1_bias=self._param(f"{prefix}.ln1.bias", (c_in,), "zeros"),
            attn=attn,
            ln2_gain=self._param(f"{prefix}.ln2.gain", (c_out,), "ones"),
            ln2_bias=self._param(f"{prefix}.ln2.bias", (c_out,), "zeros"),
            ffn=FfnParams(
                w1=self._param(f"{prefix}.ffn.w1", (c_out, hidden)),
                b1=self._param(f"{prefix}.ffn.b1", (hidden,), "zeros"),
                w2=self._param(f"{prefix}.ffn.w2", (hidden, c_out)),
                b2=self._param(f"{prefix}.ffn.b2", (c_out,), "zeros"),
            ),
            skip_proj=self._param(f"{prefix}.skip.w", (c_in, c_out)) if c_in != c_out else None,
        )

    def _make_fusion(self, prefix, c, heads) -> FusionParams:
        return FusionParams(
            ln_gain=self._param(f"{prefix}.ln.gain", (c,), "ones"),
            ln_bias=self._param(f"{prefix}.ln.bias", (c,), "zeros"),
            w_q=self._param(f"{prefix}.wq", (c, c)),
            w_k=self._param(f"{prefix}.wk", (c, c)),
            w_v=self._param(f"{prefix}.wv", (c, c)),
            w_o=self._param(f"{prefix}.wo", (c, c)),
            heads=heads,
        )

    def _build(self):
        cfg = self.config
        grid = cfg.image_size // cfg.patch_size
        tokens = grid * grid
        self.pest_embed = self._make_embed("pest_embed", tokens)
        self.roi_embed = self._make_embed("roi_embed", tokens)

        widths = stage_widths(cfg)
        heads = stage_heads(cfg)
        self.stages: list[StageParams] = []
        width = cfg.base_width
        for s in range(NUM_STAGES):
            stage = StageParams()
            pending_conversion = s > 0  # the stage's first block converts scale
            for i in range(cfg.stage_tb_counts[s]):
                c_in, c_out = width, widths[s] if pending_conversion else width
                stride = 2 if pending_conversion else 1
                pair = tuple(
                    self._make_tb(f"stage{s}.tb{i}.{branch}", c_in, c_out, heads[s], stride, stride)
                    for branch in ("pest", "roi")
                )
                stage.tb_pairs.append(pair)
                width = c_out
                pending_conversion = False
            for i in range(cfg.stage_db_counts[s]):
                c_in, c_out = width, widths[s] if pending_conversion else width
                stride = 2 if pending_conversion else 1
                prefix = f"stage{s}.db{i}"
                stage.dbs.append(
                    DualBlockParams(
                        pest_tb=self._make_tb(f"{prefix}.pest", c_in, c_out, heads[s], stride, stride),
                        roi_tb=self._make_tb(f"{prefix}.roi", c_in, c_out, heads[s], stride, stride),
                        pest_fuse=self._make_fusion(f"{prefix}.fuse_pest", c_out, heads[s]),
                        roi_fuse=self._make_fusion(f"{prefix}.fuse_roi", c_out, heads[s]),
                    )
                )
                width = c_out
                pending_conversion = False
            self.stages.append(stage)

        self.head_w = self._param("head.w", (widths[-1], cfg.num_classes))
        self.head_b = self._param("head.b", (cfg.num_classes,), "zeros")

    # -- forward --------------------------------------------------------------

    def _as_image(self, img) -> Tensor:
        t = img if isinstance(img, Tensor) else Tensor(np.asarray(img))
        if t.data.dtype != self.dtype:
            t = Tensor(t.data.astype(self.dtype))
        if t.ndim != 3 or t.shape[0] != IN_CHANNELS:
            raise ShapeError(f"expected [3, H, W] image, got {t.shape}")
        if t.shape[1] != self.config.image_size or t.shape[2] != self.config.image_size:
            raise ShapeError(f"image {t.shape[1]}x{t.shape[2]} != configured {self.config.image_size}")
        return t

    def run_stage(self, s: int, pest: TokenSequence, roi: TokenSequence):
        """Execute stage `s` on already-tokenized branches."""
        traces = []
        stage = self.stages[s]
        for tb_pest, tb_roi in stage.tb_pairs:
            pest = transformer_block(pest, tb_pest)
            roi = transformer_block(roi, tb_roi)
        for db in stage.dbs:
            pest, roi, trace = dual_block(pest, roi, db)
            traces.append(trace)
        return pest, roi, traces

    def forward_with_traces(self, pest_img, roi: RoiMap, mode: str):
        img = self._as_image(pest_img)
        roi_img = render_roi_input(roi, img, mode)
        pest_seq = tokenize(img, self.pest_embed)
        roi_seq = tokenize(roi_img, self.roi_embed)
        traces = []
        for s in range(NUM_STAGES):
            pest_seq, roi_seq, stage_traces = self.run_stage(s, pest_seq, roi_seq)
            traces.extend(stage_traces)
        logits = add(reshape(matmul(pest_seq.cls, self.head_w), (self.config.num_classes,)), self.head_b)
        return logits, traces

    def forward(self, pest_img, roi: RoiMap, mode: str) -> Tensor:
        logits, _ = self.forward_with_traces(pest_img, roi, mode)
        return logits

    # -- parameter management ---------------------------------------------------

    def fusion_value_names(self) -> list[str]:
        return [n for n in self.params if n.endswith((".fuse_pest.wv", ".fuse_roi.wv"))]

    def disable_fusion(self) -> None:
        """Debug switch: zero and freeze all cross-attention value weights,
        severing every path by which one branch can influence the other."""
        for name in self.fusion_value_names():
            t = self.params[name]
            t.data = np.zeros_like(t.data)
            t.requires_grad = False

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in tensors]
        if missing:
            raise ShapeError(f"checkpoint missing tensors: {missing[:4]}...")
        for name, t in self.params.items():
            arr = tensors[name]
            if arr.shape != t.shape:
                raise ShapeError(f"param {name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)


def build(config: ModelConfig, dtype=np.float32) -> RoiVit:
    return RoiVit(config, dtype=dtype)


# ---------------------------------------------------------------------------
# Checkpoint glue
# ---------------------------------------------------------------------------

_META_FORMAT = "roivit-checkpoint-v1"


def save_checkpoint(
    path,
    model: RoiVit,
    class_names: list[str],
    roi_mode: str,
    aux: SmallCnn | None = None,
    extra_meta: dict[str, str] | None = None,
) -> None:
    meta = {
        "format": _META_FORMAT,
        "config_hash": model.config.digest(),
        "classes": ",".join(class_names),
        "roi_mode": roi_mode,
        "has_aux": "1" if aux is not None else "0",
    }
    for f in fields(model.config):
        v = getattr(model.config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        meta[f"config.{f.name}"] = str(v)
    meta.update(extra_meta or {})
    tensors = {f"model.{n}": a for n, a in model.state_tensors().items()}
    if aux is not None:
        tensors.update({f"aux.{n}": a for n, a in aux.state_tensors().items()})
    save_blob(path, tensors, meta)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild (model, aux, class_names, meta) from a checkpoint file."""
    tensors, meta = load_blob(path)
    if meta.get("format") != _META_FORMAT:
        raise FormatError(f"{path}: not a model checkpoint (format={meta.get('format')!r})")
    try:
        config = ModelConfig(
            image_size=int(meta["config.image_size"]),
            patch_size=int(meta["config.patch_size"]),
            base_width=int(meta["config.base_width"]),
            base_heads=int(meta["config.base_heads"]),
            stage_tb_counts=tuple(int(v) for v in meta["config.stage_tb_counts"].split(",")),
            stage_db_counts=tuple(int(v) for v in meta["config.stage_db_counts"].split(",")),
            num_classes=int(meta["config.num_classes"]),
            seed=int(meta["config.seed"]),
        )
        model = RoiVit(config, dtype=dtype)
        model.load_state({n[len("model.") :]: a for n, a in tensors.items() if n.startswith("model.")})
        if meta.get("fusion_disabled") == "1":
            model.disable_fusion()
        aux = None
        if meta.get("has_aux") == "1":
            aux = SmallCnn(num_classes=config.num_classes, seed=config.seed, dtype=dtype)
            aux.load_state({n[len("aux.") :]: a for n, a in tensors.items() if n.startswith("aux.")})
    except (KeyError, ValueError, ShapeError, GeneratorError) as e:
        raise FormatError(f"{path}: checkpoint does not match its manifest ({e})") from e
    class_names = meta["classes"].split(",")
    return model, aux, class_names, meta
