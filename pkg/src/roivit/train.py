"""Training, evaluation, and saliency export.

Single-threaded, deterministic: a fixed seed fixes parameter init, batch
order, ROI generation and therefore every checkpoint byte. The loss is
softmax cross-entropy on the Pest-branch head. For `cam` ROI mode a small
auxiliary CNN is first trained on the same dataset, then ROI maps are
generated (ground-truth class during training, argmax at evaluation) and
cached before the first epoch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetIndex, load_image
from .errors import ConfigError, DatasetError, GeneratorError, NumericalError
from .metrics import ConfusionMatrix, MetricReport, report
from .model import ModelConfig, RoiVit, build, load_checkpoint, save_checkpoint
from .optim import Adam
from .ppm import from_unit_image, read_ppm, to_unit_image, write_ppm
from .roi import (
    CamRoiProvider,
    RoiMap,
    SegRoiProvider,
    SmallCnn,
    precompute_rois,
    score_cam,
)
from .patches import render_roi_input, tokenize
from .tensor import Tensor, add, cross_entropy_logits, matmul, reshape, scale, upsample_bilinear

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    batch_size: int = 10
    epochs: int = 80
    roi_mode: str = "cam"
    seed: int = 0
    cache_dir: str | None = None
    checkpoint_dir: str | None = None
    aux_epochs: int = 30
    aux_lr: float = 1e-3
    disable_fusion: bool = False
    max_steps: int | None = None

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if self.lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.roi_mode not in ("cam", "seg"):
            raise ConfigError(f"roi_mode must be cam or seg, got {self.roi_mode!r}")
        return self


def toy_config(num_classes: int, **overrides) -> TrainConfig:
    """Desk-scale profile: 32-pixel images, thin stages, faster learning."""
    model = ModelConfig(
        image_size=32,
        patch_size=4,
        base_width=16,
        base_heads=1,
        stage_tb_counts=(1, 1, 2, 1),
        stage_db_counts=(1, 1, 1, 1),
        num_classes=num_classes,
    )
    cfg = TrainConfig(model=model, lr=1e-3, batch_size=8, epochs=50, aux_epochs=30)
    return replace(cfg, **overrides)


def full_config(num_classes: int, **overrides) -> TrainConfig:
    """Full-scale profile (224-pixel images, deep stage 3); selectable but
    not a desk-scale target."""
    cfg = TrainConfig(model=ModelConfig(num_classes=num_classes))
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# Config files: line-oriented `key = value`, unknown keys rejected
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "image_size": int,
    "patch_size": int,
    "base_width": int,
    "base_heads": int,
    "num_classes": int,
}
_TRAIN_KEYS = {
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "aux_epochs": int,
    "aux_lr": float,
    "max_steps": int,
}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("1", "true", "yes"):
        return True
    if raw.lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"expected boolean, got {raw!r}")


def _parse_counts(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(v.strip()) for v in raw.split(","))
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from e


def parse_config_file(path, num_classes: int | None = None) -> TrainConfig:
    """Build a TrainConfig from a `key = value` text file."""
    text = Path(path).read_text()
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in entries:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = raw

    profile = entries.pop("profile", "toy")
    if profile == "toy":
        cfg = toy_config(num_classes=num_classes or 2)
    elif profile == "full":
        cfg = full_config(num_classes=num_classes or 2)
    else:
        raise ConfigError(f"unknown profile {profile!r} (expected toy or full)")

    for key, raw in entries.items():
        try:
            if key in _MODEL_KEYS:
                setattr(cfg.model, key, _MODEL_KEYS[key](raw))
            elif key in _TRAIN_KEYS:
                setattr(cfg, key, _TRAIN_KEYS[key](raw))
            elif key == "stage_tb_counts":
                cfg.model.stage_tb_counts = _parse_counts(raw)
            elif key == "stage_db_counts":
                cfg.model.stage_db_counts = _parse_counts(raw)
            elif key == "seed":
                cfg.seed = int(raw)
                cfg.model.seed = int(raw)
            elif key == "roi_mode":
                if raw not in ("cam", "seg"):
                    raise ConfigError(f"roi_mode must be cam or seg, got {raw!r}")
                cfg.roi_mode = raw
            elif key == "disable_fusion":
                cfg.disable_fusion = _parse_bool(raw)
            elif key == "cache_dir":
                cfg.cache_dir = raw
            elif key == "checkpoint_dir":
                cfg.checkpoint_dir = raw
            else:
                raise ConfigError(f"{path}: unknown config key {key!r}")
        except ValueError as e:
            raise ConfigError(f"{path}: bad value for {key!r}: {raw!r}") from e
    if num_classes is not None:
        cfg.model.num_classes = num_classes
    return cfg


# ---------------------------------------------------------------------------
# Shared loop helpers
# ---------------------------------------------------------------------------


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _nan_dump(out_dir: Path | None, model_params, context: str) -> None:
    if out_dir is None:
        return
    lines = [f"NaN diagnostics: {context}"]
    for name, t in model_params.items():
        finite = np.isfinite(t.data).all()
        lines.append(f"{name} shape={t.shape} max|x|={np.abs(t.data).max():.3e} finite={finite}")
    (out_dir / "nan_dump.txt").write_text("\n".join(lines) + "\n")


def train_aux_classifier(
    data: DatasetIndex,
    num_classes: int,
    image_size: int,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    log=None,
) -> SmallCnn:
    """Fit the built-in CNN used as the CAM score model."""
    aux = SmallCnn(num_classes=num_classes, seed=seed)
    opt = Adam(aux.params, lr=lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS)
    rng = np.random.default_rng(seed)
    items = data.items()
    images = [load_image(p, image_size) for p, _ in items]
    labels = [label for _, label in items]
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        total, correct, loss_sum = 0, 0, 0.0
        for batch in _batches(order, batch_size):
            opt.zero_grad()
            for idx in batch:
                logits = aux.logits(Tensor(images[idx]))
                loss = cross_entropy_logits(logits, labels[idx])
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"aux training loss became non-finite at epoch {epoch}")
                scale(loss, 1.0 / len(batch)).backward()
                loss_sum += loss.item()
                correct += int(np.argmax(logits.data) == labels[idx])
                total += 1
            opt.step()
        if log:
            log(f"aux epoch {epoch}: loss {loss_sum / total:.4f} acc {correct / total:.3f}")
    return aux


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: RoiVit
    aux: SmallCnn | None
    class_names: list[str]
    render_mode: str
    epoch_stats: list[tuple[int, float, float]]
    step_losses: list[float]
    flags: list[str]
    final_checkpoint: Path | None
    roi_maps: dict


def smoothed_window_flags(step_losses: list[float], window: int = 20, rel_tol: float = 0.02) -> list[str]:
    """Flag the run when a smoothed 20-step loss window rises past the
    previous one; `rel_tol` absorbs batch-order jitter so only structural
    increases flag."""
    means = [
        float(np.mean(step_losses[i : i + window]))
        for i in range(0, len(step_losses) - window + 1, window)
    ]
    for prev, cur in zip(means, means[1:]):
        if cur > prev * (1.0 + rel_tol):
            return [f"loss_not_monotone: window mean rose {prev:.4f} -> {cur:.4f}"]
    return []


def train(
    config: TrainConfig,
    data: DatasetIndex,
    out_dir=None,
    roi_provider=None,
    log=None,
) -> TrainResult:
    """Run the full training loop; returns the model plus run records.

    `roi_provider` overrides the config's cam/seg generator (e.g. with
    ground-truth masks); checkpoints still record `config.roi_mode`, so
    evaluating such a run through `evaluate` needs the same provider passed
    to `evaluate_model` instead. Writes `last.ckpt` each epoch plus
    `final.ckpt`, `train_log.tsv` and the ROI cache under `out_dir`.
    """
    config.validate()
    if config.model.num_classes != data.num_classes:
        raise ConfigError(
            f"config expects {config.model.num_classes} classes, dataset has {data.num_classes}"
        )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = config.cache_dir or (out_dir / "roi_cache" if out_dir else None)
    if cache_dir is None:
        raise ConfigError("need a cache_dir (or an out_dir to place one in)")

    model = build(config.model)
    if config.disable_fusion:
        model.disable_fusion()

    aux = None
    if roi_provider is None:
        if config.roi_mode == "cam":
            aux = train_aux_classifier(
                data,
                num_classes=config.model.num_classes,
                image_size=config.model.image_size,
                epochs=config.aux_epochs,
                lr=config.aux_lr,
                batch_size=config.batch_size,
                seed=config.seed + 1,
                log=log,
            )
            roi_provider = CamRoiProvider(aux, target="label")
        else:
            roi_provider = SegRoiProvider()

    roi_maps, _ = precompute_rois(data, roi_provider, cache_dir, config.model.image_size)

    items = data.items()
    images = [load_image(p, config.model.image_size) for p, _ in items]
    labels = [label for _, label in items]
    rois = [roi_maps[p] for p, _ in items]
    render_mode = roi_provider.render_mode

    opt = Adam(model.params, lr=config.lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS)
    rng = np.random.default_rng(config.seed)

    epoch_stats: list[tuple[int, float, float]] = []
    step_losses: list[float] = []
    steps = 0
    final_ckpt = None
    meta = {"roi_mode": config.roi_mode, "fusion_disabled": "1" if config.disable_fusion else "0"}

    budget_done = False
    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        loss_sum, correct, total = 0.0, 0, 0
        for batch in _batches(order, config.batch_size):
            opt.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                logits = model.forward(images[idx], rois[idx], render_mode)
                loss = cross_entropy_logits(logits, labels[idx])
                value = loss.item()
                if not np.isfinite(value):
                    _nan_dump(out_dir, model.params, f"epoch {epoch} step {steps}")
                    raise NumericalError(f"training loss became non-finite at epoch {epoch}")
                scale(loss, 1.0 / len(batch)).backward()
                batch_loss += value
                correct += int(np.argmax(logits.data) == labels[idx])
                total += 1
            opt.step()
            steps += 1
            loss_sum += batch_loss
            step_losses.append(batch_loss / len(batch))
            if config.max_steps is not None and steps >= config.max_steps:
                budget_done = True
                break
        mean_loss = loss_sum / max(total, 1)
        acc = correct / max(total, 1)
        epoch_stats.append((epoch, mean_loss, acc))
        if log:
            log(f"epoch {epoch}: loss {mean_loss:.4f} train_acc {acc:.3f}")
        if out_dir is not None:
            final_ckpt = out_dir / "last.ckpt"
            save_checkpoint(final_ckpt, model, data.class_names, config.roi_mode, aux=aux, extra_meta=meta)
        if budget_done:
            break

    flags = smoothed_window_flags(step_losses)
    if out_dir is not None:
        log_lines = [f"{e}\t{l:.6f}\t{a:.4f}" for e, l, a in epoch_stats]
        (out_dir / "train_log.tsv").write_text("epoch\tloss\ttrain_acc\n" + "\n".join(log_lines) + "\n")
        final_ckpt = out_dir / "final.ckpt"
        save_checkpoint(final_ckpt, model, data.class_names, config.roi_mode, aux=aux, extra_meta=meta)
    return TrainResult(
        model=model,
        aux=aux,
        class_names=data.class_names,
        render_mode=render_mode,
        epoch_stats=epoch_stats,
        step_losses=step_losses,
        flags=flags,
        final_checkpoint=final_ckpt,
        roi_maps=roi_maps,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_model(
    model: RoiVit,
    data: DatasetIndex,
    roi_provider,
    cache_dir=None,
) -> tuple[MetricReport, ConfusionMatrix]:
    """Forward every image with its ROI; argmax prediction (lowest index
    wins ties); aggregate into a confusion matrix."""
    if cache_dir is not None:
        roi_maps, _ = precompute_rois(data, roi_provider, cache_dir, model.config.image_size, use_labels=False)
    else:
        roi_maps = None
    cm = ConfusionMatrix(data.num_classes)
    by_path = getattr(roi_provider, "generate_for_path", None)
    for path, label in data.items():
        img = load_image(path, model.config.image_size)
        if roi_maps is not None:
            roi = roi_maps[path]
        elif by_path is not None:
            roi = by_path(path, img, None)
        else:
            roi = roi_provider.generate(img, None)
        logits = model.forward(img, roi, roi_provider.render_mode)
        cm.accumulate(label, int(np.argmax(logits.data)))
    return report(cm), cm


def evaluate(ckpt_path, data: DatasetIndex, roi_mode: str | None = None, cache_dir=None):
    model, aux, class_names, meta = load_checkpoint(ckpt_path)
    if class_names != data.class_names:
        raise DatasetError(
            f"checkpoint classes {class_names} do not match dataset classes {data.class_names}"
        )
    mode = roi_mode or meta.get("roi_mode", "seg")
    if mode == "cam":
        if aux is None:
            raise GeneratorError("checkpoint carries no auxiliary classifier for cam ROIs")
        provider = CamRoiProvider(aux, target="auto")
    else:
        provider = SegRoiProvider()
    return evaluate_model(model, data, provider, cache_dir=cache_dir)


# ---------------------------------------------------------------------------
# Saliency export
# ---------------------------------------------------------------------------


class RoiVitAsClassifier:
    """Adapter exposing a trained model through the CAM interface.

    The activation stack is the final-stage Pest patch tokens reshaped to
    their spatial grid. Masked-image scores reuse one fixed ROI computed
    from the original image, so saliency needs a single ROI generation.
    """

    def __init__(self, model: RoiVit, roi: RoiMap, render_mode: str):
        self.model = model
        self.roi = roi
        self.render_mode = render_mode

    def _forward_tokens(self, img: np.ndarray):
        image = self.model._as_image(img)
        roi_img = render_roi_input(self.roi, image, self.render_mode)
        pest = tokenize(image, self.model.pest_embed)
        roi_seq = tokenize(roi_img, self.model.roi_embed)
        for s in range(len(self.model.stages)):
            pest, roi_seq, _ = self.model.run_stage(s, pest, roi_seq)
        return pest

    def class_scores(self, img: np.ndarray) -> np.ndarray:
        pest = self._forward_tokens(img)
        logits = add(
            reshape(matmul(pest.cls, self.model.head_w), (self.model.config.num_classes,)),
            self.model.head_b,
        )
        z = logits.data - logits.data.max()
        e = np.exp(z)
        return e / e.sum()

    def activations(self, img: np.ndarray) -> np.ndarray:
        pest = self._forward_tokens(img)
        rows, cols = pest.grid
        return pest.patches.data.T.reshape(pest.width, rows, cols).copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.model.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def export_saliency(ckpt_path, image_path, out_path) -> Path:
    """Write a CAM heatmap of the trained model blended over the image."""
    model, aux, _, meta = load_checkpoint(ckpt_path)
    pixels = read_ppm(image_path)
    orig_h, orig_w = pixels.shape[:2]
    img = load_image(image_path, model.config.image_size)

    mode = meta.get("roi_mode", "seg")
    if mode == "cam" and aux is not None:
        base_roi = CamRoiProvider(aux, target="auto").generate(img)
    else:
        base_roi = SegRoiProvider().generate(img)
        mode = "seg"
    adapter = RoiVitAsClassifier(model, base_roi, mode)
    cam = score_cam(img, adapter, target_class="auto")

    full = upsample_bilinear(Tensor(cam.values), orig_h, orig_w)
    heat = RoiMap(values=np.clip(full.data, 0.0, 1.0), source="cam")
    blended = render_roi_input(heat, to_unit_image(pixels), "cam")
    out_path = Path(out_path)
    write_ppm(out_path, from_unit_image(blended.data))
    return out_path
