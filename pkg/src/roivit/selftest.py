"""Built-in release-gate checks: gradients, attention normalization, the
scale schedule, fusion patch invariance, the metrics oracle, and CAM
weight algebra. All run on toy-sized instances in well under five minutes
on one CPU core."""

from __future__ import annotations

import time

import numpy as np

from .attention import capture_attention, cross_attention_fuse
from .metrics import ConfusionMatrix, report
from .model import ModelConfig, build, stage_shapes
from .patches import TokenSequence, tokenize
from .roi import RoiMap, score_cam, score_cam_weights
from .tensor import Tensor, cross_entropy_logits


def toy_gradcheck_config(num_classes: int = 3, seed: int = 0) -> ModelConfig:
    return ModelConfig(
        image_size=16,
        patch_size=4,
        base_width=8,
        base_heads=1,
        stage_tb_counts=(1, 1, 1, 1),
        stage_db_counts=(1, 1, 1, 1),
        num_classes=num_classes,
        seed=seed,
    )


def model_gradient_errors(
    model,
    img: np.ndarray,
    roi: RoiMap,
    mode: str,
    label: int,
    n_coords: int,
    h_scale: float,
    seed: int = 0,
) -> list[float]:
    """Relative error between analytic parameter gradients of the
    cross-entropy loss and central finite differences at sampled
    coordinates."""

    def loss_value() -> float:
        return cross_entropy_logits(model.forward(img, roi, mode), label).item()

    for p in model.params.values():
        p.grad = None
    loss = cross_entropy_logits(model.forward(img, roi, mode), label)
    loss.backward()
    grads = {
        n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for n, p in model.params.items()
    }

    rng = np.random.default_rng(seed)
    names = [n for n, p in model.params.items() if p.requires_grad]
    errors = []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        flat = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat, p.shape)
        base = p.data
        h = h_scale * max(1.0, abs(float(base[idx])))

        def perturbed(delta: float) -> float:
            arr = base.copy()
            arr[idx] += delta
            p.data = arr
            try:
                return loss_value()
            finally:
                p.data = base

        numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h)
        analytic = float(grads[name][idx])
        errors.append(abs(analytic - numeric) / max(1.0, abs(numeric)))
    return errors


def _toy_inputs(size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    img = rng.random((3, size, size)).astype(np.float32)
    roi = RoiMap(values=rng.random((size, size)).astype(np.float32), source="seg")
    return img, roi


def check_gradient_integrity(n_coords: int = 120, tol: float = 1e-3):
    model = build(toy_gradcheck_config())
    img, roi = _toy_inputs(16, seed=3)
    errs = model_gradient_errors(model, img, roi, "seg", label=1, n_coords=n_coords, h_scale=1e-3)
    worst = max(errs)
    return worst < tol, f"worst relative error {worst:.2e} over {n_coords} coordinates (tol {tol:g})"


def check_attention_normalization():
    model = build(toy_gradcheck_config(seed=5))
    worst = 0.0
    count = 0
    for trial in range(3):
        img, roi = _toy_inputs(16, seed=10 + trial)
        with capture_attention() as rows:
            model.forward(img, roi, "cam" if trial % 2 else "seg")
        for a in rows:
            worst = max(worst, float(np.abs(a.sum(axis=-1) - 1.0).max()))
            if a.min() < 0:
                return False, "negative attention weight"
            count += a.shape[0] * a.shape[1]
    return worst < 1e-5, f"{count} rows checked, worst row-sum deviation {worst:.2e}"


def check_stage_schedule():
    cfg = ModelConfig(image_size=224, patch_size=4, base_width=64, num_classes=4)
    expected = [(3136, 64), (784, 128), (196, 256), (49, 512)]
    if stage_shapes(cfg) != expected:
        return False, f"224-pixel schedule mismatch: {stage_shapes(cfg)}"
    # and a real forward on a small instance
    model = build(toy_gradcheck_config(seed=2))
    img, roi = _toy_inputs(16, seed=2)
    pest = tokenize(model._as_image(img), model.pest_embed)
    roi_seq = tokenize(model._as_image(img), model.roi_embed)
    for s, (tokens, width) in enumerate(stage_shapes(model.config)):
        pest, roi_seq, _ = model.run_stage(s, pest, roi_seq)
        if pest.count != tokens or pest.width != width or pest.cls.shape != (1, width):
            return False, f"stage {s}: got ({pest.count}, {pest.width}), want ({tokens}, {width})"
    return True, "224-pixel table and small-instance forward both conform"


def check_patch_invariance(trials: int = 25):
    model = build(toy_gradcheck_config(seed=7))
    fuse = model.stages[0].dbs[0]
    rng = np.random.default_rng(11)
    for _ in range(trials):
        c = model.config.base_width
        pest = TokenSequence(
            cls=Tensor(rng.standard_normal((1, c)).astype(np.float32)),
            patches=Tensor(rng.standard_normal((16, c)).astype(np.float32)),
            grid=(4, 4),
        )
        roi = TokenSequence(
            cls=Tensor(rng.standard_normal((1, c)).astype(np.float32)),
            patches=Tensor(rng.standard_normal((16, c)).astype(np.float32)),
            grid=(4, 4),
        )
        p2, r2, _, _ = cross_attention_fuse(pest, roi, fuse.pest_fuse, fuse.roi_fuse)
        if (
            p2.patches.data.tobytes() != pest.patches.data.tobytes()
            or r2.patches.data.tobytes() != roi.patches.data.tobytes()
        ):
            return False, "patch tokens changed through fusion"
    return True, f"{trials} random fusions left patch tokens bitwise unchanged"


def check_metrics_oracle(trials: int = 200):
    rng = np.random.default_rng(13)
    for _ in range(trials):
        k = int(rng.integers(2, 13))
        counts = rng.integers(0, 12, size=(k, k))
        if counts.sum() == 0:
            counts[0, 0] = 1
        rep = report(ConfusionMatrix(k, counts=counts))
        total = counts.sum()
        correct = np.trace(counts)
        for c in range(k):
            tp = counts[c, c]
            fp = counts[:, c].sum() - tp
            fn = counts[c, :].sum() - tp
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            if (
                rep.per_class_precision[c] != prec
                or rep.per_class_recall[c] != rec
                or abs(rep.per_class_f1[c] - f1) > 1e-12
            ):
                return False, f"per-class mismatch on class {c} of a {k}-class matrix"
        if rep.overall_accuracy != correct / total:
            return False, "overall accuracy mismatch"
    return True, f"{trials} random confusion matrices replayed exactly"


class _MeanScoreStub:
    def __init__(self, maps):
        self.maps = maps

    def activations(self, img):
        return self.maps

    def class_scores(self, img):
        return np.array([img.mean(), 1.0 - img.mean()])

    def fingerprint(self):
        return "selftest-stub"


def check_score_cam_algebra():
    w = score_cam_weights(np.array([0.0, np.log(3.0)]))
    if abs(w[0] - 0.25) > 1e-6 or abs(w[1] - 0.75) > 1e-6:
        return False, f"two-map closed form gave {w}"
    rng = np.random.default_rng(17)
    for trial in range(5):
        maps = rng.standard_normal((4, 3, 3)).astype(np.float32)
        img = rng.random((3, 9, 9)).astype(np.float32)
        roi = score_cam(img, _MeanScoreStub(maps), target_class=0)
        if roi.values.min() < 0.0 or roi.values.max() > 1.0:
            return False, "ROI left [0,1]"
        ws = score_cam_weights(rng.standard_normal(int(rng.integers(1, 9))))
        if abs(ws.sum() - 1.0) > 1e-6 or ws.min() < 0:
            return False, f"weights not a distribution: sum {ws.sum()}"
    return True, "weight sums, closed-form case, and output range all hold"


CHECKS = [
    ("gradient_integrity", check_gradient_integrity),
    ("attention_normalization", check_attention_normalization),
    ("stage_schedule", check_stage_schedule),
    ("fusion_patch_invariance", check_patch_invariance),
    ("metrics_oracle", check_metrics_oracle),
    ("score_cam_algebra", check_score_cam_algebra),
]


def run_selftest(log=print) -> int:
    """Run every check; returns 0 when all pass, 4 otherwise."""
    failures = 0
    for name, fn in CHECKS:
        start = time.time()
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        elapsed = time.time() - start
        status = "PASS" if ok else "FAIL"
        log(f"{status} {name} ({elapsed:.1f}s): {detail}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 4
