"""Segmentation metrics, rotation-ensemble prediction and cross-validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Model, ModelConfig, build_model, predict_classes
from .pipeline import PreparedSample, rotate_grid
from .tensor import Tensor, no_grad

NUM_CLASSES = 3
ENSEMBLE_ANGLES = (0, 90, 180, 270)


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """counts[j, i] = pixels of true class j predicted as class i."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (NUM_CLASSES, NUM_CLASSES) or (self.counts < 0).any():
            raise EvaluationError("confusion matrix must be a non-negative 3x3 count matrix")

    @property
    def class_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def to_text(self) -> str:
        """Plain-text grid: rows = true class, columns = predicted class."""
        width = max(6, len(str(self.counts.max())) + 1)
        head = "true\\pred" + "".join(f"{i:>{width}d}" for i in range(NUM_CLASSES))
        rows = [f"{j:>9d}" + "".join(f"{v:>{width}d}" for v in self.counts[j]) for j in range(NUM_CLASSES)]
        return "\n".join([head] + rows) + "\n"


def confusion(predicted, truth) -> ConfusionMatrix:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise EvaluationError(f"prediction shape {predicted.shape} != label shape {truth.shape}")
    for name, a in (("prediction", predicted), ("label", truth)):
        if a.size and (a.min() < 0 or a.max() >= NUM_CLASSES):
            raise EvaluationError(f"{name} values must be class indices in [0, {NUM_CLASSES})")
    idx = truth.astype(np.int64).ravel() * NUM_CLASSES + predicted.astype(np.int64).ravel()
    return ConfusionMatrix(np.bincount(idx, minlength=NUM_CLASSES**2).reshape(NUM_CLASSES, NUM_CLASSES))


@dataclass
class MetricsReport:
    pixel_accuracy: float
    mean_pixel_accuracy: float
    mean_iou: float
    defect_class_accuracy: float
    class_accuracy: list = field(default_factory=list)
    class_iou: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"pa": self.pixel_accuracy, "mpa": self.mean_pixel_accuracy, "miou": self.mean_iou,
                "dca": self.defect_class_accuracy, "class_accuracy": list(self.class_accuracy),
                "class_iou": list(self.class_iou)}


def metrics(cm, allow_empty: bool = False) -> MetricsReport:
    """Pixel accuracy, mean pixel accuracy, mean IoU and defect class accuracy.

    Classes absent from the ground truth (row sum 0) are left out of the
    class means; their per-class entries and, for class 2, DCA are NaN.
    """
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(cm)
    p = cm.counts.astype(np.float64)
    total = p.sum()
    if total == 0:
        if allow_empty:
            nan = float("nan")
            return MetricsReport(nan, nan, nan, nan, [nan] * NUM_CLASSES, [nan] * NUM_CLASSES)
        raise EvaluationError("confusion matrix is all zeros")
    t = p.sum(axis=1)
    diag = np.diag(p)
    predicted = p.sum(axis=0)
    present = t > 0
    acc = np.full(NUM_CLASSES, np.nan)
    iou = np.full(NUM_CLASSES, np.nan)
    acc[present] = diag[present] / t[present]
    iou[present] = diag[present] / (t[present] + predicted[present] - diag[present])
    n_c = int(present.sum())
    return MetricsReport(
        pixel_accuracy=float(diag.sum() / t.sum()),
        mean_pixel_accuracy=float(acc[present].sum() / n_c),
        mean_iou=float(iou[present].sum() / n_c),
        defect_class_accuracy=float(acc[2]),
        class_accuracy=acc.tolist(),
        class_iou=iou.tolist(),
    )


def _rotate_nchw(a: np.ndarray, angle: int) -> np.ndarray:
    return rotate_grid(a, angle % 360)


def ensemble_probabilities(model: Model, image: Tensor, angles=ENSEMBLE_ANGLES) -> np.ndarray:
    """Mean of de-rotated softmax maps over the given right-angle rotations."""
    angles = _check_angles(angles, image.shape)
    acc = None
    with no_grad():
        for a in angles:
            x = Tensor(_rotate_nchw(image.data, a))
            probs = model.forward(x, "inference").data
            back = _rotate_nchw(probs, -a)
            acc = back if acc is None else acc + back
    return acc / acc.dtype.type(len(angles))


def _check_angles(angles, shape) -> tuple[int, ...]:
    angles = tuple(int(a) for a in angles)
    if not angles:
        raise EvaluationError("at least one angle is required")
    bad = [a for a in angles if a not in ENSEMBLE_ANGLES]
    if bad:
        raise EvaluationError(f"angles must be in {ENSEMBLE_ANGLES}, got {bad}")
    h, w = shape[2:]
    if h != w and any(a in (90, 270) for a in angles):
        raise EvaluationError(f"90/270 degree rotations need a square input, got {h}x{w}")
    return angles


def ensemble_predict(model: Model, image: Tensor, angles=ENSEMBLE_ANGLES, combine: str = "mean") -> np.ndarray:
    """Label map (N, H, W) combined from rotated copies of ``image``.

    ``combine="mean"`` averages probabilities; ``"vote"`` takes the per-pixel
    majority of the individual argmax maps (ties to the lowest class).
    """
    if combine == "mean":
        return predict_classes(ensemble_probabilities(model, image, angles))
    if combine != "vote":
        raise EvaluationError(f"combine must be 'mean' or 'vote', got {combine!r}")
    angles = _check_angles(angles, image.shape)
    votes = None
    with no_grad():
        for a in angles:
            probs = model.forward(Tensor(_rotate_nchw(image.data, a)), "inference").data
            pred = predict_classes(_rotate_nchw(probs, -a))
            onehot = np.stack([pred == k for k in range(NUM_CLASSES)], axis=1).astype(np.int32)
            votes = onehot if votes is None else votes + onehot
    return votes.argmax(axis=1).astype(np.uint8)


def predict_sample(model: Model, sample: PreparedSample, angles=(0,), combine: str = "mean") -> np.ndarray:
    """(H, W) label map for one prepared sample."""
    return ensemble_predict(model, sample.image, angles, combine)[0]


@dataclass
class EvaluationResult:
    pooled: ConfusionMatrix
    report: MetricsReport
    per_wafer: list = field(default_factory=list)  # (name, ConfusionMatrix, MetricsReport)
    predictions: list = field(default_factory=list)


def evaluate(model: Model, samples: list[PreparedSample], angles=(0,), combine: str = "mean",
             keep_predictions: bool = False) -> EvaluationResult:
    """Pool confusion counts over all wafers; per-wafer reports are kept too."""
    pooled = ConfusionMatrix(np.zeros((3, 3), dtype=np.int64))
    per_wafer, preds = [], []
    for i, s in enumerate(samples):
        pred = predict_sample(model, s, angles, combine)
        cm = confusion(pred, s.labels)
        pooled = pooled + cm
        name = s.meta.get("name", f"wafer_{s.meta.get('index', i):04d}")
        per_wafer.append((name, cm, metrics(cm, allow_empty=True)))
        if keep_predictions:
            preds.append(pred)
    return EvaluationResult(pooled, metrics(pooled, allow_empty=True), per_wafer, preds)


def stratified_folds(is_cluster: list[bool], folds: int, master_seed: int, stratify: bool = True) -> list[list[int]]:
    """Partition indices into ``folds`` disjoint validation folds.

    Cluster wafers are dealt round-robin first, then the rest continue the
    rotation, so fold sizes differ by at most one and cluster wafers are
    spread evenly.
    """
    n = len(is_cluster)
    if folds < 2:
        raise EvaluationError("need at least 2 folds")
    if n < folds:
        raise EvaluationError(f"dataset of {n} samples cannot be split into {folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0xF01D]))
    out: list[list[int]] = [[] for _ in range(folds)]
    if stratify:
        clusters = [i for i in range(n) if is_cluster[i]]
        plain = [i for i in range(n) if not is_cluster[i]]
        if 0 < len(clusters) < folds:
            raise EvaluationError(
                f"cannot stratify: {len(clusters)} cluster wafers for {folds} folds (need at least one per fold)"
            )
        sequence = [int(i) for i in rng.permutation(clusters)] + [int(i) for i in rng.permutation(plain)]
    else:
        sequence = [int(i) for i in rng.permutation(n)]
    for k, idx in enumerate(sequence):
        out[k % folds].append(idx)
    return [sorted(f) for f in out]


@dataclass
class CrossValidationResult:
    folds: list[list[int]]
    reports: list[MetricsReport]
    histories: list[list[dict]]
    summary: dict


def summarize(reports: list[MetricsReport]) -> dict:
    out = {}
    for key in ("pa", "mpa", "miou", "dca"):
        vals = np.array([r.as_dict()[key] for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[key] = {"mean": float(vals.mean()) if vals.size else math.nan,
                    "std": float(vals.std()) if vals.size else math.nan}
    return out


def cross_validate(
    dataset: list[PreparedSample],
    folds: int,
    stratify_clusters: bool,
    master_seed: int,
    train_config,
    model_config: ModelConfig | None = None,
    import_weights=None,
    on_fold=None,
) -> CrossValidationResult:
    """Train a fresh model per fold and report validation metrics per fold."""
    from .training import train

    model_config = model_config or ModelConfig()
    parts = stratified_folds([s.is_cluster for s in dataset], folds, master_seed, stratify_clusters)
    reports, histories = [], []
    for k, val_idx in enumerate(parts):
        held = set(val_idx)
        train_set = [s for i, s in enumerate(dataset) if i not in held]
        val_set = [dataset[i] for i in val_idx]
        model = build_model(model_config, seed=master_seed + k, import_weights=import_weights)
        result = train(model, train_set, val_set, train_config)
        rep = evaluate(model, val_set).report
        reports.append(rep)
        histories.append(result.history)
        if on_fold is not None:
            on_fold(k, rep, result)
    return CrossValidationResult(parts, reports, histories, summarize(reports))
