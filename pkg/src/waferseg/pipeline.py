"""Preprocessing and augmentation of wafer samples for training."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from .wafergen import BACKGROUND, WaferSample

RIGHT_ANGLES = (90, 180, 270)
NORM_EPS = 1e-8
# VGG 16 RGB mean collapsed to one brightness channel, on a [0, 1] scale:
# (123.68 + 116.779 + 103.939) / 3 / 255. Only meaningful with imported weights.
VGG_MEAN_GRAY = 0.450193


class PipelineError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    mean_value: float = 0.0
    normalize: bool = True
    rotations: tuple = RIGHT_ANGLES
    pad_to_square: bool = False

    def __post_init__(self):
        self.rotations = tuple(int(r) for r in self.rotations)
        bad = [r for r in self.rotations if r not in RIGHT_ANGLES]
        if bad:
            raise PipelineError(f"rotations must be a subset of {RIGHT_ANGLES}, got {bad}")


@dataclass
class PreparedSample:
    """Network-ready sample: image tensor (1,1,H,W), one-hot (1,3,H,W), labels (H,W)."""

    image: Tensor
    onehot: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)
    # what was done to the raw image, so it can be undone for visualization
    bookkeeping: dict = field(default_factory=dict)

    @property
    def is_cluster(self) -> bool:
        return bool(self.meta.get("is_cluster", False))

    def raw_image(self) -> np.ndarray:
        b = self.bookkeeping
        x = self.image.data[0, 0].astype(np.float64) + b["mean_value"]
        if b["normalized"]:
            x = x * b["std"] + b["mean"]
        return x


def one_hot(labels: np.ndarray, num_classes: int = 3) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise PipelineError(f"label values must be in [0, {num_classes})")
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    for k in range(num_classes):
        out[k] = labels == k
    return out


def preprocess(sample: WaferSample, config: PreprocessConfig | None = None, dtype=np.float32) -> PreparedSample:
    """Normalize the image per sample, subtract ``mean_value``, one-hot the labels."""
    config = config or PreprocessConfig()
    if isinstance(sample, PreparedSample) or sample.meta.get("preprocessed"):
        raise PipelineError("sample is already preprocessed")
    img = np.asarray(sample.image, dtype=np.float64)
    mean = float(img.mean())
    std = float(np.sqrt(img.var() + NORM_EPS))
    if config.normalize:
        img = (img - mean) / std
    img = img - config.mean_value
    meta = dict(sample.meta)
    meta["preprocessed"] = True
    return PreparedSample(
        image=Tensor(img[None, None].astype(dtype)),
        onehot=one_hot(sample.labels)[None],
        labels=np.asarray(sample.labels, dtype=np.uint8),
        meta=meta,
        bookkeeping={"normalized": config.normalize, "mean": mean, "std": std, "mean_value": config.mean_value},
    )


def rotate_grid(a: np.ndarray, angle: int) -> np.ndarray:
    """Rotate a 2-D grid clockwise by a right angle: (r, c) -> (c, H-1-r) for 90."""
    if angle % 90:
        raise PipelineError(f"only right-angle rotations are supported, got {angle}")
    return np.ascontiguousarray(np.rot90(a, k=-(angle // 90) % 4, axes=(-2, -1)))


def rotate_coords(coords: np.ndarray, angle: int, h: int, w: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    r, c = coords[:, 0], coords[:, 1]
    for _ in range((angle // 90) % 4):
        r, c = c, h - 1 - r
        h, w = w, h
    return np.stack([r, c], axis=1)


def rotate_sample(sample: WaferSample, angle: int) -> WaferSample:
    h, w = sample.labels.shape
    if angle in (90, 270) and h != w:
        raise PipelineError(
            f"{angle} degree rotation of a non-square {h}x{w} grid would change its shape; "
            "pad to square first or use 180 only"
        )
    meta = copy.deepcopy(sample.meta)
    for d in meta.get("defects", []):
        for key in ("label", "visible"):
            if key in d:
                d[key] = rotate_coords(d[key], angle, h, w).tolist()
    if meta.get("markers"):
        meta["markers"] = rotate_coords(meta["markers"], angle, h, w).tolist()
    meta["rotation"] = (meta.get("rotation", 0) + angle) % 360
    return WaferSample(image=rotate_grid(sample.image, angle), labels=rotate_grid(sample.labels, angle), meta=meta)


def pad_to_square(sample: WaferSample) -> WaferSample:
    """Pad the shorter side with background (image 0, label class 0)."""
    h, w = sample.labels.shape
    n = max(h, w)
    if h == w:
        return sample
    top, left = (n - h) // 2, (n - w) // 2
    image = np.zeros((n, n), dtype=sample.image.dtype)
    labels = np.full((n, n), BACKGROUND, dtype=sample.labels.dtype)
    image[top:top + h, left:left + w] = sample.image
    labels[top:top + h, left:left + w] = sample.labels
    meta = copy.deepcopy(sample.meta)
    for d in meta.get("defects", []):
        for key in ("label", "visible"):
            if key in d:
                d[key] = (np.asarray(d[key], dtype=np.int64).reshape(-1, 2) + [top, left]).tolist()
    if meta.get("markers"):
        meta["markers"] = (np.asarray(meta["markers"], dtype=np.int64).reshape(-1, 2) + [top, left]).tolist()
    meta["padding"] = [top, left, n - h - top, n - w - left]
    return WaferSample(image=image, labels=labels, meta=meta)


def augment_rotations(samples: list[WaferSample], rotations=RIGHT_ANGLES, pad: bool = False) -> list[WaferSample]:
    """Each original followed by its rotated copies: n * (1 + len(rotations)) samples."""
    rotations = PreprocessConfig(rotations=rotations).rotations
    out = []
    for s in samples:
        if pad:
            s = pad_to_square(s)
        out.append(s)
        out.extend(rotate_sample(s, a) for a in rotations)
    return out


def shuffle_epoch(samples: list, epoch_seed: int) -> list:
    order = np.random.default_rng(epoch_seed).permutation(len(samples))
    return [samples[i] for i in order]
