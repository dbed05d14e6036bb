"""Synthetic photoluminescence wafer images with chip-wise labels.

One pixel stands for one LED chip. A wafer disc is embedded in a rectangular
grid; everything outside the disc is background (class 0). Inside the disc,
chips are in-spec (class 1) unless they belong to an alignment marker (class 0,
drawn dark so that it resembles a defect) or a defect (class 2).

Defect kinds and how they are drawn:

* single  - isolated dark chips
* linear  - 1-chip-wide dark polylines
* void    - dark ellipse; the *label* covers the ellipse scaled by
            ``void_label_inflation`` so voids look smaller than labelled,
            unless ``ultrasonic_embedding`` darkens the whole label region
* cluster - irregular connected blob (or elongated / ring shape) whose
            darkness changes smoothly on one side and steps sharply on the other

Brightness non-uniformity is a multiplicative field; defects multiply the
local brightness by a factor in ``DARKNESS_RANGE``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

BACKGROUND, IN_SPEC, DEFECT = 0, 1, 2
BRIGHTNESS_FIELDS = ("uniform", "radialGradient", "linearGradient", "blotchy")
CLUSTER_SHAPES = ("blob", "elongated", "ring")

BASE_BRIGHTNESS = 0.72
OFF_WAFER_LEVEL = 0.03
MARKER_FACTOR = 0.3
DARKNESS_RANGE = (0.1, 0.6)
MAX_PLACEMENT_TRIES = 200

# marker lattice, in units of the disc radius (row, col offsets from centre)
_MARKER_LATTICE = [
    (-0.5, -0.5), (0.5, 0.5), (-0.5, 0.5), (0.5, -0.5),
    (0.0, -0.72), (0.0, 0.72), (-0.72, 0.0), (0.72, 0.0), (0.0, 0.0),
]
_MARKER_GLYPH = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]


class WaferGenError(ValueError):
    pass


@dataclass
class WaferGenConfig:
    height: int = 112
    width: int = 112
    disc_margin_frac: float = 0.03
    # one of BRIGHTNESS_FIELDS, or "mixed" to draw one per wafer
    brightness_field: str = "mixed"
    brightness_amplitude: float = 0.25
    marker_count: int = 4
    single_defect_rate: float = 0.004
    linear_defect_count: int = 1
    void_count: int = 1
    cluster_count: int = 0
    cluster_shape: str = "blob"
    void_label_inflation: float = 1.5
    ultrasonic_embedding: bool = False
    noise_sigma: float = 0.02
    seed: int = 0
    min_contrast: float = 0.1
    # sizes relative to the disc radius
    void_axis_range: tuple = (0.045, 0.075)
    cluster_size_range: tuple = (0.12, 0.2)
    line_length_range: tuple = (0.25, 0.5)

    def validate(self) -> None:
        if self.height * self.width < 32 * 32 or min(self.height, self.width) < 16:
            raise WaferGenError(f"grid {self.height}x{self.width} too small (need height*width >= 32*32)")
        if not 0 <= self.disc_margin_frac < 0.5:
            raise WaferGenError("disc_margin_frac must be in [0, 0.5)")
        if self.brightness_field not in BRIGHTNESS_FIELDS + ("mixed",):
            raise WaferGenError(f"brightness_field must be one of {BRIGHTNESS_FIELDS + ('mixed',)}")
        if not 0 <= self.brightness_amplitude <= 0.4:
            raise WaferGenError("brightness_amplitude must be in [0, 0.4]")
        if self.cluster_shape not in CLUSTER_SHAPES:
            raise WaferGenError(f"cluster_shape must be one of {CLUSTER_SHAPES}")
        if not 0 <= self.single_defect_rate < 1:
            raise WaferGenError("single_defect_rate must be in [0, 1)")
        for name in ("marker_count", "linear_defect_count", "void_count", "cluster_count"):
            if getattr(self, name) < 0:
                raise WaferGenError(f"{name} must be non-negative")
        if self.marker_count > len(_MARKER_LATTICE):
            raise WaferGenError(f"marker_count must be <= {len(_MARKER_LATTICE)}")
        if self.void_label_inflation < 1:
            raise WaferGenError("void_label_inflation must be >= 1")
        if self.noise_sigma < 0 or self.min_contrast < 0:
            raise WaferGenError("noise_sigma and min_contrast must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WaferGenConfig:
        d = dict(d)
        for key in ("void_axis_range", "cluster_size_range", "line_length_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class WaferSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8 in {0, 1, 2}
    meta: dict = field(default_factory=dict)

    @property
    def is_cluster(self) -> bool:
        return bool(self.meta.get("is_cluster", False))

    def defect_label_mask(self) -> np.ndarray:
        """Union of the stored label regions of every defect."""
        mask = np.zeros(self.labels.shape, dtype=bool)
        for d in self.meta.get("defects", []):
            px = np.asarray(d["label"], dtype=np.int64).reshape(-1, 2)
            mask[px[:, 0], px[:, 1]] = True
        return mask


def disc_geometry(h: int, w: int, margin: float) -> tuple[float, float, float]:
    return (h - 1) / 2.0, (w - 1) / 2.0, min(h, w) / 2.0 * (1.0 - margin)


def disc_mask(h: int, w: int, margin: float) -> np.ndarray:
    cy, cx, r = disc_geometry(h, w, margin)
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _brightness_field(kind, amp, h, w, cy, cx, radius, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "uniform" or amp == 0:
        f = np.zeros((h, w))
    elif kind == "radialGradient":
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2
        f = 1.0 - 2.0 * np.clip(d2, 0, 1)
        if rng.random() < 0.5:
            f = -f
    elif kind == "linearGradient":
        theta = rng.uniform(0, 2 * math.pi)
        f = np.clip(((yy - cy) * math.sin(theta) + (xx - cx) * math.cos(theta)) / radius, -1, 1)
    elif kind == "blotchy":
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(2.0, radius / 4), mode="reflect")
        f = noise / max(np.abs(noise).max(), 1e-12)
    else:
        raise WaferGenError(f"unknown brightness field {kind!r}")
    return 1.0 + amp * f


def _ellipse(h, w, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _segment(r0, c0, r1, c1):
    n = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    rr = np.rint(np.linspace(r0, r1, n)).astype(np.int64)
    cc = np.rint(np.linspace(c0, c1, n)).astype(np.int64)
    return rr, cc


def _coords(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask).astype(np.int64)


class _Canvas:
    """Bookkeeping for overlap-free defect placement."""

    def __init__(self, inside: np.ndarray, blocked: np.ndarray):
        self.inside = inside
        self.blocked = blocked
        self._struct = ndimage.generate_binary_structure(2, 2)

    def fits(self, region: np.ndarray) -> bool:
        return region.any() and not (region & ~self.inside).any() and not (region & self.blocked).any()

    def claim(self, region: np.ndarray) -> None:
        self.blocked |= ndimage.binary_dilation(region, structure=self._struct)


def generate_wafer(config: WaferGenConfig) -> WaferSample:
    """Render one wafer image with its label grid and defect geometry."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    cy, cx, radius = disc_geometry(h, w, config.disc_margin_frac)
    disc = disc_mask(h, w, config.disc_margin_frac)

    field_kind = config.brightness_field
    if field_kind == "mixed":
        field_kind = BRIGHTNESS_FIELDS[int(rng.integers(len(BRIGHTNESS_FIELDS)))]
    brightness = BASE_BRIGHTNESS * _brightness_field(
        field_kind, config.brightness_amplitude, h, w, cy, cx, radius, rng
    )

    markers = np.zeros((h, w), dtype=bool)
    marker_centres = []
    for dr, dc in _MARKER_LATTICE[: config.marker_count]:
        r, c = int(round(cy + dr * radius)), int(round(cx + dc * radius))
        for gr, gc in _MARKER_GLYPH:
            markers[r + gr, c + gc] = True
        marker_centres.append([r, c])
    if (markers & ~disc).any():
        raise WaferGenError("alignment markers do not fit inside the wafer disc")

    # keep defects one chip away from the disc rim and from markers
    inside = ndimage.binary_erosion(disc, iterations=1)
    canvas = _Canvas(inside, ndimage.binary_dilation(markers, structure=np.ones((3, 3), bool)))
    defects: list[dict] = []

    def place(kind, index, make):
        for _ in range(MAX_PLACEMENT_TRIES):
            d = make()
            if d is not None and canvas.fits(d["label_mask"]):
                canvas.claim(d["label_mask"])
                defects.append(d)
                return
        raise WaferGenError(
            f"could not place {kind} defect #{index + 1} inside the disc without overlapping markers or other "
            f"defects after {MAX_PLACEMENT_TRIES} tries (grid {h}x{w}, disc radius {radius:.1f}); "
            f"reduce defect counts/sizes or enlarge the grid"
        )

    def random_inside_point(margin=0.0):
        rr = radius * (1 - margin) * math.sqrt(rng.random())
        t = rng.uniform(0, 2 * math.pi)
        return cy + rr * math.sin(t), cx + rr * math.cos(t)

    def make_cluster():
        lo, hi = config.cluster_size_range
        size = rng.uniform(lo, hi) * radius
        py, px = random_inside_point(margin=0.1)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = yy - py, xx - px
        theta = rng.uniform(0, math.pi)
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        shape = config.cluster_shape
        if shape == "blob":
            env = 1.0 - np.sqrt(u**2 + v**2) / size
        elif shape == "elongated":
            aspect = rng.uniform(3.0, 4.5)
            env = 1.0 - np.sqrt((u / (size * 1.6)) ** 2 + (v * aspect / (size * 1.6)) ** 2)
        else:
            ring_r = size * 0.75
            env = 1.0 - np.abs(np.sqrt(u**2 + v**2) - ring_r) / (size * 0.3)
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(1.0, size / 4), mode="reflect")
        noise /= max(np.abs(noise).max(), 1e-12)
        score = env + 0.45 * noise
        region = score > 0.15
        if not region.any():
            return None
        lab, _ = ndimage.label(region)
        # keep the component nearest to the seed centre
        cand = np.argwhere(region)
        nearest = np.argmin((cand[:, 0] - py) ** 2 + (cand[:, 1] - px) ** 2)
        region = lab == lab[tuple(cand[nearest])]
        if shape != "ring":
            region = ndimage.binary_fill_holes(region)
        if region.sum() < 6:
            return None
        # darkness: sharp step on one side, smooth ramp towards the rim on the other
        f0 = rng.uniform(DARKNESS_RANGE[0], 0.3)
        depth = ndimage.distance_transform_edt(region)
        ramp = np.clip(1.0 - (depth - 1.0) / 3.0, 0.0, 1.0)
        side = rng.uniform(0, 2 * math.pi)
        smooth_side = (dy * math.sin(side) + dx * math.cos(side)) > 0
        factor = np.full((h, w), f0)
        factor = np.where(smooth_side, f0 + (DARKNESS_RANGE[1] - f0) * ramp, factor)
        return {
            "kind": "cluster", "shape": shape, "center": [py, px], "size": size,
            "label_mask": region, "visible_mask": region, "factor_map": factor,
        }

    def make_void():
        lo, hi = config.void_axis_range
        a = max(1.5, rng.uniform(lo, hi) * radius)
        b = max(1.5, a * rng.uniform(0.6, 1.0))
        theta = rng.uniform(0, math.pi)
        py, px = random_inside_point(margin=0.1)
        k = config.void_label_inflation
        visible = _ellipse(h, w, py, px, a, b, theta)
        label = _ellipse(h, w, py, px, a * k, b * k, theta) | visible
        return {
            "kind": "void", "center": [py, px], "axes": [a, b], "angle": theta, "inflation": k,
            "label_mask": label, "visible_mask": visible, "factor": rng.uniform(*DARKNESS_RANGE),
        }

    def make_line():
        lo, hi = config.line_length_range
        r0, c0 = random_inside_point(margin=0.15)
        heading = rng.uniform(0, 2 * math.pi)
        mask = np.zeros((h, w), dtype=bool)
        pts = [[r0, c0]]
        for _ in range(int(rng.integers(1, 4))):
            length = rng.uniform(lo, hi) * radius / 2
            r1, c1 = r0 + length * math.sin(heading), c0 + length * math.cos(heading)
            rr, cc = _segment(r0, c0, r1, c1)
            if rr.min() < 0 or cc.min() < 0 or rr.max() >= h or cc.max() >= w:
                return None
            mask[rr, cc] = True
            pts.append([r1, c1])
            r0, c0 = r1, c1
            heading += rng.uniform(-0.5, 0.5)
        return {"kind": "linear", "points": pts, "label_mask": mask, "visible_mask": mask,
                "factor": rng.uniform(*DARKNESS_RANGE)}

    def make_single():
        r, c = int(rng.integers(h)), int(rng.integers(w))
        mask = np.zeros((h, w), dtype=bool)
        mask[r, c] = True
        return {"kind": "single", "label_mask": mask, "visible_mask": mask, "factor": rng.uniform(*DARKNESS_RANGE)}

    for i in range(config.cluster_count):
        place("cluster", i, make_cluster)
    for i in range(config.void_count):
        place("void", i, make_void)
    for i in range(config.linear_defect_count):
        place("linear", i, make_line)
    n_single = int(rng.binomial(int(inside.sum()), config.single_defect_rate)) if config.single_defect_rate > 0 else 0
    for i in range(n_single):
        place("single", i, make_single)

    image = np.where(disc, brightness, OFF_WAFER_LEVEL)
    image = np.where(markers, image * MARKER_FACTOR, image)
    labels = np.where(disc, IN_SPEC, BACKGROUND).astype(np.uint8)
    labels[markers] = BACKGROUND
    for d in defects:
        dark = d["visible_mask"]
        if d["kind"] == "void" and config.ultrasonic_embedding:
            dark = d["label_mask"]
            d["visible_mask"] = dark
        factor = d.pop("factor_map", None)
        factor = factor[dark] if factor is not None else d["factor"]
        image[dark] = image[dark] * factor
        labels[d["label_mask"]] = DEFECT

    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    if config.min_contrast > 0 and defects:
        darkened = np.zeros((h, w), dtype=bool)
        for d in defects:
            darkened |= d["visible_mask"]
        plain = disc & ~markers & ~darkened & (labels != DEFECT)
        _enforce_contrast(image, darkened, plain, config.min_contrast)
    image = image.astype(np.float32)

    geometry = []
    for d in defects:
        rec = {k: v for k, v in d.items() if k not in ("label_mask", "visible_mask")}
        rec["label"] = _coords(d["label_mask"]).tolist()
        rec["visible"] = _coords(d["visible_mask"]).tolist()
        geometry.append(_jsonable(rec))
    meta = {
        "generator": "waferseg.wafergen",
        "config": _jsonable(config.to_dict()),
        "seed": config.seed,
        "brightness_field": field_kind,
        "markers": marker_centres,
        "defects": geometry,
        "is_cluster": config.cluster_count > 0,
    }
    return WaferSample(image=image, labels=labels, meta=meta)


def _neighbourhood_median(image: np.ndarray, plain: np.ndarray, r: int, c: int) -> float:
    """Median of plain (non-defect, non-marker, in-disc) pixels around (r, c); the window grows until it has some."""
    h, w = image.shape
    for half in (4, 8, 16, 32, max(h, w)):
        win = (slice(max(r - half, 0), r + half + 1), slice(max(c - half, 0), c + half + 1))
        vals = image[win][plain[win]]
        if vals.size:
            return float(np.median(vals))
    return float(image[plain].max(initial=BASE_BRIGHTNESS))


def _enforce_contrast(image: np.ndarray, darkened: np.ndarray, plain: np.ndarray, contrast: float) -> None:
    """Cap every darkened defect pixel at its neighbourhood median minus ``contrast`` (in place)."""
    for r, c in np.argwhere(darkened):
        cap = _neighbourhood_median(image, plain, r, c) - contrast
        if image[r, c] > cap:
            image[r, c] = max(cap, 0.0)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def derive_seeds(master_seed: int, count: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


def default_split(count: int) -> tuple[int, int]:
    """Train/validation sizes in the 106:39 proportion, both non-empty."""
    n_train = min(max(1, round(count * 106 / 145)), count - 1)
    return n_train, count - n_train


def generate_dataset(
    template: WaferGenConfig,
    count: int,
    cluster_fraction: float,
    master_seed: int,
    split: tuple[int, int] | None = None,
) -> tuple[list[WaferSample], dict]:
    """Generate ``count`` wafers plus a manifest with seeds and a stratified split.

    ``round(count * cluster_fraction)`` wafers receive defect clusters; both
    splits get cluster wafers in (rounded) proportion to their size.
    """
    if count < 2:
        raise WaferGenError("dataset needs at least 2 wafers")
    if not 0 <= cluster_fraction <= 1:
        raise WaferGenError("cluster_fraction must be in [0, 1]")
    n_train, n_val = split if split is not None else default_split(count)
    if n_train + n_val != count or n_train < 1 or n_val < 1:
        raise WaferGenError(f"split {n_train}:{n_val} must be two positive sizes summing to {count}")
    n_cluster = int(round(count * cluster_fraction))
    if cluster_fraction > 0 and n_cluster == 0:
        raise WaferGenError(f"cluster_fraction {cluster_fraction} yields no cluster wafer among {count}")
    if cluster_fraction < 1 and n_cluster == count:
        raise WaferGenError(f"cluster_fraction {cluster_fraction} rounds to all {count} wafers")

    val_clusters = int(round(n_cluster * n_val / count))
    if n_cluster >= 2:
        val_clusters = min(max(val_clusters, 1), n_cluster - 1)
    val_clusters = min(val_clusters, n_val)
    if n_cluster - val_clusters > n_train or (n_val - val_clusters) > (count - n_cluster):
        raise WaferGenError(
            f"cannot stratify {n_cluster} cluster wafers into a {n_train}:{n_val} split"
        )

    seeds = derive_seeds(master_seed, count)
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0x5EED]))
    order = rng.permutation(count)
    cluster_idx = sorted(int(i) for i in order[:n_cluster])
    plain_idx = sorted(int(i) for i in order[n_cluster:])
    val_set = set(rng.permutation(cluster_idx)[:val_clusters].tolist()) if cluster_idx else set()
    val_set |= set(rng.permutation(plain_idx)[: n_val - val_clusters].tolist()) if plain_idx else set()

    samples, entries = [], []
    cluster_set = set(cluster_idx)
    for i in range(count):
        is_cluster = i in cluster_set
        cfg = replace(
            copy.deepcopy(template),
            seed=seeds[i],
            cluster_count=max(template.cluster_count, 1) if is_cluster else 0,
        )
        sample = generate_wafer(cfg)
        split_name = "val" if i in val_set else "train"
        sample.meta.update({"index": i, "split": split_name})
        samples.append(sample)
        entries.append({"index": i, "name": f"wafer_{i:04d}", "seed": seeds[i], "split": split_name,
                        "cluster": is_cluster})
    manifest = {
        "master_seed": master_seed,
        "count": count,
        "cluster_fraction": cluster_fraction,
        "cluster_count": n_cluster,
        "split": {"train": n_train, "val": n_val},
        "samples": entries,
    }
    return samples, manifest
