"""On-disk formats: wafer files, checkpoints, history records, images, configs.

Wafer file (``.wfr``), little-endian::

    b"WFR1" | u16 version | u32 height | u32 width
    | float32[height*width] image (row-major) | uint8[height*width] labels
    | u32 n | n bytes UTF-8 JSON metadata

Checkpoint (``.ckpt``), little-endian::

    b"WSCK" | u16 version | u32 n + JSON model config | u32 epoch
    | u32 n + JSON extra | u32 count | count * record
    | u8 has_optimizer [| u64 step | f64 lr | u32 count | count * record]

    record = u16 n + UTF-8 name | u8 ndim | u32[ndim] shape | float32 data
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig
from .wafergen import WaferSample

WAFER_MAGIC = b"WFR1"
WAFER_VERSION = 1
CKPT_MAGIC = b"WSCK"
CKPT_VERSION = 1
HISTORY_HEADER = {"format": "waferseg-history", "version": 1}

CLASS_COLORS = np.array([[30, 40, 110], [32, 170, 170], [250, 225, 30]], dtype=np.uint8)


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated file (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


# -- wafer files ---------------------------------------------------------


def wafer_to_bytes(sample: WaferSample) -> bytes:
    image = np.asarray(sample.image, dtype="<f4")
    labels = np.asarray(sample.labels, dtype=np.uint8)
    if image.shape != labels.shape or image.ndim != 2:
        raise FormatError(f"image {image.shape} and labels {labels.shape} must be equal 2-D grids")
    h, w = image.shape
    meta = _json_bytes(sample.meta)
    return b"".join([
        WAFER_MAGIC, struct.pack("<HII", WAFER_VERSION, h, w),
        image.tobytes(order="C"), labels.tobytes(order="C"),
        struct.pack("<I", len(meta)), meta,
    ])


def wafer_from_bytes(buf: bytes, source: str = "<bytes>") -> WaferSample:
    r = _Reader(buf, source)
    if r.take(4) != WAFER_MAGIC:
        raise FormatError(f"{source}: not a wafer file (bad magic)")
    version, h, w = r.unpack("<HII")
    if version != WAFER_VERSION:
        raise FormatError(f"{source}: unsupported wafer file version {version}")
    image = np.frombuffer(r.take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float32)
    labels = np.frombuffer(r.take(h * w), dtype=np.uint8).reshape(h, w).copy()
    meta = json.loads(r.blob().decode("utf-8"))
    return WaferSample(image=image, labels=labels, meta=meta)


def write_wafer(path, sample: WaferSample) -> None:
    try:
        atomic_write(path, wafer_to_bytes(sample))
    except OSError as e:
        raise OSError(f"cannot write wafer file {path}: {e}") from e


def read_wafer(path) -> WaferSample:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read wafer file {path}: {e}") from e
    return wafer_from_bytes(buf, str(path))


def write_dataset(directory, samples: list[WaferSample], manifest: dict) -> Path:
    """One ``.wfr`` file per sample plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for entry, sample in zip(manifest["samples"], samples):
        entry["file"] = f"{entry['name']}.wfr"
        sample.meta["name"] = entry["name"]
        write_wafer(directory / entry["file"], sample)
    atomic_write(directory / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return directory


def read_dataset(directory) -> tuple[list[WaferSample], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["samples"]:
        s = read_wafer(directory / entry["file"])
        s.meta.setdefault("name", entry["name"])
        s.meta["split"] = entry["split"]
        s.meta["is_cluster"] = bool(entry.get("cluster", s.meta.get("is_cluster", False)))
        samples.append(s)
    return samples, manifest


# -- checkpoints ---------------------------------------------------------


def _records_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _read_records(r: _Reader) -> OrderedDict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return out


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: OrderedDict
    epoch: int = 0
    extra: dict = field(default_factory=dict)
    optimizer: object | None = None  # training.OptimizerState


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    cfg = _json_bytes(ckpt.model_config.to_dict())
    extra = _json_bytes(ckpt.extra)
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", ckpt.epoch), struct.pack("<I", len(extra)), extra, _records_bytes(ckpt.arrays)]
    opt = ckpt.optimizer
    if opt is None:
        parts.append(struct.pack("<B", 0))
    else:
        moments = OrderedDict()
        for name in opt.m:
            moments[f"m/{name}"] = opt.m[name]
            moments[f"v/{name}"] = opt.v[name]
        parts.append(struct.pack("<BQd", 1, opt.step, opt.lr))
        parts.append(_records_bytes(moments))
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    from .training import OptimizerState

    r = _Reader(buf, source)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    cfg = ModelConfig.from_dict(json.loads(r.blob().decode("utf-8")))
    (epoch,) = r.unpack("<I")
    extra = json.loads(r.blob().decode("utf-8"))
    arrays = _read_records(r)
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        step, lr = r.unpack("<Qd")
        moments = _read_records(r)
        opt = OptimizerState(step=int(step), lr=float(lr))
        for key, arr in moments.items():
            kind, name = key.split("/", 1)
            (opt.m if kind == "m" else opt.v)[name] = arr
    return Checkpoint(cfg, arrays, int(epoch), extra, opt)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes(), str(path))


def model_checkpoint(model: Model, epoch: int = 0, optimizer=None, extra: dict | None = None) -> Checkpoint:
    return Checkpoint(model.config, model.state_arrays(), epoch, extra or {}, optimizer)


def save_training_checkpoint(path, model: Model, optimizer, epoch: int, train_config) -> None:
    write_checkpoint(path, model_checkpoint(model, epoch, optimizer, {"train_config": train_config.to_dict()}))


def load_model(ckpt_or_path, expected_config: ModelConfig | None = None) -> tuple[Model, Checkpoint]:
    ckpt = ckpt_or_path if isinstance(ckpt_or_path, Checkpoint) else read_checkpoint(ckpt_or_path)
    if expected_config is not None and expected_config != ckpt.model_config:
        raise FormatError(
            f"checkpoint model config {ckpt.model_config.to_dict()} does not match requested "
            f"{expected_config.to_dict()}"
        )
    model = Model(ckpt.model_config, dtype=np.float32)
    model.load_state_arrays(ckpt.arrays)
    return model, ckpt


# -- history -------------------------------------------------------------


def write_history(path, records: list[dict], fields, append: bool = False) -> None:
    """Line-delimited JSON; the first line is a header naming the fields in order."""
    path = Path(path)
    lines = []
    if not (append and path.exists()):
        lines.append(json.dumps({**HISTORY_HEADER, "fields": list(fields)}))
    for rec in records:
        lines.append(json.dumps({k: rec.get(k) for k in fields}))
    data = ("\n".join(lines) + "\n").encode() if lines else b""
    if append and path.exists():
        atomic_write(path, path.read_bytes() + data)
    else:
        atomic_write(path, data)


def read_history(path) -> tuple[list[str], list[dict]]:
    lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    if not lines or lines[0].get("format") != HISTORY_HEADER["format"]:
        raise FormatError(f"{path}: missing history header line")
    return lines[0]["fields"], lines[1:]


# -- images --------------------------------------------------------------


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def pgm_bytes(gray: np.ndarray) -> bytes:
    g = np.asarray(gray, dtype=np.uint8)
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode() + g.tobytes()


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    kind, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    channels = 3 if kind == b"P6" else 1
    arr = np.frombuffer(buf[pos:pos + w * h * channels], dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def class_map_rgb(labels: np.ndarray) -> np.ndarray:
    return CLASS_COLORS[np.asarray(labels, dtype=np.int64)]


def difference_rgb(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Grey = agreement, red = false defect, blue = missed defect, orange = other mismatch."""
    out = np.full(pred.shape + (3,), 64, dtype=np.uint8)
    out[pred == truth] = (200, 200, 200)
    other = (pred != truth) & (pred != 2) & (truth != 2)
    out[other] = (255, 150, 0)
    out[(pred == 2) & (truth != 2)] = (220, 30, 30)
    out[(truth == 2) & (pred != 2)] = (30, 80, 255)
    return out


def brightness_gray(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


# -- key=value configs ---------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def format_config_text(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())
