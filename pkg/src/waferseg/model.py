"""The segmentation network: VGG-style encoder, resize+conv decoder, skip links.

Three encoder variants are supported (filter counts per stack):

==========  ====================================================
standard    64,64 | 128,128 | 256x3 | 512x3 | 512x3 | 4096,4096,64
vaughan     64,64 | 128,128 | 256x3 | 512x3 | 512x3 | 512,64
broomstick  64,64 | 128,128 | 256x3 | 512x3 | 512,512,64
==========  ====================================================

Every encoder conv is followed by batch normalization and ReLU; stacks are
separated by 2x2 ceiling max-pooling. The last encoder conv is a 1x1
dimension reduction; in ``standard`` the second 4096 conv is 1x1 too, like
a converted fully connected layer. The decoder mirrors the pooling steps: each stage
resizes bilinearly to the recorded size of the matching encoder stack,
applies a 3x3 conv to ``decoder_width`` maps, adds the projected skip (if
that stage is connected) and applies ReLU. A final pair of 3x3 convs maps
the last decoder output and the outermost skip projection to class scores,
which are summed and passed through a pixelwise softmax.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    Tensor,
    add,
    batchnorm,
    bilinear_resize,
    conv2d,
    maxpool2,
    relu,
    softmax_pixelwise,
)

VARIANTS = {
    "standard": [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512], [4096, 4096, 64]],
    "vaughan": [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512], [512, 64]],
    "broomstick": [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 64]],
}
INIT_MODES = ("he", "import4", "import10")
RESIDUAL_STACKS = (3, 4, 5)
MIN_INPUT_SIZE = 32


class ModelConfigError(ValueError):
    pass


class WeightImportError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "vaughan"
    skip_count: int = 5
    residual_shortcuts: bool = True
    init_mode: str = "he"
    num_classes: int = 3
    decoder_width: int = 64
    in_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        if self.init_mode not in INIT_MODES:
            raise ModelConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        n_stages = len(VARIANTS[self.variant]) - 1
        if not 0 <= self.skip_count <= n_stages:
            raise ModelConfigError(
                f"skip_count={self.skip_count} invalid for variant {self.variant!r}: "
                f"it has {n_stages} encoder/decoder pairings"
            )
        if self.num_classes < 2 or self.decoder_width < 1 or self.in_channels < 1:
            raise ModelConfigError("num_classes >= 2, decoder_width >= 1 and in_channels >= 1 required")

    @property
    def stacks(self) -> list[list[int]]:
        return VARIANTS[self.variant]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def encoder_layers(config: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every encoder conv, in order."""
    layers = []
    c_in = config.in_channels
    stacks = config.stacks
    for s, widths in enumerate(stacks, start=1):
        for j, c_out in enumerate(widths, start=1):
            last = s == len(stacks) and j == len(widths)
            fc_like = config.variant == "standard" and s == 6 and j == 2
            layers.append((f"conv{s}_{j}", c_in, c_out, 1 if last or fc_like else 3))
            c_in = c_out
    return layers


def decoder_stages(config: ModelConfig) -> list[tuple[str, int]]:
    """(decoder stage name, encoder stack it mirrors), innermost first."""
    n_enc = len(config.stacks)
    # standard/vaughan: trans1..trans5 <-> conv5..conv1; broomstick lacks trans1
    first = 7 - n_enc
    return [(f"trans{t}", 6 - t) for t in range(first, 6)]


class Model:
    """Parameter container plus the forward pass of one network variant."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.convs: OrderedDict[str, ConvParams] = OrderedDict()
        self.bns: OrderedDict[str, BatchNormParams] = OrderedDict()
        self._build_layout()

    def _conv(self, name, c_in, c_out, k, bias=True):
        w = Tensor(np.zeros((c_out, c_in, k, k), dtype=self.dtype), requires_grad=True)
        b = Tensor(np.zeros((1, c_out, 1, 1), dtype=self.dtype), requires_grad=True) if bias else None
        self.convs[name] = ConvParams(w, b, padding=k // 2)

    def _build_layout(self):
        cfg = self.config
        # convs followed by BN carry no bias; BN's beta takes its role
        for name, c_in, c_out, k in encoder_layers(cfg):
            self._conv(name, c_in, c_out, k, bias=False)
            self.bns[name] = BatchNormParams.fresh(c_out, dtype=self.dtype)
        if cfg.residual_shortcuts:
            stacks = cfg.stacks
            c_prev = cfg.in_channels
            for s, widths in enumerate(stacks, start=1):
                if s in RESIDUAL_STACKS and len(widths) == 3 and c_prev != widths[-1]:
                    self._conv(f"conv{s}.shortcut", c_prev, widths[-1], 1)
                c_prev = widths[-1]
        width = cfg.decoder_width
        c_in = cfg.stacks[-1][-1]
        for i, (stage, enc) in enumerate(decoder_stages(cfg)):
            self._conv(f"{stage}.conv", c_in, width, 3)
            if i < cfg.skip_count:
                self._conv(f"{stage}.skip", cfg.stacks[enc - 1][-1], width, 3)
            c_in = width
        self._conv("head.resized", width, cfg.num_classes, 3)
        if self.outer_skip:
            self._conv("head.skip", width, cfg.num_classes, 3)

    @property
    def outer_skip(self) -> bool:
        return self.config.skip_count == len(decoder_stages(self.config))

    def parameters(self) -> OrderedDict[str, Tensor]:
        """Trainable tensors in a fixed order."""
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, conv in self.convs.items():
            out[f"{name}.weight"] = conv.weight
            if conv.bias is not None:
                out[f"{name}.bias"] = conv.bias
            if name in self.bns:
                out[f"{name}.bn.gamma"] = self.bns[name].gamma
                out[f"{name}.bn.beta"] = self.bns[name].beta
        return out

    def buffers(self) -> OrderedDict[str, np.ndarray]:
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, bn in self.bns.items():
            out[f"{name}.bn.running_mean"] = bn.running_mean
            out[f"{name}.bn.running_var"] = bn.running_var
        return out

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        """Every persisted array (parameters then running statistics)."""
        out = OrderedDict((k, t.data) for k, t in self.parameters().items())
        out.update(self.buffers())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = [k for k in expected if k not in arrays]
        extra = [k for k in arrays if k not in expected]
        if missing or extra:
            raise ModelConfigError(f"state does not match model: missing={missing[:5]} unexpected={extra[:5]}")
        for k, dst in expected.items():
            src = np.asarray(arrays[k])
            if src.shape != dst.shape:
                raise ModelConfigError(f"{k}: shape {src.shape} does not match model shape {dst.shape}")
            dst[...] = src

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    # -- forward ---------------------------------------------------------

    def _block(self, x, name, mode):
        return relu(batchnorm(conv2d(x, self.convs[name]), self.bns[name], mode))

    def encode(self, image: Tensor, mode: str = "inference", trace: dict | None = None) -> dict[int, Tensor]:
        """Output of every encoder stack, keyed by stack number (1-based)."""
        cfg = self.config
        n, c, h, w = image.shape
        if c != cfg.in_channels:
            raise ShapeError(f"model expects {cfg.in_channels} input channel(s), got {c}")
        if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
            raise ShapeError(
                f"input {h}x{w} too small: {len(cfg.stacks) - 1} poolings need at least "
                f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
            )
        if image.dtype != self.dtype:
            image = Tensor(image.data.astype(self.dtype))

        x = image
        stack_out: dict[int, Tensor] = {}
        for s, widths in enumerate(cfg.stacks, start=1):
            if s > 1:
                x = maxpool2(x)
            inp = x
            for j in range(1, len(widths) + 1):
                x = self._block(x, f"conv{s}_{j}", mode)
            if cfg.residual_shortcuts and s in RESIDUAL_STACKS and len(widths) == 3:
                sc = f"conv{s}.shortcut"
                x = add(x, conv2d(inp, self.convs[sc]) if sc in self.convs else inp)
            stack_out[s] = x
            if trace is not None:
                trace[f"conv{s}"] = tuple(x.shape[1:])
        return stack_out

    def logits(self, image: Tensor, mode: str = "inference", trace: dict | None = None) -> Tensor:
        """Unnormalized class scores, shape (N, num_classes, H, W)."""
        cfg = self.config
        stack_out = self.encode(image, mode, trace)
        x = stack_out[len(cfg.stacks)]

        proj_outer = None
        for i, (stage, enc) in enumerate(decoder_stages(cfg)):
            th, tw = stack_out[enc].shape[2:]
            x = conv2d(bilinear_resize(x, th, tw), self.convs[f"{stage}.conv"])
            if i < cfg.skip_count:
                proj = conv2d(stack_out[enc], self.convs[f"{stage}.skip"])
                x = add(x, proj)
                proj_outer = proj
            x = relu(x)
            if trace is not None:
                trace[stage] = tuple(x.shape[1:])

        out = conv2d(x, self.convs["head.resized"])
        if self.outer_skip:
            out = add(out, conv2d(proj_outer, self.convs["head.skip"]))
        if trace is not None:
            trace["head"] = tuple(out.shape[1:])
        return out

    def forward(self, image: Tensor, mode: str = "inference", trace: dict | None = None) -> Tensor:
        """Per-pixel class probabilities, shape (N, num_classes, H, W)."""
        return softmax_pixelwise(self.logits(image, mode, trace))

    __call__ = forward


def forward(model: Model, image: Tensor, mode: str = "inference") -> Tensor:
    return model.forward(image, mode)


def predict_classes(probabilities) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the lowest class index.

    Returns an integer array of shape (N, H, W).
    """
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    if p.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) probabilities, got shape {p.shape}")
    return p.argmax(axis=1).astype(np.uint8)


def _he(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape, dtype=np.float64) * std).astype(dtype)


def build_model(config: ModelConfig, seed: int = 0, import_weights=None, dtype=np.float32) -> Model:
    """Instantiate and initialize a model.

    ``he``: conv weights ~ N(0, 2/fan_in), biases 0, BN gamma 1 / beta 0.
    ``import4`` / ``import10``: as ``he``, then the first 4 or 10 encoder
    convs are overwritten from ``import_weights`` (a path to a checkpoint-format
    file or a ``{name: array}`` mapping with keys like ``conv1_1.weight``).
    """
    model = Model(config, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, conv in model.convs.items():
        conv.weight.data[...] = _he(rng, conv.weight.shape, model.dtype)
        if conv.bias is not None:
            conv.bias.data[...] = 0
    if config.init_mode != "he":
        n = 4 if config.init_mode == "import4" else 10
        if import_weights is None:
            raise WeightImportError(f"init_mode {config.init_mode!r} needs an import weights file")
        import_encoder_weights(model, import_weights, n)
    return model


def import_encoder_weights(model: Model, source, n_layers: int) -> list[str]:
    """Copy externally trained weights into the first ``n_layers`` encoder convs.

    A first-layer kernel with 3 input channels (RGB) is collapsed to the
    model's single brightness channel by summing over the colour axis.
    Biases in the source are ignored because every encoder conv is followed by
    batch normalization. Returns the names of the layers written.
    """
    if isinstance(source, dict):
        arrays = source
        where = "weights mapping"
    else:
        from .persistence import read_checkpoint

        try:
            arrays = read_checkpoint(source).arrays
        except FileNotFoundError:
            raise WeightImportError(f"import weights file not found: {source}") from None
        where = str(source)

    names = [name for name, *_ in encoder_layers(model.config)][:n_layers]
    for name in names:
        key = f"{name}.weight"
        if key not in arrays:
            raise WeightImportError(f"layer {name}: {key} missing from {where}")
        src = np.asarray(arrays[key], dtype=np.float64)
        dst = model.convs[name].weight.data
        if src.ndim == 4 and src.shape[1] == 3 and dst.shape[1] == 1 and src.shape[0] == dst.shape[0]:
            src = src.sum(axis=1, keepdims=True)
        if src.shape != dst.shape:
            raise WeightImportError(f"layer {name}: imported shape {src.shape} incompatible with {dst.shape}")
        dst[...] = src.astype(dst.dtype)
    return names
