"""Dense NCHW tensors with reverse-mode gradients.

Each op takes ``Tensor`` inputs, computes the forward result with numpy and,
when gradients are enabled, records a closure that maps the upstream gradient
to one gradient per parent. ``Tensor.backward`` walks the recorded graph in
reverse topological order.

All reductions run in a fixed order so that identical inputs give identical
bits on every run.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np

_GRAD_ENABLED = contextvars.ContextVar("waferseg_grad_enabled", default=True)


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, evaluation)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """A 4-D array (N, C, H, W) with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be 4-D (N, C, H, W), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        """Backpropagate ``grad`` (default ones) into every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"upstream gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


@dataclass
class ConvParams:
    """Weights (outC, inC, kH, kW), optional bias (1, outC, 1, 1), padding and stride."""

    weight: Tensor
    bias: Tensor | None = None
    padding: int = 1
    stride: int = 1

    def __post_init__(self):
        kh, kw = self.weight.shape[2:]
        if kh not in (1, 3) or kw not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {kh}x{kw}")
        if self.stride != 1:
            raise ValueError("only stride 1 convolutions are supported")
        if self.bias is not None and self.bias.shape != (1, self.weight.shape[0], 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics.

    ``momentum`` is the weight given to the current batch statistic when the
    running averages are updated.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "training"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batchnorm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, **kwargs) -> BatchNormParams:
        return cls(
            gamma=Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kwargs,
        )


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding (im2col + GEMM)."""
    w = params.weight.data
    out_c, in_c, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != in_c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {in_c} (weight shape {w.shape})")
    pad = params.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{wd} too small for {kh}x{kw} kernel with padding {pad}")

    if kh == 1 and kw == 1:
        cols = xp.reshape(n, in_c, ho * wo)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo) -> (n, c*kh*kw, ho*wo)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, in_c * kh * kw, ho * wo)
    w2 = w.reshape(out_c, in_c * kh * kw)
    out = np.matmul(w2, cols)
    if params.bias is not None:
        out += params.bias.data.reshape(1, out_c, 1)
    out = out.reshape(n, out_c, ho, wo)

    weight, bias = params.weight, params.bias

    def backward(g):
        g2 = g.reshape(n, out_c, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.zeros_like(w2)
            for i in range(n):
                gw += g2[i] @ cols[i].T
            gw = gw.reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2)).reshape(1, out_c, 1, 1)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if kh == 1 and kw == 1:
                gxp = gcols.reshape(n, in_c, ho, wo)
            else:
                gcols = gcols.reshape(n, in_c, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape, dtype=xp.dtype)
                for ky in range(kh):
                    for kx in range(kw):
                        gxp[:, :, ky:ky + ho, kx:kx + wo] += gcols[:, :, ky, kx]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def batchnorm(x: Tensor, params: BatchNormParams, mode: str | None = None) -> Tensor:
    """Per-channel normalization; batch statistics in training, running statistics in inference."""
    mode = params.mode if mode is None else mode
    n, c, h, w = x.shape
    if params.gamma.shape != (1, c, 1, 1):
        raise ShapeError(f"batchnorm: {c} channels but gamma has shape {params.gamma.shape}")
    gamma, beta = params.gamma, params.beta
    dtype = x.data.dtype

    if mode == "training":
        m = n * h * w
        if m < 2:
            raise ShapeError(f"batchnorm in training mode needs at least 2 values per channel, got {m}")
        x64 = x.data.astype(np.float64, copy=False)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + params.eps)
        xhat = ((x64 - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)).astype(dtype)
        mom = params.momentum
        unbiased = var * (m / (m - 1))
        params.running_mean[:] = (1.0 - mom) * params.running_mean + mom * mean
        params.running_var[:] = (1.0 - mom) * params.running_var + mom * unbiased
        out = gamma.data * xhat + beta.data
        inv_std_c = inv_std.astype(dtype).reshape(1, c, 1, 1)

        def backward(g):
            g64 = g.astype(np.float64, copy=False)
            xh64 = xhat.astype(np.float64, copy=False)
            gbeta = g64.sum(axis=(0, 2, 3))
            ggamma = (g64 * xh64).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat = g64 * gamma.data.astype(np.float64)
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xh64).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = ((dxhat - s1 / m - xh64 * (s2 / m)) * inv_std_c).astype(dtype)
            return (gx, ggamma.reshape(1, c, 1, 1).astype(dtype), gbeta.reshape(1, c, 1, 1).astype(dtype))

    elif mode == "inference":
        inv_std = (1.0 / np.sqrt(params.running_var.astype(np.float64) + params.eps)).reshape(1, c, 1, 1)
        rm = params.running_mean.astype(np.float64).reshape(1, c, 1, 1)
        xhat = ((x.data - rm) * inv_std).astype(dtype)
        out = gamma.data * xhat + beta.data
        inv_std_c = inv_std.astype(dtype)

        def backward(g):
            gx = g * gamma.data * inv_std_c if x.requires_grad else None
            return (gx, (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1),
                    g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
    else:
        raise ValueError(f"batchnorm mode must be 'training' or 'inference', got {mode!r}")

    return _result(out.astype(dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, ceiling output size with truncated edge windows."""
    n, c, h, w = x.shape
    oh, ow = -(-h // 2), -(-w // 2)
    xp = np.full((n, c, 2 * oh, 2 * ow), -np.inf, dtype=x.data.dtype)
    xp[:, :, :h, :w] = x.data
    win = xp.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)

    return _result(out, (x,), backward)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        num = i * (n_in - 1)
        lo = num // (n_out - 1)
        frac = (num - lo * (n_out - 1)) / (n_out - 1)
        if lo >= n_in - 1:
            m[i, n_in - 1] = 1.0
        else:
            m[i, lo] = 1.0 - frac
            m[i, lo + 1] = frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be at least 1x1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        # identity: keep bits exact and skip the matmuls
        def backward_id(g):
            return (g,)

        return _result(x.data.copy(), (x,), backward_id)
    rh = interpolation_matrix(h, out_h).astype(x.data.dtype)
    rw = interpolation_matrix(w, out_w).astype(x.data.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def backward(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return _result(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _result(a.data + b.data, (a, b), backward)


def softmax_pixelwise(x: Tensor) -> Tensor:
    """Softmax over the channel axis at every pixel."""
    out = softmax_array(x.data)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), backward)


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def numerical_gradient(f, arr: np.ndarray, index, h: float = 1e-6) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]`` (perturbed in place)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
