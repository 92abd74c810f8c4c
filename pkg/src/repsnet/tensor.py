"""Dense NCHW tensor kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width). Network storage is float32; every kernel
also runs in float64 so gradient checks can use double precision.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
TENSOR_MAGIC = b"RSTN"
CHECKPOINT_MAGIC = b"RSCK"


class ShapeError(ValueError):
    """Raised when tensor or parameter shapes are inconsistent."""


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv kernel must be (O, I, k, k), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), self.bias.copy(), self.stride, self.padding)


@dataclass
class DeconvParams:
    weight: np.ndarray  # (in_c, out_c, k, k)
    bias: np.ndarray  # (out_c,)
    stride: int = 2
    padding: int = 1
    output_padding: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"deconv kernel must be (I, O, k, k), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[1]} outputs")
        if self.stride < 1 or self.padding < 0 or self.output_padding < 0:
            raise ValueError("invalid deconv stride/padding/output_padding")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def copy(self) -> "DeconvParams":
        return DeconvParams(self.weight.copy(), self.bias.copy(), self.stride,
                            self.padding, self.output_padding)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    # number of training-mode batches folded into the running statistics
    tracked: int = 0

    @classmethod
    def init(cls, channels: int, dtype=DTYPE) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                               self.running_var.copy(), self.eps, self.momentum, self.tracked)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def _check_rank4(x: np.ndarray, what: str = "input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x`` into a (N*Ho*Wo, C*k*k) patch matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the input grid."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _check_conv(x: np.ndarray, p: ConvParams):
    _check_rank4(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {p.in_channels}")
    k = p.kernel_size
    if x.shape[2] + 2 * p.padding < k or x.shape[3] + 2 * p.padding < k:
        raise ShapeError(f"padded input {x.shape[2:]} smaller than kernel {k}x{k}")


def conv2d_forward(x: np.ndarray, p: ConvParams, cols: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 2-D cross-correlation."""
    _check_conv(x, p)
    n, _, h, w = x.shape
    k = p.kernel_size
    ho = conv_output_size(h, k, p.stride, p.padding)
    wo = conv_output_size(w, k, p.stride, p.padding)
    if cols is None:
        cols = im2col(x, k, p.stride, p.padding)
    out = cols @ p.weight.reshape(p.out_channels, -1).T.astype(cols.dtype, copy=False)
    out += p.bias.astype(cols.dtype, copy=False)
    return out.reshape(n, ho, wo, p.out_channels).transpose(0, 3, 1, 2)


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray,
                    cols: np.ndarray | None = None):
    """Gradients of ``<grad_out, conv2d_forward(x, p)>``.

    Returns ``(grad_x, grad_weight, grad_bias)``.
    """
    _check_conv(x, p)
    n, _, h, w = x.shape
    k = p.kernel_size
    expected = (n, p.out_channels, conv_output_size(h, k, p.stride, p.padding),
                conv_output_size(w, k, p.stride, p.padding))
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    if cols is None:
        cols = im2col(x, k, p.stride, p.padding)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, p.out_channels)
    grad_w = (g.T @ cols).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad_out.dtype)
    gcols = g @ p.weight.reshape(p.out_channels, -1).astype(g.dtype, copy=False)
    grad_x = col2im(gcols, x.shape, k, p.stride, p.padding)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# transposed convolution


def _deconv_geometry(x: np.ndarray, p: DeconvParams):
    _check_rank4(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {p.in_channels}")
    k, s = p.kernel_size, p.stride
    ho = deconv_output_size(x.shape[2], k, s, p.padding, p.output_padding)
    wo = deconv_output_size(x.shape[3], k, s, p.padding, p.output_padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"deconv configuration yields non-positive output size ({ho}, {wo})")
    if p.output_padding >= s:
        raise ValueError("output_padding must be smaller than stride")
    # full (uncropped) scatter canvas, large enough to hold the cropped window
    full_h = max((x.shape[2] - 1) * s + k, p.padding + ho)
    full_w = max((x.shape[3] - 1) * s + k, p.padding + wo)
    return ho, wo, full_h, full_w


def deconv2d_forward(x: np.ndarray, p: DeconvParams) -> np.ndarray:
    """Transposed convolution (scatter form), PyTorch size conventions."""
    ho, wo, full_h, full_w = _deconv_geometry(x, p)
    n, ci, h, w = x.shape
    k, s, co = p.kernel_size, p.stride, p.out_channels
    xs = x.transpose(0, 2, 3, 1).reshape(-1, ci)
    cols = (xs @ p.weight.reshape(ci, -1).astype(xs.dtype, copy=False))
    cols = cols.reshape(n, h, w, co, k, k).transpose(0, 3, 4, 5, 1, 2)
    full = np.zeros((n, co, full_h, full_w), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + s * h:s, j:j + s * w:s] += cols[:, :, i, j]
    out = full[:, :, p.padding:p.padding + ho, p.padding:p.padding + wo]
    return out + p.bias.astype(out.dtype, copy=False)[None, :, None, None]


def deconv2d_backward(x: np.ndarray, p: DeconvParams, grad_out: np.ndarray):
    """Gradients of ``<grad_out, deconv2d_forward(x, p)>``.

    Returns ``(grad_x, grad_weight, grad_bias)``.
    """
    ho, wo, full_h, full_w = _deconv_geometry(x, p)
    n, ci, h, w = x.shape
    k, s, co = p.kernel_size, p.stride, p.out_channels
    if grad_out.shape != (n, co, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {(n, co, ho, wo)}")
    full = np.zeros((n, co, full_h, full_w), dtype=grad_out.dtype)
    full[:, :, p.padding:p.padding + ho, p.padding:p.padding + wo] = grad_out
    # gather the canvas entries each input pixel scattered into
    win = sliding_window_view(full, (k, k), axis=(2, 3))[:, :, :s * (h - 1) + 1:s, :s * (w - 1) + 1:s]
    gcols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, co * k * k)
    xs = x.transpose(0, 2, 3, 1).reshape(-1, ci)
    grad_w = (xs.T @ gcols).reshape(p.weight.shape)
    grad_x = (gcols @ p.weight.reshape(ci, -1).T.astype(gcols.dtype, copy=False))
    grad_x = grad_x.reshape(n, h, w, ci).transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad_out.dtype)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalization


def _bn_stats(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    return mean, var


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, training: bool) -> np.ndarray:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize ``x`` and the running
    statistics are updated in place (exponential moving average, unbiased
    variance).
    """
    _check_rank4(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, batchnorm has {p.channels}")
    if training:
        mean, var = _bn_stats(x)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / max(count - 1, 1)
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * unbiased
        p.tracked += 1
    else:
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    scale = p.gamma / np.sqrt(var + p.eps)
    shift = p.beta - mean * scale
    return x * scale.astype(x.dtype)[None, :, None, None] + shift.astype(x.dtype)[None, :, None, None]


def batchnorm_backward(x: np.ndarray, p: BatchNormParams, grad_out: np.ndarray, training: bool):
    """Gradients through :func:`batchnorm_forward`.

    Returns ``(grad_x, grad_gamma, grad_beta)``. Training mode differentiates
    through the batch statistics.
    """
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    if training:
        mean, var = _bn_stats(x)
    else:
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + p.eps)
    b = (None, slice(None), None, None)
    xhat = (x - mean.astype(x.dtype)[b]) * inv.astype(x.dtype)[b]
    grad_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        coef = (p.gamma * inv).astype(x.dtype)[b]
        grad_x = coef * (grad_out - (grad_beta / count).astype(x.dtype)[b]
                         - xhat * (grad_gamma / count).astype(x.dtype)[b])
    else:
        grad_x = grad_out * (p.gamma * inv).astype(x.dtype)[b]
    return grad_x, grad_gamma.astype(p.gamma.dtype), grad_beta.astype(p.beta.dtype)


# ---------------------------------------------------------------------------
# pointwise


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """``x`` is the relu input (or output; the sign pattern is the same)."""
    return grad_out * (x > 0)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over axis 1."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """One in-place Adam update of every array in ``params`` that has a gradient."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1 ** t
    corr2 = 1 - b2 ** t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(w.dtype)
    return params, state


# ---------------------------------------------------------------------------
# binary tensor / checkpoint files


def write_tensor(f: BinaryIO, t: np.ndarray):
    t = np.asarray(t, dtype="<f4")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", t.ndim))
    f.write(struct.pack(f"<{t.ndim}I", *t.shape))
    f.write(np.ascontiguousarray(t).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(DTYPE)


def save_tensor(path, t: np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def text_to_tensor(text: str) -> np.ndarray:
    """Encode text as a rank-1 tensor of byte values (exact in float32)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(DTYPE)


def tensor_to_text(t: np.ndarray) -> str:
    return np.asarray(t).astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, entries: Iterable[tuple[str, np.ndarray]]):
    """Write (name, tensor) pairs: magic, u32 count, then per entry u32 name
    length, utf-8 name, tensor record."""
    entries = list(entries)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_tensor(f, t)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (length,) = struct.unpack("<I", f.read(4))
            name = f.read(length).decode("utf-8")
            out[name] = read_tensor(f)
    return out
