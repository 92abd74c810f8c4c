"""Structural re-parameterization of RepVGG and RepUpsample units.

A RepVGG unit sums three batch-normalized branches (3x3 conv, 1x1 conv,
identity) before a ReLU. A RepUpsample unit sums two batch-normalized
stride-2 transposed convolutions (3x3 and 1x1). With inference-mode BN
statistics every branch is affine in the input, so each unit collapses to a
single 3x3 (transposed) convolution with bias.

The 1x1 transposed branch uses padding 0 and output_padding 1; input pixel
``(h, w)`` then lands on output ``(2h, 2w)``, the same position the center tap
of the 3x3 branch (padding 1, output_padding 1) writes to. Embedding the 1x1
kernel at the center of a 3x3 kernel therefore reproduces it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DTYPE,
    BatchNormParams,
    ConvParams,
    DeconvParams,
    ShapeError,
    batchnorm_forward,
    conv2d_forward,
    deconv2d_forward,
    relu_forward,
)


@dataclass
class RepVggUnit:
    conv3: ConvParams
    bn3: BatchNormParams
    conv1: ConvParams | None = None
    bn1: BatchNormParams | None = None
    bn_id: BatchNormParams | None = None

    def __post_init__(self):
        c3 = self.conv3
        if c3.kernel_size != 3 or c3.padding != 1:
            raise ShapeError("3x3 branch must be a 3x3 kernel with padding 1")
        if self.conv1 is not None:
            if self.conv1.kernel_size != 1 or self.conv1.padding != 0:
                raise ShapeError("1x1 branch must be a 1x1 kernel with padding 0")
            if self.conv1.stride != c3.stride or self.conv1.weight.shape[:2] != c3.weight.shape[:2]:
                raise ShapeError("1x1 branch does not match the 3x3 branch")
        if self.bn_id is not None:
            if c3.stride != 1:
                raise ValueError("identity branch requires stride 1")
            if c3.in_channels != c3.out_channels:
                raise ShapeError("identity branch requires in_channels == out_channels")

    @property
    def stride(self) -> int:
        return self.conv3.stride

    @property
    def in_channels(self) -> int:
        return self.conv3.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels

    def batchnorms(self):
        return [bn for bn in (self.bn3, self.bn1, self.bn_id) if bn is not None]

    def param_count(self) -> int:
        """Trainable parameters: branch kernels plus BN scale and shift.

        Branch conv biases are structurally redundant under BN and are not
        trained.
        """
        n = self.conv3.weight.size + 2 * self.bn3.channels
        if self.conv1 is not None:
            n += self.conv1.weight.size + 2 * self.bn1.channels
        if self.bn_id is not None:
            n += 2 * self.bn_id.channels
        return n

    @classmethod
    def create(cls, in_c: int, out_c: int, stride: int = 1, rng=None, *,
               with_1x1: bool = True, with_identity: bool | None = None) -> "RepVggUnit":
        """He-initialized unit. The identity branch is added whenever allowed
        unless ``with_identity`` says otherwise."""
        rng = np.random.default_rng(rng)
        if with_identity is None:
            with_identity = with_1x1
        allowed = in_c == out_c and stride == 1
        w3 = rng.normal(0, np.sqrt(2.0 / (9 * in_c)), (out_c, in_c, 3, 3)).astype(DTYPE)
        conv3 = ConvParams(w3, np.zeros(out_c, DTYPE), stride, 1)
        conv1 = bn1 = None
        if with_1x1:
            w1 = rng.normal(0, np.sqrt(2.0 / in_c), (out_c, in_c, 1, 1)).astype(DTYPE)
            conv1 = ConvParams(w1, np.zeros(out_c, DTYPE), stride, 0)
            bn1 = BatchNormParams.init(out_c)
        bn_id = BatchNormParams.init(out_c) if (with_identity and allowed) else None
        return cls(conv3, BatchNormParams.init(out_c), conv1, bn1, bn_id)


@dataclass
class RepUpsampleUnit:
    deconv3: DeconvParams
    bn3: BatchNormParams
    deconv1: DeconvParams | None = None
    bn1: BatchNormParams | None = None

    def __post_init__(self):
        d3 = self.deconv3
        if (d3.kernel_size, d3.stride, d3.padding, d3.output_padding) != (3, 2, 1, 1):
            raise ShapeError("3x3 upsampling branch must use stride 2, padding 1, output_padding 1")
        if self.deconv1 is not None:
            d1 = self.deconv1
            if (d1.kernel_size, d1.stride, d1.padding, d1.output_padding) != (1, 2, 0, 1):
                raise ShapeError("1x1 upsampling branch must use stride 2, padding 0, output_padding 1")
            if d1.weight.shape[:2] != d3.weight.shape[:2]:
                raise ShapeError("1x1 upsampling branch does not match the 3x3 branch")

    @property
    def in_channels(self) -> int:
        return self.deconv3.in_channels

    @property
    def out_channels(self) -> int:
        return self.deconv3.out_channels

    def batchnorms(self):
        return [bn for bn in (self.bn3, self.bn1) if bn is not None]

    def param_count(self) -> int:
        n = self.deconv3.weight.size + 2 * self.bn3.channels
        if self.deconv1 is not None:
            n += self.deconv1.weight.size + 2 * self.bn1.channels
        return n

    @classmethod
    def create(cls, in_c: int, out_c: int, rng=None, *, with_1x1: bool = True) -> "RepUpsampleUnit":
        rng = np.random.default_rng(rng)
        # fan-in of a stride-2 transposed conv is about in_c * k^2 / 4
        w3 = rng.normal(0, np.sqrt(8.0 / (9 * in_c)), (in_c, out_c, 3, 3)).astype(DTYPE)
        deconv3 = DeconvParams(w3, np.zeros(out_c, DTYPE), 2, 1, 1)
        deconv1 = bn1 = None
        if with_1x1:
            w1 = rng.normal(0, np.sqrt(2.0 / in_c), (in_c, out_c, 1, 1)).astype(DTYPE)
            deconv1 = DeconvParams(w1, np.zeros(out_c, DTYPE), 2, 0, 1)
            bn1 = BatchNormParams.init(out_c)
        return cls(deconv3, BatchNormParams.init(out_c), deconv1, bn1)


# ---------------------------------------------------------------------------
# multi-branch reference forwards


def repvgg_forward(unit: RepVggUnit, x: np.ndarray, training: bool = False) -> np.ndarray:
    out = batchnorm_forward(conv2d_forward(x, unit.conv3), unit.bn3, training)
    if unit.conv1 is not None:
        out = out + batchnorm_forward(conv2d_forward(x, unit.conv1), unit.bn1, training)
    if unit.bn_id is not None:
        out = out + batchnorm_forward(x, unit.bn_id, training)
    return relu_forward(out)


def repupsample_forward(unit: RepUpsampleUnit, x: np.ndarray, training: bool = False) -> np.ndarray:
    out = batchnorm_forward(deconv2d_forward(x, unit.deconv3), unit.bn3, training)
    if unit.deconv1 is not None:
        z1 = deconv2d_forward(x, unit.deconv1)
        if z1.shape != out.shape:
            raise ShapeError(f"branch outputs disagree: {z1.shape} vs {out.shape}")
        out = out + batchnorm_forward(z1, unit.bn1, training)
    return relu_forward(out)


def fused_conv_forward(p: ConvParams, x: np.ndarray) -> np.ndarray:
    return relu_forward(conv2d_forward(x, p))


def fused_deconv_forward(p: DeconvParams, x: np.ndarray) -> np.ndarray:
    return relu_forward(deconv2d_forward(x, p))


# ---------------------------------------------------------------------------
# fusion algebra


def _bn_scale_shift(bn: BatchNormParams):
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    scale = bn.gamma / std
    shift = bn.beta - bn.running_mean * scale
    return scale, shift


def fold_bn_into_conv(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Return a conv whose output equals ``bn(conv(x))`` with running statistics."""
    if bn.channels != conv.out_channels:
        raise ShapeError(f"batchnorm has {bn.channels} channels, conv outputs {conv.out_channels}")
    scale, shift = _bn_scale_shift(bn)
    w = conv.weight * scale[:, None, None, None]
    b = shift + conv.bias * scale
    return ConvParams(w.astype(conv.weight.dtype), b.astype(conv.bias.dtype), conv.stride, conv.padding)


def fold_bn_into_deconv(deconv: DeconvParams, bn: BatchNormParams) -> DeconvParams:
    """Transposed-conv counterpart of :func:`fold_bn_into_conv` (output channels
    live on kernel axis 1)."""
    if bn.channels != deconv.out_channels:
        raise ShapeError(f"batchnorm has {bn.channels} channels, deconv outputs {deconv.out_channels}")
    scale, shift = _bn_scale_shift(bn)
    w = deconv.weight * scale[None, :, None, None]
    b = shift + deconv.bias * scale
    return DeconvParams(w.astype(deconv.weight.dtype), b.astype(deconv.bias.dtype),
                        deconv.stride, deconv.padding, deconv.output_padding)


def embed_1x1_into_3x3(k1: np.ndarray) -> np.ndarray:
    """Zero-pad a (a, b, 1, 1) kernel to (a, b, 3, 3) with the weight at the center."""
    if k1.ndim != 4 or k1.shape[2:] != (1, 1):
        raise ShapeError(f"expected a 1x1 kernel, got {k1.shape}")
    return np.pad(k1, ((0, 0), (0, 0), (1, 1), (1, 1)))


def identity_to_3x3(channels: int, out_channels: int | None = None, dtype=DTYPE) -> np.ndarray:
    if out_channels is not None and out_channels != channels:
        raise ShapeError(f"identity kernel needs equal channel counts, got {channels} -> {out_channels}")
    k = np.zeros((channels, channels, 3, 3), dtype=dtype)
    k[np.arange(channels), np.arange(channels), 1, 1] = 1
    return k


def fuse_repvgg(unit: RepVggUnit) -> ConvParams:
    """Collapse a RepVGG unit into one 3x3 conv (apply ReLU after it)."""
    if unit.bn_id is not None and unit.stride != 1:
        raise ValueError("identity branch present on a strided unit")
    f3 = fold_bn_into_conv(unit.conv3, unit.bn3)
    w = f3.weight.astype(np.float64)
    b = f3.bias.astype(np.float64)
    if unit.conv1 is not None:
        f1 = fold_bn_into_conv(unit.conv1, unit.bn1)
        w = w + embed_1x1_into_3x3(f1.weight)
        b = b + f1.bias
    if unit.bn_id is not None:
        c = unit.in_channels
        ident = ConvParams(identity_to_3x3(c, unit.out_channels, np.float64), np.zeros(c), 1, 1)
        fid = fold_bn_into_conv(ident, unit.bn_id)
        w = w + fid.weight
        b = b + fid.bias
    return ConvParams(w.astype(DTYPE), b.astype(DTYPE), unit.stride, 1)


def fuse_repupsample(unit: RepUpsampleUnit) -> DeconvParams:
    """Collapse a RepUpsample unit into one 3x3 stride-2 transposed conv."""
    f3 = fold_bn_into_deconv(unit.deconv3, unit.bn3)
    w = f3.weight.astype(np.float64)
    b = f3.bias.astype(np.float64)
    if unit.deconv1 is not None:
        d1 = unit.deconv1
        # both branches must emit the same grid for the embedding to be valid
        if (d1.stride, d1.padding + 1, d1.output_padding) != (2, 1, 1):
            raise ShapeError("1x1 upsampling branch is not aligned with the 3x3 branch")
        f1 = fold_bn_into_deconv(d1, unit.bn1)
        w = w + embed_1x1_into_3x3(f1.weight)
        b = b + f1.bias
    return DeconvParams(w.astype(DTYPE), b.astype(DTYPE), 2, 1, 1)


def fused_param_count(p: ConvParams | DeconvParams) -> int:
    return p.weight.size + p.bias.size


def repvgg_param_count(in_c: int, out_c: int, stride: int = 1, *, fused: bool = False,
                       with_1x1: bool = True, with_identity: bool = True) -> int:
    """Closed-form trainable parameter count of a RepVGG unit."""
    if fused:
        return 9 * in_c * out_c + out_c
    n = 9 * in_c * out_c + 2 * out_c
    if with_1x1:
        n += in_c * out_c + 2 * out_c
    if with_identity and in_c == out_c and stride == 1:
        n += 2 * out_c
    return n


def repupsample_param_count(in_c: int, out_c: int, *, fused: bool = False, with_1x1: bool = True) -> int:
    if fused:
        return 9 * in_c * out_c + out_c
    n = 9 * in_c * out_c + 2 * out_c
    if with_1x1:
        n += in_c * out_c + 2 * out_c
    return n
