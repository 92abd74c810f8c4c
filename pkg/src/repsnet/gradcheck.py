"""Finite-difference checks for every hand-written backward pass.

All probes run in float64 with central differences. The error reported is
``||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .groundtruth import isoheight_from_boundary
from .losses import IsoheightConfig, ce_plus_dice, nb_loss, smooth_l1
from .reparam import RepUpsampleUnit, RepVggUnit
from .tensor import (
    BatchNormParams,
    ConvParams,
    DeconvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    relu_backward,
    relu_forward,
)

TOLERANCE = 1e-4
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def check_conv(rng, stride=1, padding=1, k=3) -> list[CheckResult]:
    x = rng.normal(size=(2, 4, 6, 6))
    p = ConvParams(rng.normal(size=(3, 4, k, k)), rng.normal(size=3), stride, padding)
    out = conv2d_forward(x, p)
    r = rng.normal(size=out.shape)
    gx, gw, gb = conv2d_backward(x, p, r)
    f = lambda: float((conv2d_forward(x, p) * r).sum())
    tag = f"conv{k}x{k} s{stride} p{padding}"
    return [CheckResult(f"{tag} input", relative_error(gx, numeric_grad(f, x))),
            CheckResult(f"{tag} weight", relative_error(gw, numeric_grad(f, p.weight))),
            CheckResult(f"{tag} bias", relative_error(gb, numeric_grad(f, p.bias)))]


def check_deconv(rng, k=3, padding=1, output_padding=1) -> list[CheckResult]:
    x = rng.normal(size=(2, 4, 3, 3))
    p = DeconvParams(rng.normal(size=(4, 3, k, k)), rng.normal(size=3), 2, padding, output_padding)
    out = deconv2d_forward(x, p)
    r = rng.normal(size=out.shape)
    gx, gw, gb = deconv2d_backward(x, p, r)
    f = lambda: float((deconv2d_forward(x, p) * r).sum())
    tag = f"deconv{k}x{k} p{padding} op{output_padding}"
    return [CheckResult(f"{tag} input", relative_error(gx, numeric_grad(f, x))),
            CheckResult(f"{tag} weight", relative_error(gw, numeric_grad(f, p.weight))),
            CheckResult(f"{tag} bias", relative_error(gb, numeric_grad(f, p.bias)))]


def check_batchnorm(rng, training: bool) -> list[CheckResult]:
    x = rng.normal(1.0, 2.0, size=(2, 4, 6, 6))
    p = BatchNormParams(rng.uniform(0.5, 1.5, 4), rng.normal(size=4), rng.normal(size=4),
                        rng.uniform(0.5, 2.0, 4))
    r = rng.normal(size=x.shape)
    gx, gg, gb = batchnorm_backward(x, p, r, training)

    def f():
        # running statistics must not drift while probing
        q = p.copy()
        return float((batchnorm_forward(x, q, training) * r).sum())

    tag = f"batchnorm {'train' if training else 'eval'}"
    return [CheckResult(f"{tag} input", relative_error(gx, numeric_grad(f, x))),
            CheckResult(f"{tag} gamma", relative_error(gg, numeric_grad(f, p.gamma))),
            CheckResult(f"{tag} beta", relative_error(gb, numeric_grad(f, p.beta)))]


def check_relu(rng) -> list[CheckResult]:
    x = _away_from_zero(rng, (2, 4, 6, 6))
    r = rng.normal(size=x.shape)
    g = relu_backward(x, r)
    f = lambda: float((relu_forward(x) * r).sum())
    return [CheckResult("relu input", relative_error(g, numeric_grad(f, x)))]


def check_repvgg_layer(rng, training=True) -> list[CheckResult]:
    from .network import RepVggLayer

    unit = RepVggUnit.create(4, 4, 1, rng)
    for bn in unit.batchnorms():
        bn.gamma[:] = rng.uniform(0.5, 1.5, bn.channels)
        bn.beta[:] = rng.normal(size=bn.channels)
    _to64(unit)
    layer = RepVggLayer(unit)
    x = rng.normal(size=(2, 4, 6, 6))
    r = rng.normal(size=x.shape)
    layer.forward(x, training)
    gx = layer.backward(r)
    grads = dict(layer.grads)
    f = lambda: float((layer.forward(x, training) * r).sum())
    out = [CheckResult("repvgg unit input", relative_error(gx, numeric_grad(f, x)))]
    for name, arr in layer.params().items():
        out.append(CheckResult(f"repvgg unit {name}", relative_error(grads[name], numeric_grad(f, arr))))
    return out


def check_repup_layer(rng, training=True) -> list[CheckResult]:
    from .network import RepUpLayer

    unit = RepUpsampleUnit.create(4, 3, rng)
    for bn in unit.batchnorms():
        bn.gamma[:] = rng.uniform(0.5, 1.5, bn.channels)
        bn.beta[:] = rng.normal(size=bn.channels)
    _to64(unit)
    layer = RepUpLayer(unit)
    x = rng.normal(size=(2, 4, 3, 3))
    layer.forward(x, training)
    r = rng.normal(size=(2, 3, 6, 6))
    gx = layer.backward(r)
    grads = dict(layer.grads)
    f = lambda: float((layer.forward(x, training) * r).sum())
    out = [CheckResult("repupsample unit input", relative_error(gx, numeric_grad(f, x)))]
    for name, arr in layer.params().items():
        out.append(CheckResult(f"repupsample unit {name}", relative_error(grads[name], numeric_grad(f, arr))))
    return out


def _to64(unit):
    """Promote every array of a unit to float64 in place."""
    for name in ("conv3", "conv1", "deconv3", "deconv1"):
        p = getattr(unit, name, None)
        if p is not None:
            p.weight = p.weight.astype(np.float64)
            p.bias = p.bias.astype(np.float64)
    for bn in unit.batchnorms():
        for f in ("gamma", "beta", "running_mean", "running_var"):
            setattr(bn, f, getattr(bn, f).astype(np.float64))


def check_ce_dice(rng, classes: int) -> list[CheckResult]:
    logits = rng.normal(size=(2, classes, 6, 6))
    targets = rng.integers(0, classes, size=(2, 6, 6))
    _, g = ce_plus_dice(logits, targets)
    f = lambda: ce_plus_dice(logits, targets)[0]
    return [CheckResult(f"ce+dice {classes} classes", relative_error(g, numeric_grad(f, logits)))]


def check_smooth_l1(rng) -> list[CheckResult]:
    target = rng.uniform(0, 6, size=(2, 4, 6, 6))
    # keep residuals away from the |d| = 1 kink
    d = rng.uniform(0.05, 2.5, size=target.shape) * rng.choice([-1, 1], size=target.shape)
    d = np.where(np.abs(np.abs(d) - 1) < 0.05, d * 1.2, d)
    pred = target + d
    fg = rng.random((2, 6, 6)) < 0.6
    _, g = smooth_l1(pred, target, fg)
    f = lambda: smooth_l1(pred, target, fg)[0]
    return [CheckResult("smooth-l1", relative_error(g, numeric_grad(f, pred)))]


def check_nb_loss(rng, size=12) -> list[CheckResult]:
    """Unit-step central difference of the boundary loss.

    The loss is piecewise constant in the predicted distances, so the probe
    moves one predicted distance by a whole pixel in each direction and
    compares ``(L(d + 1) - L(d - 1)) / 2`` with the analytic slope. Only
    probes whose shifted positions stay inside the image and do not cross a
    rounding boundary are used.
    """
    cfg = IsoheightConfig()
    boundary = rng.random((2, size, size)) < 0.15
    psi = np.stack([isoheight_from_boundary(b, cfg.tau) for b in boundary]).astype(np.float64)
    fg = np.zeros((2, size, size), dtype=bool)
    fg[:, 3:-3, 3:-3] = rng.random((2, size - 6, size - 6)) < 0.7
    # distances 1..2 with fractional parts well inside (-0.5, 0.5)
    bd = rng.integers(1, 3, size=(2, 4, size, size)) + rng.uniform(-0.3, 0.3, size=(2, 4, size, size))
    _, g = nb_loss(bd, fg, psi, cfg)
    analytic, numeric = [], []
    idx = np.argwhere(fg)
    for n, y, x in idx[:: max(1, len(idx) // 40)]:
        for c in range(4):
            old = bd[n, c, y, x]
            bd[n, c, y, x] = old + 1
            up = nb_loss(bd, fg, psi, cfg)[0]
            bd[n, c, y, x] = old - 1
            down = nb_loss(bd, fg, psi, cfg)[0]
            bd[n, c, y, x] = old
            analytic.append(g[n, c, y, x])
            numeric.append((up - down) / 2)
    return [CheckResult("boundary (nb) loss, unit step", relative_error(analytic, numeric))]


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    results += check_conv(rng, 1, 1, 3)
    results += check_conv(rng, 2, 1, 3)
    results += check_conv(rng, 1, 0, 1)
    results += check_deconv(rng, 3, 1, 1)
    results += check_deconv(rng, 1, 0, 1)
    results += check_batchnorm(rng, True)
    results += check_batchnorm(rng, False)
    results += check_relu(rng)
    results += check_repvgg_layer(rng, True)
    results += check_repup_layer(rng, True)
    results += check_ce_dice(rng, 2)
    results += check_ce_dice(rng, 7)
    results += check_smooth_l1(rng)
    results += check_nb_loss(rng)
    return results
