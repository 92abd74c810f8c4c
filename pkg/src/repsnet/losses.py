"""Training losses with analytic gradients w.r.t. the raw network outputs.

total = w_np * L_np + w_nt * L_nt + w_bd * L_bd + w_nb * L_nb

L_np and L_nt are softmax cross-entropy plus soft DICE, L_bd is smooth-L1 on
the boundary distances of foreground pixels, and L_nb scores the boundary
positions the distances point at against an isoheight map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .groundtruth import DOWN, LEFT, RIGHT, TAU, UP
from .postprocess import round_half_away
from .tensor import softmax_channels

DICE_SMOOTH = 1.0


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component: str, value):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component


@dataclass
class LossWeights:
    np: float = 1.0
    nt: float = 1.0
    bd: float = 1.0
    nb: float = 1.0

    def __post_init__(self):
        if min(self.np, self.nt, self.bd, self.nb) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class IsoheightConfig:
    tau: int = TAU
    e: float = 1.0

    def __post_init__(self):
        if self.tau < 1 or self.e <= 0:
            raise ValueError("need tau >= 1 and e > 0")


def ce_plus_dice(logits: np.ndarray, targets: np.ndarray, class_count: int | None = None):
    """Mean softmax cross-entropy plus (1 - mean soft DICE over classes).

    ``logits`` is (N, C, H, W), ``targets`` (N, H, W) integer labels. DICE
    sums run over the whole batch. Returns ``(loss, grad_logits)``.
    """
    n, c, h, w = logits.shape
    if class_count is not None and c != class_count:
        raise ValueError(f"logits have {c} channels, expected {class_count}")
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ValueError(f"targets shape {targets.shape} != {(n, h, w)}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"target labels must lie in [0, {c - 1}]")
    dtype = logits.dtype
    x = logits.astype(np.float64)
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    onehot = (targets[:, None] == np.arange(c)[None, :, None, None]).astype(np.float64)
    m = n * h * w
    ce = -(logp * onehot).sum() / m

    inter = (p * onehot).sum(axis=(0, 2, 3))
    psum = p.sum(axis=(0, 2, 3))
    tsum = onehot.sum(axis=(0, 2, 3))
    den = psum + tsum + DICE_SMOOTH
    coef = (2 * inter + DICE_SMOOTH) / den
    dice_loss = 1.0 - coef.mean()

    b = (None, slice(None), None, None)
    g_p = -(2 * onehot * den[b] - (2 * inter + DICE_SMOOTH)[b]) / (den ** 2)[b] / c
    g_dice = p * (g_p - (p * g_p).sum(axis=1, keepdims=True))
    grad = g_dice + (p - onehot) / m
    return float(ce + dice_loss), grad.astype(dtype)


def smooth_l1(bd_pred: np.ndarray, bd_target: np.ndarray, fg: np.ndarray):
    """Smooth-L1 averaged over foreground pixels and the four channels.

    Returns ``(loss, grad)``; zero loss and gradient without foreground.
    """
    if bd_pred.shape != bd_target.shape:
        raise ValueError(f"shape mismatch {bd_pred.shape} vs {bd_target.shape}")
    fg = np.asarray(fg, dtype=bool)[:, None]
    count = 4 * int(fg.sum())
    if count == 0:
        return 0.0, np.zeros_like(bd_pred)
    d = bd_pred.astype(np.float64) - bd_target
    ad = np.abs(d)
    quad = ad < 1
    elem = np.where(quad, 0.5 * d * d, ad - 0.5)
    loss = (elem * fg).sum() / count
    grad = np.where(quad, d, np.sign(d)) * fg / count
    return float(loss), grad.astype(bd_pred.dtype)


def nb_loss_from_positions(rows, cols, psi: np.ndarray, tau: int = TAU, e: float = 1.0) -> float:
    """sum(psi at the given boundary pixels) / (tau * count + e)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    return float(psi[rows, cols].sum(dtype=np.float64) / (tau * rows.size + e))


def nb_loss(bd_pred: np.ndarray, fg: np.ndarray, psi: np.ndarray, cfg: IsoheightConfig | None = None):
    """Boundary loss over the positions every foreground pixel points at.

    Each foreground pixel contributes its four rounded, clamped boundary
    positions (a multiset across the batch). The gradient treats rounding
    as identity and reads the central-difference slope of ``psi`` at each
    position. Returns ``(loss, grad)``.
    """
    cfg = cfg or IsoheightConfig()
    n, _, h, w = bd_pred.shape
    fg = np.asarray(fg, dtype=bool)
    votes = 4 * int(fg.sum())
    denom = cfg.tau * votes + cfg.e
    grad = np.zeros_like(bd_pred)
    total = 0.0
    for i in range(n):
        ys, xs = np.nonzero(fg[i])
        if ys.size == 0:
            continue
        d = round_half_away(bd_pred[i][:, ys, xs].astype(np.float64)).astype(np.int64)
        ps = psi[i].astype(np.float64)
        gy, gx = np.gradient(ps) if min(h, w) > 1 else (np.zeros_like(ps), np.zeros_like(ps))
        cl = np.clip(xs - d[LEFT], 0, w - 1)
        cr = np.clip(xs + d[RIGHT], 0, w - 1)
        ru = np.clip(ys - d[UP], 0, h - 1)
        rd = np.clip(ys + d[DOWN], 0, h - 1)
        total += ps[ys, cl].sum() + ps[ys, cr].sum() + ps[ru, xs].sum() + ps[rd, xs].sum()
        grad[i, LEFT, ys, xs] = -gx[ys, cl] / denom
        grad[i, RIGHT, ys, xs] = gx[ys, cr] / denom
        grad[i, UP, ys, xs] = -gy[ru, xs] / denom
        grad[i, DOWN, ys, xs] = gy[rd, xs] / denom
    return float(total / denom), grad


def total_loss(outputs: dict, targets: dict, weights: LossWeights | None = None,
               iso: IsoheightConfig | None = None):
    """Weighted sum of the four components.

    ``outputs`` holds "np", "nt", "bd" network outputs; ``targets`` holds
    "np", "nt" label maps, "bd" distances and "psi" isoheights, all batched.
    Returns ``(total, components, grads)``.
    """
    weights = weights or LossWeights()
    fg = targets["np"] > 0
    l_np, g_np = ce_plus_dice(outputs["np"], targets["np"], 2)
    l_nt, g_nt = ce_plus_dice(outputs["nt"], targets["nt"])
    l_bd, g_bd = smooth_l1(outputs["bd"], targets["bd"], fg)
    components = {"np": l_np, "nt": l_nt, "bd": l_bd}
    for name, value in components.items():
        if not np.isfinite(value):
            raise NonFiniteLoss(name, value)
    # checked first: rounding a non-finite BD map to vote positions is undefined
    l_nb, g_nb = nb_loss(outputs["bd"], fg, targets["psi"], iso)
    if not np.isfinite(l_nb):
        raise NonFiniteLoss("nb", l_nb)
    components["nb"] = l_nb
    total = weights.np * l_np + weights.nt * l_nt + weights.bd * l_bd + weights.nb * l_nb
    grads = {
        "np": g_np * weights.np,
        "nt": g_nt * weights.nt,
        "bd": g_bd * weights.bd + g_nb * weights.nb,
    }
    return total, components, grads


def softmax_probs(logits):
    return softmax_channels(logits)
