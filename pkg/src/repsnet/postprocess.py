"""From network outputs to labeled, classified nucleus instances.

The chain is: NP argmax -> boundary voting -> 4-connected components of the
non-boundary foreground -> reattach boundary pixels to their nearest
instance -> majority vote over the NT map per instance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .groundtruth import DOWN, LEFT, NUM_CLASSES, RIGHT, UP

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class BvmConfig:
    e_t: int = 3
    r_max: float = 10.0
    # "bvm" or "naive" (components straight on the NP mask)
    post: str = "bvm"

    def __post_init__(self):
        if self.e_t < 0:
            raise ValueError("vote threshold must be non-negative")
        if self.post not in ("bvm", "naive"):
            raise ValueError(f"unknown post-processing mode {self.post!r}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def vote_positions(bd: np.ndarray, mask: np.ndarray):
    """Absolute boundary positions voted for by every foreground pixel.

    Returns ``(rows, cols)`` int arrays of length ``4 * mask.sum()``, clamped to
    the image. Order: all left votes, then right, up, down.
    """
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    d = round_half_away(bd[:, ys, xs]).astype(np.int64)
    rows = np.concatenate([ys, ys, ys - d[UP], ys + d[DOWN]])
    cols = np.concatenate([xs - d[LEFT], xs + d[RIGHT], xs, xs])
    return np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)


def bvm_votes(bd: np.ndarray, np_mask: np.ndarray) -> np.ndarray:
    """Integer vote count per pixel; four votes per foreground pixel."""
    np_mask = np.asarray(np_mask, dtype=bool)
    if bd.shape != (4,) + np_mask.shape:
        raise ValueError(f"BD shape {bd.shape} does not match mask {np_mask.shape}")
    rows, cols = vote_positions(bd, np_mask)
    votes = np.zeros(np_mask.shape, dtype=np.int64)
    np.add.at(votes, (rows, cols), 1)
    return votes


def bvm(bd: np.ndarray, np_mask: np.ndarray, cfg: BvmConfig | None = None) -> np.ndarray:
    """Boundary voting: pixels with strictly more than ``e_t`` votes."""
    e_t = (cfg or BvmConfig()).e_t
    return bvm_votes(bd, np_mask) > e_t


def connected_components(fg: np.ndarray) -> np.ndarray:
    """4-connected components labeled 1..K in raster discovery order."""
    labels, _ = ndimage.label(np.asarray(fg, dtype=bool), structure=_CROSS)
    return labels.astype(np.int32)


def _disc_offsets(r_max: float):
    r = int(np.floor(r_max))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    d2 = dy * dy + dx * dx
    keep = d2 <= r_max * r_max
    order = np.argsort(d2[keep], kind="stable")
    return dy[keep][order], dx[keep][order], d2[keep][order]


def assign_boundary_pixels(inst: np.ndarray, nb: np.ndarray, np_mask: np.ndarray,
                           r_max: float = 10.0, bd: np.ndarray | None = None) -> np.ndarray:
    """Give each unlabeled foreground boundary pixel the label of its nearest
    labeled pixel (Euclidean, ties to the smaller id; nothing within
    ``r_max`` leaves it background).

    With ``bd`` given, boundary pixels are first handed to the instance whose
    pixels cast the most votes on them, repeating while newly labeled pixels
    keep supplying votes; the distance rule handles whatever remains.
    """
    inst = np.asarray(inst)
    out = inst.copy()
    targets = nb & np.asarray(np_mask, dtype=bool) & (inst == 0)
    if not targets.any() or not inst.any():
        return out
    if bd is not None:
        while True:
            ty, tx = np.nonzero(targets)
            if ty.size == 0:
                return out
            voted = _vote_winner(out, bd, np_mask, ty, tx)
            hit = voted > 0
            if not hit.any():
                break
            out[ty[hit], tx[hit]] = voted[hit]
            targets[ty[hit], tx[hit]] = False
    h, w = inst.shape
    ty, tx = np.nonzero(targets)
    best_d2 = np.full(ty.shape, np.iinfo(np.int64).max)
    best = np.zeros(ty.shape, dtype=inst.dtype)
    for dy, dx, d2 in zip(*_disc_offsets(r_max)):
        yy, xx = ty + dy, tx + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        lab = np.zeros_like(best)
        lab[ok] = out[yy[ok], xx[ok]]
        better = (lab > 0) & ((d2 < best_d2) | ((d2 == best_d2) & (lab < best)))
        best_d2[better] = d2
        best[better] = lab[better]
    out[ty, tx] = best
    return out


def _vote_winner(inst, bd, np_mask, ty, tx):
    """Instance casting the most votes on each pixel (ty, tx); 0 if none.

    Ties go to the instance with the nearer voter, then the smaller id.
    """
    w = inst.shape[1]
    mask = np.asarray(np_mask, dtype=bool) & (inst > 0)
    rows, cols = vote_positions(bd, mask)
    ys, xs = np.nonzero(mask)
    vy, vx = np.tile(ys, 4), np.tile(xs, 4)
    voter = np.tile(inst[mask], 4).astype(np.int64)
    d2 = (vy - rows) ** 2 + (vx - cols) ** 2
    wanted = np.zeros(inst.size, dtype=bool)
    wanted[ty * w + tx] = True
    pix = rows * w + cols
    keep = wanted[pix]
    pix, voter, d2 = pix[keep], voter[keep], d2[keep]
    winner = np.zeros(inst.size, dtype=np.int64)
    if pix.size:
        kmax = int(inst.max()) + 1
        key = np.unique(pix * kmax + voter)
        counts = np.bincount(np.searchsorted(key, pix * kmax + voter), minlength=key.size)
        nearest = np.full(key.size, np.iinfo(np.int64).max)
        np.minimum.at(nearest, np.searchsorted(key, pix * kmax + voter), d2)
        kp, kl = key // kmax, key % kmax
        # sort so the preferred candidate comes first for each pixel
        order = np.lexsort((kl, nearest, -counts, kp))
        kp, kl = kp[order], kl[order]
        firsts = np.r_[True, kp[1:] != kp[:-1]]
        winner[kp[firsts]] = kl[firsts]
    return winner[ty * w + tx]


def classify_instances(inst: np.ndarray, nt_pred: np.ndarray) -> dict[int, int]:
    """Modal nucleus class per instance.

    Background votes are ignored; an instance with only background votes
    takes the most frequent nonzero class of the whole map (class 1 if
    there is none). Ties resolve to the smaller class index.
    """
    fg_classes = nt_pred[nt_pred > 0]
    if fg_classes.size:
        fallback = int(np.argmax(np.bincount(fg_classes, minlength=NUM_CLASSES)))
    else:
        fallback = 1
    out = {}
    ids = np.unique(inst)
    for k in ids[ids > 0]:
        votes = nt_pred[inst == k]
        hist = np.bincount(votes[votes > 0], minlength=NUM_CLASSES)
        out[int(k)] = int(np.argmax(hist)) if hist.any() else fallback
    return out


def segment(np_logits: np.ndarray, nt_logits: np.ndarray, bd: np.ndarray,
            cfg: BvmConfig | None = None):
    """Single-image post-processing of (2,H,W), (7,H,W), (4,H,W) outputs.

    Returns ``(inst, classes)`` where classes maps instance id to class.
    """
    cfg = cfg or BvmConfig()
    if np_logits.shape[1:] != nt_logits.shape[1:] or np_logits.shape[1:] != bd.shape[1:]:
        raise ValueError("output maps have inconsistent spatial shapes")
    mask = np.argmax(np_logits, axis=0) == 1
    nt = np.argmax(nt_logits, axis=0)
    if cfg.post == "naive":
        inst = connected_components(mask)
    else:
        nb = bvm(bd, mask, cfg)
        inst = connected_components(mask & ~nb)
        inst = assign_boundary_pixels(inst, nb, mask, cfg.r_max, bd)
    return inst, classify_instances(inst, nt)


def class_map(inst: np.ndarray, classes: dict[int, int]) -> np.ndarray:
    lut = np.zeros(int(inst.max()) + 1, dtype=np.int32)
    for k, c in classes.items():
        lut[k] = c
    return lut[inst]
