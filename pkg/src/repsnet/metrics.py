"""DICE, AJI, PQ and multi-class PQ for instance maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .groundtruth import NUM_CLASSES

POSITIVE_CLASSES = tuple(range(1, NUM_CLASSES))


def dice(x: np.ndarray, y: np.ndarray) -> float:
    """2|X n Y| / (|X| + |Y|) of two masks; 0 when both are empty."""
    x = np.asarray(x) > 0
    y = np.asarray(y) > 0
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    denom = x.sum() + y.sum()
    if denom == 0:
        return 0.0
    return 2.0 * np.logical_and(x, y).sum() / denom


def _overlaps(gt: np.ndarray, pred: np.ndarray):
    """Pairwise intersection and union counts between instances.

    Returns ``(gt_ids, pred_ids, inter, union)`` with ``inter[i, j]`` the
    overlap of ``gt_ids[i]`` and ``pred_ids[j]``.
    """
    if gt.shape != pred.shape:
        raise ValueError(f"instance map shapes differ: {gt.shape} vs {pred.shape}")
    gt_ids = np.unique(gt)
    gt_ids = gt_ids[gt_ids > 0]
    pred_ids = np.unique(pred)
    pred_ids = pred_ids[pred_ids > 0]
    g = np.searchsorted(gt_ids, gt.ravel())
    p = np.searchsorted(pred_ids, pred.ravel())
    fg = (gt.ravel() > 0) & (pred.ravel() > 0)
    inter = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    np.add.at(inter, (g[fg], p[fg]), 1)
    gt_area = np.bincount(g[gt.ravel() > 0], minlength=len(gt_ids))
    pred_area = np.bincount(p[pred.ravel() > 0], minlength=len(pred_ids))
    union = gt_area[:, None] + pred_area[None, :] - inter
    return gt_ids, pred_ids, inter, union, pred_area


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard index.

    Every ground-truth nucleus is paired with its highest-IoU prediction
    (ties to the smaller prediction id). Predictions overlapping no
    ground-truth nucleus add their full area to the union.
    """
    gt_ids, pred_ids, inter, union, pred_area = _overlaps(np.asarray(gt), np.asarray(pred))
    if len(gt_ids) == 0:
        return 0.0
    if len(pred_ids) == 0:
        return 0.0
    iou = inter / union
    best = np.argmax(iou, axis=1)  # first maximum -> smallest id
    rows = np.arange(len(gt_ids))
    num = inter[rows, best].sum()
    den = union[rows, best].sum()
    stray = iou.max(axis=0) <= 0
    den += pred_area[stray].sum()
    return float(num / den) if den else 0.0


@dataclass
class PQResult:
    pq: float
    dq: float  # detection F1
    sq: float  # mean IoU of matched pairs
    tp: int
    fp: int
    fn: int
    matches: list = field(default_factory=list)  # (gt_id, pred_id, iou)


def pq(gt: np.ndarray, pred: np.ndarray) -> PQResult:
    """Panoptic quality with matching at IoU > 0.5 (necessarily one-to-one)."""
    gt_ids, pred_ids, inter, union, _ = _overlaps(np.asarray(gt), np.asarray(pred))
    if len(gt_ids) and len(pred_ids):
        iou = inter / union
        gi, pj = np.nonzero(iou > 0.5)
    else:
        iou = np.zeros((len(gt_ids), len(pred_ids)))
        gi = pj = np.zeros(0, dtype=int)
    tp = len(gi)
    fp = len(pred_ids) - tp
    fn = len(gt_ids) - tp
    matches = [(int(gt_ids[i]), int(pred_ids[j]), float(iou[i, j])) for i, j in zip(gi, pj)]
    if tp == 0:
        return PQResult(0.0, 0.0, 0.0, 0, fp, fn, [])
    dq = 2 * tp / (2 * tp + fp + fn)
    sq = float(iou[gi, pj].sum() / tp)
    return PQResult(dq * sq, dq, sq, tp, fp, fn, matches)


def _restrict(inst: np.ndarray, classes: dict, c: int) -> np.ndarray:
    keep = [k for k, v in classes.items() if v == c]
    return np.where(np.isin(inst, keep), inst, 0)


@dataclass
class SegReport:
    dice: float
    aji: float
    pq: float
    class_pq: dict  # class -> PQ, NaN where the class is absent from both maps
    mpq: float
    detection: PQResult

    @property
    def matches(self):
        return self.detection.matches


def mpq(gt: np.ndarray, gt_classes: dict, pred: np.ndarray, pred_classes: dict) -> tuple[float, dict]:
    """Mean per-class PQ over the classes present in either map.

    Returns ``(mpq, per_class)``; absent classes map to NaN and are left out
    of the mean. ``mpq`` is NaN when no class is present at all.
    """
    per_class = {}
    for c in POSITIVE_CLASSES:
        g = _restrict(gt, gt_classes, c)
        p = _restrict(pred, pred_classes, c)
        if not g.any() and not p.any():
            per_class[c] = float("nan")
        else:
            per_class[c] = pq(g, p).pq
    present = [v for v in per_class.values() if not np.isnan(v)]
    return (float(np.mean(present)) if present else float("nan")), per_class


def evaluate(gt: np.ndarray, gt_classes: dict, pred: np.ndarray, pred_classes: dict) -> SegReport:
    det = pq(gt, pred)
    m, per_class = mpq(gt, gt_classes, pred, pred_classes)
    return SegReport(dice(gt, pred), aji(gt, pred), det.pq, per_class, m, det)


def instance_classes(inst: np.ndarray, types: np.ndarray) -> dict[int, int]:
    """Class of every instance read from a per-pixel type map (modal value)."""
    out = {}
    for k in np.unique(inst):
        if k:
            out[int(k)] = int(np.bincount(types[inst == k]).argmax())
    return out


def summarize(reports: list[SegReport]) -> dict:
    """Mean of per-image scores; per-class PQ averaged over images where the
    class occurs."""
    if not reports:
        raise ValueError("no reports to summarize")
    out = {
        "dice": float(np.mean([r.dice for r in reports])),
        "aji": float(np.mean([r.aji for r in reports])),
        "pq": float(np.mean([r.pq for r in reports])),
    }
    class_means = {}
    for c in POSITIVE_CLASSES:
        vals = [r.class_pq[c] for r in reports if not np.isnan(r.class_pq[c])]
        class_means[c] = float(np.mean(vals)) if vals else float("nan")
    defined = [v for v in class_means.values() if not np.isnan(v)]
    out["mpq"] = float(np.mean(defined)) if defined else float("nan")
    for c, v in class_means.items():
        out[f"pq_class{c}"] = v
    out["tp"] = int(sum(r.detection.tp for r in reports))
    out["fp"] = int(sum(r.detection.fp for r in reports))
    out["fn"] = int(sum(r.detection.fn for r in reports))
    return out
