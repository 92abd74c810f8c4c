"""Mini-batch Adam training, plateau learning-rate schedule and evaluation."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .groundtruth import TAU, augment, make_targets
from .losses import IsoheightConfig, LossWeights, NonFiniteLoss, total_loss
from .metrics import evaluate, instance_classes, summarize
from .network import RepSNet
from .postprocess import BvmConfig, segment
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)

COMPONENTS = ("np", "nt", "bd", "nb")


class NumericError(FloatingPointError):
    """Training produced a non-finite value; ``component`` names its source."""

    def __init__(self, component: str, detail: str = ""):
        super().__init__(f"non-finite value in {component}" + (f": {detail}" if detail else ""))
        self.component = component


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32
    inst: np.ndarray  # (H, W) int
    types: np.ndarray  # (H, W) int
    name: str = ""


@dataclass
class TrainState:
    lr: float = 1e-4
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without a new best
    validation loss; never go below ``min_lr``."""

    def __init__(self, patience: int = 5, factor: float = 0.5, min_lr: float = 1e-7):
        if patience < 1 or not 0 < factor < 1 or min_lr < 0:
            raise ValueError("invalid scheduler settings")
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float, lr: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            return max(lr * self.factor, self.min_lr)
        return lr


def make_batch(samples: list[Sample], tau: int = TAU, rng=None, augmented: bool = False):
    """Stack images and recompute targets (after augmentation, if enabled)."""
    images, targets = [], {"np": [], "nt": [], "bd": [], "psi": []}
    for s in samples:
        image, inst, types = s.image, s.inst, s.types
        if augmented:
            image, inst, types = augment(image, inst, types, rng)
        t = make_targets(inst, types, tau)
        images.append(image)
        for k in targets:
            targets[k].append(t[k])
    return np.stack(images), {k: np.stack(v) for k, v in targets.items()}


def _check_grads(grads: dict):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(name, "gradient")


def train_step(net: RepSNet, x, targets, state: TrainState, weights: LossWeights, iso: IsoheightConfig):
    outputs = net.forward(x, training=True)
    try:
        loss, parts, g = total_loss(dict(zip(("np", "nt", "bd"), outputs)), targets, weights, iso)
    except NonFiniteLoss as err:
        raise NumericError(f"loss {err.component}") from err
    grads = net.backward(g["np"], g["nt"], g["bd"])
    _check_grads(grads)
    adam_step(net.params(), grads, state.adam, state.lr)
    return loss, parts


def train_epoch(net: RepSNet, dataset: list[Sample], state: TrainState, weights: LossWeights | None = None,
                iso: IsoheightConfig | None = None, batch_size: int = 8, rng=None, augmented: bool = True):
    """One shuffled pass of Adam updates. Returns ``(net, state, mean losses)``."""
    if not dataset:
        raise ValueError("empty training set")
    weights = weights or LossWeights()
    iso = iso or IsoheightConfig()
    rng = np.random.default_rng(rng)
    order = rng.permutation(len(dataset))
    sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
    batches = 0
    for start in range(0, len(order), batch_size):
        batch = [dataset[i] for i in order[start:start + batch_size]]
        x, targets = make_batch(batch, iso.tau, rng, augmented)
        loss, parts = train_step(net, x, targets, state, weights, iso)
        for k in COMPONENTS:
            sums[k] += parts[k]
        sums["total"] += loss
        batches += 1
    state.epoch += 1
    return net, state, {k: v / batches for k, v in sums.items()}


def validation_loss(net: RepSNet, dataset: list[Sample], weights: LossWeights | None = None,
                    iso: IsoheightConfig | None = None, batch_size: int = 8) -> dict:
    """Inference-mode mean losses over ``dataset`` (no augmentation)."""
    weights = weights or LossWeights()
    iso = iso or IsoheightConfig()
    sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
    batches = 0
    for start in range(0, len(dataset), batch_size):
        x, targets = make_batch(dataset[start:start + batch_size], iso.tau)
        outputs = net.forward(x)
        loss, parts, _ = total_loss(dict(zip(("np", "nt", "bd"), outputs)), targets, weights, iso)
        for k in COMPONENTS:
            sums[k] += parts[k]
        sums["total"] += loss
        batches += 1
    return {k: v / batches for k, v in sums.items()}


def fit(net: RepSNet, train_set: list[Sample], val_set: list[Sample], epochs: int, *,
        lr: float = 1e-4, batch_size: int = 8, weights: LossWeights | None = None,
        iso: IsoheightConfig | None = None, seed=0, augmented: bool = True,
        scheduler: PlateauScheduler | None = None, on_epoch=None):
    """Train for ``epochs`` and return ``(best_net, history)``.

    The returned network is a copy taken at the lowest validation loss (the
    initial network when ``epochs`` is 0). ``history`` holds one dict per
    epoch with train and validation losses and the learning rate.
    """
    weights = weights or LossWeights()
    iso = iso or IsoheightConfig()
    scheduler = scheduler or PlateauScheduler()
    state = TrainState(lr=lr)
    rng = np.random.default_rng(seed)
    best, best_loss = copy.deepcopy(net), np.inf
    history = []
    for epoch in range(epochs):
        _, state, tr = train_epoch(net, train_set, state, weights, iso, batch_size, rng, augmented)
        va = validation_loss(net, val_set, weights, iso, batch_size) if val_set else tr
        row = {"epoch": epoch + 1, "lr": state.lr, **{f"train_{k}": v for k, v in tr.items()},
               **{f"val_{k}": v for k, v in va.items()}}
        history.append(row)
        log.info("epoch %d lr %.2e train %.4f val %.4f", epoch + 1, state.lr, tr["total"], va["total"])
        if va["total"] < best_loss:
            best_loss = va["total"]
            best = copy.deepcopy(net)
        state.lr = scheduler.step(va["total"], state.lr)
        if on_epoch is not None:
            on_epoch(row, net)
    return best, history


def predict(net: RepSNet, images: np.ndarray, batch_size: int = 8):
    """Inference-mode outputs for an (N, 3, H, W) stack, batched."""
    outs = [], [], []
    for start in range(0, len(images), batch_size):
        for acc, o in zip(outs, net.forward(images[start:start + batch_size])):
            acc.append(o)
    return tuple(np.concatenate(o) for o in outs)


def segment_images(net: RepSNet, images: np.ndarray, cfg: BvmConfig | None = None, batch_size: int = 8):
    """Instance maps and class dicts for every image."""
    np_l, nt_l, bd = predict(net, images, batch_size)
    return [segment(np_l[i], nt_l[i], bd[i], cfg) for i in range(len(images))]


def evaluate_net(net: RepSNet, dataset: list[Sample], cfg: BvmConfig | None = None,
                 batch_size: int = 8) -> dict:
    """Mean DICE / AJI / PQ / mPQ of the segmented predictions."""
    images = np.stack([s.image for s in dataset])
    reports = []
    for s, (inst, classes) in zip(dataset, segment_images(net, images, cfg, batch_size)):
        reports.append(evaluate(s.inst, instance_classes(s.inst, s.types), inst, classes))
    return summarize(reports)
