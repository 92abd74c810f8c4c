"""On-disk formats: PNG datasets, per-instance class CSVs, loss logs.

Dataset layout::

    root/images/<name>.png      RGB, 8 bit
    root/instances/<name>.png   instance ids, 16-bit grayscale
    root/types/<name>.png       class per pixel, 8-bit grayscale
    root/train.txt, val.txt, test.txt   one name per line
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .groundtruth import CLASS_COLORS, inner_boundary
from .tensor import DTYPE
from .train import Sample

SPLITS = ("train", "val", "test")
SPLIT_RATIO = (7, 1, 2)


def split_counts(n: int) -> tuple[int, int, int]:
    """Sizes of the train/val/test splits in the ratio 7:1:2."""
    total = sum(SPLIT_RATIO)
    n_train = round(n * SPLIT_RATIO[0] / total)
    n_val = round(n * SPLIT_RATIO[1] / total)
    return n_train, n_val, n - n_train - n_val


def save_rgb(path, image: np.ndarray):
    """(3, H, W) floats in [0, 1] -> 8-bit RGB PNG."""
    rgb = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(rgb.transpose(1, 2, 0)), mode="RGB").save(path)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return (arr.transpose(2, 0, 1) / 255.0).astype(DTYPE)


def save_labels(path, labels: np.ndarray, bits: int = 16):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= 2 ** bits:
        raise ValueError(f"labels do not fit in {bits} bits")
    dtype = np.uint16 if bits == 16 else np.uint8
    Image.fromarray(np.ascontiguousarray(labels.astype(dtype))).save(path)


def load_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int32)


def write_sample(root, sample: Sample):
    root = Path(root)
    save_rgb(root / "images" / f"{sample.name}.png", sample.image)
    save_labels(root / "instances" / f"{sample.name}.png", sample.inst, 16)
    save_labels(root / "types" / f"{sample.name}.png", sample.types, 8)


def read_sample(root, name: str) -> Sample:
    root = Path(root)
    return Sample(load_rgb(root / "images" / f"{name}.png"),
                  load_labels(root / "instances" / f"{name}.png"),
                  load_labels(root / "types" / f"{name}.png"), name)


def write_dataset(root, samples: list[Sample]) -> dict[str, list[str]]:
    """Write every sample and the 7:1:2 split files (in sample order)."""
    root = Path(root)
    for sub in ("images", "instances", "types"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_sample(root, s)
    sizes = split_counts(len(samples))
    names = [s.name for s in samples]
    splits, start = {}, 0
    for split, size in zip(SPLITS, sizes):
        splits[split] = names[start:start + size]
        start += size
        (root / f"{split}.txt").write_text("".join(f"{n}\n" for n in splits[split]))
    return splits


def read_split(root, split: str) -> list[Sample]:
    root = Path(root)
    path = root / f"{split}.txt"
    if not path.exists():
        raise FileNotFoundError(f"no split file {path}")
    names = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    return [read_sample(root, n) for n in names]


def write_instance_csv(path, inst: np.ndarray, classes: dict[int, int]):
    counts = np.bincount(np.asarray(inst).ravel())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["instance_id", "class", "pixel_count"])
        for k in sorted(classes):
            w.writerow([k, classes[k], int(counts[k]) if k < len(counts) else 0])


def read_instance_csv(path) -> dict[int, int]:
    with open(path, newline="") as f:
        return {int(r["instance_id"]): int(r["class"]) for r in csv.DictReader(f)}


LOSS_LOG_FIELDS = ["epoch", "L_np", "L_nt", "L_bd", "L_nb", "total", "val_total", "lr"]


def write_loss_log(path, history: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOSS_LOG_FIELDS)
        for row in history:
            w.writerow([row["epoch"], *(f"{row[f'train_{k}']:.6f}" for k in ("np", "nt", "bd", "nb", "total")),
                        f"{row['val_total']:.6f}", f"{row['lr']:.3e}"])


def write_table(path, rows: list[dict]):
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def overlay(image: np.ndarray, inst: np.ndarray, classes: dict[int, int]) -> np.ndarray:
    """Image with every instance outline drawn in a saturated class color."""
    rgb = np.asarray(image, dtype=np.float64).copy()
    edge = inner_boundary(inst)
    lut = np.zeros(int(inst.max()) + 1, dtype=np.int64)
    for k, c in classes.items():
        lut[k] = c
    colors = np.clip((CLASS_COLORS - 0.5) * 2.5 + 0.5, 0, 1)
    rgb[:, edge] = colors[lut[inst[edge]]].T
    return rgb
