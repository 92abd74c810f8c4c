"""Training targets derived from instance maps, and a synthetic nucleus generator.

Instance maps are (H, W) integer arrays with 0 for background. Boundary
distance (BD) maps are (4, H, W) float32 arrays with channels ordered
left, right, up, down.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import DTYPE

CLASS_NAMES = ("background", "neutrophil", "epithelial", "lymphocyte", "plasma",
               "eosinophil", "connective")
NUM_CLASSES = len(CLASS_NAMES)
TAU = 5

# BD channel order
LEFT, RIGHT, UP, DOWN = range(4)

_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = np.ones((3, 3), dtype=bool)


def relabel_sequential(inst: np.ndarray) -> np.ndarray:
    """Map the nonzero ids of ``inst`` onto 1..K, preserving their order."""
    ids = np.unique(inst)
    ids = ids[ids != 0]
    lut = np.zeros(int(inst.max()) + 1 if inst.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, len(ids) + 1)
    return lut[inst]


def inner_boundary(inst: np.ndarray) -> np.ndarray:
    """Foreground pixels with a differently labeled 4-neighbor or on the image border."""
    padded = np.pad(inst, 1, constant_values=-1)
    c = padded[1:-1, 1:-1]
    diff = ((padded[:-2, 1:-1] != c) | (padded[2:, 1:-1] != c)
            | (padded[1:-1, :-2] != c) | (padded[1:-1, 2:] != c))
    return diff & (inst > 0)


def _run_lengths(inst: np.ndarray) -> np.ndarray:
    """Steps from each pixel to the start of its same-label run along axis 1."""
    h, w = inst.shape
    out = np.zeros((h, w), dtype=DTYPE)
    fg = inst > 0
    for j in range(1, w):
        same = fg[:, j] & (inst[:, j] == inst[:, j - 1])
        out[:, j] = np.where(same, out[:, j - 1] + 1, 0)
    return out


def bd_from_instances(inst: np.ndarray) -> np.ndarray:
    """Per-pixel distances to the end of its label run in each axis direction.

    A run ends at the image border or where the label changes, so the
    distance points at the inner-boundary pixel of the pixel's own instance.
    """
    inst = np.asarray(inst)
    bd = np.empty((4,) + inst.shape, dtype=DTYPE)
    bd[LEFT] = _run_lengths(inst)
    bd[RIGHT] = _run_lengths(inst[:, ::-1])[:, ::-1]
    bd[UP] = _run_lengths(inst.T).T
    bd[DOWN] = _run_lengths(inst[::-1].T).T[::-1]
    return bd


def isoheight_from_boundary(boundary: np.ndarray, tau: int = TAU) -> np.ndarray:
    """Chebyshev distance to the nearest boundary pixel, clamped at ``tau``.

    Built by repeated 8-neighborhood dilation of the boundary mask.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    boundary = np.asarray(boundary, dtype=bool)
    psi = np.full(boundary.shape, tau, dtype=np.int32)
    if not boundary.any():
        return psi
    reached = boundary.copy()
    psi[reached] = 0
    for d in range(1, tau):
        grown = ndimage.binary_dilation(reached, _SQUARE)
        psi[grown & ~reached] = d
        reached = grown
    return psi


def make_targets(inst: np.ndarray, types: np.ndarray, tau: int = TAU) -> dict:
    """Every supervision map the losses need, recomputed from labels."""
    boundary = inner_boundary(inst)
    return {
        "np": (inst > 0).astype(np.int64),
        "nt": np.asarray(types, dtype=np.int64),
        "bd": bd_from_instances(inst),
        "psi": isoheight_from_boundary(boundary, tau),
        "boundary": boundary,
    }


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    height: int = 64
    width: int = 64
    count_range: tuple[int, int] = (5, 10)
    radius_range: tuple[float, float] = (3.5, 7.5)
    # probability that a nucleus is placed touching an existing one
    overlap_prob: float = 0.35
    # weights over classes 1..6; None means uniform
    class_probs: tuple[float, ...] | None = None
    noise_std: float = 0.03
    min_pixels: int = 16

    def validate(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad nucleus count range {self.count_range}")
        rlo, rhi = self.radius_range
        if rlo <= 0 or rhi < rlo:
            raise ValueError(f"bad radius range {self.radius_range}")
        if 2 * rhi > min(self.height, self.width):
            raise ValueError(f"radius {rhi} does not fit a {self.height}x{self.width} image")
        if not 0 <= self.overlap_prob <= 1:
            raise ValueError("overlap_prob must lie in [0, 1]")
        if self.class_probs is not None and len(self.class_probs) != NUM_CLASSES - 1:
            raise ValueError("class_probs needs one weight per nucleus class")


# mean RGB per nucleus class, loosely hematoxylin-like but separable
CLASS_COLORS = np.array([
    [0.93, 0.82, 0.88],  # background
    [0.62, 0.22, 0.62],
    [0.42, 0.36, 0.78],
    [0.22, 0.12, 0.40],
    [0.66, 0.44, 0.50],
    [0.86, 0.36, 0.42],
    [0.40, 0.52, 0.52],
], dtype=np.float64)


def _ellipse_mask(h, w, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _clean_instances(inst: np.ndarray, min_pixels: int) -> np.ndarray:
    """Open every label with a 3x3 square (strips slivers left by occlusion),
    keep its largest 4-connected piece and drop labels below ``min_pixels``."""
    out = np.zeros_like(inst)
    for k in np.unique(inst):
        if k == 0:
            continue
        opened = ndimage.binary_opening(inst == k, _SQUARE)
        comp, n = ndimage.label(opened, structure=_CROSS)
        if n > 1:
            sizes = np.bincount(comp.ravel())[1:]
            keep = comp == (np.argmax(sizes) + 1)
        else:
            keep = comp == 1
        if keep.sum() >= min_pixels:
            out[keep] = k
    return out


def synth_sample(seed, spec: SynthSpec | None = None):
    """Random nuclei scene.

    Returns ``(image, inst, types)``: image is float32 (3, H, W) in [0, 1]
    quantized to 8-bit levels, inst an int32 instance map with ids 1..K,
    types an int32 class map (0 on background).
    """
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    probs = np.ones(NUM_CLASSES - 1) if spec.class_probs is None else np.asarray(spec.class_probs, float)
    probs = probs / probs.sum()

    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    inst = np.zeros((h, w), dtype=np.int32)
    centers, radii, classes = [], [], []
    rlo, rhi = spec.radius_range
    for k in range(1, count + 1):
        a, b = rng.uniform(rlo, rhi, size=2)
        theta = rng.uniform(0, np.pi)
        if centers and rng.random() < spec.overlap_prob:
            j = int(rng.integers(len(centers)))
            ang = rng.uniform(0, 2 * np.pi)
            dist = (radii[j] + 0.5 * (a + b)) * rng.uniform(0.85, 1.0)
            cy = centers[j][0] + dist * np.sin(ang)
            cx = centers[j][1] + dist * np.cos(ang)
        else:
            cy = rng.uniform(0, h - 1)
            cx = rng.uniform(0, w - 1)
        centers.append((cy, cx))
        radii.append(0.5 * (a + b))
        classes.append(int(rng.choice(NUM_CLASSES - 1, p=probs)) + 1)
        inst[_ellipse_mask(h, w, cy, cx, a, b, theta)] = k

    inst = _clean_instances(inst, spec.min_pixels)
    types = np.zeros_like(inst)
    for k in np.unique(inst):
        if k:
            types[inst == k] = classes[k - 1]
    inst = relabel_sequential(inst)
    image = render_image(inst, types, rng, spec.noise_std)
    return image, inst, types


def render_image(inst, types, rng, noise_std=0.03) -> np.ndarray:
    h, w = inst.shape
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (3, h, w)), sigma=(0, 3, 3))
    texture *= 0.04 / max(texture.std(), 1e-8)
    img = CLASS_COLORS[types].transpose(2, 0, 1) + texture
    # per-instance brightness jitter
    n = int(inst.max())
    jitter = np.concatenate([[0.0], rng.uniform(-0.05, 0.05, n)])
    img += jitter[inst][None]
    # darker rims make touching nuclei separable
    img[:, inner_boundary(inst)] -= 0.12
    img += rng.normal(0, noise_std, img.shape)
    img = np.clip(img, 0, 1)
    return (np.round(img * 255) / 255).astype(DTYPE)


def apply_geometric(image, inst, types, hflip=False, vflip=False, rot90=0):
    """Flip/rotate image (C, H, W) and label maps (H, W) consistently."""
    if hflip:
        image, inst, types = image[:, :, ::-1], inst[:, ::-1], types[:, ::-1]
    if vflip:
        image, inst, types = image[:, ::-1], inst[::-1], types[::-1]
    if rot90 % 4:
        image = np.rot90(image, rot90, axes=(1, 2))
        inst = np.rot90(inst, rot90)
        types = np.rot90(types, rot90)
    return (np.ascontiguousarray(image), np.ascontiguousarray(inst), np.ascontiguousarray(types))


def augment(image, inst, types, rng, enabled=True):
    """Random flips and quarter turns. Targets must be recomputed afterwards
    with :func:`make_targets`; they are never transformed directly."""
    if not enabled:
        return image, inst, types
    rng = np.random.default_rng(rng)
    hflip, vflip = rng.random(2) < 0.5
    # square images only for quarter turns
    rot = int(rng.integers(4)) if inst.shape[0] == inst.shape[1] else 0
    return apply_geometric(image, inst, types, bool(hflip), bool(vflip), rot)
