"""Synthetic data generation, preprocessing, augmentation, and splits.

Images are ``(H, W, C)`` float arrays in [0, 1]. The generator plants two
sinusoidal gratings on a mid-grey background:

* a high-frequency diagonal grating present in both carcinoma classes
  (InSitu, Invasive) and absent otherwise — the superclass signature;
* a low-frequency vertical grating separating siblings inside each
  superclass (present in Benign and Invasive).

Per-sample phase jitter keeps images within a class distinct; Gaussian
noise controls difficulty. Every sample draws from its own generator
seeded by ``(dataset seed, sample index)``, so generation order never
matters.
"""

import math
import os
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError
from .hierarchy import LEAF_ORDER, CARCINOMA_LEAVES, LeafLabel, superclass_of

SIBLING_LEAVES = frozenset({LeafLabel.BENIGN, LeafLabel.INVASIVE})


class Source(Enum):
    PRIMARY = "Primary"
    AUXILIARY = "Auxiliary"


class AuxLabel(Enum):
    BENIGN_AUX = "BenignAux"
    MALIGNANT_AUX = "MalignantAux"


@dataclass
class LabeledImage:
    """One sample. Auxiliary images carry a binary aux label instead of a
    guaranteed leaf label (malignant auxiliaries have no leaf)."""

    pixels: np.ndarray
    label: LeafLabel | None
    source: Source = Source.PRIMARY
    aux_label: AuxLabel | None = None

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or min(p.shape) < 1:
            raise ValueError(f"pixels must be (H, W, C) with positive dims, got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.source is Source.PRIMARY:
            if self.label is None or self.aux_label is not None:
                raise ValueError("primary samples need a leaf label and no aux label")
        elif self.aux_label is None:
            raise ValueError("auxiliary samples need an aux label")


@dataclass(frozen=True)
class DatasetSpec:
    n_per_class: int
    height: int = 32
    width: int = 32
    channels: int = 3
    seed: int = 0
    carcinoma_freq: float = 5.0
    sibling_freq: float = 2.0
    carcinoma_amp: float = 0.22
    sibling_amp: float = 0.18
    phase_jitter: float = 0.15
    noise: float = 0.08

    def __post_init__(self):
        if self.n_per_class < 4:
            raise ValueError("n_per_class must be >= 4")
        if min(self.height, self.width, self.channels) < 1:
            raise ValueError("image dims must be positive")
        if self.noise < 0 or self.phase_jitter < 0:
            raise ValueError("noise and phase_jitter must be non-negative")
        if self.carcinoma_amp < 0 or self.sibling_amp < 0:
            raise ValueError("amplitudes must be non-negative")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), int(index)]))


def _grid(height: int, width: int):
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    return v[:, None], u[None, :]


def carcinoma_pattern(height: int, width: int, freq: float, phase: float = 0.0) -> np.ndarray:
    """High-frequency diagonal grating marking the carcinoma superclass."""
    v, u = _grid(height, width)
    return np.sin(2.0 * np.pi * freq * (u + v) + phase)


def sibling_pattern(height: int, width: int, freq: float, phase: float = 0.0) -> np.ndarray:
    """Low-frequency vertical grating separating siblings."""
    v, u = _grid(height, width)
    return np.sin(2.0 * np.pi * freq * u + phase) + 0.0 * v


def _compose(spec: DatasetSpec, rng, with_carcinoma: bool, with_sibling: bool) -> np.ndarray:
    jc = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
    js = rng.uniform(-spec.phase_jitter, spec.phase_jitter)
    img = np.full((spec.height, spec.width), 0.5)
    if with_carcinoma:
        img = img + spec.carcinoma_amp * carcinoma_pattern(spec.height, spec.width, spec.carcinoma_freq, jc)
    if with_sibling:
        img = img + spec.sibling_amp * sibling_pattern(spec.height, spec.width, spec.sibling_freq, js)
    pixels = np.repeat(img[:, :, None], spec.channels, axis=2)
    if spec.noise > 0:
        pixels = pixels + rng.normal(0.0, spec.noise, size=pixels.shape)
    return np.clip(pixels, 0.0, 1.0)


def generate_synthetic(spec: DatasetSpec) -> list:
    """Balanced four-class dataset, ``n_per_class`` samples per leaf."""
    images = []
    for class_idx, label in enumerate(LEAF_ORDER):
        for j in range(spec.n_per_class):
            rng = _sample_rng(spec.seed, class_idx * spec.n_per_class + j)
            pixels = _compose(spec, rng, label in CARCINOMA_LEAVES, label in SIBLING_LEAVES)
            images.append(LabeledImage(pixels=pixels, label=label))
    return images


def generate_auxiliary(spec: DatasetSpec, n_benign: int, n_malignant: int, seed: int) -> list:
    """Small two-class side dataset: benign (no carcinoma signature, keeps a
    Benign leaf label) and malignant (signature present, no leaf label;
    sibling grating on half the samples)."""
    images = []
    for j in range(n_benign):
        rng = _sample_rng(seed, j)
        pixels = _compose(spec, rng, False, True)
        images.append(
            LabeledImage(pixels=pixels, label=LeafLabel.BENIGN, source=Source.AUXILIARY,
                         aux_label=AuxLabel.BENIGN_AUX)
        )
    for j in range(n_malignant):
        rng = _sample_rng(seed, n_benign + j)
        pixels = _compose(spec, rng, True, rng.random() < 0.5)
        images.append(
            LabeledImage(pixels=pixels, label=None, source=Source.AUXILIARY,
                         aux_label=AuxLabel.MALIGNANT_AUX)
        )
    return images


def generate_pretrain_task(height: int, width: int, channels: int, n_per_class: int, seed: int,
                           noise: float = 0.08):
    """Grating-vs-noise discrimination used to pretrain the generic model.

    Positive samples contain one grating with random orientation
    (horizontal, vertical, or either diagonal), frequency, amplitude, and
    phase; negatives are noise-only. Returns ``(pixels, labels)``.
    """
    v, u = _grid(height, width)
    axes = (u + 0.0 * v, v + 0.0 * u, u + v, u - v)
    stack, labels = [], []
    for cls in (0, 1):
        for j in range(n_per_class):
            rng = _sample_rng(seed, cls * n_per_class + j)
            img = np.full((height, width), 0.5)
            if cls == 1:
                axis = axes[int(rng.integers(0, len(axes)))]
                freq = rng.uniform(1.5, 6.0)
                amp = rng.uniform(0.12, 0.3)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                img = img + amp * np.sin(2.0 * np.pi * freq * axis + phase)
            pixels = np.repeat(img[:, :, None], channels, axis=2)
            if noise > 0:
                pixels = pixels + rng.normal(0.0, noise, size=pixels.shape)
            stack.append(np.clip(pixels, 0.0, 1.0))
            labels.append(cls)
    return np.stack(stack), np.array(labels)


# -- preprocessing -------------------------------------------------------------


def _axis_samples(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    lo, hi, w = _axis_samples(pixels.shape[0], out_h)
    rows = pixels[lo] * (1.0 - w)[:, None, None] + pixels[hi] * w[:, None, None]
    lo, hi, w = _axis_samples(pixels.shape[1], out_w)
    return rows[:, lo] * (1.0 - w)[None, :, None] + rows[:, hi] * w[None, :, None]


def resize_preserve_ratio(pixels: np.ndarray, target_short: int) -> np.ndarray:
    """Bilinear resize so the short side equals ``target_short``; the long
    side becomes ``round(target_short * aspect)``, preserving the ratio."""
    if target_short < 1:
        raise ValueError("target_short must be >= 1")
    if pixels.ndim != 3 or min(pixels.shape) < 1:
        raise ValueError(f"expected a non-degenerate (H, W, C) image, got {pixels.shape}")
    h, w = pixels.shape[:2]
    if h <= w:
        out_h, out_w = target_short, round(target_short * w / h)
    else:
        out_h, out_w = round(target_short * h / w), target_short
    return _resize_bilinear(pixels, out_h, out_w)


def center_crop(pixels: np.ndarray, side: int) -> np.ndarray:
    if side < 1:
        raise ValueError("crop side must be >= 1")
    h, w = pixels.shape[:2]
    if side > min(h, w):
        raise ValueError(f"crop side {side} exceeds image dims {h}x{w}")
    top = (h - side) // 2
    left = (w - side) // 2
    return pixels[top : top + side, left : left + side].copy()


# -- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    p_rotate: float = 0.0
    p_hflip: float = 0.0
    p_vflip: float = 0.0
    p_crop: float = 0.0
    crop_fraction: float = 0.875
    rotation_mode: str = "right_angle"  # or "any"
    max_angle_deg: float = 30.0

    def __post_init__(self):
        for p in (self.p_rotate, self.p_hflip, self.p_vflip, self.p_crop):
            if not 0.0 <= p <= 1.0:
                raise ValueError("augmentation probabilities must lie in [0, 1]")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("crop_fraction must lie in (0, 1]")
        if self.rotation_mode not in ("right_angle", "any"):
            raise ValueError(f"unknown rotation mode {self.rotation_mode!r}")

    @property
    def enabled(self) -> bool:
        return max(self.p_rotate, self.p_hflip, self.p_vflip, self.p_crop) > 0.0


def rotate90(pixels: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate by a multiple of 90 degrees. Odd turns require a square image."""
    k = quarter_turns % 4
    if k % 2 == 1 and pixels.shape[0] != pixels.shape[1]:
        raise ValueError("quarter-turn rotation needs a square image")
    return np.ascontiguousarray(np.rot90(pixels, k, axes=(0, 1)))


def _reflect_coords(coords: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(coords)
    period = 2.0 * (n - 1)
    m = np.abs(coords) % period
    return np.minimum(m, period - m)


def rotate_any(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Arbitrary-angle rotation about the center, bilinear sampling with
    mirror padding past the borders."""
    h, w = pixels.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    a = math.radians(angle_deg)
    sy = _reflect_coords(cy + yy * math.cos(a) + xx * math.sin(a), h)
    sx = _reflect_coords(cx - yy * math.sin(a) + xx * math.cos(a), w)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, :, None]
    wx = (sx - x0)[:, :, None]
    top = pixels[y0, x0] * (1 - wx) + pixels[y0, x1] * wx
    bottom = pixels[y1, x0] * (1 - wx) + pixels[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def augment(pixels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic augmentation pass; all-zero probabilities are the
    identity. Output shape and pixel range match the input."""
    out = pixels
    if cfg.p_rotate > 0 and rng.random() < cfg.p_rotate:
        if cfg.rotation_mode == "right_angle":
            out = rotate90(out, int(rng.integers(0, 4)))
        else:
            out = rotate_any(out, rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg))
    if cfg.p_hflip > 0 and rng.random() < cfg.p_hflip:
        out = out[:, ::-1]
    if cfg.p_vflip > 0 and rng.random() < cfg.p_vflip:
        out = out[::-1]
    if cfg.p_crop > 0 and rng.random() < cfg.p_crop:
        h, w = out.shape[:2]
        side = round(cfg.crop_fraction * min(h, w))
        if side < 1 or side > min(h, w):
            raise ValueError(f"crop side {side} invalid for image dims {h}x{w}")
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        out = _resize_bilinear(out[top : top + side, left : left + side], h, w)
        out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out)


# -- splitting and relabeling ---------------------------------------------------


def stratified_split(images: list, spec: SplitSpec):
    """Disjoint (train, val) partition.

    Per-class train counts follow a largest-remainder allocation so the
    global train size equals ``round(train_fraction * N)`` while every
    class stays within one sample of the target fraction.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed) & (2**63 - 1)))
    n = len(images)
    target = round(spec.train_fraction * n)
    if not spec.stratified:
        perm = rng.permutation(n)
        train_idx = set(perm[:target].tolist())
        train = [images[i] for i in range(n) if i in train_idx]
        val = [images[i] for i in range(n) if i not in train_idx]
        return train, val

    by_class: dict = {label: [] for label in LEAF_ORDER}
    for i, img in enumerate(images):
        if img.label is None:
            raise DataError("stratified split needs leaf labels on every sample")
        by_class[img.label].append(i)
    present = [label for label in LEAF_ORDER if by_class[label]]
    for label in present:
        if len(by_class[label]) < 2:
            raise DataError(f"stratification needs >= 2 samples per class, {label.value} has "
                            f"{len(by_class[label])}")

    exact = [spec.train_fraction * len(by_class[label]) for label in present]
    counts = [math.floor(e) for e in exact]
    extras = target - sum(counts)
    order = sorted(range(len(present)), key=lambda c: (-(exact[c] - counts[c]), c))
    for c in order[: max(extras, 0)]:
        counts[c] += 1

    train_idx = set()
    for label, take in zip(present, counts):
        idx = np.array(by_class[label])
        rng.shuffle(idx)
        train_idx.update(idx[:take].tolist())
    train = [images[i] for i in range(n) if i in train_idx]
    val = [images[i] for i in range(n) if i not in train_idx]
    return train, val


_NODE_LABEL_MAP = {
    "norbe": (LeafLabel.NORMAL, LeafLabel.BENIGN),
    "invis": (LeafLabel.IN_SITU, LeafLabel.INVASIVE),
}


def node_relabel(images: list, node: str):
    """Binary training view of a node: root keeps everything with the
    superclass as the label; children keep only their two leaves."""
    if node == "carci":
        kept = [img for img in images if img.label is not None]
        labels = [superclass_of(img.label) for img in kept]
        return kept, np.array(labels, dtype=np.intp)
    if node not in _NODE_LABEL_MAP:
        raise ValueError(f"unknown node {node!r}")
    zero, one = _NODE_LABEL_MAP[node]
    kept = [img for img in images if img.label in (zero, one)]
    labels = [0 if img.label is zero else 1 for img in kept]
    return kept, np.array(labels, dtype=np.intp)


def merge_auxiliary(primary: list, aux: list, node: str):
    """Node-level training set with auxiliary samples folded in.

    Root: malignant auxiliaries join the carcinoma class, benign ones the
    other. Normal/Benign node: benign auxiliaries join as Benign. The
    InSitu/Invasive node takes nothing from the side dataset.
    """
    images, labels = node_relabel(primary, node)
    images = list(images)
    labels = list(labels)
    if node == "carci":
        for img in aux:
            images.append(img)
            labels.append(1 if img.aux_label is AuxLabel.MALIGNANT_AUX else 0)
    elif node == "norbe":
        for img in aux:
            if img.aux_label is AuxLabel.BENIGN_AUX:
                images.append(img)
                labels.append(1)
    elif node != "invis":
        raise ValueError(f"unknown node {node!r}")
    return images, np.array(labels, dtype=np.intp)


# -- array helpers ---------------------------------------------------------------


def stack_pixels(images: list) -> np.ndarray:
    return np.stack([img.pixels for img in images])


def flatten_pixels(pixels: np.ndarray) -> np.ndarray:
    """Row-major flatten of (n, H, W, C) into (n, H*W*C)."""
    return np.ascontiguousarray(pixels).reshape(pixels.shape[0], -1)


# -- on-disk format ---------------------------------------------------------------

_MAGIC = b"HIMG"


def write_image(path: str, pixels: np.ndarray) -> None:
    """Portable binary: magic, uint32 H/W/C, then little-endian float64."""
    from .ioutil import atomic_write_bytes

    h, w, c = pixels.shape
    header = _MAGIC + struct.pack("<III", h, w, c)
    atomic_write_bytes(path, header + np.ascontiguousarray(pixels, dtype="<f8").tobytes())


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise DataError(f"not an image file: {path}")
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + h * w * c * 8
    if len(blob) != expected:
        raise DataError(f"truncated image file: {path}")
    return np.frombuffer(blob[16:], dtype="<f8").reshape(h, w, c).astype(np.float64)


def save_split_dirs(root: str, train: list, val: list, aux: list | None = None) -> None:
    for subset, images in (("train", train), ("val", val)):
        for i, img in enumerate(images):
            path = os.path.join(root, subset, img.label.value, f"{i:05d}.himg")
            write_image(path, img.pixels)
    for i, img in enumerate(aux or []):
        path = os.path.join(root, "aux", img.aux_label.value, f"{i:05d}.himg")
        write_image(path, img.pixels)


def _load_labeled_dir(root: str, subset: str) -> list:
    base = os.path.join(root, subset)
    if not os.path.isdir(base):
        raise DataError(f"dataset subset not found: {base}")
    images = []
    for label in LEAF_ORDER:
        class_dir = os.path.join(base, label.value)
        if not os.path.isdir(class_dir):
            continue
        for name in sorted(os.listdir(class_dir)):
            if name.endswith(".himg"):
                images.append(LabeledImage(pixels=read_image(os.path.join(class_dir, name)),
                                           label=label))
    if not images:
        raise DataError(f"no samples under {base}")
    return images


def load_split_dirs(root: str):
    return _load_labeled_dir(root, "train"), _load_labeled_dir(root, "val")


def load_aux_dir(root: str) -> list:
    base = os.path.join(root, "aux")
    if not os.path.isdir(base):
        return []
    images = []
    for aux_label, leaf in ((AuxLabel.BENIGN_AUX, LeafLabel.BENIGN), (AuxLabel.MALIGNANT_AUX, None)):
        class_dir = os.path.join(base, aux_label.value)
        if not os.path.isdir(class_dir):
            continue
        for name in sorted(os.listdir(class_dir)):
            if name.endswith(".himg"):
                images.append(
                    LabeledImage(pixels=read_image(os.path.join(class_dir, name)), label=leaf,
                                 source=Source.AUXILIARY, aux_label=aux_label)
                )
    return images
