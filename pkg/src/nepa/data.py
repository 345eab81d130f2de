"""Deterministic data pipeline.

A procedural shape dataset stands in for a web-scale corpus: every sample is
a pure function of (spec, index) through a counter-based rng, so the stream
is order-independent and resumable. A folder loader accepts real images laid
out as ``root/<class>/<file>`` in PNG or binary PPM. Fine-tuning keeps the
load-bearing regularizers at this scale: random-resized-crop, mixup, cutmix,
and label smoothing.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DatasetError
from .imagefile import read_image, write_png, write_ppm
from .rng import make_rng

DEFAULT_CLASSES = ("disk", "square", "triangle", "cross")


@dataclass
class ImageSample:
    pixels: np.ndarray  # [C,H,W] float32 in [0,1]
    label: int
    id: int


@dataclass
class SynthSpec:
    classes: tuple = DEFAULT_CLASSES
    image_size: int = 32
    noise_std: float = 0.05
    pos_jitter: float = 0.2      # center offset, fraction of image size
    scale_range: tuple = (0.25, 0.42)  # shape radius, fraction of image size
    rot_jitter: float = math.pi  # rotation drawn from [-rot_jitter, rot_jitter]
    color_mode: str = "contrast"  # "contrast" | "random" | "mono"
    seed: int = 0

    def validate(self) -> None:
        if not self.classes:
            raise ConfigError("synthetic dataset needs at least one class")
        bad = [c for c in self.classes if c not in DEFAULT_CLASSES]
        if bad:
            raise ConfigError(f"unknown shape classes {bad}; choose from {DEFAULT_CLASSES}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        lo, hi = self.scale_range
        if not (0 < lo <= hi < 0.5):
            raise ConfigError(f"scale_range {self.scale_range} outside (0, 0.5)")
        if self.color_mode not in ("contrast", "random", "mono"):
            raise ConfigError(f"unknown color_mode {self.color_mode!r}")


def shape_mask(kind: str, image_size: int, cx: float, cy: float, radius: float,
               theta: float) -> np.ndarray:
    """Boolean occupancy of a shape on the pixel grid (pixel centers at +0.5)."""
    coords = np.arange(image_size, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    ct, st = math.cos(theta), math.sin(theta)
    rx = ct * dx + st * dy
    ry = -st * dx + ct * dy
    if kind == "disk":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        half = radius * 0.82
        return np.maximum(np.abs(rx), np.abs(ry)) <= half
    if kind == "triangle":
        inside = np.ones_like(rx, dtype=bool)
        angles = theta + np.array([math.pi / 2, math.pi / 2 + 2 * math.pi / 3,
                                   math.pi / 2 + 4 * math.pi / 3])
        vx = cx + radius * np.cos(angles)
        vy = cy + radius * np.sin(angles)
        for i in range(3):
            ex, ey = vx[(i + 1) % 3] - vx[i], vy[(i + 1) % 3] - vy[i]
            inside &= (ex * (yy - vy[i]) - ey * (xx - vx[i])) >= 0
        return inside
    if kind == "cross":
        width = radius * 0.33
        arm = radius
        return ((np.abs(rx) <= width) & (np.abs(ry) <= arm)) | \
               ((np.abs(ry) <= width) & (np.abs(rx) <= arm))
    raise ConfigError(f"unknown shape kind {kind!r}")


def synth_generate(spec: SynthSpec, index: int) -> ImageSample:
    """Render sample ``index``: class = index mod n_classes, jitter keyed on
    (seed, index). Same arguments, bit-identical pixels."""
    spec.validate()
    n = spec.image_size
    label = index % len(spec.classes)
    kind = spec.classes[label]
    rng = make_rng(spec.seed, index, 0xDA7A)

    jit = spec.pos_jitter * n
    cx = n / 2.0 + rng.uniform(-jit, jit)
    cy = n / 2.0 + rng.uniform(-jit, jit)
    radius = rng.uniform(*spec.scale_range) * n
    theta = rng.uniform(-spec.rot_jitter, spec.rot_jitter)

    if spec.color_mode == "contrast":
        # random hues at guaranteed luminance separation: class information
        # lives in geometry without drowning it in color nuisance
        bg = rng.uniform(0.0, 0.3, size=3)
        fg = rng.uniform(0.7, 1.0, size=3)
    elif spec.color_mode == "random":
        bg = rng.uniform(0.05, 0.95, size=3)
        fg = rng.uniform(0.05, 0.95, size=3)
        if np.abs(fg - bg).mean() < 0.25:
            fg = 1.0 - bg
    else:
        bg = np.zeros(3)
        fg = np.ones(3)

    mask = shape_mask(kind, n, cx, cy, radius, theta)
    img = np.empty((3, n, n), dtype=np.float64)
    for ch in range(3):
        img[ch] = np.where(mask, fg[ch], bg[ch])
    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels=img, label=label, id=index)


class SynthDataset:
    """Window of ``count`` samples starting at ``offset`` in the synthetic stream."""

    def __init__(self, spec: SynthSpec, count: int, offset: int = 0):
        spec.validate()
        if count <= 0:
            raise ConfigError("dataset size must be positive")
        self.spec = spec
        self.count = count
        self.offset = offset
        self.class_names = list(spec.classes)
        self.image_shape = (3, spec.image_size, spec.image_size)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.count

    def sample(self, i: int) -> ImageSample:
        if not 0 <= i < self.count:
            raise IndexError(f"index {i} out of range for size {self.count}")
        return synth_generate(self.spec, self.offset + i)


class NoiseDataset:
    """Uniform-noise images, label 0; the stress input for collapse probes."""

    def __init__(self, image_size: int, count: int, seed: int = 0, channels: int = 3):
        self.image_size = image_size
        self.count = count
        self.seed = seed
        self.channels = channels
        self.class_names = ["noise"]
        self.image_shape = (channels, image_size, image_size)

    @property
    def n_classes(self) -> int:
        return 1

    def __len__(self) -> int:
        return self.count

    def sample(self, i: int) -> ImageSample:
        rng = make_rng(self.seed, i, 0x015E)
        pixels = rng.uniform(0.0, 1.0, size=self.image_shape).astype(np.float32)
        return ImageSample(pixels=pixels, label=0, id=i)


class FolderDataset:
    """Labeled images from ``root/<class>/<file>`` in stable lexicographic order."""

    def __init__(self, root):
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"{root}: not a directory")
        class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
        if not class_dirs:
            raise DatasetError(f"{root}: no class subdirectories")
        self.class_names = [d.name for d in class_dirs]
        self.items: list[tuple[Path, int]] = []
        self._cache: list[np.ndarray] = []
        self.skipped = 0
        shape = None
        for label, d in enumerate(class_dirs):
            files = sorted(p for p in d.iterdir() if p.is_file())
            kept = 0
            for p in files:
                try:
                    img = read_image(p)
                except DatasetError as e:
                    warnings.warn(f"skipping undecodable file: {e}")
                    self.skipped += 1
                    continue
                chw = np.ascontiguousarray(np.transpose(img, (2, 0, 1)))
                if chw.shape[0] == 1:
                    chw = np.repeat(chw, 3, axis=0)
                if shape is None:
                    shape = chw.shape
                elif chw.shape != shape:
                    raise DatasetError(
                        f"{p}: image shape {chw.shape} differs from {shape}; "
                        "all images must share one size")
                self.items.append((p, label))
                self._cache.append(chw)
                kept += 1
            if kept == 0:
                raise DatasetError(f"{d}: class directory has no decodable images")
        self.image_shape = shape

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.items)

    def sample(self, i: int) -> ImageSample:
        return ImageSample(pixels=self._cache[i], label=self.items[i][1], id=i)


def export_folder(dataset, root, fmt: str = "png", limit: Optional[int] = None) -> int:
    """Write a dataset out as ``root/<class>/<id>.<fmt>`` for inspection."""
    root = Path(root)
    n = len(dataset) if limit is None else min(limit, len(dataset))
    writer = {"png": write_png, "ppm": write_ppm}.get(fmt)
    if writer is None:
        raise ConfigError(f"unknown export format {fmt!r}")
    for i in range(n):
        s = dataset.sample(i)
        d = root / dataset.class_names[s.label]
        d.mkdir(parents=True, exist_ok=True)
        writer(d / f"{s.id:06d}.{fmt}", np.transpose(s.pixels, (1, 2, 0)))
    return n


# ---------------------------------------------------------------------------
# augmentations


@dataclass
class AugmentConfig:
    rrc_scale: tuple = (0.2, 1.0)
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    label_smoothing: float = 0.1
    use_rrc: bool = False
    use_mixup: bool = True
    use_cutmix: bool = True

    def validate(self) -> None:
        lo, hi = self.rrc_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"rrc_scale {self.rrc_scale} outside (0, 1]")
        if self.mixup_alpha <= 0 or self.cutmix_alpha <= 0:
            raise ConfigError("mixup/cutmix alpha must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must be in [0,1)")


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [C,H,W] with half-pixel centers and edge clamping."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def random_resized_crop(img: np.ndarray, rng: np.random.Generator,
                        scale: tuple, out_size: int) -> np.ndarray:
    """Sample an area fraction and aspect ratio in [3/4, 4/3], crop, resize."""
    lo, hi = scale
    if not (0 < lo <= hi <= 1):
        raise ConfigError(f"rrc scale {scale} outside (0, 1]")
    c, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(lo, hi) * area
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[:, top:top + ch, left:left + cw]
            return bilinear_resize(crop, out_size, out_size)
    # fallback: center square
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return bilinear_resize(img[:, top:top + side, left:left + side], out_size, out_size)


def smooth_labels(onehot: np.ndarray, eps: float, k: int) -> np.ndarray:
    """True class 1-eps+eps/K, all others eps/K."""
    if not 0 <= eps < 1:
        raise ConfigError(f"label smoothing {eps} outside [0,1)")
    return onehot * (1.0 - eps) + eps / k


def mixup_cutmix(images: np.ndarray, onehots: np.ndarray, cfg: AugmentConfig,
                 rng: np.random.Generator):
    """Blend a batch with a permuted partner; returns (images, labels, info).

    Picks mixup or cutmix 50/50 when both are enabled. Cutmix pastes a
    rectangle and sets the label weight to the realized area fraction.
    """
    cfg.validate()
    b, c, h, w = images.shape
    if b % 2 != 0:
        raise ConfigError(f"mixup/cutmix needs an even batch, got {b}")
    if not (cfg.use_mixup or cfg.use_cutmix):
        return images, onehots, {"mode": "none", "lam": 1.0}
    if cfg.use_mixup and cfg.use_cutmix:
        mode = "mixup" if rng.random() < 0.5 else "cutmix"
    else:
        mode = "mixup" if cfg.use_mixup else "cutmix"
    perm = rng.permutation(b)
    if mode == "mixup":
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        mixed = lam * images + (1.0 - lam) * images[perm]
        labels = lam * onehots + (1.0 - lam) * onehots[perm]
        return mixed.astype(images.dtype), labels, {"mode": mode, "lam": lam}
    lam = float(rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha))
    cut = math.sqrt(1.0 - lam)
    ch_, cw_ = int(round(h * cut)), int(round(w * cut))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y1, y2 = max(cy - ch_ // 2, 0), min(cy + (ch_ + 1) // 2, h)
    x1, x2 = max(cx - cw_ // 2, 0), min(cx + (cw_ + 1) // 2, w)
    mixed = images.copy()
    mixed[:, :, y1:y2, x1:x2] = images[perm][:, :, y1:y2, x1:x2]
    lam_area = 1.0 - (y2 - y1) * (x2 - x1) / (h * w)
    labels = lam_area * onehots + (1.0 - lam_area) * onehots[perm]
    return mixed, labels, {"mode": mode, "lam": lam_area}


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# batching


def worker_threads() -> int:
    """Thread cap from NEPA_THREADS; 1 disables the pool."""
    raw = os.environ.get("NEPA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NEPA_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def batch_iter(dataset, batch_size: int, shuffle_seed: int, epoch: int,
               shuffle: bool = True, drop_last: bool = True,
               threads: Optional[int] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images [B,C,H,W], labels [B]) batches.

    The permutation is a pure function of (shuffle_seed, epoch); prefetch
    threads never change the delivered order.
    """
    n = len(dataset)
    if shuffle:
        order = make_rng(shuffle_seed, epoch, 0x0BDE).permutation(n)
    else:
        order = np.arange(n)
    threads = worker_threads() if threads is None else max(1, threads)
    pool = None
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        pool = ThreadPoolExecutor(max_workers=threads)
    try:
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            if pool is not None:
                samples = list(pool.map(dataset.sample, idx))
            else:
                samples = [dataset.sample(i) for i in idx]
            images = np.stack([s.pixels for s in samples]).astype(np.float32)
            labels = np.array([s.label for s in samples], dtype=np.int64)
            yield images, labels
    finally:
        if pool is not None:
            pool.shutdown()
