"""XID dataset files, a synthetic image generator, augmentations and batching."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

XID_MAGIC = b"XID1"
XID_VERSION = 1
_HEADER = struct.Struct("<4sIIHHHH")


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] uint8
    labels: np.ndarray  # [N] uint16
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class Batch:
    pixels: np.ndarray  # [B, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [B]
    indices: np.ndarray  # dataset rows in this batch


def save_xid(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    rec = np.empty(n, dtype=[("label", "<u2"), ("pixels", "u1", (c * h * w,))])
    rec["label"] = dataset.labels
    rec["pixels"] = dataset.images.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(XID_MAGIC, XID_VERSION, n, c, h, w, dataset.num_classes))
        f.write(rec.tobytes())


def load_xid(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file is {len(raw)} bytes, header needs {_HEADER.size} (offset 0)")
    magic, version, n, c, h, w, num_classes = _HEADER.unpack_from(raw, 0)
    if magic != XID_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != XID_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    rec_size = 2 + c * h * w
    need = _HEADER.size + n * rec_size
    if len(raw) < need:
        complete = (len(raw) - _HEADER.size) // rec_size
        raise FormatError(f"truncated: header declares {n} records, file holds {complete}; "
                          f"record {complete} starts at offset {_HEADER.size + complete * rec_size}")
    rec = np.frombuffer(raw, dtype=[("label", "<u2"), ("pixels", "u1", (c * h * w,))],
                        count=n, offset=_HEADER.size)
    return Dataset(rec["pixels"].reshape(n, c, h, w).copy(), rec["label"].copy(), num_classes)


# synthetic data ---------------------------------------------------------------
def synth_dataset(classes: int, count: int, size: int = 32, seed: int = 0,
                  channels: int = 3, noise: float = 0.03) -> Dataset:
    """Images whose class sets the stripe orientation and, weakly, the base hue.

    Each image is a low-frequency sinusoidal grating with a class-specific
    direction, a random phase and period, tinted by a class colour blended
    with a random per-image colour, plus Gaussian pixel noise.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    palette = np.random.default_rng(10_007).uniform(0.25, 0.75, size=(classes, channels))
    labels = rng.integers(0, classes, size=count)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = np.empty((count, channels, size, size), dtype=np.uint8)
    for i, c in enumerate(labels):
        theta = math.pi * c / classes + rng.normal(0.0, 0.05)
        period = rng.uniform(0.35, 0.6)
        phase = rng.uniform(0.0, 2 * math.pi)
        wave = np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period + phase)
        tint = 0.5 * palette[c] + 0.5 * rng.uniform(0.25, 0.75, size=channels)
        amp = rng.uniform(0.15, 0.25)
        img = tint[:, None, None] + amp * wave[None] + rng.normal(0.0, noise, size=(channels, size, size))
        images[i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.uint16), classes)


# augmentation -----------------------------------------------------------------
def _randint(rng: np.random.Generator, n: int) -> int:
    # float draws only, so the generator never buffers half-words
    return min(int(rng.random() * n), n - 1)


def sample_crop_box(height: int, width: int, scale, ratio, rng) -> tuple[int, int, int, int]:
    """``(top, left, h, w)`` of a random-resized-crop window."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            return _randint(rng, height - h + 1), _randint(rng, width - w + 1), h, w
    in_ratio = width / height
    if in_ratio < min(ratio):
        w, h = width, int(round(width / min(ratio)))
    elif in_ratio > max(ratio):
        h, w = height, int(round(height * max(ratio)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` with half-pixel centres and edge clamping."""
    _, h, w = image.shape

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(image.dtype)

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top, bot = image[:, r0, :], image[:, r1, :]
    rows = top + (bot - top) * fr[None, :, None]
    left, right = rows[:, :, c0], rows[:, :, c1]
    return left + (right - left) * fc[None, None, :]


def random_resized_crop(image: np.ndarray, scale=(0.3, 1.0), ratio=(0.75, 1.33),
                        out_size=None, rng=None) -> np.ndarray:
    _, h, w = image.shape
    out_h, out_w = (h, w) if out_size is None else (out_size, out_size) if np.isscalar(out_size) else out_size
    top, left, ch, cw = sample_crop_box(h, w, scale, ratio, rng)
    return resize_bilinear(image[:, top:top + ch, left:left + cw], out_h, out_w)


def horizontal_flip(image: np.ndarray, p: float = 0.5, rng=None) -> np.ndarray:
    if p > 0 and (p >= 1 or rng.random() < p):
        return image[..., ::-1].copy()
    return image


@dataclass
class AugmentConfig:
    enabled: bool = True
    scale: tuple[float, float] = (0.3, 1.0)
    ratio: tuple[float, float] = (0.75, 1.33)
    flip_p: float = 0.5


PRETRAIN_AUGMENT = AugmentConfig()
PROBE_AUGMENT = AugmentConfig(scale=(0.08, 1.0))


def to_float(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float32) / np.float32(255.0)


def augment_image(image: np.ndarray, cfg: AugmentConfig, rng, out_size=None) -> np.ndarray:
    img = random_resized_crop(image, cfg.scale, cfg.ratio, out_size, rng)
    img = horizontal_flip(img, cfg.flip_p, rng)
    return np.clip(img, 0.0, 1.0)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_epoch_batches(dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0,
                       augment: AugmentConfig | None = None, mode: str = "pretrain",
                       start_batch: int = 0) -> Iterator[Batch]:
    """Seeded batches for one epoch.

    ``mode="pretrain"`` drops the last partial batch; ``"eval"`` keeps it.
    Augmentation randomness is derived from ``(seed, epoch, batch)`` so any
    batch can be regenerated on its own, e.g. after resuming mid-epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = epoch_order(len(dataset), seed, epoch)
    n_full, rest = divmod(len(order), batch_size)
    n_batches = n_full if mode == "pretrain" or rest == 0 else n_full + 1
    for b in range(start_batch, n_batches):
        idx = order[b * batch_size:(b + 1) * batch_size]
        pixels = to_float(dataset.images[idx])
        if augment is not None and augment.enabled:
            rng = np.random.default_rng([seed, epoch, b, 1])
            pixels = np.stack([augment_image(img, augment, rng) for img in pixels]).astype(np.float32)
        yield Batch(pixels, dataset.labels[idx].astype(np.int64), idx)


def num_batches(n: int, batch_size: int, mode: str = "pretrain") -> int:
    return n // batch_size if mode == "pretrain" else -(-n // batch_size)
