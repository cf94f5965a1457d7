"""Teacher-forced block-by-block reconstruction and PPM grid rendering."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autograd as ag
from .model import EVAL, XTRAModel, blocks_to_image, image_blocks
from .objective import normalize_blocks
from .validation import check_images


def teacher_forced_predict(params, model: XTRAModel, images) -> np.ndarray:
    """Normalised prediction of every block from the ground-truth blocks before it.

    Returns ``[B, K, D_blk]`` (or ``[K, D_blk]`` for one image). Row 0 holds
    zeros: nothing predicts the first block. One masked forward pass is
    enough because the mask already hides every later block.
    """
    single = np.asarray(images).ndim == 3
    images = check_images(images, model.config.layout)
    with ag.no_grad():
        pred = model.forward(params, images, EVAL).data  # [B, K-1, M, D]
    B, Km1, _, D = pred.shape
    out = np.zeros((B, Km1 + 1, D), dtype=pred.dtype)
    out[:, 1:] = pred[:, :, 0]
    return out[0] if single else out


def denormalize_block(pred_norm, mean, var, eps: float = 1e-6, clamp: bool = True) -> np.ndarray:
    out = np.asarray(pred_norm) * np.sqrt(np.asarray(var)[..., None] + eps) + np.asarray(mean)[..., None]
    return np.clip(out, 0.0, 1.0) if clamp else out


def reconstruct(params, model: XTRAModel, images) -> np.ndarray:
    """Images rebuilt from teacher-forced predictions, de-normalised with each
    predicted block's own ground-truth statistics. The first block is copied
    from the input unchanged."""
    images = check_images(images, model.config.layout)
    layout = model.config.layout
    raw = image_blocks(images, layout)
    stats = normalize_blocks(raw)
    pred = teacher_forced_predict(params, model, images)
    blocks = denormalize_block(pred, stats.mean, stats.var, stats.eps)
    blocks[:, 0] = raw[:, 0]
    return blocks_to_image(blocks.astype(np.float32), layout)


def _to_rgb_bytes(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    elif img.shape[0] != 3:
        raise ValueError(f"cannot render {img.shape[0]} channels")
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def render_grid(originals, reconstructions, path) -> Path:
    """Write a binary PPM with one row per image: original on the left, reconstruction on the right."""
    originals = np.asarray(originals)
    reconstructions = np.asarray(reconstructions)
    if originals.shape != reconstructions.shape or originals.ndim != 4:
        raise ValueError("need equally shaped [N, C, H, W] originals and reconstructions")
    rows = [np.concatenate([_to_rgb_bytes(o), _to_rgb_bytes(r)], axis=1)
            for o, r in zip(originals, reconstructions)]
    grid = np.concatenate(rows, axis=0)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P6\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        f.write(grid.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 file into ``[H, W, 3]`` uint8."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
