"""Per-block pixel normalisation and the next-block reconstruction loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import valid_slots

L2 = "l2"
L1 = "l1"


@dataclass
class BlockTargets:
    values: np.ndarray  # [B, K, D_blk], normalised
    mean: np.ndarray  # [B, K]
    var: np.ndarray  # [B, K]
    eps: float = 1e-6


def normalize_blocks(raw: np.ndarray, eps: float = 1e-6) -> BlockTargets:
    """Standardise every (image, block) row with its own population mean and variance."""
    raw = np.asarray(raw)
    mean = raw.mean(axis=-1)
    var = raw.var(axis=-1)
    values = (raw - mean[..., None]) / np.sqrt(var[..., None] + eps)
    return BlockTargets(values, mean, var, eps)


def slot_targets(targets: BlockTargets, num_predicted: int) -> tuple[np.ndarray, np.ndarray]:
    """Targets aligned with prediction slots plus the ``[K-1, M]`` validity mask.

    Invalid slots are filled with zeros. Rank 0 never appears as a target.
    """
    B, K, D = targets.values.shape
    valid = valid_slots(K, num_predicted)
    rank = np.minimum(np.arange(K - 1)[:, None] + 1 + np.arange(num_predicted)[None, :], K - 1)
    aligned = targets.values[:, rank, :] * valid[None, :, :, None]
    return aligned.astype(targets.values.dtype), valid


def reconstruction_loss(pred: Tensor, targets: BlockTargets, norm: str = L2) -> Tensor:
    """Summed per-slot error norm averaged over images and valid slots.

    For one predicted block per step this is the mean over ``N (K-1)``
    transitions of the squared L2 distance between predicted and normalised
    block pixels, with no division by the block's pixel count.
    """
    B, Km1, M, D = pred.shape
    if Km1 < 1:
        raise ValueError("reconstruction loss needs at least two blocks")
    aligned, valid = slot_targets(targets, M)
    if aligned.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match targets {aligned.shape}")
    diff = (pred - aligned.astype(pred.dtype)) * valid[None, :, :, None].astype(pred.dtype)
    if norm == L2:
        per = diff * diff
    elif norm == L1:
        per = ag.abs_(diff)
    else:
        raise ValueError(f"unknown loss norm {norm!r}")
    return per.sum() * (1.0 / (B * int(valid.sum())))
