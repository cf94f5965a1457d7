"""Pre-training loop: AdamW, warmup + cosine schedule, clipping, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .data import AugmentConfig, Dataset, make_epoch_batches, num_batches
from .model import TRAIN, ModelConfig, XTRAModel, image_blocks, init_parameters, is_no_decay
from .objective import L2, normalize_blocks, reconstruction_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"XCKP"
CKPT_VERSION = 1
RNG_PCG64 = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    batch_size: int = 64
    warmup_epochs: int = 1
    total_epochs: int = 20
    grad_clip: float = 1.0
    seed: int = 0
    loss: str = L2
    augment: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.min_lr <= self.peak_lr:
            raise ValueError("need 0 < min_lr <= peak_lr")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to ``min_lr``."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step < warm:
        return cfg.peak_lr * step / warm
    t = min(max((step - warm) / max(total - warm, 1), 0.0), 1.0)
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def adamw_step(params, grads, state: OptimizerState, lr: float, cfg: TrainConfig):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name!r} at step {state.step}")
    b1, b2 = cfg.betas
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        if cfg.weight_decay and not is_no_decay(name):
            p = p * (1.0 - lr * cfg.weight_decay)
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_params[name] = p.astype(params[name].dtype)
        new_m[name] = m.astype(params[name].dtype)
        new_v[name] = v.astype(params[name].dtype)
    return new_params, OptimizerState(t, new_m, new_v)


# checkpoints ------------------------------------------------------------------
@dataclass
class Checkpoint:
    step: int
    rng_state: dict
    tensors: dict[str, np.ndarray]

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def optimizer(self) -> OptimizerState:
        m = {k[len("adam.m/"):]: v for k, v in self.tensors.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: x for k, x in self.tensors.items() if k.startswith("adam.v/")}
        return OptimizerState(self.step, m, v)


def _rng_bytes(bitgen_state: dict) -> bytes:
    if bitgen_state["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generators can be checkpointed")
    if bitgen_state.get("has_uint32"):
        raise CheckpointError("generator holds a buffered half-word; state is not 32 bytes")
    s = bitgen_state["state"]
    return s["state"].to_bytes(16, "little") + s["inc"].to_bytes(16, "little")


def _rng_state(raw: bytes) -> dict:
    return {"bit_generator": "PCG64",
            "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
            "has_uint32": 0, "uinteger": 0}


def save_checkpoint(path, params, opt_state: OptimizerState, rng: np.random.Generator, step: int) -> None:
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({f"adam.m/{k}": v for k, v in opt_state.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in opt_state.v.items()})
    chunks = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, step),
              struct.pack("<I", RNG_PCG64), _rng_bytes(rng.bit_generator.state),
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode()
        chunks += [struct.pack("<H", len(encoded)), encoded,
                   struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim),
                   struct.pack(f"<{arr.ndim}Q", *arr.shape), np.ascontiguousarray(arr).tobytes()]
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    pos = 0

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, file has {len(raw)}")
        out = raw[pos:pos + n]
        pos += n
        return out

    if read(4) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, step = struct.unpack("<IQ", read(12))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (algo,) = struct.unpack("<I", read(4))
    if algo != RNG_PCG64:
        raise CheckpointError(f"unknown RNG algorithm id {algo}")
    rng_state = _rng_state(read(32))
    (count,) = struct.unpack("<I", read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode()
        tag, ndim = struct.unpack("<BB", read(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(read(nbytes), dtype=dtype).reshape(shape).copy()
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after tensor table")
    return Checkpoint(int(step), rng_state, tensors)


def check_against_config(params: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    from .model import parameter_shapes

    expected = parameter_shapes(cfg)
    if set(expected) != set(params):
        missing, extra = set(expected) - set(params), set(params) - set(expected)
        raise CheckpointError(f"parameter names differ from config (missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name}: checkpoint shape {params[name].shape}, config expects {shape}")


def write_run_config(directory, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> Path:
    path = Path(directory) / "config.json"
    doc = {"model": model_cfg.to_dict()}
    if train_cfg is not None:
        doc["train"] = asdict(train_cfg)
    path.write_text(json.dumps(doc, indent=2))
    return path


def read_run_config(checkpoint_path) -> ModelConfig:
    path = Path(checkpoint_path).parent / "config.json"
    if not path.exists():
        raise FileNotFoundError(f"no config.json next to {checkpoint_path}")
    return ModelConfig.from_dict(json.loads(path.read_text())["model"])


# training ---------------------------------------------------------------------
@dataclass
class TrainingLog:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    params: dict[str, np.ndarray] | None = None
    steps: int = 0


def pretrain(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset,
             checkpoint_dir=None, resume=None, stop_after: int | None = None,
             param_seed: int | None = None,
             on_step: Callable[[int, float], None] | None = None) -> TrainingLog:
    """Train on next-block reconstruction.

    ``stop_after`` halts after that many global steps (used to emulate an
    interrupted run); a checkpoint is written at the stopping point when a
    directory is given.
    """
    lay = model_cfg.layout
    if dataset.image_shape != (lay.channels, lay.height, lay.width):
        raise ValueError(f"dataset images {dataset.image_shape} do not match layout "
                         f"{(lay.channels, lay.height, lay.width)}")
    spe = num_batches(len(dataset), train_cfg.batch_size, "pretrain")
    if spe == 0:
        raise ValueError("dataset smaller than one batch")
    total_steps = spe * train_cfg.total_epochs
    model = XTRAModel(model_cfg)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(ckpt_dir, model_cfg, train_cfg)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        params = ckpt.params()
        check_against_config(params, model_cfg)
        opt = ckpt.optimizer()
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
    else:
        seed = train_cfg.seed if param_seed is None else param_seed
        params = init_parameters(model_cfg, seed)
        opt = OptimizerState()
        rng = np.random.default_rng([train_cfg.seed, 7])

    augment = AugmentConfig() if train_cfg.augment else None
    run_log = TrainingLog()
    step = opt.step
    with ag.single_threaded():
        while step < total_steps:
            epoch, first_batch = divmod(step, spe)
            epoch_losses = []
            for batch in make_epoch_batches(dataset, train_cfg.batch_size, train_cfg.seed, epoch,
                                            augment, "pretrain", start_batch=first_batch):
                leaves = {k: ag.Tensor(v, requires_grad=True) for k, v in params.items()}
                pred = model.forward(leaves, batch.pixels, TRAIN, rng)
                targets = normalize_blocks(image_blocks(batch.pixels, lay))
                loss = reconstruction_loss(pred, targets, train_cfg.loss)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                grads = ag.backward(loss, leaves)
                grads, _ = clip_gradients(grads, train_cfg.grad_clip)
                lr = lr_at(step, spe, train_cfg)
                params, opt = adamw_step(params, grads, opt, lr, train_cfg)
                step += 1
                run_log.step_losses.append(value)
                run_log.learning_rates.append(lr)
                epoch_losses.append(value)
                if on_step is not None:
                    on_step(step, value)
                if stop_after is not None and step >= stop_after:
                    break
            run_log.epoch_losses.append(float(np.mean(epoch_losses)))
            log.info("epoch %d  loss %.4f", epoch, run_log.epoch_losses[-1])
            done = step >= total_steps
            stopping = stop_after is not None and step >= stop_after
            if ckpt_dir is not None and (done or stopping or (epoch + 1) % train_cfg.checkpoint_every == 0):
                save_checkpoint(ckpt_dir / "last.xckp", params, opt, rng, step)
            if stopping:
                break
    run_log.params = params
    run_log.steps = step
    return run_log
