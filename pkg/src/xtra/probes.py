"""Linear and attentive probing of frozen encoder features."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .autograd import Tensor
from .model import XTRAModel, truncated_normal
from .trainer import OptimizerState, TrainConfig, adamw_step, clip_gradients, lr_at
from .validation import check_features, check_images, mean_pool

LINEAR = "linear"
ATTENTIVE = "attentive"
PAPER_LR_GRID = tuple(x * 1e-4 for x in (1, 3, 5, 10, 15, 20, 40, 80))


def extract_features(params, model: XTRAModel, images, batch_size: int = 128) -> np.ndarray:
    """Block-causally masked encoder output ``[N, T, enc_width]`` in eval mode."""
    images = check_images(images, model.config.layout)
    chunks = [model.features(params, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, model.config.layout.num_tokens, model.config.enc_width), dtype=np.float32)
    return np.concatenate(chunks)


def top1(scores, labels) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest class index."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(scores, axis=1) == labels))


class _ProbeBase(ClassifierMixin, BaseEstimator):
    """Shared training loop: AdamW, warmup + cosine decay, global-norm clipping."""

    def _init_params(self, n_features: int, n_classes: int, rng) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _logits(self, p: dict[str, Tensor], X: np.ndarray) -> Tensor:
        raise NotImplementedError

    def _prepare(self, X):
        return check_features(X)

    def fit(self, X, y):
        X = self._prepare(X)
        y = np.asarray(y)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        n = len(X)
        rng = np.random.default_rng(self.seed)
        if self.standardize:
            flat = X.reshape(-1, X.shape[-1])
            self.mean_ = flat.mean(axis=0)
            self.scale_ = flat.std(axis=0) + 1e-6
        else:
            self.mean_, self.scale_ = 0.0, 1.0
        Xs = (X - self.mean_) / self.scale_
        params = self._init_params(X.shape[-1], len(self.classes_), rng)
        cfg = TrainConfig(peak_lr=self.lr, min_lr=min(self.min_lr, self.lr),
                          weight_decay=self.weight_decay, betas=self.betas,
                          batch_size=self.batch_size, warmup_epochs=self.warmup_epochs,
                          total_epochs=self.epochs, grad_clip=self.grad_clip)
        bs = min(self.batch_size, n)
        spe = -(-n // bs)
        opt = OptimizerState()
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for b in range(spe):
                idx = order[b * bs:(b + 1) * bs]
                leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                loss = ag.cross_entropy(self._logits(leaves, Xs[idx]), y_idx[idx])
                grads, _ = clip_gradients(ag.backward(loss, leaves), self.grad_clip)
                params, opt = adamw_step(params, grads, opt, lr_at(step, spe, cfg), cfg)
                step += 1
        self.params_ = params
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = (self._prepare(X) - self.mean_) / self.scale_
        with ag.no_grad():
            return self._logits({k: Tensor(v) for k, v in self.params_.items()}, X).data

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y, sample_weight=None):
        scores = self.decision_function(X)
        return top1(scores, np.searchsorted(self.classes_, np.asarray(y)))


class LinearProbe(_ProbeBase):
    """Softmax regression on token-mean-pooled features.

    Accepts ``[N, E]`` or ``[N, T, E]`` input; 3-d input is averaged over tokens.
    """

    def __init__(self, lr=1e-3, epochs=50, batch_size=64, weight_decay=0.1, betas=(0.9, 0.999),
                 min_lr=1e-5, warmup_epochs=0, grad_clip=3.0, standardize=True, seed=0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.betas = betas
        self.min_lr = min_lr
        self.warmup_epochs = warmup_epochs
        self.grad_clip = grad_clip
        self.standardize = standardize
        self.seed = seed

    def _prepare(self, X):
        return mean_pool(check_features(X))

    def _init_params(self, n_features, n_classes, rng):
        return {"cls.w": truncated_normal(rng, (n_features, n_classes)), "cls.b": np.zeros(n_classes)}

    def _logits(self, p, X):
        return X @ p["cls.w"] + p["cls.b"]


class AttentiveProbe(_ProbeBase):
    """One multi-head cross-attention layer with a single learned query, then a linear classifier."""

    def __init__(self, num_heads=4, lr=1e-3, epochs=50, batch_size=64, weight_decay=0.1,
                 betas=(0.9, 0.999), min_lr=1e-5, warmup_epochs=0, grad_clip=3.0,
                 standardize=True, seed=0):
        self.num_heads = num_heads
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.betas = betas
        self.min_lr = min_lr
        self.warmup_epochs = warmup_epochs
        self.grad_clip = grad_clip
        self.standardize = standardize
        self.seed = seed

    def _prepare(self, X):
        X = check_features(X)
        return X[:, None, :] if X.ndim == 2 else X

    def _init_params(self, e, n_classes, rng):
        if e % self.num_heads:
            raise ValueError(f"feature width {e} is not divisible by {self.num_heads} heads")
        return {
            "query": truncated_normal(rng, (1, e)),
            "k.w": truncated_normal(rng, (e, e)), "k.b": np.zeros(e),
            "v.w": truncated_normal(rng, (e, e)), "v.b": np.zeros(e),
            "o.w": truncated_normal(rng, (e, e)), "o.b": np.zeros(e),
            "cls.w": truncated_normal(rng, (e, n_classes)), "cls.b": np.zeros(n_classes),
        }

    def pool(self, p, X) -> Tensor:
        """Attention-pooled ``[N, E]`` representation (before the classifier)."""
        N, T, E = X.shape
        h = self.num_heads
        dh = E // h
        k = (X @ p["k.w"] + p["k.b"]).reshape(N, T, h, dh).transpose(0, 2, 3, 1)
        v = (X @ p["v.w"] + p["v.b"]).reshape(N, T, h, dh).transpose(0, 2, 1, 3)
        q = p["query"].reshape(1, h, 1, dh)
        attn = ag.masked_softmax((q @ k) * (1.0 / np.sqrt(dh)), np.ones((1, T), dtype=bool))
        pooled = (attn @ v).reshape(N, E)
        return pooled @ p["o.w"] + p["o.b"]

    def _logits(self, p, X):
        return self.pool(p, X) @ p["cls.w"] + p["cls.b"]


@dataclass
class ProbeConfig:
    mode: str = ATTENTIVE
    lr_grid: tuple[float, ...] = PAPER_LR_GRID
    epochs: int = 50
    batch_size: int = 64
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    min_lr: float = 1e-5
    grad_clip: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr_grid:
            raise ValueError("lr grid must not be empty")
        if self.mode not in (LINEAR, ATTENTIVE):
            raise ValueError(f"unknown probe mode {self.mode!r}")


@dataclass
class ProbeReport:
    mode: str
    lr_grid: list[float]
    best_lr: float
    accuracy: float
    per_lr: dict[float, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"mode": self.mode, "lr_grid": list(self.lr_grid), "best_lr": self.best_lr,
                "accuracy": self.accuracy}


def make_probe(cfg: ProbeConfig, lr: float, num_heads: int = 4):
    common = dict(lr=lr, epochs=cfg.epochs, batch_size=cfg.batch_size, weight_decay=cfg.weight_decay,
                  betas=cfg.betas, min_lr=cfg.min_lr, grad_clip=cfg.grad_clip, seed=cfg.seed)
    if cfg.mode == LINEAR:
        return LinearProbe(**common)
    return AttentiveProbe(num_heads=num_heads, **common)


def run_probe(train_features, train_labels, test_features, test_labels,
              cfg: ProbeConfig, num_heads: int = 4) -> ProbeReport:
    """Train one probe per learning rate; report the best held-out top-1."""
    per_lr = {}
    for lr in cfg.lr_grid:
        probe = make_probe(cfg, lr, num_heads).fit(train_features, train_labels)
        per_lr[lr] = probe.score(test_features, test_labels)
    best = max(cfg.lr_grid, key=lambda lr: (per_lr[lr], -lr))
    return ProbeReport(cfg.mode, list(cfg.lr_grid), best, per_lr[best], per_lr)


def linear_probe(train_features, train_labels, test_features, test_labels, cfg: ProbeConfig | None = None):
    cfg = cfg or ProbeConfig(mode=LINEAR)
    if cfg.mode != LINEAR:
        cfg = ProbeConfig(**{**cfg.__dict__, "mode": LINEAR})
    return run_probe(train_features, train_labels, test_features, test_labels, cfg)


def attentive_probe(train_features, train_labels, test_features, test_labels,
                    cfg: ProbeConfig | None = None, num_heads: int = 4):
    cfg = cfg or ProbeConfig(mode=ATTENTIVE)
    if cfg.mode != ATTENTIVE:
        cfg = ProbeConfig(**{**cfg.__dict__, "mode": ATTENTIVE})
    return run_probe(train_features, train_labels, test_features, test_labels, cfg, num_heads)
