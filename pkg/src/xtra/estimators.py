"""scikit-learn style front end for pre-training and feature extraction."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .data import Dataset
from .masking import BlockLayout
from .model import EVAL, ModelConfig, XTRAModel, image_blocks
from .objective import normalize_blocks, reconstruction_loss
from .probes import extract_features
from .trainer import TrainConfig, pretrain
from .generation import reconstruct
from .validation import check_images

_MODEL_KEYS = ("enc_width", "enc_depth", "enc_heads", "dec_width", "dec_depth", "dec_heads",
               "mlp_ratio", "drop_path_rate", "num_predicted_blocks", "head_hidden",
               "pixel_mean", "pixel_std")


class XTRAPretrainer(TransformerMixin, BaseEstimator):
    """Block-causal auto-regressive pre-training as a transformer.

    ``fit`` trains the encoder-decoder on unlabeled images ``[N, C, H, W]``
    (uint8, or float in [0, 1]); ``transform`` returns frozen encoder
    features, token-mean-pooled unless ``pooling="none"``.
    """

    def __init__(self, image_size=32, channels=3, patch_size=4, block_size=2, pattern="raster",
                 pattern_seed=0, enc_width=128, enc_depth=4, enc_heads=4, dec_width=128, dec_depth=2,
                 dec_heads=4, mlp_ratio=4.0, drop_path_rate=0.0, num_predicted_blocks=1,
                 head_hidden=None, pixel_mean=0.5, pixel_std=0.25, loss="l2", peak_lr=1e-3,
                 min_lr=1e-6, weight_decay=0.05, betas=(0.9, 0.95), batch_size=64, warmup_epochs=2,
                 epochs=20, grad_clip=1.0, augment=True, pooling="mean", seed=0):
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.block_size = block_size
        self.pattern = pattern
        self.pattern_seed = pattern_seed
        self.enc_width = enc_width
        self.enc_depth = enc_depth
        self.enc_heads = enc_heads
        self.dec_width = dec_width
        self.dec_depth = dec_depth
        self.dec_heads = dec_heads
        self.mlp_ratio = mlp_ratio
        self.drop_path_rate = drop_path_rate
        self.num_predicted_blocks = num_predicted_blocks
        self.head_hidden = head_hidden
        self.pixel_mean = pixel_mean
        self.pixel_std = pixel_std
        self.loss = loss
        self.peak_lr = peak_lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.augment = augment
        self.pooling = pooling
        self.seed = seed

    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        layout = BlockLayout(self.image_size, self.image_size, self.channels, self.patch_size,
                             self.block_size, self.pattern, self.pattern_seed)
        model_cfg = ModelConfig(layout, **{k: getattr(self, k) for k in _MODEL_KEYS})
        train_cfg = TrainConfig(peak_lr=self.peak_lr, min_lr=self.min_lr, weight_decay=self.weight_decay,
                                betas=self.betas, batch_size=self.batch_size,
                                warmup_epochs=self.warmup_epochs, total_epochs=self.epochs,
                                grad_clip=self.grad_clip, seed=self.seed, loss=self.loss,
                                augment=self.augment)
        return model_cfg, train_cfg

    def fit(self, X, y=None, checkpoint_dir=None):
        model_cfg, train_cfg = self._configs()
        pixels = check_images(X, model_cfg.layout)
        as_bytes = np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8)
        data = Dataset(as_bytes, np.zeros(len(as_bytes), dtype=np.uint16), 1)
        log = pretrain(model_cfg, train_cfg, data, checkpoint_dir=checkpoint_dir)
        self.model_config_ = model_cfg
        self.params_ = log.params
        self.training_log_ = log
        self.n_features_out_ = model_cfg.enc_width
        return self

    @property
    def model_(self) -> XTRAModel:
        check_is_fitted(self, "params_")
        return XTRAModel(self.model_config_)

    def transform(self, X):
        model = self.model_
        feats = extract_features(self.params_, model, X)
        if self.pooling == "none":
            return feats
        if self.pooling != "mean":
            raise ValueError(f"unknown pooling {self.pooling!r}")
        return feats.mean(axis=1)

    def reconstruct(self, X):
        """Teacher-forced reconstructions ``[N, C, H, W]`` in [0, 1]."""
        return reconstruct(self.params_, self.model_, X)

    def score(self, X, y=None):
        """Negative mean reconstruction loss on ``X`` (higher is better)."""
        model = self.model_
        pixels = check_images(X, self.model_config_.layout)
        with ag.no_grad():
            pred = model.forward(self.params_, pixels, EVAL)
            targets = normalize_blocks(image_blocks(pixels, self.model_config_.layout))
            return -float(reconstruction_loss(pred, targets, self.loss).data)
