"""Block-causal encoder-decoder ViT with a shared next-block prediction head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .masking import AttentionMask, BlockLayout, build_block_causal_mask

TRAIN = "train"
EVAL = "eval"


@dataclass
class ModelConfig:
    layout: BlockLayout
    enc_width: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_width: int = 64
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    num_predicted_blocks: int = 1
    head_hidden: int | None = None
    # fixed affine map applied to [0, 1] pixels before the patch projection
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.head_hidden is None:
            self.head_hidden = self.dec_width
        if self.enc_width % self.enc_heads or self.dec_width % self.dec_heads:
            raise ValueError("widths must be divisible by head counts")
        if not self.pixel_std > 0:
            raise ValueError("pixel_std must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")
        K = self.layout.num_blocks
        if K < 2:
            raise ValueError("need at least two blocks to predict a next block")
        if not 1 <= self.num_predicted_blocks <= K - 1:
            raise ValueError(f"num_predicted_blocks must be in [1, {K - 1}]")

    # flat key/value form used by config files and checkpoints
    def to_dict(self) -> dict:
        lay = self.layout
        d = {k: v for k, v in asdict(self).items() if k != "layout"}
        d.update(image_height=lay.height, image_width=lay.width, channels=lay.channels,
                 patch_size=lay.patch, block_size=lay.block, pattern=lay.pattern,
                 pattern_seed=lay.seed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        size = d.pop("image_size", None)
        layout = BlockLayout(
            height=int(d.pop("image_height", size)), width=int(d.pop("image_width", size)),
            channels=int(d.pop("channels", 3)), patch=int(d.pop("patch_size")),
            block=int(d.pop("block_size")), pattern=d.pop("pattern", "raster"),
            seed=int(d.pop("pattern_seed", 0)))
        known = {f for f in cls.__dataclass_fields__ if f != "layout"}
        return cls(layout=layout, **{k: v for k, v in d.items() if k in known})


def _mlp_hidden(width: int, ratio: float) -> int:
    return int(round(width * ratio))


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    lay = cfg.layout
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (lay.patch_dim, cfg.enc_width),
        "patch.b": (cfg.enc_width,),
        "pos": (lay.num_tokens, cfg.enc_width),
    }

    def transformer(prefix, width, depth):
        hidden = _mlp_hidden(width, cfg.mlp_ratio)
        for i in range(depth):
            p = f"{prefix}.{i}"
            shapes.update({
                f"{p}.ln1.g": (width,), f"{p}.ln1.b": (width,),
                f"{p}.attn.q.w": (width, width), f"{p}.attn.q.b": (width,),
                f"{p}.attn.k.w": (width, width), f"{p}.attn.k.b": (width,),
                f"{p}.attn.v.w": (width, width), f"{p}.attn.v.b": (width,),
                f"{p}.attn.o.w": (width, width), f"{p}.attn.o.b": (width,),
                f"{p}.ln2.g": (width,), f"{p}.ln2.b": (width,),
                f"{p}.mlp.fc1.w": (width, hidden), f"{p}.mlp.fc1.b": (hidden,),
                f"{p}.mlp.fc2.w": (hidden, width), f"{p}.mlp.fc2.b": (width,),
            })

    transformer("enc", cfg.enc_width, cfg.enc_depth)
    shapes["enc.norm.g"] = (cfg.enc_width,)
    shapes["enc.norm.b"] = (cfg.enc_width,)
    shapes["dec.proj.w"] = (cfg.enc_width, cfg.dec_width)
    shapes["dec.proj.b"] = (cfg.dec_width,)
    transformer("dec", cfg.dec_width, cfg.dec_depth)
    kk = lay.block * lay.block
    shapes["head.norm.g"] = (kk * cfg.dec_width,)
    shapes["head.norm.b"] = (kk * cfg.dec_width,)
    shapes["head.fc1.w"] = (kk * cfg.dec_width, cfg.head_hidden)
    shapes["head.fc1.b"] = (cfg.head_hidden,)
    shapes["head.fc2.w"] = (cfg.head_hidden, cfg.num_predicted_blocks * lay.block_dim)
    shapes["head.fc2.b"] = (cfg.num_predicted_blocks * lay.block_dim,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def is_no_decay(name: str) -> bool:
    """Biases and layer-norm affine parameters are exempt from weight decay."""
    return name.endswith(".b") or name.endswith(".g")


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".g"):
            value = np.ones(shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            value = truncated_normal(rng, shape)
        params[name] = value.astype(dtype)
    return params


# pixels <-> tokens ------------------------------------------------------------
def patchify(images: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """``[..., C, H, W]`` -> ``[..., T, p*p*C]``; each token is a (row, col, channel) flattened patch."""
    *lead, C, H, W = images.shape
    if (C, H, W) != (layout.channels, layout.height, layout.width):
        raise ValueError(f"image shape {(C, H, W)} does not match layout "
                         f"{(layout.channels, layout.height, layout.width)}")
    p, gh, gw = layout.patch, layout.grid_h, layout.grid_w
    x = images.reshape(*lead, C, gh, p, gw, p)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n + 2, n + 4, n)
    return x.reshape(*lead, gh * gw, p * p * C)


def unpatchify(tokens: np.ndarray, layout: BlockLayout) -> np.ndarray:
    *lead, T, D = tokens.shape
    if (T, D) != (layout.num_tokens, layout.patch_dim):
        raise ValueError(f"token array {(T, D)} does not match layout")
    p, gh, gw, C = layout.patch, layout.grid_h, layout.grid_w, layout.channels
    n = len(lead)
    x = tokens.reshape(*lead, gh, gw, p, p, C)
    x = x.transpose(*range(n), n + 4, n, n + 2, n + 1, n + 3)
    return x.reshape(*lead, C, gh * p, gw * p)


def image_blocks(images: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Raw pixels grouped per block in rank order: ``[B, K, k^2 p^2 C]``."""
    tokens = patchify(images, layout)
    idx = layout.block_token_indices()
    blocks = np.take(tokens, idx, axis=-2)
    return blocks.reshape(*blocks.shape[:-2], layout.block_dim)


def blocks_to_image(blocks: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Inverse of :func:`image_blocks`."""
    *lead, K, D = blocks.shape
    kk = layout.block * layout.block
    tokens = np.empty((*lead, layout.num_tokens, layout.patch_dim), dtype=blocks.dtype)
    tokens[..., layout.block_token_indices().reshape(-1), :] = blocks.reshape(*lead, K * kk, layout.patch_dim)
    return unpatchify(tokens, layout)


# layers -----------------------------------------------------------------------
def drop_path(x, residual, rate: float, mode: str = EVAL, rng: np.random.Generator | None = None):
    """``x + residual`` with whole-sample residuals dropped at ``rate`` during training."""
    if mode != TRAIN or rate == 0.0:
        return x + residual
    keep = 1.0 - rate
    shape = (residual.shape[0],) + (1,) * (residual.ndim - 1)
    scale = (rng.random(shape) < keep).astype(residual.dtype) / keep
    return x + residual * scale


def linear(x: Tensor, p: dict, prefix: str) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def attention(x: Tensor, p: dict, prefix: str, heads: int, allow: np.ndarray) -> Tensor:
    B, T, E = x.shape
    dh = E // heads

    def split(t):
        return t.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, p, f"{prefix}.q"))
    k = split(linear(x, p, f"{prefix}.k"))
    v = split(linear(x, p, f"{prefix}.v"))
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    out = ag.masked_softmax(logits, allow) @ v
    return linear(out.transpose(0, 2, 1, 3).reshape(B, T, E), p, f"{prefix}.o")


def transformer_block(x, p, prefix, heads, allow, drop_rate, mode, rng):
    h = ag.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = drop_path(x, attention(h, p, f"{prefix}.attn", heads, allow), drop_rate, mode, rng)
    h = ag.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = linear(ag.gelu(linear(h, p, f"{prefix}.mlp.fc1")), p, f"{prefix}.mlp.fc2")
    return drop_path(x, h, drop_rate, mode, rng)


def _depth_rates(rate: float, depth: int) -> list[float]:
    # stochastic depth grows linearly with layer index
    return [rate * i / max(depth - 1, 1) for i in range(depth)]


def as_tensors(params) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _allow(mask) -> np.ndarray:
    return mask.allow if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)


def encode(params, tokens, cfg: ModelConfig, mask, mode: str = EVAL, rng=None,
           positions=None) -> Tensor:
    """``[B, T, p^2 C]`` tokens -> ``[B, T, enc_width]`` (final layer norm applied).

    ``positions`` selects which grid positions a shorter token sequence
    occupies; ``mask`` must then be the matching sub-matrix.
    """
    params = as_tensors(params)
    tokens = ag.as_tensor(tokens, like=params["patch.w"])
    pos = params["pos"]
    if positions is not None:
        pos = ag.take(pos, positions, axis=0)
    if tokens.shape[1:] != (pos.shape[0], cfg.layout.patch_dim):
        raise ValueError(f"token batch {tokens.shape} does not match layout")
    allow = _allow(mask)
    x = linear(tokens, params, "patch") + pos
    for i, rate in enumerate(_depth_rates(cfg.drop_path_rate, cfg.enc_depth)):
        x = transformer_block(x, params, f"enc.{i}", cfg.enc_heads, allow, rate, mode, rng)
    return ag.layer_norm(x, params["enc.norm.g"], params["enc.norm.b"])


def decode(params, enc_out: Tensor, cfg: ModelConfig, mask, mode: str = EVAL, rng=None) -> Tensor:
    """Width projection followed by ``dec_depth`` masked blocks."""
    params = as_tensors(params)
    allow = _allow(mask)
    x = linear(enc_out, params, "dec.proj")
    for i, rate in enumerate(_depth_rates(cfg.drop_path_rate, cfg.dec_depth)):
        x = transformer_block(x, params, f"dec.{i}", cfg.dec_heads, allow, rate, mode, rng)
    return x


def pixel_tokens(images, cfg: ModelConfig) -> np.ndarray:
    """Standardised pixels cut into patch tokens, the encoder's input."""
    images = np.asarray(images)
    scaled = (images - images.dtype.type(cfg.pixel_mean)) / images.dtype.type(cfg.pixel_std) \
        if images.dtype.kind == "f" else (images - cfg.pixel_mean) / cfg.pixel_std
    return patchify(scaled, cfg.layout)


def concat_blocks(dec_out: Tensor, layout: BlockLayout) -> Tensor:
    """Gather each block's ``k^2`` token vectors (raster order inside the block) by rank."""
    B, T, D = dec_out.shape
    gathered = ag.take(dec_out, layout.block_token_indices().reshape(-1), axis=1)
    return gathered.reshape(B, layout.num_blocks, layout.block * layout.block * D)


def valid_slots(num_blocks: int, num_predicted: int) -> np.ndarray:
    """``[K-1, M]`` boolean; slot ``(j, m)`` targets block rank ``j + 1 + m``."""
    j = np.arange(num_blocks - 1)[:, None]
    m = np.arange(num_predicted)[None, :]
    return j + 1 + m < num_blocks


def predict_blocks(params, block_embed: Tensor, num_predicted: int) -> Tensor:
    """Shared head on ranks ``0..K-2``: layer norm, then a GELU MLP. ``[B, K-1, M, D_blk]``."""
    params = as_tensors(params)
    B, K, _ = block_embed.shape
    ctx = ag.take(block_embed, np.arange(K - 1), axis=1)
    ctx = ag.layer_norm(ctx, params["head.norm.g"], params["head.norm.b"])
    h = linear(ag.gelu(linear(ctx, params, "head.fc1")), params, "head.fc2")
    return h.reshape(B, K - 1, num_predicted, h.shape[-1] // num_predicted)


@dataclass
class XTRAModel:
    """Convenience bundle of config, mask and the forward pass."""

    config: ModelConfig
    mask: AttentionMask = field(init=False)

    def __post_init__(self):
        self.mask = build_block_causal_mask(self.config.layout)

    def forward(self, params, images: np.ndarray, mode: str = EVAL, rng=None) -> Tensor:
        """``[B, C, H, W]`` pixels -> block predictions ``[B, K-1, M, D_blk]``."""
        cfg = self.config
        tokens = pixel_tokens(images, cfg)
        enc = encode(params, tokens, cfg, self.mask, mode, rng)
        dec = decode(params, enc, cfg, self.mask, mode, rng)
        return predict_blocks(params, concat_blocks(dec, cfg.layout), cfg.num_predicted_blocks)

    def features(self, params, images: np.ndarray) -> np.ndarray:
        """Frozen encoder output ``[B, T, enc_width]``."""
        with ag.no_grad():
            tokens = pixel_tokens(images, self.config)
            return encode(params, tokens, self.config, self.mask, EVAL).data
