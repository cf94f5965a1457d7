"""Pixel/token/block layout arithmetic and block-causal attention masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RASTER = "raster"
RANDOM = "random"


def make_block_order(num_blocks: int, pattern: str = RASTER, seed: int = 0) -> np.ndarray:
    """Auto-regressive order over blocks.

    Returns ``order`` where ``order[raster_index]`` is the rank of that block.
    ``"random"`` draws one seed-determined permutation, fixed for a whole run.
    """
    if num_blocks < 1:
        raise ValueError("need at least one block")
    if pattern == RASTER:
        return np.arange(num_blocks)
    if pattern in (RANDOM, "fixed_random"):
        return np.random.default_rng(seed).permutation(num_blocks)
    raise ValueError(f"unknown block pattern {pattern!r}")


@dataclass(frozen=True)
class BlockLayout:
    """Geometry of one image: ``p``-pixel patches grouped into ``k x k``-token blocks."""

    height: int
    width: int
    channels: int = 3
    patch: int = 2
    block: int = 2
    pattern: str = RASTER
    seed: int = 0
    block_order: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p, k = self.patch, self.block
        if min(self.height, self.width, self.channels, p, k) < 1:
            raise ValueError("layout sizes must be positive")
        if self.height % p or self.width % p:
            raise ValueError(f"patch size {p} does not divide image {self.height}x{self.width}")
        if self.grid_h % k or self.grid_w % k:
            raise ValueError(f"block size {k} does not divide token grid {self.grid_h}x{self.grid_w}")
        object.__setattr__(self, "block_order", make_block_order(self.num_blocks, self.pattern, self.seed))

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def blocks_h(self) -> int:
        return self.grid_h // self.block

    @property
    def blocks_w(self) -> int:
        return self.grid_w // self.block

    @property
    def num_blocks(self) -> int:
        return self.blocks_h * self.blocks_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def block_dim(self) -> int:
        """Pixel values per block, ``k^2 p^2 C``."""
        return self.block * self.block * self.patch_dim

    def with_order(self, pattern: str, seed: int = 0) -> "BlockLayout":
        return BlockLayout(self.height, self.width, self.channels, self.patch, self.block, pattern, seed)

    def token_ranks(self) -> np.ndarray:
        """Block rank of every token, in raster token order."""
        rows, cols = np.divmod(np.arange(self.num_tokens), self.grid_w)
        spatial = (rows // self.block) * self.blocks_w + cols // self.block
        return self.block_order[spatial]

    def block_token_indices(self) -> np.ndarray:
        """``[K, k^2]`` token indices; row ``r`` lists block rank ``r``'s tokens in raster order."""
        k = self.block
        out = np.empty((self.num_blocks, k * k), dtype=np.intp)
        inner_r, inner_c = np.divmod(np.arange(k * k), k)
        for spatial, rank in enumerate(self.block_order):
            br, bc = divmod(spatial, self.blocks_w)
            out[rank] = (br * k + inner_r) * self.grid_w + bc * k + inner_c
        return out


def token_to_block(layout: BlockLayout, token_index: int) -> int:
    if not 0 <= token_index < layout.num_tokens:
        raise IndexError(f"token {token_index} outside [0, {layout.num_tokens})")
    r, c = divmod(token_index, layout.grid_w)
    spatial = (r // layout.block) * layout.blocks_w + c // layout.block
    return int(layout.block_order[spatial])


@dataclass(frozen=True)
class AttentionMask:
    """``allow[i, j]`` is true when query token ``i`` may attend to key token ``j``."""

    allow: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allow, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"mask must be square, got {a.shape}")
        if not a.any(axis=1).all():
            raise ValueError("every query must see at least one key")
        object.__setattr__(self, "allow", a)

    @property
    def size(self) -> int:
        return self.allow.shape[0]

    def to_ascii(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.allow) + "\n"

    def to_pbm(self) -> str:
        # P1 convention: 1 is black; permitted edges are drawn black.
        n = self.size
        body = "\n".join(" ".join("1" if v else "0" for v in row) for row in self.allow)
        return f"P1\n{n} {n}\n{body}\n"


def build_block_causal_mask(layout: BlockLayout) -> AttentionMask:
    ranks = layout.token_ranks()
    return AttentionMask(ranks[None, :] <= ranks[:, None])


def full_mask(num_tokens: int) -> AttentionMask:
    return AttentionMask(np.ones((num_tokens, num_tokens), dtype=bool))


def parse_grid(text: str) -> tuple[int, int]:
    """Parse ``"RxC"`` into ``(R, C)``."""
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"grid must look like RxC, got {text!r}") from None
    return r, c
