"""Toy plain vision transformer tokenizing at stride 16.

Three intermediate block outputs ("taps") are exported as stride-16
feature maps for the adapter.  Positions are fixed 2-D sinusoids; there is
no class token and no pretraining.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from . import tensor as T
from .layers import LayerNorm, MlpBlock, MultiHeadAttention, _register
from .rng import Rng


def default_tap_indices(n_blocks: int) -> Tuple[int, int, int]:
    """Evenly spaced late taps: (ceil(n/2), ceil(3n/4), n), 1-based."""
    return (math.ceil(n_blocks / 2), math.ceil(3 * n_blocks / 4), n_blocks)


@dataclass
class VitConfig:
    d_back: int
    n_blocks: int
    n_heads: int
    patch: int = 16
    mlp_mult: int = 4
    tap_indices: Tuple[int, int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.patch != 16:
            raise ValueError("tokenization stride is fixed at 16")
        if self.tap_indices is None:
            self.tap_indices = default_tap_indices(self.n_blocks)
        a, b, c = self.tap_indices
        if not (1 <= a <= b <= c == self.n_blocks):
            raise ValueError(f"bad tap indices {self.tap_indices} for {self.n_blocks} blocks")


def sinusoidal_positions_2d(gh: int, gw: int, d: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D positions, shape (1,1,gh*gw,d): [sin(y f), cos(y f), sin(x f), cos(x f)].

    Each axis uses d/2 dims with frequencies 10000^(-2i/(d/2)).
    """
    if d % 4:
        raise ValueError(f"embedding width {d} must be divisible by 4")
    half = d // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) * 2.0 / half))
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")

    def axis_embed(vals):
        ang = vals.reshape(-1, 1) * freqs.reshape(1, -1)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    pe = np.concatenate([axis_embed(ys.astype(np.float64)), axis_embed(xs.astype(np.float64))], axis=1)
    return pe.reshape(1, 1, gh * gw, d).astype(dtype)


class TransformerBlock:
    """Pre-norm block: x + MHSA(LN(x)); x + MLP(LN(x))."""

    def __init__(self, store, rng, name, d, n_heads, mlp_mult, dtype):
        self.ln1 = LayerNorm(store, name + ".ln1", d, dtype=dtype)
        self.attn = MultiHeadAttention(store, rng, name + ".attn", d, n_heads, dtype=dtype)
        self.ln2 = LayerNorm(store, name + ".ln2", d, dtype=dtype)
        self.mlp = MlpBlock(store, rng, name + ".mlp", d, mult=mlp_mult, act="gelu", dtype=dtype)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        y = self.ln1(x)
        x = T.add(x, self.attn(y, y))
        return T.add(x, self.mlp(self.ln2(x)))


class VitBackbone:
    def __init__(self, store, rng: Rng, name: str, cfg: VitConfig, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        p, d = cfg.patch, cfg.d_back
        w = rng.split(name + ".patch.weight").trunc_normal(3 * p * p * d, std=0.02)
        self.patch_w = _register(store, name + ".patch.weight", w.astype(dtype).reshape(1, 1, 3 * p * p, d))
        self.patch_b = _register(store, name + ".patch.bias", np.zeros((1, 1, 1, d), dtype=dtype))
        self.blocks = [
            TransformerBlock(store, rng, f"{name}.block{i}", d, cfg.n_heads, cfg.mlp_mult, dtype)
            for i in range(cfg.n_blocks)
        ]
        self._pos_cache: dict = {}

    def _positions(self, gh: int, gw: int) -> np.ndarray:
        key = (gh, gw)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_positions_2d(gh, gw, self.cfg.d_back, self.dtype)
        return self._pos_cache[key]

    def embed_tokens(self, image: T.Tensor, add_positions: bool = True) -> T.Tensor:
        """Patchify + project to (n,1,T,d); optionally add fixed positions."""
        n, c, h, w = image.shape
        p = self.cfg.patch
        if c != 3:
            raise ValueError("backbone expects 3-channel images")
        if h % p or w % p:
            raise ValueError(f"image extents {h}x{w} not divisible by patch {p}")
        tokens = T.linear(T.extract_patches(image, p), self.patch_w, self.patch_b)
        if add_positions:
            pos = T.from_array(np.broadcast_to(self._positions(h // p, w // p), tokens.shape))
            tokens = T.add(tokens, pos)
        return tokens

    def forward(self, image: T.Tensor):
        """Return the three tap feature maps (n, d_back, h/16, w/16)."""
        n, _, h, w = image.shape
        gh, gw = h // self.cfg.patch, w // self.cfg.patch
        x = self.embed_tokens(image)
        taps = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            # duplicated indices (possible for very shallow nets) reuse the tap
            taps.extend([x] * self.cfg.tap_indices.count(i))
        if len(taps) != 3:
            raise RuntimeError("tap capture failed")
        return tuple(T.tokens_to_map(t, gh, gw) for t in taps)

    __call__ = forward
