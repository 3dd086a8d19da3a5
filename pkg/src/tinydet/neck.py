"""Multi-scale fusion necks.

Two modes share one parameter namespace so ablations can tie weights:

* ``baseline3``: classic top-down pass (1x1 lateral + x2 bilinear + add +
  3x3 smooth) over levels {3,4,5}, then a bottom-up pass (3x3 stride-2 +
  add + 3x3 smooth).
* ``pbm``: the top-down pass is replaced by bi-fusion blocks that read the
  *input* pyramid only, so the blocks are order-independent and can run in
  parallel.  Each block aligns the deeper level (1x1 + x2 upsample, added
  residually) and injects the shallower level (3x3 stride-2) through a
  CSP-style fusion block that recursively halves the channels three times.
  With zero bi-fusion blocks the forward pass degrades bit-exactly to
  ``baseline3``.

Level 5 of the pbm path is rebuilt as stride-2-conv of the fused level 4
plus a 1x1 projection of the input level 5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import FeaturePyramid
from .layers import ConvBlock

FUSION_MODES = ("add_deep_concat_shallow", "add_shallow_concat_deep")


@dataclass
class NeckConfig:
    mode: str = "pbm"  # "baseline3" | "pbm"
    d_neck: int = 64
    n_bifusion: int = 2  # 0 | 1 | 2
    fusion_mode: str = "add_deep_concat_shallow"
    emit_f2_tokens: bool = False

    def __post_init__(self):
        if self.mode not in ("baseline3", "pbm"):
            raise ValueError(f"unknown neck mode {self.mode!r}")
        if self.n_bifusion not in (0, 1, 2):
            raise ValueError("n_bifusion must be 0, 1 or 2")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.d_neck % 8:
            raise ValueError("d_neck must be divisible by 8 (three channel halvings)")
        if self.emit_f2_tokens and (self.mode != "pbm" or self.n_bifusion < 1):
            raise ValueError("emit_f2_tokens requires the pbm mode with at least one bi-fusion block")


class CspFusionBlock:
    """Two-input fusion with a three-deep recursive channel partition.

    Concat -> entry 1x1 -> three stages of (split halves, transform one
    half with two 3x3 blocks); identity halves bypass to the exit concat,
    which the exit 1x1 mixes back to full width.
    """

    def __init__(self, store, rng, name, d: int, dtype=np.float64):
        self.entry = ConvBlock(store, rng, name + ".entry", 2 * d, d, k=1, dtype=dtype)
        self.stages = []
        w = d // 2
        for s in range(3):
            self.stages.append(
                (
                    ConvBlock(store, rng, f"{name}.stage{s}.a", w, w, k=3, dtype=dtype),
                    ConvBlock(store, rng, f"{name}.stage{s}.b", w, w, k=3, dtype=dtype),
                )
            )
            w //= 2
        self.exit = ConvBlock(store, rng, name + ".exit", d, d, k=1, dtype=dtype)

    def __call__(self, a: T.Tensor, b: T.Tensor, training: bool) -> T.Tensor:
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ValueError(f"fusion inputs disagree spatially: {a.shape} vs {b.shape}")
        cur = self.entry(T.concat_channels([a, b]), training)
        kept = []
        for conv_a, conv_b in self.stages:
            half = cur.shape[1] // 2
            ident, part = T.split_channels(cur, [half, half])
            kept.append(ident)
            cur = conv_b(conv_a(part, training), training)
        return self.exit(T.concat_channels(kept + [cur]), training)


class BiFusionBlock:
    """Three-scale aggregation at one level, reading raw pyramid inputs."""

    def __init__(self, store, rng, name, d: int, dtype=np.float64):
        self.align = ConvBlock(store, rng, name + ".align", d, d, k=1, dtype=dtype)
        self.inject = ConvBlock(store, rng, name + ".inject", d, d, k=3, stride=2, dtype=dtype)
        self.fusion = CspFusionBlock(store, rng, name + ".fusion", d, dtype=dtype)

    def __call__(self, f_prev: T.Tensor, f_cur: T.Tensor, f_next: T.Tensor, fusion_mode: str, training: bool) -> T.Tensor:
        deep = T.upsample_bilinear_x2(self.align(f_next, training))
        shallow = self.inject(f_prev, training)
        if fusion_mode == "add_deep_concat_shallow":
            aligned = T.add(f_cur, deep)
            return self.fusion(aligned, shallow, training)
        elif fusion_mode == "add_shallow_concat_deep":
            aligned = T.add(f_cur, shallow)
            return self.fusion(aligned, deep, training)
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")


class Neck:
    def __init__(self, store, rng, name, cfg: NeckConfig, level2_width: int = 0, dtype=np.float64):
        self.cfg = cfg
        d = cfg.d_neck
        use_bifusion3 = cfg.mode == "pbm" and cfg.n_bifusion >= 1
        use_bifusion4 = cfg.mode == "pbm" and cfg.n_bifusion >= 2

        if not use_bifusion3:
            self.lat3 = ConvBlock(store, rng, name + ".lat3", d, d, k=1, dtype=dtype)
            self.td_smooth3 = ConvBlock(store, rng, name + ".td_smooth3", d, d, k=3, dtype=dtype)
        if not use_bifusion4:
            self.lat4 = ConvBlock(store, rng, name + ".lat4", d, d, k=1, dtype=dtype)
            self.td_smooth4 = ConvBlock(store, rng, name + ".td_smooth4", d, d, k=3, dtype=dtype)
            self.lat5 = ConvBlock(store, rng, name + ".lat5", d, d, k=1, dtype=dtype)

        if use_bifusion3:
            if level2_width <= 0:
                raise ValueError("bi-fusion at level 3 needs a level-2 input width")
            self.proj2 = ConvBlock(store, rng, name + ".proj2", level2_width, d, k=1, dtype=dtype)
            self.bifusion3 = BiFusionBlock(store, rng, name + ".bifusion3", d, dtype=dtype)
            self.out5_down = ConvBlock(store, rng, name + ".out5_down", d, d, k=3, stride=2, dtype=dtype)
            self.out5_proj = ConvBlock(store, rng, name + ".out5_proj", d, d, k=1, dtype=dtype)
        if use_bifusion4:
            self.bifusion4 = BiFusionBlock(store, rng, name + ".bifusion4", d, dtype=dtype)

        self.pan_down4 = ConvBlock(store, rng, name + ".pan_down4", d, d, k=3, stride=2, dtype=dtype)
        self.pan_smooth4 = ConvBlock(store, rng, name + ".pan_smooth4", d, d, k=3, dtype=dtype)
        self.pan_down5 = ConvBlock(store, rng, name + ".pan_down5", d, d, k=3, stride=2, dtype=dtype)
        self.pan_smooth5 = ConvBlock(store, rng, name + ".pan_smooth5", d, d, k=3, dtype=dtype)

    def _pan(self, f3, f4, f5, training):
        n3 = f3
        n4 = self.pan_smooth4(T.add(f4, self.pan_down4(n3, training)), training)
        n5 = self.pan_smooth5(T.add(f5, self.pan_down5(n4, training)), training)
        return n3, n4, n5

    def baseline_forward(self, pyr: FeaturePyramid, training: bool) -> FeaturePyramid:
        f3, f4, f5 = pyr[3], pyr[4], pyr[5]
        p5 = self.lat5(f5, training)
        p4 = self.td_smooth4(T.add(self.lat4(f4, training), T.upsample_bilinear_x2(p5)), training)
        p3 = self.td_smooth3(T.add(self.lat3(f3, training), T.upsample_bilinear_x2(p4)), training)
        n3, n4, n5 = self._pan(p3, p4, p5, training)
        return FeaturePyramid({3: n3, 4: n4, 5: n5})

    def pbm_forward(self, pyr: FeaturePyramid, training: bool) -> FeaturePyramid:
        cfg = self.cfg
        if cfg.n_bifusion == 0:
            return self.baseline_forward(pyr, training)
        if 2 not in pyr:
            raise ValueError("bi-fusion at level 3 needs pyramid level 2")
        f3, f4, f5 = pyr[3], pyr[4], pyr[5]
        f2p = self.proj2(pyr[2], training)

        # both blocks read only the input pyramid: evaluation order is free
        bar3 = self.bifusion3(f2p, f3, f4, cfg.fusion_mode, training)
        if cfg.n_bifusion >= 2:
            bar4 = self.bifusion4(f3, f4, f5, cfg.fusion_mode, training)
        else:
            p5 = self.lat5(f5, training)
            bar4 = self.td_smooth4(T.add(self.lat4(f4, training), T.upsample_bilinear_x2(p5)), training)
        bar5 = T.add(self.out5_down(bar4, training), self.out5_proj(f5, training))

        n3, n4, n5 = self._pan(bar3, bar4, bar5, training)
        out = {3: n3, 4: n4, 5: n5}
        if cfg.emit_f2_tokens:
            out[2] = f2p
        return FeaturePyramid(out)

    def __call__(self, pyr: FeaturePyramid, training: bool) -> FeaturePyramid:
        if self.cfg.mode == "baseline3":
            return self.baseline_forward(pyr, training)
        return self.pbm_forward(pyr, training)
