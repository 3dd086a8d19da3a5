"""Spatial-semantic adapter: builds the 4-level feature pyramid.

Two branches feed the pyramid.  A detail extractor runs stride-2 conv
blocks directly on the image (channel ladder C, 2C, 4C, ...), keeping
high-resolution cues that stride-16 tokenization destroys.  A purification
branch projects the backbone taps with lightweight convs.  The two meet at
the 1/8 level: level 3 is a 1x1 fusion of the stage-3 detail features with
the x2-upsampled first tap.

Levels and strides: 2 -> 1/4 (width 2C), 3/4/5 -> 1/8, 1/16, 1/32 (width
d_neck).  Several wiring variants are selectable for ablations; the
"none" surrogate (no detail branch, taps only, bilinear resampling) is the
ablation control.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import ConvBlock

VARIANTS = (
    "proposed",
    "up_to_f4",
    "up_to_f5",
    "f2_f3_f5",
    "bottleneck_spb",
    "early_f2_fusion",
    "f3_only",
)


class FeaturePyramid:
    """Ordered map level index -> feature map at stride 2**level."""

    def __init__(self, levels: dict):
        self.levels = dict(sorted(levels.items()))

    def __getitem__(self, i: int) -> T.Tensor:
        return self.levels[i]

    def __contains__(self, i: int) -> bool:
        return i in self.levels

    def keys(self):
        return list(self.levels)

    def stride(self, i: int) -> int:
        return 2**i

    def check_strides(self, h: int, w: int) -> None:
        for i, t in self.levels.items():
            want = (h // 2**i, w // 2**i)
            if t.shape[2:] != want:
                raise AssertionError(f"level {i} extents {t.shape[2:]} != {want}")


class _Bottleneck:
    """1x1 reduce to d/2 -> 3x3 (optionally strided) -> 1x1 expand."""

    def __init__(self, store, rng, name, c_in, c_out, stride, dtype):
        hidden = c_out // 2
        self.reduce = ConvBlock(store, rng, name + ".reduce", c_in, hidden, k=1, dtype=dtype)
        self.mid = ConvBlock(store, rng, name + ".mid", hidden, hidden, k=3, stride=stride, dtype=dtype)
        self.expand = ConvBlock(store, rng, name + ".expand", hidden, c_out, k=1, dtype=dtype)

    def __call__(self, x, training):
        return self.expand(self.mid(self.reduce(x, training), training), training)


class SpatialSemanticAdapter:
    def __init__(self, store, rng, name, variant: str, base_channels: int, d_back: int, d_neck: int, dtype=np.float64):
        if variant not in VARIANTS:
            raise ValueError(f"unknown adapter variant {variant!r}")
        self.variant = variant
        self.base_channels = base_channels
        self.d_back = d_back
        self.d_neck = d_neck
        C = base_channels

        # detail ladder: stage n is a 3x3 stride-2 block, width C*2^(n-1)
        n_stages = {"up_to_f4": 4, "up_to_f5": 5, "f2_f3_f5": 5}.get(variant, 3)
        self.sde = []
        c_in = 3
        for n in range(1, n_stages + 1):
            c_out = C * 2 ** (n - 1)
            self.sde.append(ConvBlock(store, rng, f"{name}.sde{n}", c_in, c_out, k=3, stride=2, dtype=dtype))
            c_in = c_out

        # level-3 fusion of stage-3 details with the upsampled first tap
        self.fuse3 = ConvBlock(store, rng, f"{name}.fuse3", 4 * C + d_back, d_neck, k=1, dtype=dtype)

        if variant == "bottleneck_spb":
            self.proj4 = _Bottleneck(store, rng, f"{name}.proj4", d_back, d_neck, stride=1, dtype=dtype)
            self.proj5 = _Bottleneck(store, rng, f"{name}.proj5", d_back, d_neck, stride=2, dtype=dtype)
        else:
            if variant not in ("up_to_f4", "up_to_f5"):
                self.proj4 = ConvBlock(store, rng, f"{name}.proj4", d_back, d_neck, k=1, dtype=dtype)
            self.proj5 = ConvBlock(store, rng, f"{name}.proj5", d_back, d_neck, k=3, stride=2, dtype=dtype)

        if variant in ("up_to_f4", "up_to_f5"):
            self.fuse4 = ConvBlock(store, rng, f"{name}.fuse4", 8 * C + d_back, d_neck, k=1, dtype=dtype)
        if variant in ("up_to_f5", "f2_f3_f5"):
            # projected tap is brought to stride 32 first, then fused with stage-5 details
            self.fuse5 = ConvBlock(store, rng, f"{name}.fuse5", 16 * C + d_neck, d_neck, k=1, dtype=dtype)
        if variant == "early_f2_fusion":
            self.fuse2 = ConvBlock(store, rng, f"{name}.fuse2", 2 * C + d_back, 2 * C, k=1, dtype=dtype)

    def detail_features(self, image: T.Tensor, n: int, training: bool) -> T.Tensor:
        """Output of the first n detail stages; n=0 returns the image."""
        if n > len(self.sde):
            raise ValueError(f"stage {n} beyond configured ladder of {len(self.sde)}")
        h, w = image.shape[2:]
        if h % 2**n or w % 2**n:
            raise ValueError(f"extents {h}x{w} not divisible by 2^{n}")
        x = image
        for stage in self.sde[:n]:
            x = stage(x, training)
        return x

    def build_pyramid(self, image: T.Tensor, taps, training: bool) -> FeaturePyramid:
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"image extents {h}x{w} not divisible by 32")
        tap3, tap4, tap5 = taps
        for t in taps:
            if t.shape[1] != self.d_back or t.shape[2:] != (h // 16, w // 16):
                raise ValueError(f"tap shape {t.shape} not stride-16/{self.d_back}")
        v = self.variant

        s2 = self.detail_features(image, 2, training)
        s3 = self.sde[2](s2, training)
        f3 = self.fuse3(T.concat_channels([s3, T.upsample_bilinear_x2(tap3)]), training)

        if v == "up_to_f4":
            s4 = self.sde[3](s3, training)
            f4 = self.fuse4(T.concat_channels([s4, tap4]), training)
        else:
            f4 = self.proj4(tap4, training)

        if v in ("up_to_f5", "f2_f3_f5"):
            s4 = self.sde[3](s3, training)
            s5 = self.sde[4](s4, training)
            if v == "up_to_f5":
                f4 = self.fuse4(T.concat_channels([s4, tap4]), training)
            f5 = self.fuse5(T.concat_channels([s5, self.proj5(tap5, training)]), training)
        else:
            f5 = self.proj5(tap5, training)

        if v == "f3_only":
            return FeaturePyramid({3: f3, 4: f4, 5: f5})
        if v == "early_f2_fusion":
            up4 = T.upsample_bilinear_x2(T.upsample_bilinear_x2(tap3))
            f2 = self.fuse2(T.concat_channels([s2, up4]), training)
        else:
            f2 = s2
        return FeaturePyramid({2: f2, 3: f3, 4: f4, 5: f5})

    __call__ = build_pyramid


class BilinearSurrogatePyramid:
    """Ablation control: taps only, resampled bilinearly, no detail branch.

    With ``emit_level2`` a surrogate 1/4-scale map is produced by x4
    bilinear upsampling of the first tap (projected to width 2C so the
    downstream contract matches the adapter's level 2).
    """

    def __init__(self, store, rng, name, base_channels, d_back, d_neck, emit_level2: bool, dtype=np.float64):
        self.base_channels = base_channels
        self.d_back = d_back
        self.d_neck = d_neck
        self.emit_level2 = emit_level2
        self.proj3 = ConvBlock(store, rng, f"{name}.proj3", d_back, d_neck, k=1, dtype=dtype)
        self.proj4 = ConvBlock(store, rng, f"{name}.proj4", d_back, d_neck, k=1, dtype=dtype)
        self.proj5 = ConvBlock(store, rng, f"{name}.proj5", d_back, d_neck, k=3, stride=2, dtype=dtype)
        if emit_level2:
            self.proj2 = ConvBlock(store, rng, f"{name}.proj2", d_back, 2 * base_channels, k=1, dtype=dtype)

    def build_pyramid(self, image: T.Tensor, taps, training: bool) -> FeaturePyramid:
        tap3, tap4, tap5 = taps
        levels = {
            3: self.proj3(T.upsample_bilinear_x2(tap3), training),
            4: self.proj4(tap4, training),
            5: self.proj5(tap5, training),
        }
        if self.emit_level2:
            up4 = T.upsample_bilinear_x2(T.upsample_bilinear_x2(tap3))
            levels[2] = self.proj2(up4, training)
        return FeaturePyramid(levels)

    __call__ = build_pyramid
