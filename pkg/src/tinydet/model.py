"""Full detector assembly: backbone -> adapter -> neck -> decoder."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .adapter import BilinearSurrogatePyramid, FeaturePyramid, SpatialSemanticAdapter
from .backbone import VitBackbone, VitConfig
from .config import PRESETS, RunConfig
from .head import DetectionDecoder, HeadConfig
from .layers import Conv2d
from .neck import Neck, NeckConfig
from .optim import ParamStore
from .rng import Rng


class Detector:
    def __init__(self, cfg: RunConfig, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        p = PRESETS[cfg.preset]
        self.preset = p
        self.store = ParamStore()
        rng = Rng(cfg.seed).split("model")

        self.backbone = VitBackbone(
            self.store,
            rng,
            "backbone",
            VitConfig(d_back=p.d_back, n_blocks=p.n_back_blocks, n_heads=p.n_heads_back),
            dtype=dtype,
        )

        three_scale = cfg.neck_mode == "baseline3" or cfg.n_bifusion == 0
        if cfg.ssa_variant == "none":
            self.adapter = BilinearSurrogatePyramid(
                self.store, rng, "adapter", p.base_channels, p.d_back, p.d_neck,
                emit_level2=not three_scale, dtype=dtype,
            )
        else:
            self.adapter = SpatialSemanticAdapter(
                self.store, rng, "adapter", cfg.ssa_variant, p.base_channels, p.d_back, p.d_neck, dtype=dtype
            )

        self.neck = Neck(
            self.store,
            rng,
            "neck",
            NeckConfig(
                mode=cfg.neck_mode,
                d_neck=p.d_neck,
                n_bifusion=cfg.n_bifusion,
                fusion_mode=cfg.fusion_mode,
                emit_f2_tokens=cfg.emit_f2_tokens,
            ),
            level2_width=2 * p.base_channels,
            dtype=dtype,
        )

        levels = (2, 3, 4, 5) if cfg.emit_f2_tokens else (3, 4, 5)
        self.head_cfg = HeadConfig(
            n_queries=p.n_queries,
            d_dec=p.d_dec,
            n_dec_layers=p.n_dec_layers,
            n_heads=p.n_heads_dec,
            num_classes=cfg.num_classes,
            levels=levels,
        )
        self.decoder = DetectionDecoder(self.store, rng, "decoder", self.head_cfg, in_width=p.d_neck, dtype=dtype)

    # ------------------------------------------------------------------
    def image_tensor(self, images: np.ndarray) -> T.Tensor:
        """uint8 or float (n,3,h,w) -> float tensor scaled to [0,1]."""
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.dtype == np.uint8:
            arr = arr.astype(self.dtype) / 255.0
        return T.from_array(arr.astype(self.dtype, copy=False))

    def features(self, image: T.Tensor, training: bool) -> FeaturePyramid:
        taps = self.backbone(image)
        pyr = self.adapter(image, taps, training)
        return self.neck(pyr, training)

    def forward(self, image: T.Tensor, training: bool) -> Tuple[T.Tensor, T.Tensor]:
        return self.decoder(self.features(image, training), training)

    def predict(self, images: np.ndarray, top_k: int = 0):
        """Inference without a tape; returns per-image detections."""
        from .evaluate import MAX_DETS
        from .head import postprocess_topk

        logits, boxes = self.forward(self.image_tensor(images), training=False)
        n = logits.shape[0]
        k = top_k or min(MAX_DETS, self.head_cfg.n_queries * self.head_cfg.num_classes)
        return [postprocess_topk(logits.data[b, 0], boxes.data[b, 0], k) for b in range(n)]
