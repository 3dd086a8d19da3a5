"""NMS-free set-prediction head.

A small query decoder cross-attends over flattened pyramid tokens and
emits a fixed set of (class logits, box) pairs.  Training matches
predictions to ground truth one-to-one with the Hungarian algorithm over a
classification + L1 + GIoU cost, then applies sigmoid focal loss on
classes and L1 + (1-GIoU) on matched boxes.  Inference is a plain top-k
over (query, class) scores: no suppression of any kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .adapter import FeaturePyramid
from .layers import Conv2d, LayerNorm, Linear, MlpBlock, MultiHeadAttention, _register


# ---------------------------------------------------------------------------
# boxes


@dataclass
class Box:
    """Normalized center-format box."""

    cx: float
    cy: float
    w: float
    h: float

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class GtAnnotation:
    class_id: int
    box: Box


@dataclass
class Detection:
    class_id: int
    score: float
    box: Box


@dataclass
class MatchAssignment:
    pairs: List[Tuple[int, int]]  # (query index, ground-truth index)
    total_cost: float


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    out = np.empty_like(b)
    out[..., 0] = b[..., 0] - b[..., 2] / 2
    out[..., 1] = b[..., 1] - b[..., 3] / 2
    out[..., 2] = b[..., 0] + b[..., 2] / 2
    out[..., 3] = b[..., 1] + b[..., 3] / 2
    return out


def giou_matrix(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU between (m,4) and (k,4) corner boxes."""
    a = a_xyxy[:, None, :]
    b = b_xyxy[None, :, :]
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    hx1 = np.minimum(a[..., 0], b[..., 0])
    hy1 = np.minimum(a[..., 1], b[..., 1])
    hx2 = np.maximum(a[..., 2], b[..., 2])
    hy2 = np.maximum(a[..., 3], b[..., 3])
    hull = (hx2 - hx1) * (hy2 - hy1)
    iou = inter / union
    return iou - (hull - union) / hull


def giou(a: Box, b: Box) -> float:
    """Generalized IoU of two boxes, in (-1, 1]."""
    for box in (a, b):
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"degenerate box {box}")
    m = giou_matrix(np.array([a.to_xyxy()]), np.array([b.to_xyxy()]))
    return float(m[0, 0])


def iou_matrix_xyxy(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    a = a_xyxy[:, None, :]
    b = b_xyxy[None, :, :]
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


# ---------------------------------------------------------------------------
# matching


@dataclass
class HeadConfig:
    n_queries: int
    d_dec: int
    n_dec_layers: int
    n_heads: int
    num_classes: int
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    mlp_mult: int = 4
    levels: Tuple[int, ...] = (3, 4, 5)


def build_cost_matrix(logits: np.ndarray, boxes: np.ndarray, gts: Sequence[GtAnnotation], cfg: HeadConfig) -> np.ndarray:
    """(n_queries x n_gt) matching cost; lower is better."""
    n_gt = len(gts)
    if n_gt == 0:
        return np.zeros((logits.shape[0], 0))
    for g in gts:
        if g.box.w <= 0 or g.box.h <= 0:
            raise ValueError(f"degenerate ground-truth box {g.box}")
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    gt_cls = np.array([g.class_id for g in gts])
    gt_boxes = np.array([[g.box.cx, g.box.cy, g.box.w, g.box.h] for g in gts])
    cost_cls = -scores[:, gt_cls]
    pred = boxes.astype(np.float64)
    cost_l1 = np.abs(pred[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    cost_giou = 1.0 - giou_matrix(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt_boxes))
    return cfg.lambda_cls * cost_cls + cfg.lambda_l1 * cost_l1 + cfg.lambda_giou * cost_giou


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimum-total-cost injective assignment covering min(rows, cols)."""
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return MatchAssignment(pairs=[], total_cost=0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return MatchAssignment(pairs=pairs, total_cost=float(cost[rows, cols].sum()))


# ---------------------------------------------------------------------------
# decoder


class DecoderLayer:
    def __init__(self, store, rng, name, d, n_heads, mlp_mult, dtype):
        self.ln1 = LayerNorm(store, name + ".ln1", d, dtype=dtype)
        self.self_attn = MultiHeadAttention(store, rng, name + ".self_attn", d, n_heads, dtype=dtype)
        self.ln2 = LayerNorm(store, name + ".ln2", d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(store, rng, name + ".cross_attn", d, n_heads, dtype=dtype)
        self.ln3 = LayerNorm(store, name + ".ln3", d, dtype=dtype)
        self.mlp = MlpBlock(store, rng, name + ".mlp", d, mult=mlp_mult, act="gelu", dtype=dtype)

    def __call__(self, q: T.Tensor, memory: T.Tensor) -> T.Tensor:
        y = self.ln1(q)
        q = T.add(q, self.self_attn(y, y))
        q = T.add(q, self.cross_attn(self.ln2(q), memory))
        return T.add(q, self.mlp(self.ln3(q)))


class DetectionDecoder:
    def __init__(self, store, rng, name, cfg: HeadConfig, in_width: int, dtype=np.float64):
        self.cfg = cfg
        d = cfg.d_dec
        self.input_proj = {
            lvl: Conv2d(store, rng, f"{name}.proj{lvl}", in_width, d, k=1, dtype=dtype) for lvl in cfg.levels
        }
        self.level_embed = {
            lvl: _register(
                store,
                f"{name}.level_embed{lvl}",
                rng.split(f"{name}.level_embed{lvl}").trunc_normal(d, std=0.02).astype(dtype).reshape(1, 1, 1, d),
            )
            for lvl in cfg.levels
        }
        self.queries = _register(
            store,
            f"{name}.queries",
            rng.split(f"{name}.queries").trunc_normal(cfg.n_queries * d, std=0.02).astype(dtype).reshape(1, 1, cfg.n_queries, d),
        )
        self.layers = [
            DecoderLayer(store, rng, f"{name}.layer{i}", d, cfg.n_heads, cfg.mlp_mult, dtype)
            for i in range(cfg.n_dec_layers)
        ]
        self.final_ln = LayerNorm(store, name + ".final_ln", d, dtype=dtype)
        self.class_head = Linear(store, rng, name + ".class_head", d, cfg.num_classes, dtype=dtype)
        self.box_fc1 = Linear(store, rng, name + ".box_fc1", d, d, dtype=dtype)
        self.box_fc2 = Linear(store, rng, name + ".box_fc2", d, d, dtype=dtype)
        self.box_fc3 = Linear(store, rng, name + ".box_fc3", d, 4, dtype=dtype)
        # start boxes at (0.5, 0.5) with a small size prior instead of 0.5x0.5
        self.box_fc3.bias.data[0, 0, 0, 2:] = float(np.log(0.15 / 0.85))

    def __call__(self, pyr: FeaturePyramid, training: bool) -> Tuple[T.Tensor, T.Tensor]:
        missing = [lvl for lvl in self.cfg.levels if lvl not in pyr]
        if missing:
            raise ValueError(f"decoder expects pyramid levels {self.cfg.levels}, missing {missing}")
        token_groups = []
        n = pyr[self.cfg.levels[0]].shape[0]
        for lvl in self.cfg.levels:
            toks = T.map_to_tokens(self.input_proj[lvl](pyr[lvl]))
            token_groups.append(T.add_rowvec(toks, self.level_embed[lvl]))
        memory = T.concat_rows(token_groups)
        q = T.broadcast_batch(self.queries, n) if n > 1 else self.queries
        for layer in self.layers:
            q = layer(q, memory)
        h = self.final_ln(q)
        logits = self.class_head(h)
        boxes = T.sigmoid(self.box_fc3(T.relu(self.box_fc2(T.relu(self.box_fc1(h))))))
        return logits, boxes


# ---------------------------------------------------------------------------
# loss


def _giou_tensor(pred: T.Tensor, tgt: np.ndarray) -> T.Tensor:
    """Paired GIoU, differentiable in pred: (n,1,Q,4) cxcywh -> (n,1,Q,1)."""
    px, py, pw, ph = T.split_lastdim(pred, [1, 1, 1, 1])
    px1 = T.sub(px, T.scale(pw, 0.5))
    px2 = T.add(px, T.scale(pw, 0.5))
    py1 = T.sub(py, T.scale(ph, 0.5))
    py2 = T.add(py, T.scale(ph, 0.5))
    txyxy = cxcywh_to_xyxy(tgt)
    const = lambda a: T.from_array(np.ascontiguousarray(a))
    tx1, ty1, tx2, ty2 = (const(txyxy[..., i : i + 1]) for i in range(4))
    iw = T.relu(T.sub(T.minimum(px2, tx2), T.maximum(px1, tx1)))
    ih = T.relu(T.sub(T.minimum(py2, ty2), T.maximum(py1, ty1)))
    inter = T.mul(iw, ih)
    t_area = const((txyxy[..., 2:3] - txyxy[..., 0:1]) * (txyxy[..., 3:4] - txyxy[..., 1:2]))
    union = T.sub(T.add(T.mul(pw, ph), t_area), inter)
    hw = T.sub(T.maximum(px2, tx2), T.minimum(px1, tx1))
    hh = T.sub(T.maximum(py2, ty2), T.minimum(py1, ty1))
    hull = T.mul(hw, hh)
    return T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))


def set_loss(
    logits: T.Tensor,
    boxes: T.Tensor,
    gts_batch: Sequence[Sequence[GtAnnotation]],
    assignments: Sequence[MatchAssignment],
    cfg: HeadConfig,
) -> Tuple[T.Tensor, dict]:
    """Matching-based loss over a batch; scalar tensor plus term breakdown.

    Matched queries are trained toward their ground truth class and box;
    every other (query, class) pair is focal-weighted background.
    """
    if cfg.focal_gamma != 2.0:
        raise ValueError("focal gamma is fixed at 2")
    n, _, Q, K = logits.shape
    dt = logits.data.dtype
    cls_target = np.zeros((n, 1, Q, K), dtype=dt)
    box_target = np.full((n, 1, Q, 4), 0.5, dtype=dt)
    box_mask = np.zeros((n, 1, Q, 1), dtype=dt)
    n_matched = 0
    for b, (gts, asg) in enumerate(zip(gts_batch, assignments)):
        for q, j in asg.pairs:
            g = gts[j]
            cls_target[b, 0, q, g.class_id] = 1.0
            box_target[b, 0, q] = (g.box.cx, g.box.cy, g.box.w, g.box.h)
            box_mask[b, 0, q, 0] = 1.0
            n_matched += 1
    norm = float(max(1, n_matched))

    # focal classification over every (query, class) logit
    a = cfg.focal_alpha
    alpha_t = np.where(cls_target > 0.5, a, 1.0 - a).astype(dt)
    bce = T.bce_with_logits(logits, cls_target)
    p = T.sigmoid(logits)
    #   p_t = p*t + (1-p)*(1-t);  weight = alpha_t * (1 - p_t)^2
    pt = T.add(T.mul(p, T.from_array(cls_target)), T.mul(T.add_scalar(T.neg(p), 1.0), T.from_array(1.0 - cls_target)))
    one_m_pt = T.add_scalar(T.neg(pt), 1.0)
    focal = T.mul(T.mul(T.from_array(alpha_t), T.mul(one_m_pt, one_m_pt)), bce)
    loss_cls = T.scale(T.sum_all(focal), cfg.lambda_cls / norm)

    mask4 = np.broadcast_to(box_mask, (n, 1, Q, 4)).astype(dt)
    l1 = T.mul(T.absolute(T.sub(boxes, T.from_array(box_target))), T.from_array(np.ascontiguousarray(mask4)))
    loss_l1 = T.scale(T.sum_all(l1), cfg.lambda_l1 / norm)

    g = _giou_tensor(boxes, box_target)
    giou_term = T.mul(T.add_scalar(T.neg(g), 1.0), T.from_array(box_mask))
    loss_giou = T.scale(T.sum_all(giou_term), cfg.lambda_giou / norm)

    total = T.add(T.add(loss_cls, loss_l1), loss_giou)
    terms = {
        "cls": loss_cls.item(),
        "l1": loss_l1.item(),
        "giou": loss_giou.item(),
    }
    return total, terms


def match_batch(logits: np.ndarray, boxes: np.ndarray, gts_batch, cfg: HeadConfig) -> List[MatchAssignment]:
    """Hungarian matching per batch element on detached predictions."""
    out = []
    for b, gts in enumerate(gts_batch):
        cost = build_cost_matrix(logits[b, 0], boxes[b, 0], gts, cfg)
        out.append(hungarian_match(cost))
    return out


# ---------------------------------------------------------------------------
# inference


def postprocess_topk(logits: np.ndarray, boxes: np.ndarray, k: int) -> List[Detection]:
    """Top-k (query, class) pairs by score; ties break on ascending indices."""
    Q, K = logits.shape
    if k > Q * K:
        raise ValueError(f"k={k} exceeds {Q}*{K} candidates")
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    qs, cs = np.meshgrid(np.arange(Q), np.arange(K), indexing="ij")
    flat_s, flat_q, flat_c = scores.reshape(-1), qs.reshape(-1), cs.reshape(-1)
    order = np.lexsort((flat_c, flat_q, -flat_s))[:k]
    dets = []
    for i in order:
        q = int(flat_q[i])
        b = boxes[q]
        dets.append(Detection(class_id=int(flat_c[i]), score=float(flat_s[i]), box=Box(*map(float, b))))
    return dets
