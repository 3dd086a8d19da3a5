"""COCO-style average precision with 101-point interpolation.

Protocol: per image and class, detections are matched greedily in
descending score order to the unmatched ground truth with the highest IoU
above the threshold.  Ground truths outside the active area bucket are
ignored: detections matched to them, and unmatched detections whose own
area falls outside the bucket, count neither as hits nor as false
positives.  AP averages over classes that have at least one (in-bucket)
ground truth; buckets with none are excluded rather than scored zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .head import Detection, GtAnnotation, iou_matrix_xyxy

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
MAX_DETS = 100
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    per_class: Dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        d = {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75, "ap_s": self.ap_s, "ap_m": self.ap_m, "ap_l": self.ap_l}
        for c, v in sorted(self.per_class.items()):
            d[f"ap_class_{c}"] = v
        return d


def _interpolated_ap(scores: np.ndarray, tps: np.ndarray, npos: int) -> float:
    """101-point interpolated AP from per-detection (score, is-tp) pairs."""
    if npos == 0:
        return float("nan")
    if scores.size == 0:
        return 0.0
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1 - tps)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # precision envelope: max precision at recall >= r
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / len(RECALL_POINTS)


def _match_image(ious, gt_ignore, thr):
    """Greedy per-image matching; returns (tp flags, det-ignore flags).

    Detections (rows of ``ious``, already score-sorted) take the
    highest-IoU available real ground truth at or above the threshold; an
    ignored ground truth is a fallback that absorbs the detection without
    scoring it.  Pure-python loops: the matrices are tiny.
    """
    n_det = len(ious)
    n_gt = len(gt_ignore)
    tp = [False] * n_det
    matched_ignored = [False] * n_det
    taken = [False] * n_gt
    cut = thr - 1e-12
    for d in range(n_det):
        row = ious[d]
        best_j, best_iou, best_ign_j, best_ign_iou = -1, cut, -1, cut
        for j in range(n_gt):
            v = row[j]
            if taken[j]:
                continue
            if gt_ignore[j]:
                if v > best_ign_iou:
                    best_ign_j, best_ign_iou = j, v
            elif v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            tp[d] = True
        elif best_ign_j >= 0:
            taken[best_ign_j] = True
            matched_ignored[d] = True
    return tp, matched_ignored


ALL_BUCKETS = ("all", "s", "m", "l")


def ap_eval(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[GtAnnotation]],
    extent: int,
    small_max_area: float,
    large_min_area: float,
    iou_thresholds=IOU_THRESHOLDS,
    max_dets: int = MAX_DETS,
    buckets: Sequence[str] = ALL_BUCKETS,
) -> EvalResult:
    n_images = len(gts_per_image)
    if len(dets_per_image) != n_images:
        raise ValueError("detections and ground truths cover different image counts")
    classes = sorted({g.class_id for gts in gts_per_image for g in gts})
    bucket_ranges = {
        "all": (0.0, float("inf")),
        "s": (0.0, small_max_area),
        "m": (small_max_area, large_min_area),
        "l": (large_min_area, float("inf")),
    }

    # per (image, class): score-sorted det arrays, gt areas, IoUs (computed once)
    prepared = []
    for img_idx in range(n_images):
        # stable sort: ties keep the detector's own deterministic order
        dets = sorted(dets_per_image[img_idx], key=lambda d: -d.score)[:max_dets]
        by_class: Dict[int, dict] = {}
        for c in classes:
            cd = [d for d in dets if d.class_id == c]
            cg = [g for g in gts_per_image[img_idx] if g.class_id == c]
            det_boxes = np.array([d.box.to_xyxy() for d in cd]).reshape(len(cd), 4)
            gt_boxes = np.array([g.box.to_xyxy() for g in cg]).reshape(len(cg), 4)
            by_class[c] = {
                "scores": [d.score for d in cd],
                "det_areas": [d.box.w * d.box.h * extent * extent for d in cd],
                "gt_areas": [g.box.w * g.box.h * extent * extent for g in cg],
                "ious": iou_matrix_xyxy(det_boxes, gt_boxes).tolist() if len(cd) and len(cg) else [[]] * len(cd),
            }
        prepared.append(by_class)

    # ap[bucket][thr] = list of per-class APs
    ap_table: Dict[str, Dict[float, List[float]]] = {b: {t: [] for t in iou_thresholds} for b in buckets}
    per_class_all: Dict[int, List[float]] = {c: [] for c in classes}

    for bname in buckets:
        area_lo, area_hi = bucket_ranges[bname]
        for c in classes:
            npos = 0
            for img_idx in range(n_images):
                for a in prepared[img_idx][c]["gt_areas"]:
                    npos += area_lo <= a < area_hi
            if npos == 0:
                continue
            for thr in iou_thresholds:
                # (-score, image, rank, tp): deterministic global score order
                records = []
                for img_idx in range(n_images):
                    p = prepared[img_idx][c]
                    gt_ignore = [not (area_lo <= a < area_hi) for a in p["gt_areas"]]
                    tp, matched_ignored = _match_image(p["ious"], gt_ignore, thr)
                    det_areas = p["det_areas"]
                    scores = p["scores"]
                    for d in range(len(tp)):
                        if matched_ignored[d]:
                            continue
                        if not tp[d] and not (area_lo <= det_areas[d] < area_hi):
                            continue  # unmatched det outside the bucket: ignored
                        records.append((-scores[d], img_idx, d, tp[d]))
                records.sort()
                tps = np.array([r[3] for r in records], dtype=np.float64)
                scores_arr = np.array([-r[0] for r in records])
                ap = _interpolated_ap(scores_arr, tps, npos)
                ap_table[bname][thr].append(ap)
                if bname == "all":
                    per_class_all[c].append(ap)

    def mean_over(bucket, thrs=iou_thresholds):
        if bucket not in ap_table:
            return 0.0
        vals = [v for t in thrs for v in ap_table[bucket][t]]
        return float(np.mean(vals)) if vals else 0.0

    per_class = {c: (float(np.mean(v)) if v else 0.0) for c, v in per_class_all.items()}
    return EvalResult(
        ap=mean_over("all"),
        ap50=mean_over("all", [iou_thresholds[0]]),
        ap75=mean_over("all", [iou_thresholds[5]]),
        ap_s=mean_over("s"),
        ap_m=mean_over("m"),
        ap_l=mean_over("l"),
        per_class=per_class,
    )
