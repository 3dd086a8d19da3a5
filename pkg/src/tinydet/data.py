"""Synthetic tiny-object dataset: generation, disk format, loading.

Images are value-noise backgrounds with colored shapes whose class is
coded by shape and color jointly.  Object sizes are drawn from three
pixel-size buckets (small/medium/large) with configurable mixture weights;
self-overlap above IoU 0.3 is rejected.

Disk format: binary PPM (P6) images plus one line-delimited annotation
file.  The first line is a manifest recording extent, class count, the
area-bucket thresholds and the seed; each following line is
``image_id class_id cx cy w h`` with normalized 6-significant-digit
coordinates.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .head import Box, GtAnnotation, iou_matrix_xyxy
from .rng import Rng

# class k draws shape k % 3 in color PALETTE[k % len(PALETTE)]
PALETTE = np.array(
    [
        (0.90, 0.15, 0.12),
        (0.10, 0.80, 0.15),
        (0.15, 0.30, 0.95),
        (0.95, 0.85, 0.10),
        (0.80, 0.15, 0.85),
        (0.10, 0.85, 0.85),
    ]
)

SIZE_BUCKETS = ((2, 6), (8, 16), (20, 32))  # px ranges: small, medium, large


def area_thresholds(extent: int) -> Tuple[float, float]:
    """(small_max, large_min) in px^2, scaled from the COCO 640-px convention."""
    return (extent / 10.0) ** 2, (3.0 * extent / 10.0) ** 2


@dataclass
class SynthConfig:
    extent: int = 64
    num_classes: int = 3
    objects_min: int = 1
    objects_max: int = 3
    mixture: Tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.extent % 32:
            raise ValueError("image extent must be divisible by 32")
        if not 1 <= self.num_classes <= len(PALETTE):
            raise ValueError(f"num_classes must be in [1, {len(PALETTE)}]")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("bad objects-per-image range")
        if abs(sum(self.mixture) - 1.0) > 1e-6 or any(m < 0 for m in self.mixture):
            raise ValueError("mixture weights must be non-negative and sum to 1")


@dataclass
class Dataset:
    extent: int
    num_classes: int
    seed: int
    images: List[np.ndarray] = field(default_factory=list)  # uint8 (3, h, w)
    annotations: List[List[GtAnnotation]] = field(default_factory=list)

    @property
    def small_max_area(self) -> float:
        return area_thresholds(self.extent)[0]

    @property
    def large_min_area(self) -> float:
        return area_thresholds(self.extent)[1]

    def __len__(self) -> int:
        return len(self.images)


def _value_noise(rng: Rng, extent: int) -> np.ndarray:
    """Smooth gray background in [0.35, 0.55], from an 8x-coarse grid."""
    g = extent // 8 + 1
    grid = rng.uniform(g * g, 0.35, 0.55).reshape(g, g)
    pos = np.arange(extent) / 8.0
    i0 = np.minimum(pos.astype(int), g - 2)
    f = pos - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    img = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return np.repeat(img[None, :, :], 3, axis=0)


def _draw_shape(img: np.ndarray, shape: int, x: int, y: int, s: int, color: np.ndarray) -> None:
    patch = img[:, y : y + s, x : x + s]
    if shape == 0:  # square
        patch[:] = color[:, None, None]
        return
    cy = cx = (s - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(s) - cy, np.arange(s) - cx, indexing="ij")
    if shape == 1:  # disk
        mask = ys * ys + xs * xs <= (s / 2.0) ** 2
    else:  # diamond
        mask = np.abs(ys) + np.abs(xs) <= s / 2.0
    patch[:, mask] = color[:, None]


def synth_generate(cfg: SynthConfig, n_images: int) -> Dataset:
    """Deterministic dataset: a pure function of (cfg, seed)."""
    root = Rng(cfg.seed).split("synth")
    ds = Dataset(extent=cfg.extent, num_classes=cfg.num_classes, seed=cfg.seed)
    mixture = np.asarray(cfg.mixture, dtype=np.float64)
    cum = np.cumsum(mixture)
    for idx in range(n_images):
        r = root.split(f"image{idx}")
        img = _value_noise(r.split("bg"), cfg.extent)
        n_obj = int(r.integers(1, cfg.objects_min, cfg.objects_max)[0])
        placed_xyxy: List[Tuple[float, float, float, float]] = []
        anns: List[GtAnnotation] = []
        for oi in range(n_obj):
            ro = r.split(f"obj{oi}")
            ok = False
            for _ in range(1000):
                cls = int(ro.integers(1, 0, cfg.num_classes - 1)[0])
                bucket = int(np.searchsorted(cum, ro.uniform(1)[0], side="right"))
                bucket = min(bucket, 2)
                lo, hi = SIZE_BUCKETS[bucket]
                s = int(ro.integers(1, lo, hi)[0])
                x = int(ro.integers(1, 0, cfg.extent - s)[0])
                y = int(ro.integers(1, 0, cfg.extent - s)[0])
                cand = (float(x), float(y), float(x + s), float(y + s))
                if placed_xyxy:
                    ious = iou_matrix_xyxy(np.array([cand]), np.array(placed_xyxy))
                    if ious.max() > 0.3:
                        continue
                color = PALETTE[cls % len(PALETTE)] * float(ro.uniform(1, 0.85, 1.0)[0])
                _draw_shape(img, cls % 3, x, y, s, color)
                placed_xyxy.append(cand)
                e = float(cfg.extent)
                anns.append(
                    GtAnnotation(class_id=cls, box=Box(cx=(x + s / 2) / e, cy=(y + s / 2) / e, w=s / e, h=s / e))
                )
                ok = True
                break
            if not ok:
                print(f"warning: dropped object {oi} of image {idx} after 1000 placement attempts", file=sys.stderr)
        ds.images.append(np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
        ds.annotations.append(anns)
    return ds


# ---------------------------------------------------------------------------
# portable image formats


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6; img is uint8 (3, h, w)."""
    c, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    header, body = _parse_pnm_header(raw, b"P6")
    w, h = header
    img = np.frombuffer(body[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5; img is uint8 (h, w)."""
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    header, body = _parse_pnm_header(raw, b"P5")
    w, h = header
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


def _parse_pnm_header(raw: bytes, magic: bytes):
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    if fields[2] != 255:
        raise ValueError("only maxval 255 supported")
    return (fields[0], fields[1]), raw[pos + 1 :]


# ---------------------------------------------------------------------------
# dataset on disk


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        write_ppm(out / "images" / f"img_{i:05d}.ppm", img)
    small_max, large_min = area_thresholds(ds.extent)
    lines = [
        f"# extent={ds.extent} num_classes={ds.num_classes} "
        f"small_max_area={small_max:.6g} large_min_area={large_min:.6g} "
        f"seed={ds.seed} n_images={len(ds.images)}"
    ]
    for i, anns in enumerate(ds.annotations):
        for a in anns:
            b = a.box
            lines.append(f"{i} {a.class_id} {b.cx:.6g} {b.cy:.6g} {b.w:.6g} {b.h:.6g}")
    (out / "annotations.txt").write_text("\n".join(lines) + "\n")


def load_dataset(dir_path) -> Dataset:
    root = Path(dir_path)
    ann_file = root / "annotations.txt"
    if not ann_file.exists():
        raise FileNotFoundError(f"no annotations.txt in {root}")
    lines = ann_file.read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("annotation file is missing its manifest header")
    manifest = dict(kv.split("=", 1) for kv in lines[0][1:].split())
    extent = int(manifest["extent"])
    n_images = int(manifest["n_images"])
    ds = Dataset(extent=extent, num_classes=int(manifest["num_classes"]), seed=int(manifest["seed"]))
    ds.annotations = [[] for _ in range(n_images)]
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split()
        idx, cls = int(parts[0]), int(parts[1])
        cx, cy, w, h = map(float, parts[2:6])
        ds.annotations[idx].append(GtAnnotation(class_id=cls, box=Box(cx, cy, w, h)))
    for i in range(n_images):
        ds.images.append(read_ppm(root / "images" / f"img_{i:05d}.ppm"))
    return ds
