"""Training loop: AdamW over the set-prediction loss, per-epoch eval."""

from __future__ import annotations

import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import ConfigError, RunConfig, config_to_text
from .data import Dataset, load_dataset
from .evaluate import MAX_DETS, EvalResult, ap_eval
from .head import match_batch, postprocess_topk, set_loss
from .model import Detector
from .optim import adamw_step
from .rng import Rng


def evaluate_model(model: Detector, ds: Dataset, batch_size: int = 64, buckets=None) -> EvalResult:
    """Inference-mode AP over a dataset."""
    k = min(MAX_DETS, model.head_cfg.n_queries * model.head_cfg.num_classes)
    dets = []
    for start in range(0, len(ds), batch_size):
        batch = np.stack(ds.images[start : start + batch_size])
        logits, boxes = model.forward(model.image_tensor(batch), training=False)
        for b in range(logits.shape[0]):
            dets.append(postprocess_topk(logits.data[b, 0], boxes.data[b, 0], k))
    kwargs = {"buckets": buckets} if buckets else {}
    return ap_eval(dets, ds.annotations, ds.extent, ds.small_max_area, ds.large_min_area, **kwargs)


def train_run(
    cfg: RunConfig,
    out_dir,
    train_ds: Optional[Dataset] = None,
    eval_ds: Optional[Dataset] = None,
    log_to: Optional[List[str]] = None,
    quiet: bool = False,
) -> dict:
    """Train per the config; writes metrics.log and model.ckpt to out_dir.

    Returns {"result": final EvalResult dict, "loss_history": [...]}.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if train_ds is None:
        if not cfg.train_dir:
            raise ConfigError("train_dir is not set")
        train_ds = load_dataset(cfg.train_dir)
    if eval_ds is None:
        eval_ds = load_dataset(cfg.eval_dir) if cfg.eval_dir else train_ds
    if train_ds.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {train_ds.num_classes} classes, config says {cfg.num_classes}")

    model = Detector(cfg, dtype=np.float32)
    images = np.stack(train_ds.images).astype(np.float32) / 255.0
    n_train = len(train_ds)
    shuffle_rng = Rng(cfg.seed).split("shuffle")

    log_lines: List[str] = []
    t0 = time.time()
    final_eval = evaluate_model(model, eval_ds) if cfg.epochs == 0 else None
    loss_history: List[float] = []

    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.shuffle(n_train)
        sums = {"loss": 0.0, "cls": 0.0, "l1": 0.0, "giou": 0.0}
        n_steps = 0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = T.from_array(images[idx])
            gts = [train_ds.annotations[i] for i in idx]
            model.store.zero_grads()
            with T.Tape() as tape:
                logits, boxes = model.forward(batch, training=True)
                assignments = match_batch(logits.data, boxes.data, gts, model.head_cfg)
                loss, terms = set_loss(logits, boxes, gts, assignments, model.head_cfg)
                loss_val = loss.item()
                tape.backward(loss)
            adamw_step(model.store, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
            sums["loss"] += loss_val
            for k in ("cls", "l1", "giou"):
                sums[k] += terms[k]
            n_steps += 1
            loss_history.append(loss_val)
        # skip the m/l buckets during training; the final eval fills them in
        final_eval = evaluate_model(model, eval_ds, buckets=("all", "s"))
        line = (
            f"epoch={epoch} loss={sums['loss'] / n_steps:.6f} cls={sums['cls'] / n_steps:.6f} "
            f"l1={sums['l1'] / n_steps:.6f} giou={sums['giou'] / n_steps:.6f} "
            f"ap={final_eval.ap:.6f} ap_s={final_eval.ap_s:.6f}"
        )
        log_lines.append(line)
        if log_to is not None:
            log_to.append(line)
        if not quiet:
            print(line, flush=True)

    if cfg.epochs > 0:
        final_eval = evaluate_model(model, eval_ds)
    (out / "metrics.log").write_text("".join(ln + "\n" for ln in log_lines))
    (out / "train_config.cfg").write_text(config_to_text(cfg))
    checkpoint.save(out / "model.ckpt", model.store)
    if not quiet:
        print(f"done in {time.time() - t0:.1f}s; checkpoint at {out / 'model.ckpt'}", file=sys.stderr)
    return {
        "result": final_eval.as_dict() if final_eval else {},
        "loss_history": loss_history,
    }
