"""Command-line interface.

Verbs: gen-data, train, eval, ablate, flops, gradcheck, dump-features.
Exit codes: 0 success, 1 validation error (bad config/arguments/files),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, config_to_text, load_config
from .data import SynthConfig, load_dataset, read_ppm, save_dataset, synth_generate, write_pgm
from .flops import flops_count
from .model import Detector
from .train import evaluate_model, train_run

ABLATION_ROWS = (
    ("baseline", dict(neck_mode="baseline3", ssa_variant="none", n_bifusion=0)),
    ("ssa", dict(neck_mode="baseline3", ssa_variant="f3_only", n_bifusion=0)),
    ("pbm", dict(neck_mode="pbm", ssa_variant="none", n_bifusion=2)),
    ("ssa_pbm", dict(neck_mode="pbm", ssa_variant="proposed", n_bifusion=2)),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; bad args are validation
        raise ConfigError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", type=str, default=None, help="output directory")

    p = _Parser(prog="tinydet", description="desk-scale tiny-object detector")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train a model")

    pe = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", type=str, required=True)
    pe.add_argument("--dataset", type=str, required=True)

    pa = sub.add_parser("ablate", parents=[common], help="run the component ablation grid")
    pa.add_argument("--jobs", type=int, default=1, help="parallel training processes")

    sub.add_parser("flops", parents=[common], help="analytic FLOPs/parameter report")
    sub.add_parser("gradcheck", parents=[common], help="run the gradient-check suite")

    pd = sub.add_parser("dump-features", parents=[common], help="write neck activation maps as PGM")
    pd.add_argument("--checkpoint", type=str, required=True)
    pd.add_argument("--image", type=str, required=True)
    pd.add_argument("--levels", type=str, default="3,4,5", help="comma-separated pyramid levels")

    return p


def _load_cfg(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    return cfg


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required for this command")
    return Path(args.out)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    scfg = SynthConfig(
        extent=cfg.image_extent,
        num_classes=cfg.num_classes,
        objects_min=cfg.objects_min,
        objects_max=cfg.objects_max,
        mixture=(cfg.mix_small, cfg.mix_medium, cfg.mix_large),
        seed=cfg.seed,
    )
    ds = synth_generate(scfg, cfg.n_images)
    save_dataset(ds, out)
    n_obj = sum(len(a) for a in ds.annotations)
    print(f"wrote {len(ds)} images ({n_obj} objects) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    summary = train_run(cfg, out)
    for k, v in summary["result"].items():
        print(f"{k}={v:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    model = Detector(cfg, dtype=np.float32)
    checkpoint.load_into(args.checkpoint, model.store)
    res = evaluate_model(model, ds)
    d = res.as_dict()
    width = max(len(k) for k in d)
    print(f"{'metric'.ljust(width)}  value")
    print(f"{'-' * width}  ------")
    for k, v in d.items():
        print(f"{k.ljust(width)}  {v:.4f}")
    print()
    for k, v in d.items():
        print(f"{k}={v:.6f}")
    return 0


def _run_cell(config_path: Path, out_dir: Path, jobs: int) -> subprocess.Popen:
    env = dict(os.environ)
    threads = max(1, (os.cpu_count() or 8) // max(1, jobs))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(threads)
    return subprocess.Popen(
        [sys.executable, "-m", "tinydet", "train", "--config", str(config_path), "--out", str(out_dir)],
        env=env,
        stdout=subprocess.DEVNULL,
        stderr=subprocess.PIPE,
    )


def _parse_final_metrics(log_path: Path) -> dict:
    lines = [ln for ln in log_path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise RuntimeError(f"empty metrics log {log_path}")
    fields = dict(kv.split("=", 1) for kv in lines[-1].split())
    return {k: float(v) for k, v in fields.items()}


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    jobs = max(1, args.jobs)
    seeds = [cfg.seed + k for k in range(cfg.n_seeds)]

    # queue all (row, seed) training cells, then run them `jobs` at a time
    cells = []
    for row_name, overrides in ABLATION_ROWS:
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, **overrides).validate()
            cell_dir = out / f"{row_name}_seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            cfg_path = cell_dir / "run.cfg"
            cfg_path.write_text(config_to_text(run_cfg))
            cells.append((row_name, seed, cfg_path, cell_dir))

    pending = list(cells)
    running: List[tuple] = []
    while pending or running:
        while pending and len(running) < jobs:
            row_name, seed, cfg_path, cell_dir = pending.pop(0)
            print(f"training {row_name} seed={seed} ...", flush=True)
            running.append((row_name, seed, cell_dir, _run_cell(cfg_path, cell_dir, jobs)))
        row_name, seed, cell_dir, proc = running.pop(0)
        _, err = proc.communicate()
        if proc.returncode != 0:
            raise RuntimeError(f"training cell {row_name}/seed{seed} failed:\n{err.decode()[-2000:]}")

    # collect final-epoch metrics and print the grid
    results = {}
    report_lines = []
    for row_name, seed, _, cell_dir in cells:
        m = _parse_final_metrics(cell_dir / "metrics.log")
        results.setdefault(row_name, []).append(m)
        report_lines.append(f"row={row_name} seed={seed} ap={m['ap']:.6f} ap_s={m['ap_s']:.6f}")

    header = f"{'row':<10} {'AP':>8} {'AP_S':>8}   per-seed AP_S"
    print(header)
    print("-" * len(header))
    for row_name, _ in ABLATION_ROWS:
        ms = results[row_name]
        ap = float(np.mean([m["ap"] for m in ms]))
        ap_s = float(np.mean([m["ap_s"] for m in ms]))
        per_seed = " ".join(f"{m['ap_s']:.4f}" for m in ms)
        print(f"{row_name:<10} {ap:8.4f} {ap_s:8.4f}   {per_seed}")
        report_lines.append(f"row={row_name} mean_ap={ap:.6f} mean_ap_s={ap_s:.6f}")
    (out / "ablate_results.txt").write_text("\n".join(report_lines) + "\n")
    print(f"wrote {out / 'ablate_results.txt'}")
    return 0


def cmd_flops(args) -> int:
    cfg = _load_cfg(args)
    rep = flops_count(cfg, cfg.image_extent)
    print(rep.table())
    print()
    print(f"total_macs={rep.total_macs()}")
    print(f"total_flops={rep.total_flops()}")
    print(f"total_params={rep.total_params()}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(verbose=True)
    n_fail = sum(1 for _, _, ok in results if not ok)
    print(f"{len(results) - n_fail}/{len(results)} gradient checks passed")
    return 1 if n_fail else 0


def cmd_dump_features(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    levels = [int(s) for s in args.levels.split(",") if s.strip()]
    model = Detector(cfg, dtype=np.float32)
    checkpoint.load_into(args.checkpoint, model.store)
    img = read_ppm(args.image)
    pyr = model.features(model.image_tensor(img[None]), training=False)
    for lvl in levels:
        if lvl not in pyr:
            raise ConfigError(f"level {lvl} not produced by this neck (have {pyr.keys()})")
        fmap = pyr[lvl].data[0].mean(axis=0)  # channel mean
        lo, hi = float(fmap.min()), float(fmap.max())
        if hi - lo < 1e-12:
            gray = np.full(fmap.shape, 128, dtype=np.uint8)
        else:
            gray = np.rint((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)
        path = out / f"level{lvl}.pgm"
        write_pgm(path, gray)
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "dump-features": cmd_dump_features,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
