"""Desk-scale run producing the artifacts used by the acceptance suite.

    python scripts/desk_run.py --dataset DIR --kind DIV2K --run runs/desk --artifacts tests/artifacts

Trains IM-Net with configs/desk.cfg (resuming if the run directory already
holds a checkpoint), transfers it to LUTs, fine-tunes the tables and writes
``desk.imnet``, ``desk.imlut`` (before fine-tuning), ``desk_ft.imlut`` and a
``desk.provenance`` file describing how they were made.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import time
from pathlib import Path

from imlut import imnet, lut
from imlut.train import TrainConfig, load_dataset, train

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--kind", required=True, help="dataset description, e.g. DIV2K or proxy")
    ap.add_argument("--run", required=True)
    ap.add_argument("--artifacts", required=True)
    ap.add_argument("--config", default=str(ROOT / "configs/desk.cfg"))
    ap.add_argument("--ft-iters", type=int, default=2000)
    ap.add_argument("--ft-lr", type=float, default=1e-4)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run, art = Path(args.run), Path(args.artifacts)
    art.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig.from_file(args.config, dataset=args.dataset)
    data = load_dataset(args.dataset)

    timing = run / "train_seconds.txt"
    t0 = time.perf_counter()
    train(cfg, data, out_dir=run, resume=(run / "train_state.npz").exists())
    if not timing.exists():
        timing.write_text(f"{time.perf_counter() - t0:.1f}\n")
    shutil.copyfile(run / "latest.imnet", art / "desk.imnet")

    p = imnet.load_params(run / "latest.imnet")
    bundle = lut.transfer(p)
    lut.serialize(bundle, art / "desk.imlut")
    ft_cfg = TrainConfig(iterations=args.ft_iters, lr=args.ft_lr, patch=cfg.patch,
                         batch_size=cfg.batch_size, seed=cfg.seed, kernels=cfg.kernels,
                         branches=cfg.branches)
    t0 = time.perf_counter()
    tuned = lut.finetune(bundle, data, ft_cfg)
    ft_seconds = time.perf_counter() - t0
    lut.serialize(tuned, art / "desk_ft.imlut")

    (art / "desk.provenance").write_text(
        f"dataset_kind = {args.kind}\n"
        f"train_images = {len(data)}\n"
        f"iterations = {cfg.iterations}\n"
        f"kernels = {cfg.kernels}\n"
        f"branches = {cfg.branches}\n"
        f"seed = {cfg.seed}\n"
        f"patch = {cfg.patch}\n"
        f"batch_size = {cfg.batch_size}\n"
        f"train_seconds = {timing.read_text().strip()}\n"
        f"finetune_iterations = {args.ft_iters}\n"
        f"finetune_lr = {args.ft_lr}\n"
        f"finetune_seconds = {ft_seconds:.1f}\n")


if __name__ == "__main__":
    main()
