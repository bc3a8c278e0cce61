"""``imlut`` command line: data prep, training, transfer, fine-tuning, SR, evaluation, reports."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus, imnet, lut
from .engine import SrRequest, cost_report, super_resolve, super_resolve_rgb
from .errors import ContractError, FormatError
from .evaluate import (evaluate, load_hr_dir, lr_for, parse_scale, results_csv, results_table,
                       scale_label, score)
from .imgio import EvalReport, load_image, load_rgb, save_image, save_rgb
from .kernels import KernelSet
from .train import NonFiniteLoss, TrainConfig, load_dataset, train

log = logging.getLogger("imlut")

EXIT_CONTRACT, EXIT_IO, EXIT_FORMAT = 2, 3, 4

INSPECT_COLORS = {
    "N": (1.0, 0.0, 0.0),
    "L": (0.0, 1.0, 0.0),
    "C": (0.0, 0.0, 1.0),
    "Z": (1.0, 1.0, 0.0),
    "Z3": (1.0, 0.0, 1.0),
}
COLOR_NAMES = {(1.0, 0.0, 0.0): "red", (0.0, 1.0, 0.0): "green", (0.0, 0.0, 1.0): "blue",
               (1.0, 1.0, 0.0): "yellow", (1.0, 0.0, 1.0): "magenta"}


def _scales(values) -> list[tuple[float, float]]:
    out = []
    for v in values or []:
        out.extend(parse_scale(t) for t in v.split(",") if t)
    if not out:
        raise ContractError("at least one --scale is required")
    return out


def _step(value: str | None, default: int) -> int:
    if value is None:
        return default
    v = value.strip()
    step = 2 ** int(v[2:]) if v.startswith("2^") else int(v)
    lut.levels_for(step)
    return step


def _load_model(args):
    if getattr(args, "bundle", None):
        return lut.deserialize(args.bundle)
    if getattr(args, "checkpoint", None):
        return imnet.load_params(args.checkpoint)
    raise ContractError("pass --bundle or --checkpoint")


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare_data(args):
    root = Path(args.dataset)
    if args.proxy:
        corpus.build(root, args.proxy)
    images = load_hr_dir(root)
    for r_h, r_w in _scales(args.scale):
        d = root / f"LR_x{scale_label(r_h, r_w)}"
        d.mkdir(parents=True, exist_ok=True)
        for name, hr in images:
            lr, _ = lr_for(hr, r_h, r_w)
            save_image(lr, d / f"{name}.png")
        print(f"wrote {len(images)} LR images to {d}")


def cmd_train(args):
    overrides = dict(iterations=args.iters, seed=args.seed, kernels=args.kernels,
                     branches=args.branches, dataset=args.dataset, patch=args.patch)
    if args.config:
        cfg = TrainConfig.from_file(args.config, **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    train(cfg, out_dir=out, resume=args.resume)
    print(f"checkpoint: {out / 'latest.imnet'}")


def cmd_transfer(args):
    p = imnet.load_params(args.checkpoint)
    b = lut.transfer(p, _step(args.qw, lut.STEP_W), _step(args.qr, lut.STEP_R))
    n = lut.serialize(b, args.bundle)
    print(f"bundle: {args.bundle} ({n} bytes)")


def cmd_finetune(args):
    b = lut.deserialize(args.bundle)
    cfg = TrainConfig(iterations=args.iters if args.iters is not None else 2000,
                      seed=args.seed, lr=args.lr, patch=args.patch, kernels=b.kernel_set.code,
                      branches=b.B, dataset=args.dataset)
    tuned = lut.finetune(b, load_dataset(args.dataset), cfg)
    n = lut.serialize(tuned, args.out)
    print(f"bundle: {args.out} ({n} bytes)")


def cmd_sr(args):
    model = _load_model(args)
    (r_h, r_w), = _scales([args.scale])
    path = "net" if isinstance(model, imnet.ImNetParams) else "lut"
    req = SrRequest(r_h, r_w, path=path, ensemble=not args.no_ensemble)
    if args.color:
        save_rgb(super_resolve_rgb(model, load_rgb(args.input), req), args.out)
    else:
        save_image(super_resolve(model, load_image(args.input), req), args.out)
    print(f"wrote {args.out}")


def cmd_eval(args):
    scales = _scales(args.scale)
    images = load_hr_dir(args.dataset)
    if args.sr_dir:
        results = {}
        for r_h, r_w in scales:
            rep = EvalReport()
            d = Path(args.sr_dir)
            for name, hr in images:
                _, gt = lr_for(hr, r_h, r_w)
                rep.add(name, score(load_image(d / f"{name}.png"), gt, args.studio_swing))
            results[(r_h, r_w)] = rep
    else:
        model = args.baseline if args.baseline else _load_model(args)
        results = evaluate(model, images, scales, studio=args.studio_swing,
                           ensemble=not args.no_ensemble)
    print(results_table(results))
    if args.out:
        Path(args.out).write_text(results_csv(results))
        print(f"csv: {args.out}")
    return results


def cmd_report(args):
    b = lut.deserialize(args.bundle)
    storage = Path(args.bundle).stat().st_size
    h, w = (int(t) for t in args.lr_dims.lower().split("x"))
    rows = []
    for r_h, r_w in _scales(args.scale):
        req = SrRequest(r_h, r_w)
        rep = cost_report(b, (h, w), req, runs=args.runs)
        ho, wo = req.out_dims(h, w)
        rows.append([scale_label(r_h, r_w), f"{ho}x{wo}", rep.macs, storage,
                     "" if rep.wall_time is None else f"{rep.wall_time:.4f}"])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(
        [["scale", "output", "macs", "storage_bytes", "median_seconds"], *rows])
    print(f"{'scale':>8} {'output':>11} {'MACs':>14} {'storage':>10} {'time[s]':>9}")
    for r in rows:
        print(f"{r[0]:>8} {r[1]:>11} {r[2]:>14,} {r[3]:>10,} {r[4]:>9}")
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    return rows


def weight_colors(ks: KernelSet) -> np.ndarray:
    if len(ks) > 4:
        raise ContractError(f"K={len(ks)} exceeds the 4-color palette; use --gray for "
                            "per-kernel grayscale maps")
    return np.array([INSPECT_COLORS[k.code] for k in ks])


def blend_weights(weights: np.ndarray, ks: KernelSet) -> np.ndarray:
    """(H, W, K) normalized weights -> (H, W, 3) color image."""
    return weights @ weight_colors(ks)


def cmd_inspect(args):
    model = _load_model(args)
    lr = load_image(args.input)
    weights = imnet.forward_weight_predictor(model, lr).astype(np.float64)
    ks = model.kernel_set
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    if args.gray:
        for i, k in enumerate(ks):
            save_image(weights[..., i], out / f"{stem}_w{i}_{k.code}.png")
        print(f"wrote {len(ks)} maps to {out}")
        return
    colors = weight_colors(ks)
    legend = "_".join(f"{k.code}-{COLOR_NAMES[tuple(c)]}" for k, c in zip(ks, colors))
    path = out / f"{stem}_weights_{legend}.png"
    save_rgb(blend_weights(weights, ks), path)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imlut", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_flags(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--bundle", help="IM-LUT bundle file")
        g.add_argument("--checkpoint", help="IM-Net checkpoint file")
        return g

    p = sub.add_parser("prepare-data", help="write LR_x{r} folders next to HR/")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scale", action="append", required=True)
    p.add_argument("--proxy", choices=["train", "eval"],
                   help="first populate HR/ from photos bundled with installed packages")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train IM-Net")
    p.add_argument("--dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--kernels")
    p.add_argument("--branches", type=int, choices=[1, 2, 3])
    p.add_argument("--patch", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="sample a checkpoint into LUTs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True, help="output bundle path")
    p.add_argument("--qw", help="weight-table sampling step (e.g. 32 or 2^5)")
    p.add_argument("--qr", help="refiner-table sampling step (e.g. 16 or 2^4)")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("finetune", help="LUT-aware fine-tuning")
    p.add_argument("--bundle", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output bundle path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--patch", type=int, default=16)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sr", help="super-resolve one image")
    model_flags(p).required = True
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", required=True)
    p.add_argument("--color", action="store_true", help="SR on luma, bicubic chroma, RGB output")
    p.add_argument("--no-ensemble", action="store_true")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR over a dataset")
    g = model_flags(p)
    g.add_argument("--baseline", help="single-kernel code (N, L, C, Z, Z3)")
    g.add_argument("--sr-dir", help="score precomputed SR images named like HR/")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scale", action="append", required=True)
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--studio-swing", action="store_true",
                   help="score luma mapped to 16..235 codes, as common SR benchmarks do")
    p.add_argument("--no-ensemble", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="MACs / storage / runtime")
    p.add_argument("--bundle", required=True)
    p.add_argument("--scale", action="append", required=True)
    p.add_argument("--lr-dims", default="360x640", help="LR input size HxW")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="color-coded weight maps")
    model_flags(p).required = True
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gray", action="store_true", help="one grayscale map per kernel")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLoss as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
