"""PSNR benchmark harness over a directory of HR images."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .engine import SrRequest, super_resolve
from .errors import ContractError
from .imgio import EvalReport, load_image, make_pair, psnr, quantize, studio_swing


def parse_scale(text: str) -> tuple[float, float]:
    """``"2"`` -> (2, 2); ``"2.0x2.4"`` or ``"2.0/2.4"`` -> (2.0, 2.4)."""
    for sep in ("x", "X", "/"):
        if sep in text:
            h, w = text.split(sep, 1)
            return float(h), float(w)
    return float(text), float(text)


def scale_label(r_h: float, r_w: float) -> str:
    return f"{r_h:g}" if r_h == r_w else f"{r_h:g}x{r_w:g}"


def load_hr_dir(root) -> list[tuple[str, np.ndarray]]:
    root = Path(root)
    d = root / "HR" if (root / "HR").is_dir() else root
    if not d.is_dir():
        raise ContractError(f"dataset directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".pgm"))
    if not files:
        raise ContractError(f"no HR images in {d}")
    return [(p.stem, load_image(p)) for p in files]


def lr_for(hr: np.ndarray, r_h: float, r_w: float):
    """(8-bit LR, cropped HR) exactly as stored by ``prepare-data``."""
    lr, crop = make_pair(hr, r_h, r_w)
    return quantize(lr), crop


def score(sr: np.ndarray, gt: np.ndarray, studio: bool = False) -> float:
    if studio:
        return psnr(studio_swing(sr), studio_swing(gt))
    return psnr(sr, gt)


def evaluate(model, images, scales, studio: bool = False, ensemble: bool = True,
             path: str = "lut") -> dict[tuple[float, float], EvalReport]:
    """Per-scale PSNR over ``images`` (list of (name, HR)).

    ``model`` is a LutBundle, ImNetParams or a single-kernel code such as ``"C"``.
    """
    if not images:
        raise ContractError("empty dataset")
    out = {}
    for r_h, r_w in scales:
        req = SrRequest(r_h, r_w, path=path, ensemble=ensemble)
        rep = EvalReport()
        for name, hr in images:
            lr, gt = lr_for(hr, r_h, r_w)
            rep.add(name, score(super_resolve(model, lr, req), gt, studio))
        out[(r_h, r_w)] = rep
    return out


def results_csv(results: dict[tuple[float, float], EvalReport]) -> str:
    reports = list(results.values())
    names = reports[0].names
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scale", *names, "mean"])
    for (r_h, r_w), rep in results.items():
        w.writerow([scale_label(r_h, r_w), *(f"{v:.4f}" for v in rep.values), f"{rep.mean:.4f}"])
    return buf.getvalue()


def results_table(results) -> str:
    lines = [f"{'scale':>10}  {'images':>6}  {'mean PSNR':>10}"]
    for (r_h, r_w), rep in results.items():
        lines.append(f"{scale_label(r_h, r_w):>10}  {rep.count:>6}  {rep.mean:>10.4f}")
    return "\n".join(lines)
