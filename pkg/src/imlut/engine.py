"""End-to-end super-resolution through IM-LUT (tables) or IM-Net (reference network)."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import imnet
from .errors import ContractError
from .imgio import as_image, rgb_to_luma
from .kernels import BICUBIC, KernelSet, out_size, resample
from .lut import LutBundle, to_bytes
from .train import DEFAULT_SCALES

MIN_GRID_SCALE = min(DEFAULT_SCALES)


@dataclass(frozen=True)
class SrRequest:
    r_h: float
    r_w: float | None = None
    path: str = "lut"
    ensemble: bool = True

    def __post_init__(self):
        if self.r_w is None:
            object.__setattr__(self, "r_w", self.r_h)
        if self.r_h < 1 or self.r_w < 1:
            raise ContractError(f"scales must be >= 1 (downscaling is not supported), got "
                                f"({self.r_h}, {self.r_w})")
        if self.path not in ("lut", "net"):
            raise ContractError(f"path must be 'lut' or 'net', got {self.path!r}")

    @property
    def r_eff(self) -> float:
        return imnet.effective_scale(self.r_h, self.r_w)

    def out_dims(self, h: int, w: int) -> tuple[int, int]:
        return out_size(h, self.r_h), out_size(w, self.r_w)


def _run(comp, lr, req: SrRequest) -> np.ndarray:
    lr = as_image(lr)
    if lr.shape[0] < 3 or lr.shape[1] < 3:
        raise ContractError(f"LR image must be at least 3x3, got {lr.shape}")
    trace = imnet.forward(comp, lr, req.r_h, req.r_w, req.ensemble,
                          r_mod=max(req.r_eff, MIN_GRID_SCALE))
    return trace.out[0].astype(np.float64)


def imlut_sr(bundle: LutBundle, lr, req: SrRequest) -> np.ndarray:
    """Network-free SR: tetrahedral lookups, nearest-scale modulation, mixing, refinement."""
    if not isinstance(bundle, LutBundle):
        raise ContractError("imlut_sr needs a LutBundle")
    return _run(bundle, lr, req)


def imnet_sr(p: imnet.ImNetParams, lr, req: SrRequest) -> np.ndarray:
    if not isinstance(p, imnet.ImNetParams):
        raise ContractError("imnet_sr needs ImNetParams")
    return _run(p, lr, req)


def super_resolve(model, lr, req: SrRequest) -> np.ndarray:
    if isinstance(model, LutBundle):
        return imlut_sr(model, lr, req)
    if isinstance(model, imnet.ImNetParams):
        return imnet_sr(model, lr, req)
    if isinstance(model, str):
        return baseline_sr(model, lr, req)
    raise ContractError(f"unsupported model {type(model).__name__}")


def baseline_sr(code: str, lr, req: SrRequest) -> np.ndarray:
    """Single-kernel upsampling (e.g. ``"C"`` for bicubic), clamped to [0, 1]."""
    (kernel,) = KernelSet.parse(code).kernels
    return np.clip(resample(as_image(lr), req.r_h, req.r_w, kernel), 0.0, 1.0)


def rgb_to_ycbcr(rgb: np.ndarray):
    y = rgb_to_luma(rgb)
    return y, (rgb[..., 2] - y) / 1.772 + 0.5, (rgb[..., 0] - y) / 1.402 + 0.5


def ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    r = y + 1.402 * (cr - 0.5)
    b = y + 1.772 * (cb - 0.5)
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def super_resolve_rgb(model, rgb: np.ndarray, req: SrRequest) -> np.ndarray:
    """SR on luma; chroma is upscaled with plain bicubic."""
    y, cb, cr = rgb_to_ycbcr(np.asarray(rgb, dtype=np.float64))
    y_sr = super_resolve(model, y, req)
    cb_sr = resample(cb, req.r_h, req.r_w, BICUBIC)
    cr_sr = resample(cr, req.r_h, req.r_w, BICUBIC)
    return ycbcr_to_rgb(y_sr, cb_sr, cr_sr)


# ---------------------------------------------------------------------------
# Cost accounting

TETRA_MACS = 5  # one multiply-add per simplex vertex


@dataclass
class CostReport:
    macs: int
    storage_bytes: int
    wall_time: float | None
    breakdown: dict = field(default_factory=dict)


def interp_macs(ks: KernelSet, out_pixels: int) -> int:
    """Separable resampling: ``taps`` multiply-adds per axis per output pixel."""
    return out_pixels * sum(2 * k.taps for k in ks)


def pipeline_macs(k_set: KernelSet, branches: int, lr_dims, req: SrRequest,
                  ensemble: bool = True) -> dict:
    """Analytic per-stage MAC counts for one SR call.

    Predictor lookups run once per LR pixel, everything else once per output
    pixel.  Each tetrahedral lookup costs 5 multiply-adds per output value.
    """
    h, w = lr_dims
    ho, wo = req.out_dims(h, w)
    lr_px, out_px = h * w, ho * wo
    k = len(k_set)
    rots = 4 if ensemble else 1
    return {
        "predictor": lr_px * TETRA_MACS * k * rots * branches,
        "modulation": lr_px * k,
        "image_upsampling": interp_macs(k_set, out_px),
        "weight_upsampling": interp_macs(k_set, out_px),
        "mixing": out_px * k,
        "refiner": out_px * TETRA_MACS * rots * branches,
    }


def cost_report(bundle: LutBundle, lr_dims, req: SrRequest, runs: int = 3,
                seed: int = 0) -> CostReport:
    """MACs, serialized size and median wall time (``runs`` = 0 skips timing)."""
    parts = pipeline_macs(bundle.kernel_set, bundle.B, lr_dims, req, req.ensemble)
    wall = None
    if runs > 0:
        lr = np.random.default_rng(seed).integers(0, 256, size=lr_dims) / 255.0
        imlut_sr(bundle, lr, req)  # warm-up
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            imlut_sr(bundle, lr, req)
            times.append(time.perf_counter() - t0)
        wall = statistics.median(times)
    return CostReport(sum(parts.values()), len(to_bytes(bundle)), wall, parts)
