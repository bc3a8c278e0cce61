"""Image loading/saving, quality metrics and LR/HR pair preparation.

Images are plain 2-D float64 numpy arrays with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import ContractError, FormatError
from .kernels import BICUBIC, resample

PSNR_CAP = 99.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def as_image(a) -> np.ndarray:
    img = np.asarray(a, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"expected a 2-D image, got shape {img.shape}")
    return img


def to_codes(img: np.ndarray) -> np.ndarray:
    """8-bit codes with round-half-up and clamping."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return to_codes(img).astype(np.float64) / 255.0


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def studio_swing(img: np.ndarray) -> np.ndarray:
    """Map full-range luma onto the 16..235 code range used by common SR benchmarks."""
    return (16.0 + 219.0 * np.asarray(img, dtype=np.float64)) / 255.0


def _read_array(path) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise FormatError(f"{path}: unsupported bit depth (mode {mode})")
            if mode == "P":
                im = im.convert("RGB")
            elif mode in ("LA",):
                im = im.convert("L")
            elif mode in ("RGBA", "CMYK", "YCbCr"):
                im = im.convert("RGB")
            elif mode == "1":
                im = im.convert("L")
            arr = np.asarray(im)
    except (UnidentifiedImageError, SyntaxError) as e:
        raise FormatError(f"{path}: {e}") from e
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: unsupported bit depth ({arr.dtype})")
    return arr


def load_rgb(path) -> np.ndarray:
    """Load as (H, W, 3) floats in [0, 1]; gray images are replicated."""
    arr = _read_array(path).astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr


def load_image(path) -> np.ndarray:
    """Load a PNG/PGM file as a luma image in [0, 1].

    RGB input is reduced with BT.601 weights.
    """
    arr = _read_array(path).astype(np.float64) / 255.0
    if arr.ndim == 3:
        arr = rgb_to_luma(arr)
    return arr


def save_image(img: np.ndarray, path) -> None:
    PILImage.fromarray(to_codes(as_image(img)), mode="L").save(Path(path), format="PNG")


def save_rgb(rgb: np.ndarray, path) -> None:
    codes = np.clip(np.floor(np.asarray(rgb) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    PILImage.fromarray(codes, mode="RGB").save(Path(path), format="PNG")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two images after 8-bit quantization (peak 1.0)."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ContractError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    d = to_codes(a).astype(np.float64) - to_codes(b).astype(np.float64)
    mse = float(np.mean(d * d)) / (255.0 * 255.0)
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalReport:
    names: list[str] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def add(self, name: str, value: float) -> None:
        self.names.append(name)
        self.values.append(float(value))

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        if not self.values:
            raise ContractError("empty report")
        return math.fsum(self.values) / len(self.values)


def _crop_multiple(r: float) -> int:
    return Fraction(r).limit_denominator(1000).numerator


def make_pair(hr: np.ndarray, r_h: float, r_w: float | None = None):
    """Center-crop ``hr`` to a size divisible by each scale numerator and
    derive the LR image by antialiased bicubic downscaling.

    Returns ``(lr, hr_cropped)``.
    """
    hr = as_image(hr)
    r_w = r_h if r_w is None else r_w
    if r_h < 1 or r_w < 1:
        raise ContractError(f"scales must be >= 1, got ({r_h}, {r_w})")
    ph, pw = _crop_multiple(r_h), _crop_multiple(r_w)
    h = hr.shape[0] - hr.shape[0] % ph
    w = hr.shape[1] - hr.shape[1] % pw
    if h == 0 or w == 0:
        raise ContractError(f"image {hr.shape} too small for scale ({r_h}, {r_w})")
    top = (hr.shape[0] - h) // 2
    left = (hr.shape[1] - w) // 2
    crop = hr[top:top + h, left:left + w]
    lr = resample(crop, 1.0 / r_h, 1.0 / r_w, BICUBIC, antialias=True)
    return lr, crop
