"""Interpolation kernels and the separable arbitrary-scale resampler.

Resampling is expressed as a pair of dense per-axis operators, so that an
image ``x`` of shape (H, W) maps to ``A_h @ x @ A_w.T``.  The same operators
are reused for the backward pass (``A_h.T @ g @ A_w``) during training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import ContractError


class Kind(Enum):
    NEAREST = "N"
    BILINEAR = "L"
    BICUBIC = "C"
    LANCZOS2 = "Z"
    LANCZOS3 = "Z3"


_SUPPORT = {
    Kind.NEAREST: 0.5,
    Kind.BILINEAR: 1.0,
    Kind.BICUBIC: 2.0,
    Kind.LANCZOS2: 2.0,
    Kind.LANCZOS3: 3.0,
}

BICUBIC_A = -0.5


@dataclass(frozen=True)
class Kernel:
    kind: Kind

    @property
    def support(self) -> float:
        return _SUPPORT[self.kind]

    @property
    def code(self) -> str:
        return self.kind.value

    @property
    def taps(self) -> int:
        """Taps per axis at unit or larger scale (2 * support)."""
        return int(round(2 * self.support))

    def __call__(self, x):
        return kernel_weight(self, x)


NEAREST = Kernel(Kind.NEAREST)
BILINEAR = Kernel(Kind.BILINEAR)
BICUBIC = Kernel(Kind.BICUBIC)
LANCZOS2 = Kernel(Kind.LANCZOS2)
LANCZOS3 = Kernel(Kind.LANCZOS3)

_BY_CODE = {k.code: k for k in (NEAREST, BILINEAR, BICUBIC, LANCZOS2, LANCZOS3)}


def _sinc(x: np.ndarray) -> np.ndarray:
    # exact zeros at nonzero integers so unit-scale resampling is an exact identity
    out = np.sinc(x)
    out[(x != 0) & (x == np.round(x))] = 0.0
    return out


def kernel_weight(kernel: Kernel, x) -> np.ndarray | float:
    """Evaluate a 1-D kernel at offset(s) ``x``.

    Offsets are measured as ``tap - source_coordinate``.  Nearest neighbour
    covers the half-open interval [-0.5, 0.5), so a source coordinate lying
    exactly between two pixels picks the left one.
    """
    scalar = np.isscalar(x)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    kind = kernel.kind
    if kind is Kind.NEAREST:
        w = ((x >= -0.5) & (x < 0.5)).astype(np.float64)
    elif kind is Kind.BILINEAR:
        w = np.maximum(0.0, 1.0 - ax)
    elif kind is Kind.BICUBIC:
        a = BICUBIC_A
        ax2 = ax * ax
        ax3 = ax2 * ax
        w = np.where(
            ax <= 1.0,
            (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0,
            np.where(ax < 2.0, a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a, 0.0),
        )
    else:
        n = kernel.support
        w = np.where(ax < n, _sinc(x) * _sinc(x / n), 0.0)
    return float(w) if scalar else w


@dataclass(frozen=True)
class KernelSet:
    kernels: tuple[Kernel, ...]

    def __post_init__(self):
        if len(self.kernels) < 1:
            raise ContractError("kernel set must not be empty")
        kinds = [k.kind for k in self.kernels]
        if len(set(kinds)) != len(kinds):
            raise ContractError(f"duplicate kernels in set {self.code!r}")

    @classmethod
    def parse(cls, code: str) -> "KernelSet":
        """Parse a letter code such as ``NLC`` or ``NLZ3``."""
        out = []
        i = 0
        code = code.strip().upper()
        while i < len(code):
            if code[i] == "Z" and code[i + 1:i + 2] == "3":
                out.append(LANCZOS3)
                i += 2
                continue
            if code[i] not in _BY_CODE:
                raise ContractError(f"unknown kernel code {code[i]!r} in {code!r}")
            out.append(_BY_CODE[code[i]])
            i += 1
        return cls(tuple(out))

    @property
    def code(self) -> str:
        return "".join(k.code for k in self.kernels)

    def __len__(self) -> int:
        return len(self.kernels)

    def __iter__(self):
        return iter(self.kernels)

    def __getitem__(self, i: int) -> Kernel:
        return self.kernels[i]


def out_size(n: int, r: float) -> int:
    """round(r * n) with halves rounded up."""
    return int(math.floor(r * n + 0.5))


@lru_cache(maxsize=256)
def _axis_operator(n_in: int, n_out: int, r: float, kind: Kind, antialias: bool) -> np.ndarray:
    kernel = Kernel(kind)
    stretch = 1.0 / r if (antialias and r < 1.0) else 1.0
    support = kernel.support * stretch
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) / r - 0.5
    lo = np.floor(src - support).astype(np.int64)
    width = int(math.ceil(2 * support)) + 2
    taps = lo[:, None] + np.arange(width)[None, :]
    w = kernel_weight(kernel, (taps - src[:, None]) / stretch)
    w = w / w.sum(axis=1, keepdims=True)
    op = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.repeat(np.arange(n_out), width)
    np.add.at(op, (rows, np.clip(taps, 0, n_in - 1).ravel()), w.ravel())
    op.setflags(write=False)
    return op


def axis_operator(n_in: int, r: float, kernel: Kernel, antialias: bool = False) -> np.ndarray:
    """Dense (n_out, n_in) resampling operator for one axis.

    Each row holds the normalized tap weights of one output sample, with
    out-of-range taps folded onto the nearest edge pixel.
    """
    if not r > 0:
        raise ContractError(f"scale must be positive, got {r}")
    n_out = out_size(n_in, r)
    if n_out < 1:
        raise ContractError(f"scale {r} maps {n_in} pixels to an empty axis")
    return _axis_operator(int(n_in), n_out, float(r), kernel.kind, bool(antialias))


def resample(img: np.ndarray, r_h: float, r_w: float, kernel: Kernel,
             antialias: bool = False) -> np.ndarray:
    """Resample the last two axes of ``img`` by (r_h, r_w).

    Leading axes are treated as a batch.  No clamping is applied, so
    overshooting kernels may leave [0, 1].
    """
    img = np.asarray(img)
    if r_h <= 0 or r_w <= 0:
        raise ContractError(f"scales must be positive, got ({r_h}, {r_w})")
    a_h = axis_operator(img.shape[-2], r_h, kernel, antialias)
    a_w = axis_operator(img.shape[-1], r_w, kernel, antialias)
    dtype = np.result_type(img.dtype, np.float32)
    return a_h.astype(dtype, copy=False) @ img @ a_w.T.astype(dtype, copy=False)


def resample_set(img: np.ndarray, ks: KernelSet, r_h: float, r_w: float) -> list[np.ndarray]:
    return [resample(img, r_h, r_w, k) for k in ks]
