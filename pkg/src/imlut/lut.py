"""Look-up-table counterparts of IM-Net and the bundle file format.

A :class:`Lut4D` samples a four-input branch on a uniform lattice of pixel
codes and is read back with 4-simplex (tetrahedral) interpolation.  A
:class:`LutBundle` exposes the same component interface as
:class:`~imlut.imnet.ImNetParams`, so the pipeline in :mod:`imlut.imnet`
runs unchanged on tables, including the backward pass used for fine-tuning.
"""
from __future__ import annotations

import io
import itertools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imnet
from .errors import ContractError, FormatError
from .kernels import KernelSet
from .train import DEFAULT_SCALES, Adam, NonFiniteLoss, TrainConfig, sample_batch

log = logging.getLogger(__name__)

STEP_W = 2 ** 5
STEP_R = 2 ** 4
VALID_STEPS = tuple(2 ** i for i in range(7))


def levels_for(step: int) -> np.ndarray:
    """Lattice pixel codes min(step * q, 255) for q = 0 .. 256/step."""
    if step not in VALID_STEPS:
        raise ContractError(f"sampling step must be a power of two in 1..64, got {step}")
    q = np.arange(256 // step + 1)
    return np.minimum(step * q, 255).astype(np.float64)


@dataclass
class Lut4D:
    step: int
    table: np.ndarray                  # (Q, Q, Q, Q, out_dim)
    quant: tuple[float, float] | None = None   # (scale, offset) when table holds dequantized int8 codes
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        q = 256 // self.step + 1
        if self.table.shape[:4] != (q, q, q, q) or self.table.ndim != 5:
            raise ContractError(f"table shape {self.table.shape} does not match step {self.step}")
        self.levels = levels_for(self.step)

    @property
    def Q(self) -> int:
        return self.table.shape[0]

    @property
    def out_dim(self) -> int:
        return self.table.shape[-1]

    @property
    def size(self) -> int:
        return self.table.size


def _cells(t: Lut4D, codes: np.ndarray):
    """Vertex flat indices (N, 5) and barycentric weights (N, 5) of the enclosing simplex."""
    p = np.asarray(codes, dtype=np.float64).reshape(-1, 4)
    if p.size and (p.min() < 0 or p.max() > 255):
        raise ContractError("pixel codes must lie in [0, 255]")
    q = np.minimum(np.floor(p / t.step).astype(np.int64), t.Q - 2)
    lo = t.levels[q]
    f = (p - lo) / (t.levels[q + 1] - lo)
    order = np.argsort(-f, axis=1, kind="stable")
    fs = np.take_along_axis(f, order, axis=1)
    strides = np.array([t.Q ** 3, t.Q ** 2, t.Q, 1], dtype=np.int64)
    vert = np.empty((len(p), 5), dtype=np.int64)
    vert[:, 0] = q @ strides
    for m in range(4):
        vert[:, m + 1] = vert[:, m] + strides[order[:, m]]
    w = np.empty((len(p), 5), dtype=np.float64)
    w[:, 0] = 1.0 - fs[:, 0]
    w[:, 1:4] = fs[:, :3] - fs[:, 1:]
    w[:, 4] = fs[:, 3]
    return vert, w


def tetra_lookup(t: Lut4D, codes) -> np.ndarray:
    """Interpolate ``t`` at pixel-code tuples of shape (..., 4); returns (..., out_dim)."""
    codes = np.asarray(codes)
    vert, w = _cells(t, codes)
    flat = t.table.reshape(-1, t.out_dim)
    out = w[:, 0, None] * flat[vert[:, 0]]
    for m in range(1, 5):
        out += w[:, m, None] * flat[vert[:, m]]
    return out.reshape(*codes.shape[:-1], t.out_dim)


def values_to_codes(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255)


class LutBranch:
    """Pattern-branch evaluator backed by a :class:`Lut4D`.

    Inputs are pixel values in [0, 1]; they are rounded to 8-bit codes before
    lookup, so no gradient flows back to the inputs.
    """

    def __init__(self, lut: Lut4D):
        self.lut = lut

    @property
    def dtype(self):
        return self.lut.table.dtype

    def forward(self, x):
        vert, w = _cells(self.lut, values_to_codes(x))
        flat = self.lut.table.reshape(-1, self.lut.out_dim)
        y = w[:, 0, None] * flat[vert[:, 0]]
        for m in range(1, 5):
            y += w[:, m, None] * flat[vert[:, m]]
        return y, (vert, w)

    def backward(self, cache, dy, need_dx: bool = False):
        vert, w = cache
        g = self.lut.grad.reshape(-1, self.lut.out_dim)
        n = g.shape[0]
        idx = vert.ravel()
        for c in range(self.lut.out_dim):
            g[:, c] += np.bincount(idx, weights=(w * dy[:, c, None]).ravel(), minlength=n)
        return None


@dataclass
class LutS:
    grid: np.ndarray         # (n,) strictly increasing scales
    values: np.ndarray       # (n, K)
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if np.any(np.diff(self.grid) <= 0):
            raise ContractError("scale grid must be strictly increasing")
        if self.values.shape[0] != len(self.grid):
            raise ContractError("scale table rows must match the grid")

    def index(self, r: float) -> int:
        if r <= 0:
            raise ContractError("scale must be positive")
        # argmin keeps the first (lower) grid scale on exact ties
        return int(np.argmin(np.abs(self.grid - r)))


def nearest_scale_lookup(s: LutS, r: float) -> np.ndarray:
    return s.values[s.index(r)]


@dataclass
class LutBundle:
    kernel_set: KernelSet
    lut_w: list[Lut4D]
    lut_s: LutS
    lut_r: list[Lut4D]

    def __post_init__(self):
        k = len(self.kernel_set)
        if len(self.lut_w) != len(self.lut_r) or not self.lut_w:
            raise ContractError("weight and refiner tables need the same non-zero branch count")
        if any(t.out_dim != k for t in self.lut_w) or self.lut_s.values.shape[1] != k:
            raise ContractError("bundle tables disagree with K")
        if any(t.out_dim != 1 for t in self.lut_r):
            raise ContractError("refiner tables must have one output")
        self.predictor = [LutBranch(t) for t in self.lut_w]
        self.refiner = [LutBranch(t) for t in self.lut_r]

    @property
    def K(self) -> int:
        return len(self.kernel_set)

    @property
    def B(self) -> int:
        return len(self.lut_w)

    @property
    def dtype(self):
        return np.dtype(np.float64)

    def scale(self, r: float):
        i = self.lut_s.index(r)
        return self.lut_s.values[i], i

    def scale_backward(self, i, ds):
        self.lut_s.grad[i] += ds

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"w{i}": t.table for i, t in enumerate(self.lut_w)}
        out["s"] = self.lut_s.values
        out.update({f"r{i}": t.table for i, t in enumerate(self.lut_r)})
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {f"w{i}": t.grad for i, t in enumerate(self.lut_w)}
        out["s"] = self.lut_s.grad
        out.update({f"r{i}": t.grad for i, t in enumerate(self.lut_r)})
        return out

    def zero_grad(self):
        for t in [*self.lut_w, *self.lut_r]:
            if t.grad is None:
                t.grad = np.zeros_like(t.table)
            t.grad[...] = 0
        if self.lut_s.grad is None:
            self.lut_s.grad = np.zeros_like(self.lut_s.values)
        self.lut_s.grad[...] = 0

    def copy(self) -> "LutBundle":
        return LutBundle(
            self.kernel_set,
            [Lut4D(t.step, t.table.copy(), t.quant) for t in self.lut_w],
            LutS(self.lut_s.grid.copy(), self.lut_s.values.copy()),
            [Lut4D(t.step, t.table.copy(), t.quant) for t in self.lut_r],
        )


# ---------------------------------------------------------------------------
# Transfer


def _lattice_inputs(step: int) -> np.ndarray:
    lv = levels_for(step) / 255.0
    return np.array(list(itertools.product(lv, repeat=4)), dtype=np.float64)


def _sample(branch: imnet.Mlp4, step: int) -> Lut4D:
    x = _lattice_inputs(step).astype(branch.dtype)
    y = np.concatenate([branch(x[i:i + imnet.CHUNK]) for i in range(0, len(x), imnet.CHUNK)])
    q = 256 // step + 1
    return Lut4D(step, y.astype(np.float64).reshape(q, q, q, q, branch.out_dim))


def transfer_weight_lut(p: imnet.ImNetParams, step: int = STEP_W) -> list[Lut4D]:
    """Per-branch tables of pre-softmax logits at every lattice tuple."""
    return [_sample(m, step) for m in p.predictor]


def transfer_refiner_lut(p: imnet.ImNetParams, step: int = STEP_R) -> list[Lut4D]:
    return [_sample(m, step) for m in p.refiner]


def transfer_scale_lut(p: imnet.ImNetParams, grid=DEFAULT_SCALES) -> LutS:
    grid = np.asarray(grid, dtype=np.float64)
    return LutS(grid, np.stack([p.scale_mod(float(r)).astype(np.float64) for r in grid]))


def transfer(p: imnet.ImNetParams, step_w: int = STEP_W, step_r: int = STEP_R,
             grid=DEFAULT_SCALES) -> LutBundle:
    return LutBundle(p.kernel_set, transfer_weight_lut(p, step_w), transfer_scale_lut(p, grid),
                     transfer_refiner_lut(p, step_r))


# ---------------------------------------------------------------------------
# Fine-tuning


def finetune(bundle: LutBundle, dataset: list[np.ndarray], cfg: TrainConfig,
             rng: np.random.Generator | None = None, log_every: int = 100) -> LutBundle:
    """Optimize every table entry on the full LUT pipeline; returns a new bundle.

    Tables stay in float64 here; 8-bit quantization happens on serialization.
    """
    b = bundle.copy()
    for t in [*b.lut_w, *b.lut_r]:
        t.quant = None
    rng = np.random.default_rng([cfg.seed, 2]) if rng is None else rng
    adam = Adam(cfg.lr)
    hist = []
    for it in range(1, cfg.iterations + 1):
        batch = sample_batch(dataset, cfg, rng)
        trace = imnet.forward(b, batch.lr, batch.r, keep=True)
        rec, guide, wbar = imnet.losses(trace, batch.hr, cfg.beta)
        if not (math.isfinite(rec) and math.isfinite(guide)):
            raise NonFiniteLoss(f"non-finite loss during fine-tuning at iteration {it}")
        b.zero_grad()
        imnet.backward(b, trace, batch.hr, wbar, cfg.lam)
        adam.step(b.named_arrays(), b.named_grads())
        hist.append((rec, guide))
        if it % log_every == 0:
            m = np.mean(hist[-log_every:], axis=0)
            log.info("finetune iter %d  rec %.3e  guide %.3e", it, m[0], m[1])
    return b


# ---------------------------------------------------------------------------
# Serialization

MAGIC = b"IMLUT1"
VERSION = 1
QMAX = 127


def quantize_table(values: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Symmetric int8 codes around the midrange, with float32 scale/offset.

    Every dequantized value lies within half a step (``scale / 2``) of its source.
    """
    lo, hi = float(values.min()), float(values.max())
    offset = float(np.float32((lo + hi) / 2))
    half = max(hi - offset, offset - lo)
    scale = float(np.float32(half / QMAX))
    while scale * QMAX < half:
        scale = float(np.nextafter(np.float32(scale), np.float32(np.inf)))
    if scale == 0.0:
        return 0.0, offset, np.zeros(values.shape, dtype=np.int8)
    codes = np.clip(np.round((values - offset) / scale), -QMAX, QMAX).astype(np.int8)
    return scale, offset, codes


def _encode_table(t: Lut4D) -> bytes:
    if t.quant is not None:
        scale, offset = t.quant
        codes = (np.zeros(t.table.shape, np.int8) if scale == 0 else
                 np.clip(np.round((t.table - offset) / scale), -QMAX, QMAX).astype(np.int8))
    else:
        scale, offset, codes = quantize_table(t.table)
    return struct.pack("<ff", scale, offset) + codes.tobytes()


def to_bytes(b: LutBundle) -> bytes:
    """Little-endian bundle encoding.

    Header: ``IMLUT1``, u16 version, u8 K, u8 B, u8 code length, kernel code,
    u8 Q_w, u8 Q_r, u8 grid count, f32 grid values.  Then each table as
    f32 scale, f32 offset, payload, in the order weight tables, scale table,
    refiner tables.  4-D payloads are int8 in [q0][q1][q2][q3][k] order and
    dequantize to ``offset + scale * code``; the scale table payload is raw
    f32 (its scale/offset fields are written as 1 and 0).
    """
    for t in [*b.lut_w, *b.lut_r]:
        if t.Q > 255:
            raise ContractError(f"Q={t.Q} does not fit the u8 header field")
    qw, qr = b.lut_w[0].Q, b.lut_r[0].Q
    if any(t.Q != qw for t in b.lut_w) or any(t.Q != qr for t in b.lut_r):
        raise ContractError("all tables of one kind must share Q")
    code = b.kernel_set.code.encode("ascii")
    grid = b.lut_s.grid
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBBB", VERSION, b.K, b.B, len(code)))
    buf.write(code)
    buf.write(struct.pack("<BBB", qw, qr, len(grid)))
    buf.write(np.asarray(grid, dtype="<f4").tobytes())
    for t in b.lut_w:
        buf.write(_encode_table(t))
    buf.write(struct.pack("<ff", 1.0, 0.0))
    buf.write(np.asarray(b.lut_s.values, dtype="<f4").tobytes())
    for t in b.lut_r:
        buf.write(_encode_table(t))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"truncated bundle while reading {what}", self.off)
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _step_for(q: int, offset: int) -> int:
    step = 256 // (q - 1) if q > 1 else 0
    if q < 2 or step * (q - 1) != 256 or step not in VALID_STEPS:
        raise FormatError(f"invalid lattice size Q={q}", offset)
    return step


def from_bytes(data: bytes) -> LutBundle:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad bundle magic", 0)
    version, k, nb, n_code = r.unpack("<HBBB", "header")
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}", len(MAGIC))
    code_off = r.off
    try:
        ks = KernelSet.parse(r.take(n_code, "kernel code").decode("ascii"))
    except (UnicodeDecodeError, ContractError) as e:
        raise FormatError(f"bad kernel code: {e}", code_off) from e
    if len(ks) != k:
        raise FormatError(f"kernel code {ks.code!r} does not match K={k}", code_off)
    q_off = r.off
    qw, qr, n_grid = r.unpack("<BBB", "lattice sizes")
    step_w, step_r = _step_for(qw, q_off), _step_for(qr, q_off + 1)
    grid = np.frombuffer(r.take(4 * n_grid, "scale grid"), dtype="<f4").astype(np.float64)

    def table(q, out_dim, step, what):
        scale, offset = r.unpack("<ff", f"{what} header")
        n = q ** 4 * out_dim
        codes = np.frombuffer(r.take(n, f"{what} payload"), dtype=np.int8)
        values = offset + scale * codes.astype(np.float64)
        return Lut4D(step, values.reshape(q, q, q, q, out_dim), (scale, offset))

    lut_w = [table(qw, k, step_w, f"weight table {i}") for i in range(nb)]
    r.unpack("<ff", "scale table header")
    s_vals = np.frombuffer(r.take(4 * n_grid * k, "scale table payload"), dtype="<f4")
    lut_s = LutS(grid, s_vals.astype(np.float64).reshape(n_grid, k))
    lut_r = [table(qr, 1, step_r, f"refiner table {i}") for i in range(nb)]
    if r.off != len(data):
        raise FormatError("trailing bytes after bundle", r.off)
    return LutBundle(ks, lut_w, lut_s, lut_r)


def serialize(b: LutBundle, path) -> int:
    data = to_bytes(b)
    Path(path).write_bytes(data)
    return len(data)


def deserialize(path) -> LutBundle:
    return from_bytes(Path(path).read_bytes())


def quantized(b: LutBundle) -> LutBundle:
    """The bundle as it will be after a serialize/deserialize round trip."""
    return from_bytes(to_bytes(b))
