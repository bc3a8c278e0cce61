"""IM-Net: weight predictor, scale modulator, refiner and the mixing pipeline.

Forward and backward passes are written out by hand in numpy.  The pipeline
functions (:func:`forward`, :func:`backward`) are generic over the branch
evaluators, so the same code drives both the live network and the LUT
counterparts in :mod:`imlut.lut`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .kernels import KernelSet, axis_operator

PATTERNS: dict[str, tuple[tuple[int, int], ...]] = {
    "S": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "D": ((0, 0), (0, 2), (2, 0), (2, 2)),
    "Y": ((0, 0), (1, 1), (1, -1), (2, 0)),
}
PATTERN_ORDER = ("S", "D", "Y")
PAD = 2
HIDDEN = 64
SCALE_HIDDEN = 32
DEFAULT_ORDER = 16
CHUNK = 1 << 17  # rows per branch call when no backward pass is needed
TRAIN_CHUNK = 1 << 14  # rows per call when caching for backward (cache-sized blocks)


def patterns_for(branches: int) -> list[tuple[tuple[int, int], ...]]:
    if not 1 <= branches <= len(PATTERN_ORDER):
        raise ContractError(f"branch count must be in 1..3, got {branches}")
    return [PATTERNS[name] for name in PATTERN_ORDER[:branches]]


# ---------------------------------------------------------------------------
# Building blocks


class Mlp4:
    """4 -> hidden -> hidden -> out MLP with ReLU, applied row-wise."""

    names = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, w1, b1, w2, b2, w3, b3):
        self.w1, self.b1, self.w2, self.b2, self.w3, self.b3 = w1, b1, w2, b2, w3, b3
        self.grads = {n: np.zeros_like(getattr(self, n)) for n in self.names}

    @classmethod
    def init(cls, rng: np.random.Generator, out_dim: int, hidden: int = HIDDEN,
             dtype=np.float32, zero_final: bool = True) -> "Mlp4":
        def he(fan_in, fan_out):
            return (rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)).astype(dtype)

        w3 = np.zeros((hidden, out_dim), dtype) if zero_final else he(hidden, out_dim) * 0.1
        return cls(he(4, hidden), np.zeros(hidden, dtype), he(hidden, hidden),
                   np.zeros(hidden, dtype), w3, np.zeros(out_dim, dtype))

    @property
    def out_dim(self) -> int:
        return self.w3.shape[1]

    @property
    def dtype(self):
        return self.w1.dtype

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def forward(self, x):
        x = x.astype(self.dtype, copy=False)
        h1 = x @ self.w1
        h1 += self.b1
        np.maximum(h1, 0, out=h1)
        h2 = h1 @ self.w2
        h2 += self.b2
        np.maximum(h2, 0, out=h2)
        y = h2 @ self.w3
        y += self.b3
        return y, (x, h1, h2)

    def backward(self, cache, dy, need_dx: bool = False):
        x, h1, h2 = cache
        g = self.grads
        g["w3"] += h2.T @ dy
        g["b3"] += dy.sum(axis=0)
        dh = dy @ self.w3.T
        np.multiply(dh, h2 > 0, out=dh)
        g["w2"] += h1.T @ dh
        g["b2"] += dh.sum(axis=0)
        dh = dh @ self.w2.T
        np.multiply(dh, h1 > 0, out=dh)
        g["w1"] += x.T @ dh
        g["b1"] += dh.sum(axis=0)
        return dh @ self.w1.T if need_dx else None

    def zero_grad(self):
        for a in self.grads.values():
            a[...] = 0


def encode_scale(r: float, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Sinusoidal scale code [sin(2^i pi r/10), cos(2^i pi r/10)]_i followed by r."""
    if order < 0:
        raise ContractError("encoding order must be >= 0")
    out = np.empty(2 * (order + 1) + 1, dtype=np.float64)
    for i in range(order + 1):
        t = (2.0 ** i) * math.pi * r / 10.0
        out[2 * i] = math.sin(t)
        out[2 * i + 1] = math.cos(t)
    out[-1] = r
    return out


class ScaleModulator:
    """enc(r) -> hidden (ReLU) -> K, followed by 1 + tanh."""

    names = ("v1", "c1", "v2", "c2")

    def __init__(self, v1, c1, v2, c2, order: int = DEFAULT_ORDER):
        self.v1, self.c1, self.v2, self.c2 = v1, c1, v2, c2
        self.order = order
        if v1.shape[0] != 2 * (order + 1) + 1:
            raise ContractError("scale modulator input width does not match encoding order")
        self.grads = {n: np.zeros_like(getattr(self, n)) for n in self.names}

    @classmethod
    def init(cls, rng, k: int, order: int = DEFAULT_ORDER, hidden: int = SCALE_HIDDEN,
             dtype=np.float32, zero_final: bool = True) -> "ScaleModulator":
        d = 2 * (order + 1) + 1
        v1 = (rng.standard_normal((d, hidden)) * math.sqrt(2.0 / d)).astype(dtype)
        v2 = (np.zeros((hidden, k), dtype) if zero_final
              else (rng.standard_normal((hidden, k)) * 0.1).astype(dtype))
        return cls(v1, np.zeros(hidden, dtype), v2, np.zeros(k, dtype), order)

    def arrays(self):
        return [getattr(self, n) for n in self.names]

    def forward(self, r: float):
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ContractError("scale modulator has non-finite parameters")
        e = encode_scale(r, self.order).astype(self.v1.dtype)
        h = np.maximum(e @ self.v1 + self.c1, 0)
        t = np.tanh(h @ self.v2 + self.c2)
        return 1.0 + t, (e, h, t)

    def __call__(self, r: float) -> np.ndarray:
        return self.forward(r)[0]

    def backward(self, cache, ds):
        e, h, t = cache
        dz = ds * (1.0 - t * t)
        g = self.grads
        g["v2"] += np.outer(h, dz)
        g["c2"] += dz
        dh = (self.v2 @ dz) * (h > 0)
        g["v1"] += np.outer(e, dh)
        g["c1"] += dh

    def zero_grad(self):
        for a in self.grads.values():
            a[...] = 0


@dataclass
class ImNetParams:
    kernel_set: KernelSet
    predictor: list[Mlp4]
    refiner: list[Mlp4]
    scale_mod: ScaleModulator

    def __post_init__(self):
        k = len(self.kernel_set)
        if len(self.predictor) != len(self.refiner):
            raise ContractError("predictor and refiner branch counts differ")
        if any(m.out_dim != k for m in self.predictor):
            raise ContractError("predictor output width must equal K")
        if any(m.out_dim != 1 for m in self.refiner):
            raise ContractError("refiner output width must be 1")
        if self.scale_mod.v2.shape[1] != k:
            raise ContractError("scale modulator output width must equal K")

    @classmethod
    def init(cls, kernel_set: KernelSet | str, branches: int = 3, order: int = DEFAULT_ORDER,
             seed: int = 0, dtype=np.float32, zero_final: bool = True) -> "ImNetParams":
        ks = KernelSet.parse(kernel_set) if isinstance(kernel_set, str) else kernel_set
        patterns_for(branches)
        rng = np.random.default_rng(seed)
        k = len(ks)
        pred = [Mlp4.init(rng, k, dtype=dtype, zero_final=zero_final) for _ in range(branches)]
        ref = [Mlp4.init(rng, 1, dtype=dtype, zero_final=zero_final) for _ in range(branches)]
        sm = ScaleModulator.init(rng, k, order, dtype=dtype, zero_final=zero_final)
        return cls(ks, pred, ref, sm)

    @property
    def K(self) -> int:
        return len(self.kernel_set)

    @property
    def B(self) -> int:
        return len(self.predictor)

    @property
    def order(self) -> int:
        return self.scale_mod.order

    @property
    def dtype(self):
        return self.predictor[0].dtype

    def modules(self):
        return [*self.predictor, *self.refiner, self.scale_mod]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, m in enumerate(self.predictor):
            out.update({f"pred{i}.{n}": getattr(m, n) for n in m.names})
        for i, m in enumerate(self.refiner):
            out.update({f"ref{i}.{n}": getattr(m, n) for n in m.names})
        out.update({f"scale.{n}": getattr(self.scale_mod, n) for n in self.scale_mod.names})
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for i, m in enumerate(self.predictor):
            out.update({f"pred{i}.{n}": m.grads[n] for n in m.names})
        for i, m in enumerate(self.refiner):
            out.update({f"ref{i}.{n}": m.grads[n] for n in m.names})
        out.update({f"scale.{n}": self.scale_mod.grads[n] for n in self.scale_mod.names})
        return out

    def zero_grad(self):
        for m in self.modules():
            m.zero_grad()

    def copy(self, dtype=None) -> "ImNetParams":
        def cp(a):
            return a.astype(dtype or a.dtype, copy=True)

        pred = [Mlp4(*map(cp, m.arrays())) for m in self.predictor]
        ref = [Mlp4(*map(cp, m.arrays())) for m in self.refiner]
        sm = ScaleModulator(*map(cp, self.scale_mod.arrays()), order=self.order)
        return ImNetParams(self.kernel_set, pred, ref, sm)

    # component interface used by the pipeline
    def scale(self, r: float):
        return self.scale_mod.forward(r)

    def scale_backward(self, cache, ds):
        self.scale_mod.backward(cache, ds)


# ---------------------------------------------------------------------------
# Pattern gathering with the rotation ensemble


def gather(x: np.ndarray, rot: int, offsets) -> np.ndarray:
    """Rows of four pattern samples for every pixel of the rotated batch ``x``.

    ``x`` has shape (N, H, W); the result has shape (N * h * w, 4) where
    (h, w) are the rotated dimensions.  Borders are edge-replicated.
    """
    xr = np.rot90(x, rot, axes=(1, 2))
    n, h, w = xr.shape
    p = np.pad(xr, ((0, 0), (PAD, PAD), (PAD, PAD)), mode="edge")
    cols = [p[:, PAD + dr:PAD + dr + h, PAD + dc:PAD + dc + w] for dr, dc in offsets]
    return np.stack(cols, axis=-1).reshape(-1, 4)


def _fold_edge_pad(gp: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of edge padding on the last two axes."""
    gp = gp.copy()
    gp[:, pad, :] += gp[:, :pad, :].sum(axis=1)
    gp[:, -pad - 1, :] += gp[:, -pad:, :].sum(axis=1)
    gp[:, :, pad] += gp[:, :, :pad].sum(axis=2)
    gp[:, :, -pad - 1] += gp[:, :, -pad:].sum(axis=2)
    return gp[:, pad:-pad, pad:-pad]


def scatter(dx: np.ndarray, shape, rot: int, offsets) -> np.ndarray:
    """Adjoint of :func:`gather`: accumulate row gradients back onto ``x``."""
    n, hh, ww = shape
    h, w = (hh, ww) if rot % 2 == 0 else (ww, hh)
    dx = dx.reshape(n, h, w, 4)
    gp = np.zeros((n, h + 2 * PAD, w + 2 * PAD), dtype=dx.dtype)
    for i, (dr, dc) in enumerate(offsets):
        gp[:, PAD + dr:PAD + dr + h, PAD + dc:PAD + dc + w] += dx[..., i]
    return np.rot90(_fold_edge_pad(gp, PAD), -rot, axes=(1, 2))


def _unrotate(y: np.ndarray, shape, rot: int) -> np.ndarray:
    n, hh, ww = shape
    h, w = (hh, ww) if rot % 2 == 0 else (ww, hh)
    return np.rot90(y.reshape(n, h, w, -1), -rot, axes=(1, 2))


def _rerotate(g: np.ndarray, rot: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(g, rot, axes=(1, 2))).reshape(-1, g.shape[-1])


def rotations(ensemble: bool) -> tuple[int, ...]:
    return (0, 1, 2, 3) if ensemble else (0,)


def ensemble_eval(branches, x: np.ndarray, ensemble: bool = True, keep: bool = False):
    """Average branch outputs over rotations; returns (N, H, W, out) and caches."""
    rots = rotations(ensemble)
    patterns = patterns_for(len(branches))
    total = None
    caches = []
    for branch, offsets in zip(branches, patterns):
        rows = np.concatenate([gather(x, j, offsets) for j in rots], axis=0)
        chunk = TRAIN_CHUNK if keep else CHUNK
        outs, chunk_caches = [], []
        for i in range(0, len(rows), chunk):
            y, cache = branch.forward(rows[i:i + chunk])
            outs.append(y)
            if keep:
                chunk_caches.append(cache)
        y = np.concatenate(outs, axis=0)
        caches.append(chunk_caches)
        for j, part in zip(rots, np.split(y, len(rots), axis=0)):
            part = _unrotate(part, x.shape, j)
            total = part.copy() if total is None else total + part
    return total / (len(rots) * len(branches)), caches


def ensemble_backward(branches, caches, dout: np.ndarray, shape, ensemble: bool = True,
                      need_dx: bool = False):
    rots = rotations(ensemble)
    patterns = patterns_for(len(branches))
    dout = dout / (len(rots) * len(branches))
    dy = np.concatenate([_rerotate(dout, j) for j in rots], axis=0)
    dx_total = None
    for branch, offsets, chunk_caches in zip(branches, patterns, caches):
        parts = [branch.backward(cache, dy[i * TRAIN_CHUNK:(i + 1) * TRAIN_CHUNK], need_dx)
                 for i, cache in enumerate(chunk_caches)]
        if not need_dx or parts[0] is None:
            continue
        dx = np.concatenate(parts, axis=0)
        for j, part in zip(rots, np.split(dx, len(rots), axis=0)):
            g = scatter(part, shape, j, offsets)
            dx_total = g if dx_total is None else dx_total + g
    return dx_total


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Operations


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ContractError(f"expected (H, W) or (N, H, W), got {x.shape}")
    return x, False


def _check_dims(x: np.ndarray):
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ContractError(f"image must be at least 3x3, got {x.shape[-2:]}")


def forward_weight_predictor(comp, lr, ensemble: bool = True) -> np.ndarray:
    """Normalized LR weight maps, shape (..., H, W, K)."""
    x, single = _batch(lr)
    _check_dims(x)
    logits, _ = ensemble_eval(comp.predictor, x.astype(_dtype(comp), copy=False), ensemble)
    w = softmax(logits)
    return w[0] if single else w


def forward_scale_mod(comp, r: float) -> np.ndarray:
    return comp.scale(r)[0]


def forward_refiner(comp, x, ensemble: bool = True) -> np.ndarray:
    x, single = _batch(x)
    _check_dims(x)
    x = x.astype(_dtype(comp), copy=False)
    res, _ = ensemble_eval(comp.refiner, x, ensemble)
    out = np.clip(x + res[..., 0], 0.0, 1.0)
    return out[0] if single else out


def _ops(ks: KernelSet, h: int, w: int, r_h: float, r_w: float, dtype):
    return [(axis_operator(h, r_h, k).astype(dtype), axis_operator(w, r_w, k).astype(dtype)) for k in ks]


def modulate_and_upsample(w: np.ndarray, s: np.ndarray, ks: KernelSet, r_h: float, r_w: float) -> np.ndarray:
    """Scale each LR weight plane by s[k] and upsample it with kernel k.

    ``w`` is (..., H, W, K); returns (..., rH, rW, K).  No renormalization.
    """
    w, single = (w[None], True) if w.ndim == 3 else (w, False)
    if w.shape[-1] != len(ks) or len(s) != len(ks):
        raise ContractError("weight maps, scale vector and kernel set disagree on K")
    ops = _ops(ks, w.shape[1], w.shape[2], r_h, r_w, w.dtype)
    out = np.stack([a_h @ (s[k] * w[..., k]) @ a_w.T for k, (a_h, a_w) in enumerate(ops)], axis=-1)
    return out[0] if single else out


def mix(images, w: np.ndarray) -> np.ndarray:
    """Per-pixel sum over k of images[k] * w[..., k]."""
    images = list(images)
    if len(images) != w.shape[-1]:
        raise ContractError("number of images does not match number of weight planes")
    out = np.zeros(w.shape[:-1], dtype=np.result_type(w.dtype, images[0].dtype))
    for k, img in enumerate(images):
        if img.shape != w.shape[:-1]:
            raise ContractError(f"mix: shape mismatch {img.shape} vs {w.shape[:-1]}")
        out += img * w[..., k]
    return out


def pseudo_gt_weights(sr_set, gt: np.ndarray, beta: float = 0.1) -> np.ndarray:
    """Temperature softmax of negative per-kernel absolute errors on the 0-255 scale.

    Returns (..., H, W, K).
    """
    if beta <= 0:
        raise ContractError("beta must be positive")
    err = np.stack([np.abs(255.0 * (np.asarray(s) - gt)) for s in sr_set], axis=-1)
    return softmax(-beta * err)


def loss_rec(sr: np.ndarray, gt: np.ndarray) -> float:
    if np.shape(sr) != np.shape(gt):
        raise ContractError("loss_rec: shape mismatch")
    d = np.asarray(sr, dtype=np.float64) - gt
    return float(np.mean(d * d))


def loss_guide(w: np.ndarray, wbar: np.ndarray) -> float:
    if np.shape(w) != np.shape(wbar):
        raise ContractError("loss_guide: shape mismatch")
    d = np.asarray(w, dtype=np.float64) - wbar
    return float(np.mean(d * d))


def loss_total(rec: float, guide: float, lam: float = 0.1) -> float:
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    return rec + lam * guide


def _dtype(comp):
    return np.dtype(comp.dtype)


# ---------------------------------------------------------------------------
# Full pipeline with caches for backprop


@dataclass
class Trace:
    shape_lr: tuple
    shape_hr: tuple
    r_h: float
    r_w: float
    ensemble: bool
    ops: list
    sr_set: list
    weights: np.ndarray          # LR, normalized (N, H, W, K)
    s: np.ndarray
    s_cache: object
    w_sr: np.ndarray             # HR, modulated (N, rH, rW, K)
    mixed: np.ndarray
    residual: np.ndarray
    out: np.ndarray
    pred_caches: list = field(default_factory=list)
    ref_caches: list = field(default_factory=list)


def effective_scale(r_h: float, r_w: float) -> float:
    return math.sqrt(r_h * r_w)


def forward(comp, lr, r_h: float, r_w: float | None = None, ensemble: bool = True,
            keep: bool = False, r_mod: float | None = None) -> Trace:
    """Run LR -> weight maps -> modulation -> upsampling -> mixing -> refinement.

    ``comp`` provides ``predictor`` / ``refiner`` branch lists, ``kernel_set``
    and ``scale(r)``; both :class:`ImNetParams` and LUT bundles qualify.
    The modulator sees ``sqrt(r_h * r_w)`` unless ``r_mod`` overrides it.
    """
    r_w = r_h if r_w is None else r_w
    if r_h <= 0 or r_w <= 0:
        raise ContractError("scales must be positive")
    x, _ = _batch(lr)
    _check_dims(x)
    dtype = _dtype(comp)
    x = x.astype(dtype, copy=False)
    ks = comp.kernel_set
    n, h, w = x.shape
    ops = _ops(ks, h, w, r_h, r_w, dtype)
    sr_set = [a_h @ x @ a_w.T for a_h, a_w in ops]

    logits, pred_caches = ensemble_eval(comp.predictor, x, ensemble, keep)
    weights = softmax(logits)
    s, s_cache = comp.scale(effective_scale(r_h, r_w) if r_mod is None else r_mod)
    s = np.asarray(s, dtype=dtype)
    w_sr = np.stack([a_h @ (s[k] * weights[..., k]) @ a_w.T for k, (a_h, a_w) in enumerate(ops)], axis=-1)
    mixed = mix(sr_set, w_sr)
    res, ref_caches = ensemble_eval(comp.refiner, mixed, ensemble, keep)
    residual = res[..., 0]
    out = np.clip(mixed + residual, 0.0, 1.0)
    return Trace((n, h, w), mixed.shape, r_h, r_w, ensemble, ops, sr_set, weights, s, s_cache,
                 w_sr, mixed, residual, out, pred_caches, ref_caches)


def losses(trace: Trace, gt: np.ndarray, beta: float = 0.1):
    """Return (rec, guide, wbar) for a traced batch against ground truth."""
    gt = np.asarray(gt, dtype=trace.out.dtype).reshape(trace.out.shape)
    wbar = pseudo_gt_weights(trace.sr_set, gt, beta)
    return loss_rec(trace.out, gt), loss_guide(trace.w_sr, wbar), wbar


def backward(comp, trace: Trace, gt: np.ndarray, wbar: np.ndarray, lam: float = 0.1,
             refiner_input_grad: bool = True) -> None:
    """Accumulate gradients of rec + lam * guide into ``comp``'s grad buffers."""
    if not all(trace.pred_caches) or not all(trace.ref_caches):
        raise ContractError("trace has no cached activations; run forward(..., keep=True)")
    gt =np.asarray(gt, dtype=trace.out.dtype).reshape(trace.out.shape)
    n_pix = trace.out.size
    pre = trace.mixed + trace.residual
    d_out = 2.0 * (trace.out - gt) / n_pix
    d_pre = d_out * ((pre > 0) & (pre < 1))
    d_mixed = d_pre.copy()
    dx = ensemble_backward(comp.refiner, trace.ref_caches, d_pre[..., None], trace.mixed.shape,
                           trace.ensemble, need_dx=refiner_input_grad)
    if dx is not None:
        d_mixed += dx

    d_wsr = np.stack([d_mixed * img for img in trace.sr_set], axis=-1)
    if lam:
        d_wsr += lam * 2.0 * (trace.w_sr - wbar) / trace.w_sr.size

    k_count = len(trace.ops)
    d_w = np.empty_like(trace.weights)
    ds = np.zeros(k_count, dtype=np.float64)
    for k, (a_h, a_w) in enumerate(trace.ops):
        d_hat = a_h.T @ d_wsr[..., k] @ a_w
        ds[k] = float(np.sum(d_hat * trace.weights[..., k], dtype=np.float64))
        d_w[..., k] = trace.s[k] * d_hat
    comp.scale_backward(trace.s_cache, ds.astype(trace.s.dtype))

    wts = trace.weights
    d_logits = wts * (d_w - np.sum(d_w * wts, axis=-1, keepdims=True))
    ensemble_backward(comp.predictor, trace.pred_caches, d_logits, trace.shape_lr, trace.ensemble)


# ---------------------------------------------------------------------------
# Checkpoint file

MAGIC = b"IMNET"
VERSION = 1


def save_params(p: ImNetParams, path) -> None:
    """Write parameters as a little-endian binary checkpoint.

    Layout: magic ``IMNET``, u16 version, u8 K, u8 B, u8 N, u8 code length,
    kernel code bytes, u16 hidden width, u16 scale-modulator width, then every
    array of :meth:`ImNetParams.named_arrays` as raw float32 in that order.
    """
    code = p.kernel_set.code.encode("ascii")
    hidden = p.predictor[0].w1.shape[1]
    parts = [MAGIC, struct.pack("<HBBBB", VERSION, p.K, p.B, p.order, len(code)), code,
             struct.pack("<HH", hidden, p.scale_mod.v1.shape[1])]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in p.named_arrays().values()]
    Path(path).write_bytes(b"".join(parts))


def load_params(path, dtype=np.float32) -> ImNetParams:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    off = 5
    try:
        version, k, b, order, n_code = struct.unpack_from("<HBBBB", data, off)
    except struct.error as e:
        raise FormatError("truncated checkpoint header", off) from e
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", off)
    off += 6
    code = data[off:off + n_code].decode("ascii")
    off += n_code
    try:
        hidden, s_hidden = struct.unpack_from("<HH", data, off)
    except struct.error as e:
        raise FormatError("truncated checkpoint header", off) from e
    off += 4
    ks = KernelSet.parse(code)
    if len(ks) != k:
        raise FormatError(f"kernel code {code!r} does not match K={k}", 7)
    d = 2 * (order + 1) + 1

    def take(*shape):
        nonlocal off
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(data):
            raise FormatError("truncated checkpoint payload", off)
        a = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(dtype)
        off = end
        return a

    def mlp(out_dim):
        return Mlp4(take(4, hidden), take(hidden), take(hidden, hidden), take(hidden),
                    take(hidden, out_dim), take(out_dim))

    pred = [mlp(k) for _ in range(b)]
    ref = [mlp(1) for _ in range(b)]
    sm = ScaleModulator(take(d, s_hidden), take(s_hidden), take(s_hidden, k), take(k), order)
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint payload", off)
    return ImNetParams(ks, pred, ref, sm)
