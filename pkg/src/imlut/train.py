"""Mixed-scale IM-Net training with Adam."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import imnet
from .errors import ContractError
from .imgio import load_image, quantize
from .kernels import BICUBIC, out_size, resample

log = logging.getLogger(__name__)

DEFAULT_SCALES = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)


@dataclass
class TrainConfig:
    iterations: int = 100_000
    batch_size: int = 16
    lr: float = 1e-3
    lam: float = 0.1
    beta: float = 0.1
    order: int = imnet.DEFAULT_ORDER
    patch: int = 32
    scales: tuple[float, ...] = DEFAULT_SCALES
    seed: int = 0
    dataset: str | None = None
    kernels: str = "NLC"
    branches: int = 3
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.patch < 8:
            raise ContractError("patch must be >= 8")
        if not self.scales or min(self.scales) < 1:
            raise ContractError("scales must be non-empty and >= 1")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read ``key = value`` lines; ``#`` starts a comment."""
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value")
            key, val = (t.strip() for t in line.split("=", 1))
            if key not in kinds:
                raise ContractError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "scales":
                v = ",".join(repr(s) for s in v)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _parse_value(key, val):
    if key == "scales":
        return tuple(float(t) for t in val.split(","))
    if key in ("lr", "lam", "beta"):
        return float(val)
    if key in ("dataset",):
        return val or None
    if key in ("kernels",):
        return val
    return int(val)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        self.m = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("v/")}


# ---------------------------------------------------------------------------
# Data


def load_dataset(root) -> list[np.ndarray]:
    """HR luma images from ``<root>/HR/*.png`` (or ``<root>/*.png``), sorted by name."""
    root = Path(root)
    hr_dir = root / "HR" if (root / "HR").is_dir() else root
    files = sorted(p for p in hr_dir.iterdir() if p.suffix.lower() in (".png", ".pgm"))
    if not files:
        raise ContractError(f"no images found under {hr_dir}")
    return [load_image(p) for p in files]


@dataclass
class Batch:
    lr: np.ndarray      # (N, p, p)
    hr: np.ndarray      # (N, rp, rp)
    r: float


def sample_batch(dataset: list[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Draw one scale for the whole batch, then random HR crops and their LR versions."""
    r = float(cfg.scales[rng.integers(len(cfg.scales))])
    size = out_size(cfg.patch, r)
    if not any(im.shape[0] >= size and im.shape[1] >= size for im in dataset):
        raise ContractError(f"no dataset image is large enough for a {size}x{size} crop")
    lrs, hrs = [], []
    while len(hrs) < cfg.batch_size:
        im = dataset[rng.integers(len(dataset))]
        if im.shape[0] < size or im.shape[1] < size:
            continue
        top = rng.integers(im.shape[0] - size + 1)
        left = rng.integers(im.shape[1] - size + 1)
        crop = im[top:top + size, left:left + size]
        lrs.append(quantize(resample(crop, 1.0 / r, 1.0 / r, BICUBIC, antialias=True)))
        hrs.append(crop)
    return Batch(np.stack(lrs), np.stack(hrs), r)


# ---------------------------------------------------------------------------
# Optimization


class NonFiniteLoss(RuntimeError):
    pass


def train_step(p: imnet.ImNetParams, adam: Adam, batch: Batch, cfg: TrainConfig):
    """One forward/backward pass over ``batch`` and one Adam update (in place).

    Returns ``(rec, guide)`` measured before the update.
    """
    dtype = p.dtype
    lr = batch.lr.astype(dtype)
    gt = batch.hr.astype(dtype)
    trace = imnet.forward(p, lr, batch.r, keep=True)
    rec, guide, wbar = imnet.losses(trace, gt, cfg.beta)
    if not (math.isfinite(rec) and math.isfinite(guide)):
        raise NonFiniteLoss(f"non-finite loss at scale {batch.r}: rec={rec}, guide={guide}")
    p.zero_grad()
    imnet.backward(p, trace, gt, wbar, cfg.lam)
    adam.step(p.named_arrays(), p.named_grads())
    return rec, guide


@dataclass
class TrainState:
    params: imnet.ImNetParams
    adam: Adam
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    p = imnet.ImNetParams.init(cfg.kernels, cfg.branches, cfg.order, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(p, Adam(cfg.lr), rng)


def save_state(state: TrainState, out_dir) -> Path:
    """Write ``latest.imnet`` plus the optimizer/RNG state needed to resume."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imnet.save_params(state.params, out_dir / "latest.imnet")
    arrays = dict(state.adam.state_arrays())
    meta = {"iteration": state.iteration, "adam_t": state.adam.t,
            "rng": state.rng.bit_generator.state}
    np.savez(out_dir / "train_state.npz", meta=np.array(json.dumps(meta)), **arrays)
    return out_dir / "latest.imnet"


def load_state(cfg: TrainConfig, out_dir) -> TrainState:
    out_dir = Path(out_dir)
    p = imnet.load_params(out_dir / "latest.imnet")
    with np.load(out_dir / "train_state.npz") as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k] for k in z.files if k != "meta"}
    adam = Adam(cfg.lr)
    adam.load_state(meta["adam_t"], arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(p, adam, rng, meta["iteration"])


def train(cfg: TrainConfig, dataset: list[np.ndarray] | None = None, out_dir=None,
          resume: bool = False, state: TrainState | None = None) -> imnet.ImNetParams:
    """Run ``cfg.iterations`` steps; checkpoint every ``cfg.checkpoint_every``.

    Losses are appended to ``<out_dir>/loss.csv`` when ``out_dir`` is given.
    """
    if dataset is None:
        if cfg.dataset is None:
            raise ContractError("no dataset given")
        dataset = load_dataset(cfg.dataset)
    if state is None:
        state = load_state(cfg, out_dir) if resume else init_state(cfg)
    log_file = None
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss.csv"
        fresh = not (resume and log_path.exists())
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["iter", "rec", "guide"])
    try:
        while state.iteration < cfg.iterations:
            batch = sample_batch(dataset, cfg, state.rng)
            rec, guide = train_step(state.params, state.adam, batch, cfg)
            state.iteration += 1
            state.history.append((rec, guide))
            if writer is not None:
                writer.writerow([state.iteration, f"{rec:.6e}", f"{guide:.6e}"])
            if state.iteration % cfg.log_every == 0:
                recent = np.mean(state.history[-cfg.log_every:], axis=0)
                log.info("iter %d  rec %.3e  guide %.3e", state.iteration, recent[0], recent[1])
            if out_dir is not None and state.iteration % cfg.checkpoint_every == 0:
                try:
                    save_state(state, out_dir)
                    log_file.flush()
                except OSError as e:
                    raise OSError(f"checkpoint at iteration {state.iteration} failed: {e}") from e
        if out_dir is not None:
            save_state(state, out_dir)
    finally:
        if log_file is not None:
            log_file.close()
    return state.params


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
