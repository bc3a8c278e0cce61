"""Offline stand-in datasets built from photos shipped with installed packages.

Used when the usual SR benchmarks cannot be downloaded.  Images are written
as 8-bit luma PNGs under ``<dest>/HR``.
"""
from __future__ import annotations

import importlib.util
from pathlib import Path

from .errors import ContractError
from .imgio import load_image, save_image

# (package, relative path) pairs; the eval split never overlaps the train split
EVAL_SOURCES = [
    ("skimage", "data/astronaut.png"),
    ("skimage", "data/camera.png"),
    ("skimage", "data/chelsea.png"),
    ("skimage", "data/coffee.png"),
    ("matplotlib", "mpl-data/sample_data/grace_hopper.jpg"),
]
TRAIN_SOURCES = [
    ("skimage", "data/rocket.jpg"),
    ("skimage", "data/brick.png"),
    ("skimage", "data/grass.png"),
    ("skimage", "data/gravel.png"),
    ("skimage", "data/moon.png"),
    ("skimage", "data/coins.png"),
    ("skimage", "data/hubble_deep_field.jpg"),
    ("skimage", "data/retina.jpg"),
    ("skimage", "data/ihc.png"),
    ("skimage", "data/page.png"),
    ("skimage", "data/text.png"),
    ("skimage", "data/motorcycle_left.png"),
    ("skimage", "data/motorcycle_right.png"),
    ("skimage", "data/cell.png"),
    ("skimage", "data/color.png"),
    ("sklearn", "datasets/images/china.jpg"),
    ("sklearn", "datasets/images/flower.jpg"),
]


def _resolve(package: str, rel: str) -> Path | None:
    spec = importlib.util.find_spec(package)
    if spec is None or not spec.submodule_search_locations:
        return None
    path = Path(list(spec.submodule_search_locations)[0]) / rel
    return path if path.exists() else None


def available(sources) -> list[Path]:
    return [p for p in (_resolve(pkg, rel) for pkg, rel in sources) if p is not None]


def build(dest, split: str = "train") -> Path:
    """Write the ``train`` or ``eval`` split to ``<dest>/HR`` and return that directory.

    JPEG sources are decoded by Pillow; everything is reduced to luma.
    """
    if split not in ("train", "eval"):
        raise ContractError(f"unknown split {split!r}; expected 'train' or 'eval'")
    sources = TRAIN_SOURCES if split == "train" else EVAL_SOURCES
    hr = Path(dest) / "HR"
    hr.mkdir(parents=True, exist_ok=True)
    for path in available(sources):
        out = hr / (path.stem + ".png")
        if not out.exists():
            save_image(_load_any(path), out)
    return hr


def _load_any(path: Path):
    if path.suffix.lower() in (".png", ".pgm"):
        return load_image(path)
    import numpy as np
    from PIL import Image

    from .imgio import rgb_to_luma

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb_to_luma(arr)
