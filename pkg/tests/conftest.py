import numpy as np
import pytest

from imlut import imnet
from imlut.kernels import KernelSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(k="NLC", branches=3, seed=0, scale=0.5, dtype=np.float64):
    """Small-weight params with non-zero final layers so every path is exercised."""
    p = imnet.ImNetParams.init(KernelSet.parse(k), branches=branches, seed=seed,
                               dtype=dtype, zero_final=False)
    g = np.random.default_rng(seed + 100)
    for name, a in p.named_arrays().items():
        a[...] = g.normal(0.0, scale, a.shape) * (1.0 if a.ndim == 1 else 1.0 / np.sqrt(a.shape[0]))
    return p


def synthetic_images(n=4, size=48, seed=0):
    """Smooth-plus-edges test images built by upscaling coarse random grids."""
    from imlut.kernels import BICUBIC, NEAREST, resample

    g = np.random.default_rng(seed)
    out = []
    for i in range(n):
        smooth = resample(g.random((6, 6)), size / 6, size / 6, BICUBIC)
        blocks = resample(g.random((4, 4)), size / 4, size / 4, NEAREST)
        out.append(np.clip(0.6 * smooth + 0.4 * blocks, 0, 1))
    return out


@pytest.fixture
def images():
    return synthetic_images()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
