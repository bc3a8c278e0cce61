import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imlut.errors import ContractError
from imlut.kernels import (BICUBIC, BILINEAR, LANCZOS2, LANCZOS3, NEAREST, KernelSet,
                           axis_operator, kernel_weight, out_size, resample, resample_set)

ALL = [NEAREST, BILINEAR, BICUBIC, LANCZOS2, LANCZOS3]


def bilinear_oracle(img, r):
    """Direct per-pixel bilinear evaluation with half-pixel centres and edge clamping."""
    h, w = img.shape
    ho, wo = out_size(h, r), out_size(w, r)
    out = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            y = min(max((i + 0.5) / r - 0.5, 0.0), h - 1)
            x = min(max((j + 0.5) / r - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


class TestKernelWeight:
    def test_bicubic_values(self):
        assert kernel_weight(BICUBIC, 0.0) == 1.0
        assert kernel_weight(BICUBIC, 1.0) == 0.0
        assert kernel_weight(BICUBIC, 0.5) == pytest.approx(0.5625, abs=1e-15)
        assert kernel_weight(BICUBIC, 1.5) == pytest.approx(-0.0625, abs=1e-15)

    def test_nearest_left_convention(self):
        assert kernel_weight(NEAREST, -0.5) == 1.0
        assert kernel_weight(NEAREST, 0.5) == 0.0
        assert kernel_weight(NEAREST, 0.49) == 1.0

    def test_lanczos_integer_zeros(self):
        for k in (LANCZOS2, LANCZOS3):
            x = np.arange(-3, 4, dtype=float)
            w = kernel_weight(k, x)
            np.testing.assert_array_equal(w, (x == 0).astype(float))

    @pytest.mark.parametrize("k", ALL)
    def test_support_and_symmetry(self, k):
        x = np.linspace(-5, 5, 2001)
        w = kernel_weight(k, x)
        assert np.all(w[np.abs(x) > k.support] == 0)
        if k is not NEAREST:
            np.testing.assert_array_equal(w, kernel_weight(k, -x))


class TestKernelSet:
    def test_parse(self):
        ks = KernelSet.parse("NLCZZ3")
        assert [k.code for k in ks] == ["N", "L", "C", "Z", "Z3"]
        assert ks.code == "NLCZZ3" and len(ks) == 5

    def test_duplicates_rejected(self):
        with pytest.raises(ContractError):
            KernelSet.parse("NLN")

    def test_unknown_code(self):
        with pytest.raises(ContractError):
            KernelSet.parse("NQ")


class TestResample:
    def test_bilinear_2x2_against_oracle(self):
        img = np.array([[0.1, 0.9], [0.4, 0.3]])
        np.testing.assert_allclose(resample(img, 2, 2, BILINEAR), bilinear_oracle(img, 2), atol=1e-15)

    def test_bilinear_delta_against_oracle(self):
        img = np.zeros((7, 7))
        img[3, 3] = 1.0
        for r in (2.0, 2.5, 3.0):
            np.testing.assert_allclose(resample(img, r, r, BILINEAR), bilinear_oracle(img, r),
                                       atol=1e-14)

    def test_random_against_oracle(self, rng):
        img = rng.random((6, 9))
        np.testing.assert_allclose(resample(img, 1.7, 1.7, BILINEAR), bilinear_oracle(img, 1.7),
                                   atol=1e-14)

    @pytest.mark.parametrize("k", ALL)
    def test_unit_scale_identity(self, k, rng):
        img = rng.random((9, 13))
        np.testing.assert_array_equal(resample(img, 1, 1, k), img)

    @pytest.mark.parametrize("k", ALL)
    @pytest.mark.parametrize("aa", [False, True])
    def test_partition_of_unity(self, k, aa):
        for r in (0.3, 0.5, 1.5, 2.4, 4.0):
            op = axis_operator(17, r, k, antialias=aa)
            np.testing.assert_allclose(op.sum(axis=1), 1.0, atol=1e-12)
            out = resample(np.full((11, 17), 0.37), r, r, k, antialias=aa)
            np.testing.assert_allclose(out, 0.37, atol=1e-12)

    @pytest.mark.parametrize("k", ALL)
    def test_flip_equivariance_integer_scales(self, k, rng):
        img = rng.random((8, 10))
        for r in (2, 3, 4):
            a = resample(img[:, ::-1], r, r, k)
            b = resample(img, r, r, k)[:, ::-1]
            np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("k", [BILINEAR, BICUBIC, LANCZOS2, LANCZOS3])
    def test_flip_equivariance_fractional(self, k, rng):
        img = rng.random((10, 10))
        a = resample(img[::-1], 1.5, 1.5, k)
        b = resample(img, 1.5, 1.5, k)[::-1]
        np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 200), r=st.floats(1.0, 6.0))
    def test_output_dims(self, n, r):
        op = axis_operator(n, r, BILINEAR)
        assert op.shape == (int(np.floor(r * n + 0.5)), n)

    def test_anisotropic_dims(self):
        out = resample(np.zeros((10, 25)), 2.0, 2.4, BICUBIC)
        assert out.shape == (20, 60)

    @pytest.mark.parametrize("k", [NEAREST, BILINEAR])
    def test_range_preserving(self, k, rng):
        img = rng.random((12, 12))
        out = resample(img, 2.7, 3.1, k)
        assert out.min() >= img.min() - 1e-15 and out.max() <= img.max() + 1e-15

    def test_no_internal_clamp(self):
        img = np.zeros((8, 8))
        img[:, 4:] = 1.0
        out = resample(img, 3, 3, BICUBIC)
        assert out.max() > 1.0 and out.min() < 0.0

    def test_antialias_constant(self):
        out = resample(np.full((30, 30), 0.6), 1 / 3, 1 / 3, BICUBIC, antialias=True)
        assert out.shape == (10, 10)
        np.testing.assert_allclose(out, 0.6, atol=1e-12)

    def test_bad_scale(self):
        with pytest.raises(ContractError):
            resample(np.zeros((4, 4)), 0, 2, BILINEAR)

    def test_batch_axes(self, rng):
        img = rng.random((3, 6, 6))
        out = resample(img, 2, 2, BICUBIC)
        for i in range(3):
            np.testing.assert_allclose(out[i], resample(img[i], 2, 2, BICUBIC), atol=1e-15)


class TestResampleSet:
    def test_matches_independent_calls(self, rng):
        img = rng.random((7, 7))
        ks = KernelSet.parse("NLC")
        out = resample_set(img, ks, 2, 2)
        assert len(out) == 3
        for o, k in zip(out, ks):
            np.testing.assert_array_equal(o, resample(img, 2, 2, k))

    def test_constant(self):
        out = resample_set(np.full((5, 5), 0.2), KernelSet.parse("NL"), 3, 3)
        for o in out:
            np.testing.assert_allclose(o, 0.2, atol=1e-12)
