import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_params, synthetic_images
from imlut import imnet, lut
from imlut.errors import ContractError, FormatError
from imlut.train import TrainConfig


def tetra_oracle(t, p):
    """Scalar 4-simplex walk written from the definition."""
    step, q_max = t.step, t.Q - 2
    q = [min(int(c // step), q_max) for c in p]
    lo = [min(step * qi, 255) for qi in q]
    hi = [min(step * (qi + 1), 255) for qi in q]
    f = [(c - a) / (b - a) for c, a, b in zip(p, lo, hi)]
    order = sorted(range(4), key=lambda i: (-f[i], i))
    fs = [f[i] for i in order] + [0.0]
    vert = list(q)
    out = (1 - fs[0]) * t.table[tuple(vert)]
    for m in range(4):
        vert[order[m]] += 1
        out = out + (fs[m] - fs[m + 1]) * t.table[tuple(vert)]
    return out


def random_table(step, out_dim, seed=0):
    q = 256 // step + 1
    return lut.Lut4D(step, np.random.default_rng(seed).normal(size=(q, q, q, q, out_dim)))


class TestLattice:
    def test_levels(self):
        np.testing.assert_array_equal(lut.levels_for(32), [0, 32, 64, 96, 128, 160, 192, 224, 255])
        assert len(lut.levels_for(16)) == 17
        assert len(lut.levels_for(1)) == 257
        with pytest.raises(ContractError):
            lut.levels_for(3)

    def test_bad_shape(self):
        with pytest.raises(ContractError):
            lut.Lut4D(32, np.zeros((8, 8, 8, 8, 1)))


class TestTetra:
    @pytest.mark.parametrize("step", [16, 32, 64])
    def test_lattice_exact(self, step):
        t = random_table(step, 3, seed=step)
        g = np.random.default_rng(1)
        idx = g.integers(0, t.Q, size=(1000, 4))
        codes = t.levels[idx]
        expected = t.table[idx[:, 0], idx[:, 1], idx[:, 2], idx[:, 3]]
        np.testing.assert_array_equal(lut.tetra_lookup(t, codes), expected)

    @pytest.mark.parametrize("step", [16, 32, 64])
    def test_linear_reproduction(self, step):
        g = np.random.default_rng(step)
        a, c = g.normal(size=4), g.normal()
        lv = lut.levels_for(step)
        grid = np.stack(np.meshgrid(lv, lv, lv, lv, indexing="ij"), axis=-1)
        t = lut.Lut4D(step, (grid @ a + c)[..., None])
        codes = g.integers(0, 256, size=(10_000, 4)).astype(float)
        np.testing.assert_allclose(lut.tetra_lookup(t, codes)[:, 0], codes @ a + c, atol=1e-9, rtol=0)
        real = g.uniform(0, 255, size=(2000, 4))
        np.testing.assert_allclose(lut.tetra_lookup(t, real)[:, 0], real @ a + c, atol=1e-9, rtol=0)

    def test_sum_reproduction(self):
        lv = lut.levels_for(32)
        grid = np.stack(np.meshgrid(lv, lv, lv, lv, indexing="ij"), axis=-1)
        t = lut.Lut4D(32, (0.25 * grid.sum(-1) - 3.0)[..., None])
        codes = np.random.default_rng(0).integers(0, 256, size=(500, 4))
        np.testing.assert_allclose(lut.tetra_lookup(t, codes)[:, 0], 0.25 * codes.sum(1) - 3.0,
                                   atol=1e-9)

    def test_continuity(self):
        t = random_table(32, 2, seed=4)
        g = np.random.default_rng(5)
        worst = 0.0
        for _ in range(200):
            base = g.uniform(0, 255, 4)
            axis = g.integers(4)
            b = t.levels[g.integers(1, t.Q - 1)]
            left, right = base.copy(), base.copy()
            left[axis], right[axis] = np.nextafter(b, -np.inf), b
            jump = np.abs(lut.tetra_lookup(t, left) - lut.tetra_lookup(t, right)).max()
            worst = max(worst, jump)
        assert worst <= 1e-9

    def test_against_oracle(self):
        t = random_table(32, 3, seed=7)
        g = np.random.default_rng(8)
        codes = np.concatenate([g.integers(0, 256, (300, 4)).astype(float),
                                np.full((5, 4), 100.0), np.array([[255.0, 255, 0, 17]] * 2)])
        ours = lut.tetra_lookup(t, codes)
        for p, o in zip(codes, ours):
            np.testing.assert_allclose(o, tetra_oracle(t, p), atol=1e-12)

    def test_diagonal(self):
        t = random_table(32, 1, seed=9)
        f = 0.375
        p = np.full(4, 64 + 32 * f)
        expected = (1 - f) * t.table[2, 2, 2, 2] + f * t.table[3, 3, 3, 3]
        np.testing.assert_allclose(lut.tetra_lookup(t, p), expected, atol=1e-14)

    def test_out_of_range(self):
        t = random_table(64, 1)
        with pytest.raises(ContractError):
            lut.tetra_lookup(t, [0, 0, 0, 256])
        with pytest.raises(ContractError):
            lut.tetra_lookup(t, [-1, 0, 0, 0])


class TestScaleLut:
    def test_nearest(self):
        s = lut.LutS(np.array(lut.DEFAULT_SCALES), np.arange(7.0)[:, None] * np.ones((1, 3)))
        assert lut.nearest_scale_lookup(s, 2.0)[0] == 1
        assert lut.nearest_scale_lookup(s, 2.3)[0] == 2
        assert lut.nearest_scale_lookup(s, 2.25)[0] == 1
        assert lut.nearest_scale_lookup(s, 3.75)[0] == 4
        assert lut.nearest_scale_lookup(s, 1.0)[0] == 0
        assert lut.nearest_scale_lookup(s, 9.0)[0] == 6

    def test_grid_must_increase(self):
        with pytest.raises(ContractError):
            lut.LutS(np.array([2.0, 1.5]), np.zeros((2, 3)))


class TestTransfer:
    def test_counts(self):
        b = lut.transfer(imnet.ImNetParams.init("NLC"))
        assert sum(t.size for t in b.lut_w) == 59_049
        assert sum(t.size for t in b.lut_r) == 250_563
        assert b.lut_s.values.shape == (7, 3)

    def test_zero_init(self):
        b = lut.transfer(imnet.ImNetParams.init("NLC"))
        for t in [*b.lut_w, *b.lut_r]:
            assert not np.any(t.table)
        np.testing.assert_array_equal(b.lut_s.values, 1.0)

    def test_lattice_entries_match_network(self):
        p = random_params(seed=11)
        b = lut.transfer(p)
        g = np.random.default_rng(0)
        for branch, t in zip(p.predictor, b.lut_w):
            idx = g.integers(0, t.Q, (50, 4))
            out = lut.tetra_lookup(t, t.levels[idx])
            np.testing.assert_array_equal(out, t.table[tuple(idx.T)])
            # BLAS may round differently for other batch sizes, hence the tolerance
            np.testing.assert_allclose(out, branch(t.levels[idx] / 255.0), atol=1e-12, rtol=0)
        for branch, t in zip(p.refiner, b.lut_r):
            idx = g.integers(0, t.Q, (50, 4))
            np.testing.assert_allclose(lut.tetra_lookup(t, t.levels[idx]),
                                       branch(t.levels[idx] / 255.0), atol=1e-12, rtol=0)

    def test_scale_entries(self):
        p = random_params(seed=12)
        b = lut.transfer(p)
        np.testing.assert_array_equal(b.scale(2.0)[0], imnet.forward_scale_mod(p, 2.0))

    def test_predictor_parity_on_lattice_images(self):
        p = random_params(seed=13)
        b = lut.transfer(p)
        g = np.random.default_rng(1)
        lr = lut.levels_for(32)[g.integers(0, 9, (2, 7, 8))] / 255.0
        np.testing.assert_allclose(imnet.forward_weight_predictor(b, lr),
                                   imnet.forward_weight_predictor(p, lr), atol=1e-12)
        hr = lut.levels_for(16)[g.integers(0, 17, (9, 9))] / 255.0
        np.testing.assert_allclose(imnet.forward_refiner(b, hr), imnet.forward_refiner(p, hr),
                                   atol=1e-12)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        b = lut.transfer(random_params(seed=14))
        n = lut.serialize(b, tmp_path / "a.imlut")
        c = lut.deserialize(tmp_path / "a.imlut")
        assert n == (tmp_path / "a.imlut").stat().st_size
        assert c.kernel_set.code == "NLC" and c.B == 3
        lut.serialize(c, tmp_path / "b.imlut")
        assert (tmp_path / "a.imlut").read_bytes() == (tmp_path / "b.imlut").read_bytes()
        d = lut.deserialize(tmp_path / "b.imlut")
        for x, y in zip(c.named_arrays().values(), d.named_arrays().values()):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(c.lut_s.values, b.lut_s.values.astype(np.float32))

    def test_default_size(self):
        b = lut.transfer(imnet.ImNetParams.init("NLC"))
        size = len(lut.to_bytes(b))
        header = 6 + 5 + 3 + 3 + 4 * 7
        assert size == header + 8 * 7 + 59_049 + 250_563 + 4 * 21
        assert size <= 420 * 1024

    def test_step_sweep_sizes(self):
        p = imnet.ImNetParams.init("NLC")
        sizes = [len(lut.to_bytes(lut.transfer(p, step_w=s))) for s in (16, 32, 64)]
        assert sizes[0] > sizes[1] > sizes[2]

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), spread=st.floats(1e-6, 1e3), shift=st.floats(-50, 50))
    def test_quantization_bound(self, seed, spread, shift):
        v = np.random.default_rng(seed).normal(shift, spread, size=300)
        scale, offset, codes = lut.quantize_table(v)
        deq = offset + scale * codes.astype(np.float64)
        assert np.max(np.abs(deq - v)) <= scale / 2 + 1e-9 * max(1.0, abs(shift) + spread)
        assert codes.min() >= -127 and codes.max() <= 127

    def test_constant_table(self):
        scale, offset, codes = lut.quantize_table(np.full(10, 0.25))
        assert scale == 0.0 and offset == 0.25 and not codes.any()

    def test_bad_magic(self, tmp_path):
        data = lut.to_bytes(lut.transfer(imnet.ImNetParams.init("NL", branches=1)))
        with pytest.raises(FormatError) as e:
            lut.from_bytes(b"XMLUT1" + data[6:])
        assert e.value.offset == 0
        with pytest.raises(FormatError) as e:
            lut.from_bytes(data[:-10])
        assert e.value.offset is not None and e.value.offset > 0
        with pytest.raises(FormatError):
            lut.from_bytes(data + b"\0")
        with pytest.raises(FormatError):
            lut.from_bytes(data[:6] + b"\x09\x00" + data[8:])



class TestFinetune:
    def test_zero_iterations(self, images):
        b = lut.transfer(random_params(seed=15))
        c = lut.finetune(b, images, TrainConfig(iterations=0))
        for x, y in zip(b.named_arrays().values(), c.named_arrays().values()):
            np.testing.assert_array_equal(x, y)

    def test_changes_tables(self, images):
        b = lut.transfer(random_params(seed=16))
        c = lut.finetune(b, images, TrainConfig(iterations=2, batch_size=2, patch=8, lr=1e-3))
        assert any(np.any(x != y) for x, y in zip(b.named_arrays().values(),
                                                  c.named_arrays().values()))

    def test_entry_gradients(self):
        b = lut.transfer(random_params(seed=17, scale=0.7))
        g = np.random.default_rng(3)
        lr = np.round(g.random((2, 6, 6)) * 255) / 255
        r = 2.0
        gt = np.clip(imnet.forward(b, lr, r).out + 0.05 * g.standard_normal((2, 12, 12)), 0, 1)

        def total():
            tr = imnet.forward(b, lr, r)
            rec, guide, _ = imnet.losses(tr, gt)
            return rec + 0.1 * guide

        tr = imnet.forward(b, lr, r, keep=True)
        _, _, wbar = imnet.losses(tr, gt)
        b.zero_grad()
        imnet.backward(b, tr, gt, wbar, 0.1)
        arrays, grads = b.named_arrays(), b.named_grads()
        candidates = [(n, tuple(i)) for n in sorted(arrays)
                      for i in np.argwhere(np.abs(grads[n]) > 1e-7)]
        picks = g.choice(len(candidates), size=20, replace=False)
        for j in picks:
            name, idx = candidates[j]
            a = arrays[name]
            old = a[idx]
            eps = 1e-6
            a[idx] = old + eps
            fp = total()
            a[idx] = old - eps
            fm = total()
            a[idx] = old
            fd = (fp - fm) / (2 * eps)
            an = grads[name][idx]
            assert abs(fd - an) / max(abs(fd), abs(an)) <= 1e-3, (name, idx, fd, an)

    def test_scale_gradient_routes_to_selected_bin(self):
        b = lut.transfer(random_params(seed=18))
        lr = np.random.default_rng(0).random((5, 5))
        tr = imnet.forward(b, lr, 2.3, keep=True)
        gt = np.clip(tr.out + 0.1, 0, 1)
        _, _, wbar = imnet.losses(tr, gt)
        b.zero_grad()
        imnet.backward(b, tr, gt, wbar)
        nz = np.flatnonzero(np.abs(b.lut_s.grad).sum(1))
        np.testing.assert_array_equal(nz, [2])
