"""Filtered backprojection: kernel exactness, linearity, reconstruction quality."""

import numpy as np
import pytest

import oracles
from sparsect.errors import DimensionError, ParameterError
from sparsect.fbp import FilterSpec, backproject, fbp, next_pow2, ramp_filter, ramp_kernel
from sparsect.phantom import PhantomConfig, disk_image, generate
from sparsect.projector import Sinogram, SubsampleSpec, radon_forward, subsample, uniform_angles
from sparsect.tensor import Tensor


def make_sino(rows, n=None):
    rows = np.asarray(rows, np.float32)
    return Sinogram(data=Tensor(rows), angles=uniform_angles(n or rows.shape[0]))


class TestRampFilter:
    def test_impulse_matches_closed_form_kernel(self):
        d = 256
        imp = np.zeros((1, d), np.float32)
        imp[0, d // 2] = 1.0
        out = ramp_filter(make_sino(imp, 1), FilterSpec(zero_pad=1024)).data.data[0]
        want = oracles.ramlak_kernel_naive(d // 2)[:d]  # offsets -128..127
        np.testing.assert_allclose(out, want, atol=1e-6)

    def test_kernel_values(self):
        h = ramp_kernel(512)
        assert h[0] == 0.25
        assert h[1] == pytest.approx(-1.0 / np.pi ** 2)
        assert h[2] == 0.0
        assert h[511] == pytest.approx(-1.0 / np.pi ** 2)

    def test_dc_response_near_zero(self):
        # the exact discrete kernel's DC gain vanishes with support length;
        # at zero_pad=512 it is ~4e-4, and a constant row filters to ~0 away
        # from the zero-pad step edges (central quarter asserted here)
        d = 256
        c = 3.0
        const = make_sino(np.full((1, d), c, np.float32), 1)
        out = ramp_filter(const).data.data[0]
        assert np.abs(ramp_kernel(512).sum()) < 1e-3
        assert np.abs(out[3 * d // 8:5 * d // 8]).max() < 1e-3 * c

    def test_linearity(self):
        rng = np.random.default_rng(2)
        rows = rng.random((4, 64)).astype(np.float32)
        a = ramp_filter(make_sino(rows)).data.data
        b = ramp_filter(make_sino(5.0 * rows)).data.data
        np.testing.assert_allclose(b, 5.0 * a, rtol=1e-6, atol=1e-7)

    def test_hann_tapers_high_frequencies(self):
        d = 128
        imp = np.zeros((1, d), np.float32)
        imp[0, d // 2] = 1.0
        ram = ramp_filter(make_sino(imp, 1), FilterSpec(window="ramlak")).data.data[0]
        han = ramp_filter(make_sino(imp, 1), FilterSpec(window="hann")).data.data[0]
        assert han[d // 2] < ram[d // 2]  # softened center tap

    def test_bad_zero_pad_rejected(self):
        with pytest.raises(ParameterError):
            FilterSpec(zero_pad=100).padded_length(64)
        with pytest.raises(ParameterError):
            FilterSpec(zero_pad=64).padded_length(64)
        with pytest.raises(ParameterError):
            FilterSpec(window="cosine")

    def test_next_pow2(self):
        assert next_pow2(256) == 256
        assert next_pow2(257) == 512


class TestBackproject:
    def test_zero_sinogram_zero_image(self):
        sino = make_sino(np.zeros((12, 32), np.float32))
        img = backproject(sino, 32)
        assert np.all(img.data == 0.0)

    def test_single_angle_smear_oracle(self):
        """Theta=0 backprojection smears the row down columns, uniformly
        within the field-of-view circle (masked outside, like the operator)."""
        d = 32
        rng = np.random.default_rng(4)
        row = rng.random((1, d)).astype(np.float32)
        sino = Sinogram(data=Tensor(row), angles=np.array([0.0]))
        img = backproject(sino, d).data[0, 0]

        c = (d - 1) / 2.0
        coords = np.arange(d) - c
        want = np.pi / 1.0 * np.tile(row[0], (d, 1))  # columns constant
        fov = (coords[None, :] ** 2 + coords[:, None] ** 2) <= c * c
        want = np.where(fov, want, 0.0)
        np.testing.assert_allclose(img, want, rtol=1e-6)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        rows = rng.random((8, 32)).astype(np.float32)
        a = backproject(make_sino(rows), 32).data
        b = backproject(make_sino(3.0 * rows), 32).data
        np.testing.assert_allclose(b, 3.0 * a, rtol=1e-6, atol=1e-6)

    def test_size_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            backproject(make_sino(np.zeros((4, 32), np.float32)), 64)


class TestFbp:
    def test_disk_reconstruction_quality(self):
        s = 128
        disk = disk_image(s, 0.4 * s)
        sino = radon_forward(Tensor(disk.astype(np.float32).reshape(1, 1, s, s)),
                             uniform_angles(360))
        rec = fbp(sino).data[0, 0]
        rel = np.linalg.norm(rec - disk) / np.linalg.norm(disk)
        assert rel < 0.10

    def test_disk_amplitude_fidelity(self):
        s = 128
        disk = disk_image(s, 0.4 * s)
        sino = radon_forward(Tensor(disk.astype(np.float32).reshape(1, 1, s, s)),
                             uniform_angles(360))
        rec = fbp(sino).data[0, 0]
        inside = disk > 0.999
        assert 0.9 <= rec[inside].mean() <= 1.1

    def test_sparse_has_lower_psnr_than_dense(self):
        ph = generate(PhantomConfig(size=128), 11)
        truth = ph.image.data[0, 0].astype(np.float64)
        sino = radon_forward(ph.image, uniform_angles(360))
        dense = fbp(sino).data[0, 0]
        sparse = fbp(subsample(sino, SubsampleSpec(20))).data[0, 0]

        def psnr(rec):
            mse = np.mean((np.clip(rec, 0, 1) - truth) ** 2)
            return 10.0 * np.log10(1.0 / mse)

        assert psnr(sparse) < psnr(dense)

    def test_error_monotone_in_angle_count(self):
        for seed in (42, 7, 99):
            ph = generate(PhantomConfig(size=128), seed)
            truth = ph.image.data[0, 0].astype(np.float64)
            sino = radon_forward(ph.image, uniform_angles(360))
            errs = []
            for factor in (1, 4, 20):   # 360, 90, 18 angles
                rec = fbp(subsample(sino, SubsampleSpec(factor))).data[0, 0]
                errs.append(np.linalg.norm(rec - truth) / np.linalg.norm(truth))
            assert errs[0] < errs[1] < errs[2]

    def test_zero_phantom_reconstructs_zero(self):
        sino = make_sino(np.zeros((36, 64), np.float32))
        assert np.all(fbp(sino).data == 0.0)

    def test_linearity_in_sinogram(self):
        rng = np.random.default_rng(8)
        rows = rng.random((16, 32)).astype(np.float32)
        a = fbp(make_sino(rows)).data
        b = fbp(make_sino(2.0 * rows)).data
        np.testing.assert_allclose(b, 2.0 * a, rtol=1e-5, atol=1e-6)
