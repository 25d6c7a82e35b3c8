"""Tests for phase-correlation shift recovery and offset folding."""

import numpy as np
import pytest

from slidereg.imagery import Raster
from slidereg.localalign import (
    FOV,
    GLOBAL,
    LocalAlignError,
    OffsetResult,
    apply_offset,
    phase_correlation,
)
from slidereg.preprocess import TissueMask, mask_dice
from slidereg.transform import identity, translation


def _blob_mask(size=64, seed=0, blobs=4):
    """Random multi-blob binary mask on a power-of-two canvas."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    bits = np.zeros((size, size), bool)
    for _ in range(blobs):
        cx, cy = rng.uniform(size * 0.25, size * 0.75, 2)
        r = rng.uniform(size * 0.06, size * 0.16)
        bits |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    return bits


class TestPhaseCorrelation:
    def test_self_correlation(self):
        m = _blob_mask(seed=1)
        res = phase_correlation(m, m)
        assert res.dx == pytest.approx(0.0, abs=1e-6)
        assert res.dy == pytest.approx(0.0, abs=1e-6)
        assert res.peak > 0.9

    def test_known_circular_shift(self):
        # oracle: the explicit spatial cross-correlation of a with roll(a, d)
        # is maximal exactly at d, so the recovered shift must equal (7, -12)
        a = _blob_mask(seed=2)
        b = np.roll(a, shift=(-12, 7), axis=(0, 1))
        res = phase_correlation(a, b)
        assert res.dx == pytest.approx(7.0, abs=1e-3)
        assert res.dy == pytest.approx(-12.0, abs=1e-3)

    def test_constant_input_degenerate(self):
        flat = np.ones((32, 32))
        res = phase_correlation(flat, _blob_mask(32, seed=3))
        assert (res.dx, res.dy, res.peak) == (0.0, 0.0, 0.0)
        assert res.degenerate

    def test_dimension_mismatch(self):
        with pytest.raises(LocalAlignError):
            phase_correlation(np.zeros((8, 8)), np.zeros((8, 16)))

    def test_hundred_random_shifts_exact(self):
        # any circular shift up to a quarter of the frame decodes exactly
        rng = np.random.default_rng(4)
        failures = 0
        for trial in range(100):
            size = int(rng.choice([32, 64, 128]))
            a = _blob_mask(size, seed=1000 + trial, blobs=5)
            dx = int(rng.integers(-size // 4, size // 4 + 1))
            dy = int(rng.integers(-size // 4, size // 4 + 1))
            b = np.roll(a, shift=(dy, dx), axis=(0, 1))
            res = phase_correlation(a, b)
            if round(res.dx) != dx or round(res.dy) != dy:
                failures += 1
        assert failures == 0

    def test_antisymmetric(self):
        a = _blob_mask(seed=5)
        b = np.roll(a, shift=(9, -6), axis=(0, 1))
        fwd = phase_correlation(a, b)
        rev = phase_correlation(b, a)
        assert fwd.dx == pytest.approx(-rev.dx, abs=1e-3)
        assert fwd.dy == pytest.approx(-rev.dy, abs=1e-3)

    def test_applying_offset_never_worsens_mask_overlap(self):
        rng = np.random.default_rng(6)
        for trial in range(20):
            a = _blob_mask(64, seed=2000 + trial)
            dx = int(rng.integers(-10, 11))
            dy = int(rng.integers(-10, 11))
            b = np.roll(a, shift=(dy, dx), axis=(0, 1))
            res = phase_correlation(a, b)
            corrected = np.roll(b, shift=(-round(res.dy), -round(res.dx)), axis=(0, 1))
            assert mask_dice(a, corrected) >= mask_dice(a, b)

    def test_accepts_rasters_and_masks(self):
        bits = _blob_mask(seed=7)
        as_mask = phase_correlation(TissueMask(bits), TissueMask(bits))
        grey = Raster((bits * 200).astype(np.uint8))
        as_raster = phase_correlation(grey, grey)
        assert abs(as_mask.dx) < 1e-6 and abs(as_mask.dy) < 1e-6
        assert abs(as_raster.dx) < 1e-6 and abs(as_raster.dy) < 1e-6

    def test_rejects_rgb(self):
        rgb = Raster(np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.raises(LocalAlignError):
            phase_correlation(rgb, rgb)

    def test_non_pow2_padded_recovery(self):
        # non-power-of-two frames go through zero padding; translated content
        # (not circular) must still be recovered to the nearest pixel
        rng = np.random.default_rng(8)
        a = np.zeros((100, 150))
        a[30:60, 40:90] = rng.random((30, 50)) + 0.5
        b = np.zeros_like(a)
        b[34:64, 33:83] = a[30:60, 40:90]  # content moved by (-7, +4)
        res = phase_correlation(a, b)
        assert round(res.dx) == -7
        assert round(res.dy) == 4

    def test_subpixel_fractional_shift(self):
        # full-spectrum smooth noise shifted by a fractional amount via the
        # Fourier shift theorem; the parabolic stage is an approximation, so
        # only direction and rough magnitude are asserted (the integer stage
        # is the hard contract)
        from scipy.ndimage import gaussian_filter

        size = 64
        rng = np.random.default_rng(9)
        a = gaussian_filter(rng.random((size, size)), 1.5)
        shift = (0.3, -0.4)  # (dx, dy)
        ky = np.fft.fftfreq(size)[:, None]
        kx = np.fft.fftfreq(size)[None, :]
        b = np.real(np.fft.ifft2(np.fft.fft2(a) * np.exp(-2j * np.pi * (kx * shift[0] + ky * shift[1]))))
        res = phase_correlation(a, b)
        assert res.dx == pytest.approx(0.3, abs=0.25) and res.dx > 0
        assert res.dy == pytest.approx(-0.4, abs=0.25) and res.dy < 0


class TestApplyOffset:
    def test_zero_offset_unchanged(self):
        t = translation(5.0, 6.0)
        out = apply_offset(t, OffsetResult(0.0, 0.0, 1.0))
        assert np.allclose(out.m, t.m)

    def test_level_scaling(self):
        # an offset measured at level 2 acts at 4x its size on a level-0
        # transform; the measured drift is subtracted so it cancels on render
        t = identity(0)
        out = apply_offset(t, OffsetResult(5.0, 0.0, 1.0, GLOBAL, level=2))
        assert np.allclose(np.abs(out.translation), (20.0, 0.0))
        assert np.allclose(out.translation, (-20.0, 0.0))

    def test_sequential_offsets_sum(self):
        t = identity(0)
        t = apply_offset(t, OffsetResult(3.0, 1.0, 1.0, FOV, level=0))
        t = apply_offset(t, OffsetResult(-1.0, 2.0, 1.0, FOV, level=0))
        assert np.allclose(t.translation, (-2.0, -3.0))

    def test_cancels_injected_drift(self):
        # perturbing a transform by a translation shifts rendered content by
        # exactly that amount; folding the measured shift back restores it
        base = translation(10.0, -4.0)
        drift = translation(8.0, -6.0)
        perturbed = np.matmul(drift.m, base.m)
        from slidereg.transform import PlanarTransform, compose

        fixed = apply_offset(PlanarTransform(perturbed), OffsetResult(8.0, -6.0, 1.0))
        assert np.allclose(fixed.m, base.m, atol=1e-12)
