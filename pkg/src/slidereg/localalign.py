"""Residual translation recovery by phase correlation.

After the feature-based stages, remaining global or per-field-of-view
translation errors are estimated from the normalized cross-power spectrum of
the two images (tissue masks by default, which correlate more cleanly than
stained intensities). The integer peak is decoded to a signed shift and
refined to sub-pixel precision with a separable parabolic fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagery import Raster
from .preprocess import TissueMask
from .transform import PlanarTransform, compose, translation

GLOBAL = "GLOBAL"
FOV = "FOV"

EPS = 1e-12


class LocalAlignError(ValueError):
    pass


@dataclass(frozen=True)
class OffsetResult:
    """Measured displacement of image b relative to image a, in pixels at
    ``level``: b(p) matches a(p - (dx, dy)). peak is the normalized
    correlation maximum; peak == 0 flags a degenerate (constant) input."""

    dx: float
    dy: float
    peak: float
    scope: str = GLOBAL
    level: int = 0

    @property
    def degenerate(self) -> bool:
        return self.peak == 0.0


def _plane(image) -> np.ndarray:
    if isinstance(image, Raster):
        if image.channels != 1:
            raise LocalAlignError("phase correlation needs a single-channel image")
        return image.data.astype(np.float64)
    if isinstance(image, TissueMask):
        return image.bits.astype(np.float64)
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise LocalAlignError("phase correlation needs a 2-D array")
    return arr.astype(np.float64)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def _parabolic_delta(c_minus: float, c0: float, c_plus: float) -> float:
    """Sub-pixel offset of a parabola through three equally spaced samples."""
    denom = c_minus - 2.0 * c0 + c_plus
    if denom == 0.0:
        return 0.0
    delta = 0.5 * (c_minus - c_plus) / denom
    return float(np.clip(delta, -0.5, 0.5))


def phase_correlation(a, b, scope: str = GLOBAL, level: int = 0) -> OffsetResult:
    """Shift (dx, dy) such that b is a by-that-much displaced copy of a.

    Inputs are zero-padded to the next power of two per axis; the cross-power
    spectrum is magnitude-normalized with a small regularizer, and the
    correlation peak is decoded into the signed range (wrap-around aware).
    Constant inputs have no spectral energy and return (0, 0) with peak 0.
    """
    fa = _plane(a)
    fb = _plane(b)
    if fa.shape != fb.shape:
        raise LocalAlignError(f"dimension mismatch: {fa.shape} vs {fb.shape}")
    if fa.std() == 0.0 or fb.std() == 0.0:
        return OffsetResult(0.0, 0.0, 0.0, scope, level)
    h, w = fa.shape
    ph, pw = _next_pow2(h), _next_pow2(w)
    pa = np.zeros((ph, pw))
    pb = np.zeros((ph, pw))
    pa[:h, :w] = fa - fa.mean()
    pb[:h, :w] = fb - fb.mean()
    fa_hat = np.fft.fft2(pa)
    fb_hat = np.fft.fft2(pb)
    cross = fb_hat * np.conj(fa_hat)
    corr = np.real(np.fft.ifft2(cross / (np.abs(cross) + EPS)))
    py, px = np.unravel_index(np.argmax(corr), corr.shape)
    peak = float(np.clip(corr[py, px], 0.0, 1.0))
    # separable 3x3 parabolic refinement around the peak (wrap-around indexing)
    dx = _parabolic_delta(corr[py, (px - 1) % pw], corr[py, px], corr[py, (px + 1) % pw])
    dy = _parabolic_delta(corr[(py - 1) % ph, px], corr[py, px], corr[(py + 1) % ph, px])
    sx = float(px) + dx
    sy = float(py) + dy
    if sx > pw / 2:
        sx -= pw
    if sy > ph / 2:
        sy -= ph
    return OffsetResult(sx, sy, peak, scope, level)


def apply_offset(t: PlanarTransform, offset: OffsetResult) -> PlanarTransform:
    """Fold a measured displacement into a transform.

    The displacement is scaled from the offset's level into the transform's
    level and subtracted in output (reference-frame) coordinates, so that
    re-rendering with the returned transform cancels the measured drift.
    """
    if offset.dx == 0.0 and offset.dy == 0.0:
        return t
    k = 2.0 ** (offset.level - t.level)
    correction = translation(-offset.dx * k, -offset.dy * k, t.level)
    return compose(correction, t)
