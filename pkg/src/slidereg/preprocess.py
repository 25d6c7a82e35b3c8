"""Single-channel conversions, histogram matching, and tissue segmentation.

Registration runs on spatially comparable single-channel images. This module
converts RGB slides to one of several representations (greyscale, blue ratio,
haematoxylin stain), equalizes intensity statistics across a pair by monotone
histogram matching, and produces binary tissue masks either heuristically
(Otsu + morphology, optionally with a texture-based fat exclusion) or from an
external mask file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage as ndi
from skimage.morphology import binary_closing, binary_opening, disk, remove_small_objects

from .imagery import Raster, Rect, load_image

log = logging.getLogger(__name__)

# single-channel conversion modes; greyscale is the default working mode
MODES = ("rgb", "greyscale", "blue_ratio", "h_stain")
DEFAULT_MODE = "greyscale"

# Ruifrok & Johnston absorbance rows: haematoxylin, eosin, DAB/residual
STAIN_RGB = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)

TS = "TS"
TSEF = "TSEF"
EXTERNAL = "EXTERNAL"


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class TissueMask:
    """Binary foreground mask aligned to a raster."""

    bits: np.ndarray
    flavor: str = TS

    def __post_init__(self):
        bits = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        if bits.ndim != 2:
            raise PreprocessError(f"mask must be 2-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def empty(self) -> bool:
        return not self.bits.any()

    def area(self) -> int:
        return int(self.bits.sum())


def to_greyscale(raster: Raster) -> Raster:
    """Rec. 601 luma: round(0.299 R + 0.587 G + 0.114 B), computed exactly
    in integer arithmetic. Single-channel input passes through unchanged."""
    if raster.channels == 1:
        return raster
    rgb = raster.data.astype(np.int64)
    luma = (299 * rgb[:, :, 0] + 587 * rgb[:, :, 1] + 114 * rgb[:, :, 2] + 500) // 1000
    return Raster(luma.astype(np.uint8), raster.level, raster.downsample)


def blue_ratio(raster: Raster) -> Raster:
    """Blue-ratio transform BR = 100*B/(1+R+G) * 256/(1+R+G+B), emphasizing
    haematoxylin-dense (nuclear) regions; clipped to [0, 255], then rounded."""
    if raster.channels != 3:
        raise PreprocessError("blue_ratio needs a 3-channel raster")
    rgb = raster.data.astype(np.float64)
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    br = (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))
    out = np.floor(np.clip(br, 0.0, 255.0) + 0.5).astype(np.uint8)
    return Raster(out, raster.level, raster.downsample)


def h_stain(raster: Raster, stain_rgb: np.ndarray | None = None) -> Raster:
    """Haematoxylin channel by color deconvolution in optical-density space
    (Ruifrok & Johnston), rescaled so zero OD -> 0 and a pure-black pixel
    saturates at 255.

    ``stain_rgb`` overrides the stain absorbance rows for non-H&E stains.
    """
    if raster.channels != 3:
        raise PreprocessError("h_stain needs a 3-channel raster")
    m = STAIN_RGB if stain_rgb is None else np.asarray(stain_rgb, dtype=np.float64)
    if m.shape != (3, 3):
        raise PreprocessError("stain matrix must be 3x3")
    unmix = np.linalg.inv(m)[:, 0]  # haematoxylin column of the inverse
    h_black = -np.log10(1.0 / 256.0) * unmix.sum()
    if h_black <= 0:
        raise PreprocessError("degenerate stain matrix: black has non-positive H response")
    od = -np.log10((raster.data.astype(np.float64) + 1.0) / 256.0)
    h = od @ unmix
    out = np.floor(np.clip(h / h_black * 255.0, 0.0, 255.0) + 0.5).astype(np.uint8)
    return Raster(out, raster.level, raster.downsample)


def apply_mode(raster: Raster, mode: str = DEFAULT_MODE) -> Raster:
    """Convert a raster to the requested working representation."""
    if mode == "rgb":
        return raster
    if mode == "greyscale":
        return to_greyscale(raster)
    if mode == "blue_ratio":
        return blue_ratio(raster)
    if mode == "h_stain":
        return h_stain(raster)
    raise PreprocessError(f"unknown mode {mode!r}; expected one of {MODES}")


def _histogram(data: np.ndarray, mask: TissueMask | None) -> np.ndarray:
    if mask is not None:
        if mask.bits.shape != data.shape:
            raise PreprocessError("mask dimensions do not match raster")
        if mask.empty:
            raise PreprocessError("empty mask")
        data = data[mask.bits]
    return np.bincount(data.ravel(), minlength=256).astype(np.float64)


def entropy(raster: Raster, mask: TissueMask | None = None) -> float:
    """Shannon entropy (bits) of the 256-bin intensity histogram, over mask
    foreground when a mask is supplied."""
    if raster.channels != 1:
        raise PreprocessError("entropy needs a single-channel raster")
    hist = _histogram(raster.data, mask)
    p = hist / hist.sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _match_lut(src_hist: np.ndarray, tgt_hist: np.ndarray) -> np.ndarray:
    """Monotone LUT sending source grey levels onto the target histogram.

    Each source level g is assigned its midpoint CDF mass
    q(g) = (F(g-) + F(g))/2, then mapped to the smallest target level t with
    F_t(t) >= q(g). The midpoint form makes the mapping idempotent and sends
    a constant image to the target's median-CDF value.
    """
    sc = np.cumsum(src_hist) / src_hist.sum()
    below = np.concatenate([[0.0], sc[:-1]])
    q = (below + sc) / 2.0
    tc = np.cumsum(tgt_hist) / tgt_hist.sum()
    lut = np.searchsorted(tc, q, side="left")
    return np.clip(lut, 0, 255).astype(np.uint8)


def histogram_match(
    pair: tuple[Raster, Raster],
    masks: tuple[TissueMask | None, TissueMask | None] = (None, None),
) -> tuple[Raster, Raster]:
    """Remap the lower-entropy image of a pair onto the other's histogram.

    The higher-entropy image is returned unchanged (on an entropy tie the
    first of the pair is treated as the reference). Histograms are taken over
    mask foreground when masks are given; the remap applies to all pixels.
    """
    a, b = pair
    if a.channels != 1 or b.channels != 1:
        raise PreprocessError("histogram_match needs single-channel rasters")
    ent_a = entropy(a, masks[0])
    ent_b = entropy(b, masks[1])
    if ent_a >= ent_b:  # tie: first of the pair wins
        ref, mov, ref_mask, mov_mask = a, b, masks[0], masks[1]
    else:
        ref, mov, ref_mask, mov_mask = b, a, masks[1], masks[0]
    lut = _match_lut(_histogram(mov.data, mov_mask), _histogram(ref.data, ref_mask))
    remapped = Raster(lut[mov.data], mov.level, mov.downsample)
    return (a, remapped) if ref is a else (remapped, b)


def _cleanup(bits: np.ndarray, radius: int, min_area_frac: float) -> np.ndarray:
    fp = disk(radius)
    bits = binary_opening(bits, fp)
    bits = binary_closing(bits, fp)
    bits = ndi.binary_fill_holes(bits)
    min_size = min_area_frac * bits.size
    return remove_small_objects(bits, min_size=min_size)


def _local_std(grey: np.ndarray, window: int) -> np.ndarray:
    f = grey.astype(np.float64)
    mean = ndi.uniform_filter(f, size=window)
    mean_sq = ndi.uniform_filter(f * f, size=window)
    return np.sqrt(np.clip(mean_sq - mean * mean, 0.0, None))


def segment_tissue(
    raster: Raster,
    flavor: str = TS,
    mask_path: str | Path | None = None,
    disk_radius: int = 2,
    min_area_frac: float = 0.0005,
    std_window: int = 7,
    std_percentile: float = 10.0,
) -> TissueMask:
    """Binary tissue segmentation.

    TS: Otsu threshold on the inverted greyscale, opening/closing with a
    disk footprint, hole filling, and removal of components smaller than
    ``min_area_frac`` of the image area. TSEF additionally drops low-texture
    tissue (local std-dev below the ``std_percentile``-th percentile of
    tissue-pixel std-devs), modelling fatty regions as background; TSEF
    foreground is always a subset of TS foreground. EXTERNAL loads a
    single-channel mask image and binarizes it at 128.
    """
    if flavor == EXTERNAL:
        if mask_path is None:
            raise PreprocessError("EXTERNAL flavor needs a mask_path")
        mask_raster = load_image(mask_path)
        if mask_raster.channels != 1:
            raise PreprocessError("external mask must be single-channel")
        if (mask_raster.height, mask_raster.width) != (raster.height, raster.width):
            raise PreprocessError(
                f"external mask is {mask_raster.width}x{mask_raster.height}, "
                f"raster is {raster.width}x{raster.height}"
            )
        return TissueMask(mask_raster.data >= 128, EXTERNAL)
    if flavor not in (TS, TSEF):
        raise PreprocessError(f"unknown mask flavor {flavor!r}")

    grey = to_greyscale(raster).data
    inverted = (255 - grey.astype(np.int32)).astype(np.uint8)
    if inverted.max() == inverted.min():
        log.warning("blank image: tissue mask is empty")
        return TissueMask(np.zeros(grey.shape, dtype=bool), flavor)
    otsu, _ = cv2.threshold(inverted, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    ts = _cleanup(inverted > otsu, disk_radius, min_area_frac)
    if flavor == TS:
        return TissueMask(ts, TS)
    if not ts.any():
        return TissueMask(ts, TSEF)
    std = _local_std(grey, std_window)
    floor_std = np.percentile(std[ts], std_percentile)
    textured = _cleanup(ts & (std >= floor_std), disk_radius, min_area_frac)
    return TissueMask(textured & ts, TSEF)


def union_tissue_bbox(mask_r: TissueMask, mask_m: TissueMask, margin_frac: float = 0.02) -> Rect:
    """Tightest rect covering the foreground of both masks, expanded by a
    fractional margin on each side (at least one pixel) and clipped."""
    if mask_r.bits.shape != mask_m.bits.shape:
        raise PreprocessError("masks must share dimensions")
    union = mask_r.bits | mask_m.bits
    if not union.any():
        raise PreprocessError("both masks are empty")
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    mx = int(np.ceil(margin_frac * (x1 - x0)))
    my = int(np.ceil(margin_frac * (y1 - y0)))
    h, w = union.shape
    x0 = max(x0 - mx, 0)
    y0 = max(y0 - my, 0)
    x1 = min(x1 + mx, w)
    y1 = min(y1 + my, h)
    return Rect(x0, y0, x1 - x0, y1 - y0)


def mask_com(mask: TissueMask) -> tuple[float, float]:
    """Center of mass (x, y) of the mask foreground."""
    if mask.empty:
        raise PreprocessError("empty mask has no center of mass")
    ys, xs = np.nonzero(mask.bits)
    return float(xs.mean()), float(ys.mean())


def mask_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary arrays (1.0 when both are empty)."""
    inter = np.logical_and(a, b).sum()
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * inter / total)
