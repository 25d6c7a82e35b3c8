"""Rough rigid pre-alignment from tissue centers of mass and an exhaustive
rotation search over mask overlap.

The moving image is first translated so that its intensity-weighted center
of mass (computed over the tissue region of the inverted greyscale) lands on
the reference one, then every candidate angle on a 1-degree grid is scored
by the Dice overlap of the tissue masks, with a 0.1-degree refinement pass
around the winner. Downstream feature matching is not rotation invariant,
so this stage has to remove most of the angular offset on its own.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np

from .imagery import BACKGROUND, Raster, Rect, resample
from .preprocess import PreprocessError, TissueMask, mask_dice, union_tissue_bbox
from .transform import PlanarTransform, compose, rotation_about, translation

log = logging.getLogger(__name__)

COARSE_STEP_DEG = 1.0
REFINE_STEP_DEG = 0.1
REFINE_SPAN_DEG = 2.0


class PrealignError(ValueError):
    pass


@dataclass(frozen=True)
class PrealignResult:
    """Rigid rough alignment plus the warped moving pair for the next stage."""

    transform: PlanarTransform
    rotation_deg: float
    com_ref: tuple[float, float]
    com_mov: tuple[float, float]
    overlap_score: float
    crop: Rect
    warped_grey: Raster
    warped_mask: TissueMask


def center_of_mass(grey: Raster, mask: TissueMask) -> tuple[float, float]:
    """Intensity-weighted tissue center: weights are the inverted grey
    values (255 - g) restricted to the mask foreground."""
    if grey.channels != 1:
        raise PrealignError("center of mass expects a single-channel raster")
    if (grey.height, grey.width) != mask.bits.shape:
        raise PrealignError("raster and mask dimensions differ")
    if mask.empty:
        raise PrealignError("empty tissue mask")
    ys, xs = np.nonzero(mask.bits)
    w = 255.0 - grey.data[ys, xs].astype(np.float64)
    total = w.sum()
    if total <= 0:
        raise PrealignError("tissue region is uniformly white; center of mass undefined")
    return float((w * xs).sum() / total), float((w * ys).sum() / total)


def _wrap_angle(deg: float) -> float:
    """Fold into (-180, 180]."""
    wrapped = (deg + 180.0) % 360.0 - 180.0
    return 180.0 if wrapped == -180.0 else wrapped


def _rotated_overlap(
    ref_bits: np.ndarray, mov_u8: np.ndarray, center: tuple[float, float], deg: float
) -> float:
    h, w = ref_bits.shape
    m = rotation_about(deg, center).m[:2].copy()
    rot = cv2.warpAffine(
        mov_u8, m, (w, h), flags=cv2.INTER_NEAREST,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    return mask_dice(ref_bits, rot > 0)


def _best_angle(scored: list[tuple[float, float]]) -> tuple[float, float]:
    # highest Dice wins; exact ties go to the smallest magnitude, then the
    # negative of the pair, so the result never depends on evaluation order
    angle, dice = min(scored, key=lambda t: (-t[1], abs(t[0]), t[0]))
    return angle, dice


def exhaustive_rotation(
    mask_ref: TissueMask,
    mask_mov: TissueMask,
    center: tuple[float, float],
    step_deg: float = COARSE_STEP_DEG,
    refine: bool = True,
) -> tuple[float, float]:
    """Angle in (-180, 180] maximizing Dice(ref, rotate(mov, angle, center)).

    ``mask_mov`` is expected to already sit COM-on-COM with the reference.
    A full-circle scan at ``step_deg`` is followed (optionally) by a
    0.1-degree pass within +/-2 degrees of the coarse winner.
    """
    if mask_ref.empty or mask_mov.empty:
        raise PrealignError("empty tissue mask")
    if step_deg <= 0:
        raise PrealignError("step must be positive")
    ref_bits = mask_ref.bits
    mov_u8 = mask_mov.bits.astype(np.uint8) * 255
    n = int(round(360.0 / step_deg))
    coarse = [_wrap_angle(-180.0 + step_deg * k) for k in range(1, n + 1)]
    scored = [(a, _rotated_overlap(ref_bits, mov_u8, center, a)) for a in coarse]
    angle, dice = _best_angle(scored)
    if refine:
        steps = np.arange(-REFINE_SPAN_DEG, REFINE_SPAN_DEG + REFINE_STEP_DEG / 2, REFINE_STEP_DEG)
        fine = [_wrap_angle(angle + float(s)) for s in steps]
        scored = [(a, _rotated_overlap(ref_bits, mov_u8, center, a)) for a in fine]
        angle, dice = _best_angle(scored)
    return angle, dice


def prealign(
    grey_ref: Raster,
    mask_ref: TissueMask,
    grey_mov: Raster,
    mask_mov: TissueMask,
    step_deg: float = COARSE_STEP_DEG,
) -> PrealignResult:
    """COM translation followed by the rotation search; returns the rigid
    transform (moving -> reference frame), the warped moving pair, and the
    joint tissue crop for the feature stage."""
    com_ref = center_of_mass(grey_ref, mask_ref)
    com_mov = center_of_mass(grey_mov, mask_mov)
    level = grey_ref.level
    shift = translation(com_ref[0] - com_mov[0], com_ref[1] - com_mov[1], level=level)

    h, w = mask_ref.bits.shape
    mov_u8 = mask_mov.bits.astype(np.uint8) * 255
    translated = cv2.warpAffine(
        mov_u8, shift.m[:2].copy(), (w, h), flags=cv2.INTER_NEAREST,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    translated_mask = TissueMask(translated > 0, mask_mov.flavor)
    if translated_mask.empty:
        raise PrealignError("tissue left the canvas during pre-alignment")

    angle, dice = exhaustive_rotation(mask_ref, translated_mask, com_ref, step_deg)
    transform = compose(rotation_about(angle, com_ref, level=level), shift)

    matrix = transform.m
    warped_grey = resample(grey_mov, matrix, (grey_ref.width, grey_ref.height),
                           mode="bilinear", fill=BACKGROUND)
    warped_bits = resample(
        Raster(mov_u8, level=grey_mov.level, downsample=grey_mov.downsample),
        matrix, (grey_ref.width, grey_ref.height), mode="nearest", fill=0,
    )
    warped_mask = TissueMask(warped_bits.data > 0, mask_mov.flavor)

    try:
        crop = union_tissue_bbox(mask_ref, warped_mask)
    except PreprocessError:
        # warped mask can only be empty here if rotation pushed everything out
        raise PrealignError("tissue left the canvas during pre-alignment")

    log.info("prealign: rotation %.1f deg, overlap %.3f", angle, dice)
    return PrealignResult(
        transform=transform,
        rotation_deg=angle,
        com_ref=com_ref,
        com_mov=com_mov,
        overlap_score=dice,
        crop=crop,
        warped_grey=warped_grey,
        warped_mask=warped_mask,
    )
