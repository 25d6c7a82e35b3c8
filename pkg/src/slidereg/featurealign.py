"""Feature-driven rigid refinement: a whole-tissue pass and a block-wise pass.

Both passes follow the same recipe on a pre-aligned pair sharing the
reference frame: crop the joint tissue region, pad it square with
background, resize to the network input size, match descriptor grids, and
fit a transform to the matched points mapped back to level coordinates. The
whole-tissue pass corrects the bulk of the residual; the block-wise pass
re-matches each quadrant of the crop separately and fits one transform to
the pooled matches, which both densifies correspondences and localizes them.
"""

from __future__ import annotations

import logging

import cv2
import numpy as np

from .features import Extractor, extract
from .imagery import BACKGROUND, Raster, Rect
from .matching import DEFAULT_U, MatchFrame, MatchSet, match_features, to_level_coords
from .preprocess import TissueMask, union_tissue_bbox
from .prealign import PrealignResult
from .transform import RIGID, PlanarTransform, compose, estimate

log = logging.getLogger(__name__)

TARGET_SIZE = 224
TRIM_FRACTION = 0.1

POOLING_EMPTY_FLAG = "blockwise: no admissible matches in any block"


class FeatureAlignError(ValueError):
    pass


def _crop_pad_resize(data: np.ndarray, crop: Rect, target: int) -> tuple[np.ndarray, float]:
    """Square background-padded crop resized to the network input size;
    returns the image and the level-pixels-per-output-pixel scale."""
    side = max(crop.w, crop.h)
    shape = (side, side) if data.ndim == 2 else (side, side, data.shape[2])
    canvas = np.full(shape, BACKGROUND, dtype=np.uint8)
    canvas[: crop.h, : crop.w] = data[crop.y : crop.y + crop.h, crop.x : crop.x + crop.w]
    interp = cv2.INTER_AREA if side >= target else cv2.INTER_LINEAR
    resized = cv2.resize(canvas, (target, target), interpolation=interp)
    return resized, side / target


def match_crop(
    grey_ref: Raster,
    grey_mov: Raster,
    crop: Rect,
    extractor: Extractor,
    u: int = DEFAULT_U,
    target: int = TARGET_SIZE,
) -> MatchSet:
    """Matched points between the same crop of two co-registered rasters,
    in level coordinates (reference points on p_ref, moving on p_mov)."""
    if grey_ref.channels != grey_mov.channels:
        raise FeatureAlignError("channel layout must agree between the two rasters")
    img_ref, scale = _crop_pad_resize(grey_ref.data, crop, target)
    img_mov, _ = _crop_pad_resize(grey_mov.data, crop, target)
    if img_ref.std() == 0 or img_mov.std() == 0:
        # a constant crop has no texture to correspond; without this guard
        # the network's border padding would still manufacture a few
        # artificial corner-to-corner matches
        return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0),
                        MatchFrame(level=grey_ref.level))
    f_ref = extract(extractor, Raster(img_ref))
    f_mov = extract(extractor, Raster(img_mov))
    frame = MatchFrame(origin=(float(crop.x), float(crop.y)), scale=(scale, scale),
                       level=grey_ref.level)
    return to_level_coords(match_features(f_ref, f_mov, u, frame))


def _fit(matches: MatchSet, kind: str, level: int, trim: bool) -> PlanarTransform:
    """Transform taking moving points onto reference points, optionally
    re-fit once after dropping the worst tenth of residuals."""
    if len(matches) < 2:
        raise FeatureAlignError(f"insufficient matches: {len(matches)} < 2")
    t = estimate(matches.p_mov, matches.p_ref, kind=kind, level=level)
    if trim and len(matches) >= 4:
        resid = np.linalg.norm(t.apply(matches.p_mov) - matches.p_ref, axis=1)
        keep = np.argsort(resid, kind="stable")[: len(matches) - int(len(matches) * TRIM_FRACTION)]
        if len(keep) >= 2:
            t = estimate(matches.p_mov[keep], matches.p_ref[keep], kind=kind, level=level)
    return t


def tissue_transform(
    grey_ref: Raster,
    pre: PrealignResult,
    extractor: Extractor,
    kind: str = RIGID,
    u: int = DEFAULT_U,
    trim: bool = False,
) -> PlanarTransform:
    """Whole-tissue refinement of a pre-aligned pair, composed onto the
    pre-alignment transform."""
    matches = match_crop(grey_ref, pre.warped_grey, pre.crop, extractor, u)
    residual = _fit(matches, kind, grey_ref.level, trim)
    log.info("tissue: %d matches, residual rotation %.2f deg",
             len(matches), residual.rotation_deg())
    return compose(residual, pre.transform)


def split_blocks(rect: Rect) -> list[Rect]:
    """The 2x2 equal partition of a rectangle (row-major)."""
    wl, hl = rect.w // 2, rect.h // 2
    out = []
    for y0, h in ((rect.y, hl), (rect.y + hl, rect.h - hl)):
        for x0, w in ((rect.x, wl), (rect.x + wl, rect.w - wl)):
            if w > 0 and h > 0:
                out.append(Rect(x0, y0, w, h))
    return out


def pooled_block_matches(
    grey_ref: Raster,
    mask_ref: TissueMask,
    grey_mov: Raster,
    mask_mov: TissueMask,
    extractor: Extractor,
    u: int = DEFAULT_U,
) -> MatchSet:
    """Per-quadrant matches of the joint tissue crop, pooled in level
    coordinates (up to ``u`` per block)."""
    crop = union_tissue_bbox(mask_ref, mask_mov)
    refs, movs, quals = [], [], []
    for block in split_blocks(crop):
        m = match_crop(grey_ref, grey_mov, block, extractor, u)
        if len(m):
            refs.append(m.p_ref)
            movs.append(m.p_mov)
            quals.append(m.quality)
    if not refs:
        return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0),
                        MatchFrame(level=grey_ref.level))
    return MatchSet(np.concatenate(refs), np.concatenate(movs), np.concatenate(quals),
                    MatchFrame(level=grey_ref.level))


def blockwise_transform(
    grey_ref: Raster,
    mask_ref: TissueMask,
    warped_grey: Raster,
    warped_mask: TissueMask,
    tissue_t: PlanarTransform,
    extractor: Extractor,
    kind: str = RIGID,
    u: int = DEFAULT_U,
    trim: bool = False,
) -> tuple[PlanarTransform, list[str]]:
    """Block-wise refinement composed onto the tissue transform.

    The moving side must already be warped by ``tissue_t``. When no block
    yields an admissible match the tissue transform is passed through
    unchanged with a warning flag instead of failing the pipeline.
    """
    pooled = pooled_block_matches(grey_ref, mask_ref, warped_grey, warped_mask, extractor, u)
    if len(pooled) < 2:
        log.warning("blockwise: only %d pooled matches; keeping tissue transform", len(pooled))
        return tissue_t, [POOLING_EMPTY_FLAG]
    residual = _fit(pooled, kind, grey_ref.level, trim)
    log.info("blockwise: %d pooled matches, residual translation (%.2f, %.2f)",
             len(pooled), *residual.translation)
    return compose(residual, tissue_t), []
