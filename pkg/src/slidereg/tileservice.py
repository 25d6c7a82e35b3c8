"""On-the-fly tile warping for registered slide pairs.

A pairs directory holds one subdirectory per registered pair:

    <pairs_dir>/<pair_id>/transform.json   level-0 moving->reference transform
    <pairs_dir>/<pair_id>/ref/             reference pyramid (PNG tiles + manifest)
    <pairs_dir>/<pair_id>/mov/             moving pyramid

Reference tiles are served raw; moving tiles are resampled into the
reference frame through the stored transform (plus any uncommitted session
offset) at request time, so a warped pyramid never has to be materialized.
This module is plain Python — the HTTP layer lives in ``slidereg.service``.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagery import BACKGROUND, Pyramid, Raster, Rect, open_pyramid, resample_patch
from .localalign import FOV, GLOBAL, OffsetResult, apply_offset, phase_correlation
from .preprocess import to_greyscale
from .transform import (
    PlanarTransform,
    RegistrationStages,
    load_transform,
    load_transform_stages,
    rescale_to_level,
    save_transform,
)

log = logging.getLogger(__name__)

TILE_SIZE = 256
TRANSFORM_NAME = "transform.json"
# whole-image fix-offset runs at the pyramid level closest to this scale
GLOBAL_FIX_SCALE = 0.3125

STAGE_NAMES = ("prealign", "tissue", "blockwise", "offset")


class TileServiceError(ValueError):
    pass


class PairNotFoundError(LookupError):
    pass


class TileNotFoundError(LookupError):
    pass


class NoSessionOffsetError(ValueError):
    """save-offset called with nothing to save."""


@dataclass
class PairSession:
    """One registered pair: pyramids, its stored transform, and any offset
    applied in this session but not yet saved to disk."""

    pair_id: str
    path: Path
    ref: Pyramid
    mov: Pyramid
    transform: PlanarTransform  # level-0 moving -> reference
    session_offset: OffsetResult | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def snapshot(self) -> tuple[PlanarTransform, OffsetResult | None]:
        with self.lock:
            return self.transform, self.session_offset


def _effective(t: PlanarTransform, offset: OffsetResult | None) -> PlanarTransform:
    return t if offset is None else apply_offset(t, offset)


def _merge_offsets(old: OffsetResult | None, new: OffsetResult) -> OffsetResult:
    """Accumulate a new measurement on top of an existing session offset."""
    if old is None:
        return new
    k = 2.0 ** (old.level - new.level)
    return OffsetResult(new.dx + old.dx * k, new.dy + old.dy * k,
                        new.peak, new.scope, new.level)


class PairStore:
    """Sessions for every pair found under a pairs directory."""

    def __init__(self, pairs_dir: str | Path, tile_size: int = TILE_SIZE):
        self.pairs_dir = Path(pairs_dir)
        if not self.pairs_dir.is_dir():
            raise TileServiceError(f"pairs directory not found: {pairs_dir}")
        if tile_size < 1:
            raise TileServiceError("tile size must be positive")
        self.tile_size = tile_size
        self._sessions: dict[str, PairSession] = {}
        self._listing: list[dict] = []
        self.rescan()

    def rescan(self) -> None:
        """(Re)discover pairs; holding broken pairs in the listing keeps one
        bad transform file from taking the whole service down."""
        sessions: dict[str, PairSession] = {}
        listing: list[dict] = []
        for sub in sorted(self.pairs_dir.iterdir()):
            if not sub.is_dir() or not (sub / TRANSFORM_NAME).exists():
                continue
            try:
                ref = open_pyramid(sub / "ref")
                mov = open_pyramid(sub / "mov")
                t = load_transform(sub / TRANSFORM_NAME)
                if t.level != 0:
                    raise TileServiceError("stored transform must be at level 0")
            except (ValueError, OSError) as exc:
                log.warning("pair %s is invalid: %s", sub.name, exc)
                listing.append({"pair_id": sub.name, "status": "invalid",
                                "error": str(exc)})
                continue
            prior = self._sessions.get(sub.name)
            session = prior if prior is not None else PairSession(
                sub.name, sub, ref, mov, t)
            sessions[sub.name] = session
            listing.append({
                "pair_id": sub.name,
                "status": "ok",
                "tile_size": self.tile_size,
                "ref": {"width": ref.width, "height": ref.height, "levels": ref.levels},
                "mov": {"width": mov.width, "height": mov.height, "levels": mov.levels},
            })
        self._sessions = sessions
        self._listing = listing

    def list_pairs(self) -> list[dict]:
        return [dict(entry) for entry in self._listing]

    def get(self, pair_id: str) -> PairSession:
        try:
            return self._sessions[pair_id]
        except KeyError:
            raise PairNotFoundError(f"unknown pair: {pair_id}") from None


# ---------------------------------------------------------------------------
# tiles


def _tile_rect(pyr: Pyramid, level: int, tx: int, ty: int, tile_size: int) -> Rect:
    if level < 0 or level >= pyr.levels:
        raise TileNotFoundError(f"no level {level} (pyramid has {pyr.levels})")
    lw, lh = pyr.level_dims[level]
    if tx < 0 or ty < 0 or tx * tile_size >= lw or ty * tile_size >= lh:
        raise TileNotFoundError(f"tile ({tx}, {ty}) out of range at level {level}")
    return Rect(tx * tile_size, ty * tile_size, tile_size, tile_size)


def _warp_rect(mov: Pyramid, t_level: PlanarTransform, level: int, rect: Rect,
               interp: str = "bilinear") -> np.ndarray:
    """Render the reference-frame ``rect`` at ``level`` from the moving pyramid.

    When the moving pyramid is too shallow for the requested level, the next
    finer stored level is used and folded into the sampling matrix.
    """
    src_level = min(level, mov.levels - 1)
    m = t_level.m
    if src_level != level:
        f = 2.0 ** (level - src_level)
        m = m @ np.diag([1.0 / f, 1.0 / f, 1.0])

    corners = np.array([
        [rect.x, rect.y], [rect.x + rect.w, rect.y],
        [rect.x, rect.y + rect.h], [rect.x + rect.w, rect.y + rect.h],
    ], dtype=np.float64)
    ones = np.hstack([corners, np.ones((4, 1))])
    src = (np.linalg.inv(m) @ ones.T).T[:, :2]
    x0 = int(np.floor(src[:, 0].min())) - 2
    y0 = int(np.floor(src[:, 1].min())) - 2
    x1 = int(np.ceil(src[:, 0].max())) + 2
    y1 = int(np.ceil(src[:, 1].max())) + 2
    lw, lh = mov.level_dims[src_level]
    x0, x1 = max(x0, 0), min(x1, lw)
    y0, y1 = max(y0, 0), min(y1, lh)
    if x1 <= x0 or y1 <= y0:  # preimage entirely off the slide
        shape = (rect.h, rect.w) if mov.channels == 1 else (rect.h, rect.w, mov.channels)
        return np.full(shape, BACKGROUND, dtype=np.uint8)
    region = mov.read_region(src_level, Rect(x0, y0, x1 - x0, y1 - y0))
    return resample_patch(region.data, (x0, y0), m, rect, interp, BACKGROUND)


def ref_tile(store: PairStore, pair_id: str, level: int, tx: int, ty: int) -> np.ndarray:
    session = store.get(pair_id)
    rect = _tile_rect(session.ref, level, tx, ty, store.tile_size)
    return session.ref.read_region(level, rect).data


def mov_tile(store: PairStore, pair_id: str, level: int, tx: int, ty: int,
             interp: str = "bilinear") -> np.ndarray:
    """A moving-pyramid tile warped into the reference frame."""
    if interp not in ("nearest", "bilinear"):
        raise TileServiceError(f"unknown interpolation {interp!r}")
    session = store.get(pair_id)
    # tiles address the reference canvas: both sides share one viewport
    rect = _tile_rect(session.ref, level, tx, ty, store.tile_size)
    transform, offset = session.snapshot()
    t_level = rescale_to_level(_effective(transform, offset), level)
    return _warp_rect(session.mov, t_level, level, rect, interp)


# ---------------------------------------------------------------------------
# fix / save offset


def _global_fix_level(pyr: Pyramid) -> int:
    scales = [2.0 ** -k for k in range(pyr.levels)]
    return int(np.argmin([abs(s - GLOBAL_FIX_SCALE) for s in scales]))


def fix_offset(store: PairStore, pair_id: str, level: int | None = None,
               viewport: Rect | None = None) -> OffsetResult:
    """Measure the residual ref/mov displacement and remember it.

    With a viewport, correlation runs over exactly that rectangle at the
    given level; without one it runs over the whole image at the level
    closest to the customary coarse review scale. A degenerate correlation
    (flat content) returns a zero offset and leaves the session unchanged.
    """
    session = store.get(pair_id)
    if viewport is None:
        level = _global_fix_level(session.ref)
        lw, lh = session.ref.level_dims[level]
        viewport = Rect(0, 0, lw, lh)
        scope = GLOBAL
    else:
        if level is None:
            raise TileServiceError("viewport fix-offset needs a level")
        if level < 0 or level >= session.ref.levels:
            raise TileNotFoundError(f"no level {level}")
        scope = FOV

    with session.lock:
        t_level = rescale_to_level(_effective(session.transform, session.session_offset),
                                   level)
        warped = _warp_rect(session.mov, t_level, level, viewport)
        ref_region = session.ref.read_region(level, viewport)
        off = phase_correlation(
            to_greyscale(ref_region),
            to_greyscale(Raster(warped, level=level, downsample=float(2 ** level))),
            scope=scope, level=level,
        )
        if off.degenerate:
            return off
        session.session_offset = _merge_offsets(session.session_offset, off)
    return off


def save_offset(store: PairStore, pair_id: str) -> Path:
    """Fold the session offset into the on-disk transform file atomically."""
    session = store.get(pair_id)
    with session.lock:
        if session.session_offset is None:
            raise NoSessionOffsetError("no session offset to save")
        path = session.path / TRANSFORM_NAME
        with open(path) as fh:
            doc = json.load(fh)
        current = load_transform(path)
        corrected = apply_offset(current, session.session_offset)

        stages = RegistrationStages(flags=list(doc.get("flags", [])))
        for name, t in load_transform_stages(path).items():
            if name in STAGE_NAMES:
                setattr(stages, name, t)
        stages.offset = corrected

        tmp = path.with_name(path.name + ".tmp")
        save_transform(tmp, corrected, stages, doc.get("frame"))
        os.replace(tmp, path)
        session.transform = corrected
        session.session_offset = None
    return path
