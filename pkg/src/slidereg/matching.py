"""Combined multi-scale distance matrices and top-U feature-point matching.

Distances from the three pooled layers are merged onto the finest (1/8)
grid: each coarse-layer entry is replicated over the block of fine grid
points that share its receptive field, giving
D = sqrt(2)*D3 + up2(D4) + up4(D5). For every moving point the closest
reference point is its match candidate; the margin between the smallest and
second-smallest distance in that column is the match quality, and the U
highest-quality candidates with a strictly positive margin are kept.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .features import GRID_STRIDE, FeatureMaps, grid_centers

DEFAULT_U = 128


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class MatchFrame:
    """Mapping from matcher-frame pixels back to level pixels:
    p_level = origin + p * scale (componentwise)."""

    origin: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    level: int = 0


@dataclass(frozen=True)
class MatchSet:
    """Paired points sorted by descending quality, plus their frame."""

    p_ref: np.ndarray
    p_mov: np.ndarray
    quality: np.ndarray
    frame: MatchFrame = MatchFrame()

    def __post_init__(self):
        for name in ("p_ref", "p_mov", "quality"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.p_ref.shape != self.p_mov.shape or len(self.p_ref) != len(self.quality):
            raise MatchingError("inconsistent match arrays")

    def __len__(self) -> int:
        return len(self.quality)


def _flat_descriptors(f: np.ndarray) -> np.ndarray:
    return f.reshape(-1, f.shape[-1])


def pairwise_distances(f_ref: np.ndarray, f_mov: np.ndarray) -> np.ndarray:
    """Euclidean distance between every reference descriptor (rows) and
    every moving descriptor (columns) of one layer."""
    if f_ref.shape[-1] != f_mov.shape[-1]:
        raise MatchingError(
            f"descriptor length mismatch: {f_ref.shape[-1]} vs {f_mov.shape[-1]}"
        )
    return cdist(_flat_descriptors(f_ref), _flat_descriptors(f_mov))


def _square_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise MatchingError(f"cannot infer a square grid from {n} points")
    return side


def _owner_map(fine: tuple[int, int], coarse: tuple[int, int], factor: int) -> np.ndarray:
    """Flat index of the coarse cell owning each fine grid point (row-major),
    clamped at the edges so ceil-sized coarse grids are handled."""
    fh, fw = fine
    ch, cw = coarse
    ys = np.minimum(np.arange(fh) // factor, ch - 1)
    xs = np.minimum(np.arange(fw) // factor, cw - 1)
    return (ys[:, None] * cw + xs[None, :]).ravel()


def combine_distances(
    d3: np.ndarray,
    d4: np.ndarray,
    d5: np.ndarray,
    grid3: tuple[int, int] | None = None,
    grid4: tuple[int, int] | None = None,
    grid5: tuple[int, int] | None = None,
) -> np.ndarray:
    """Merge the per-layer distance matrices onto the pool3 grid:
    sqrt(2)*D3 + up2(D4) + up4(D5), replicating coarse entries over the
    fine grid points they cover (along both axes)."""
    if grid3 is None:
        grid3 = (_square_side(d3.shape[0]), _square_side(d3.shape[1]))
    if grid4 is None:
        grid4 = tuple((g + 1) // 2 for g in grid3)
    if grid5 is None:
        grid5 = tuple((g + 3) // 4 for g in grid3)
    for name, d, (gh, gw) in (("D3", d3, grid3), ("D4", d4, grid4), ("D5", d5, grid5)):
        if d.shape != (gh * gw, gh * gw):
            raise MatchingError(f"{name} has shape {d.shape}, expected {(gh * gw, gh * gw)}")
    own4 = _owner_map(grid3, grid4, 2)
    own5 = _owner_map(grid3, grid5, 4)
    return math.sqrt(2.0) * d3 + d4[np.ix_(own4, own4)] + d5[np.ix_(own5, own5)]


def match_points(
    d: np.ndarray,
    u: int = DEFAULT_U,
    grid_shape: tuple[int, int] | None = None,
    frame: MatchFrame = MatchFrame(),
) -> MatchSet:
    """Select up to ``u`` matched point pairs from a combined matrix.

    Per moving point (column): candidate reference = row argmin (ties to the
    lowest row); quality = second smallest minus smallest. Candidates with
    zero quality are ambiguous and dropped; the rest are ranked by descending
    quality with column index breaking exact ties, and the top ``u`` kept.
    Returned points are grid-cell centers in the matcher frame.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise MatchingError("distance matrix must be 2-D")
    rows, cols = d.shape
    if rows < 2:
        raise MatchingError("match quality undefined with fewer than 2 reference points")
    if not np.isfinite(d).all():
        raise MatchingError("distance matrix contains non-finite values")
    if u < 1:
        raise MatchingError("U must be >= 1")
    if grid_shape is None:
        side_r = _square_side(rows)
        side_c = _square_side(cols)
        grid_ref, grid_mov = (side_r, side_r), (side_c, side_c)
    else:
        grid_ref = grid_mov = grid_shape
    best_row = d.argmin(axis=0)  # first minimum = lowest row on ties
    two_smallest = np.partition(d, 1, axis=0)[:2]
    quality = two_smallest[1] - two_smallest[0]
    order = np.lexsort((np.arange(cols), -quality))
    order = order[quality[order] > 0][:u]
    centers_ref = grid_centers(grid_ref)
    centers_mov = grid_centers(grid_mov)
    return MatchSet(
        p_ref=centers_ref[best_row[order]],
        p_mov=centers_mov[order],
        quality=quality[order],
        frame=frame,
    )


def match_features(
    f_ref: FeatureMaps, f_mov: FeatureMaps, u: int = DEFAULT_U, frame: MatchFrame = MatchFrame()
) -> MatchSet:
    """Full chain: per-layer distances, combination, top-U selection."""
    if f_ref.grid_shape != f_mov.grid_shape:
        raise MatchingError("feature grids differ between images")
    d3 = pairwise_distances(f_ref.f3, f_mov.f3)
    d4 = pairwise_distances(f_ref.f4, f_mov.f4)
    d5 = pairwise_distances(f_ref.f5, f_mov.f5)
    combined = combine_distances(
        d3, d4, d5,
        grid3=f_ref.f3.shape[:2], grid4=f_ref.f4.shape[:2], grid5=f_ref.f5.shape[:2],
    )
    return match_points(combined, u, grid_shape=f_ref.grid_shape, frame=frame)


def to_level_coords(matches: MatchSet) -> MatchSet:
    """Map matcher-frame points into level pixels through the match frame."""
    f = matches.frame
    origin = np.asarray(f.origin)
    scale = np.asarray(f.scale)
    return MatchSet(
        p_ref=matches.p_ref * scale + origin,
        p_mov=matches.p_mov * scale + origin,
        quality=matches.quality.copy(),
        frame=MatchFrame((0.0, 0.0), (1.0, 1.0), f.level),
    )


def save_matches(matches: MatchSet, path: str | Path) -> None:
    """Debug dump: one row per pair, highest quality first."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_ref", "y_ref", "x_mov", "y_mov", "quality"])
        for (xr, yr), (xm, ym), q in zip(matches.p_ref, matches.p_mov, matches.quality):
            writer.writerow([f"{xr:g}", f"{yr:g}", f"{xm:g}", f"{ym:g}", f"{q:.9g}"])
