"""Image and pyramid I/O, region reading, and resampling primitives.

Rasters are thin wrappers around uint8 numpy arrays, immutable after
construction. Pyramids live on disk as a directory of PNG tiles plus a
``manifest.json``; level k is produced from level k-1 by 2x2 box-filter
averaging, so level dimensions are ``ceil(previous / 2)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import map_coordinates

BACKGROUND = 255

MANIFEST_NAME = "manifest.json"


class ImageryError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle at a declared pyramid level."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ImageryError(f"rect must have positive size, got {self.w}x{self.h}")


@dataclass(frozen=True)
class Raster:
    """In-memory 8-bit image with pyramid-level provenance.

    ``data`` has shape (h, w) for single-channel or (h, w, 3) for RGB and is
    marked read-only; treat Rasters as immutable values.
    """

    data: np.ndarray
    level: int = 0
    downsample: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            raise ImageryError(f"raster data must be uint8, got {arr.dtype}")
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise ImageryError(f"unsupported raster shape {arr.shape}")
        if self.downsample < 1.0:
            raise ImageryError("downsample must be >= 1")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]


def _round_half_up_div(num: np.ndarray, den) -> np.ndarray:
    """Exact integer round-half-up of num/den for nonnegative integers."""
    num = num.astype(np.int64)
    den = np.asarray(den, dtype=np.int64)
    return (2 * num + den) // (2 * den)


def load_image(path: str | os.PathLike) -> Raster:
    """Load a PNG/TIFF image or the level-0 plane of a pyramid directory.

    16-bit sources are rescaled to 8-bit by max-value normalization
    (v -> round(v * 255 / max)). Images with channel counts other than
    1 or 3 are rejected rather than coerced.
    """
    path = Path(path)
    if path.is_dir():
        pyr = open_pyramid(path)
        return pyr.read_region(0, Rect(0, 0, pyr.width, pyr.height))
    if not path.exists():
        raise ImageryError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB", "I;16", "I;16B", "I"):
                raise ImageryError(
                    f"unsupported channel layout {im.mode!r} in {path.name}; expected 1 or 3 channels"
                )
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError, UnidentifiedImageError) as exc:
        raise ImageryError(f"corrupt image: {path} ({exc})") from exc
    if arr.dtype == np.uint8:
        return Raster(arr)
    # 16/32-bit greyscale: max-value normalization down to 8 bits.
    arr = arr.astype(np.int64)
    peak = int(arr.max())
    if peak <= 0:
        return Raster(np.zeros(arr.shape, dtype=np.uint8))
    scaled = _round_half_up_div(arr * 255, peak)
    return Raster(np.clip(scaled, 0, 255).astype(np.uint8))


def save_image(raster: Raster, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raster.data).save(path)


def box_downsample(arr: np.ndarray) -> np.ndarray:
    """Halve both axes by 2x2 box averaging; odd trailing rows/cols average
    whatever pixels exist, so output dims are ceil(input / 2)."""
    h, w = arr.shape[:2]
    ys = np.arange(0, h, 2)
    xs = np.arange(0, w, 2)
    acc = arr.astype(np.int64)
    acc = np.add.reduceat(acc, ys, axis=0)
    acc = np.add.reduceat(acc, xs, axis=1)
    cy = np.minimum(ys + 2, h) - ys  # samples per output row (2 or 1)
    cx = np.minimum(xs + 2, w) - xs
    counts = np.outer(cy, cx)
    if arr.ndim == 3:
        counts = counts[:, :, None]
    return _round_half_up_div(acc, counts).astype(np.uint8)


def level_dimensions(width: int, height: int, tile_size: int) -> list[tuple[int, int]]:
    """Dimensions per level: halve (ceil) until min dimension <= tile_size."""
    dims = [(width, height)]
    w, h = width, height
    while min(w, h) > tile_size:
        w = (w + 1) // 2
        h = (h + 1) // 2
        dims.append((w, h))
    return dims


def level_stack(raster: Raster, tile_size: int = 256) -> list[Raster]:
    """In-memory pyramid: level k halved from k-1 until min dim <= tile_size."""
    out = [Raster(raster.data, level=0, downsample=1.0)]
    arr = raster.data
    while min(arr.shape[:2]) > tile_size:
        arr = box_downsample(arr)
        out.append(Raster(arr, level=len(out), downsample=float(2 ** len(out))))
    return out


@dataclass
class Pyramid:
    """Handle to an on-disk pyramid directory (PNG tiles + manifest)."""

    source_path: Path
    width: int
    height: int
    tile_size: int
    levels: int
    channels: int = field(default=3)

    @property
    def level_dims(self) -> list[tuple[int, int]]:
        dims = [(self.width, self.height)]
        for _ in range(1, self.levels):
            w, h = dims[-1]
            dims.append(((w + 1) // 2, (h + 1) // 2))
        return dims

    def read_tile(self, level: int, tx: int, ty: int) -> np.ndarray | None:
        path = self.source_path / f"L{level}" / f"{tx}_{ty}.png"
        if not path.exists():
            return None
        with Image.open(path) as im:
            return np.asarray(im)

    def read_region(self, level: int, rect: Rect, fill: int = BACKGROUND) -> Raster:
        """Read a rectangle at a level; out-of-bounds area is filled.

        In-bounds pixels are bit-exact with the stored tiles.
        """
        if level < 0 or level >= self.levels:
            raise ImageryError(f"invalid level {level} (pyramid has {self.levels})")
        lw, lh = self.level_dims[level]
        shape = (rect.h, rect.w) if self.channels == 1 else (rect.h, rect.w, 3)
        out = np.full(shape, fill, dtype=np.uint8)
        x0 = max(rect.x, 0)
        y0 = max(rect.y, 0)
        x1 = min(rect.x + rect.w, lw)
        y1 = min(rect.y + rect.h, lh)
        if x1 > x0 and y1 > y0:
            ts = self.tile_size
            for ty in range(y0 // ts, (y1 - 1) // ts + 1):
                for tx in range(x0 // ts, (x1 - 1) // ts + 1):
                    tile = self.read_tile(level, tx, ty)
                    if tile is None:
                        continue
                    ox0, oy0 = tx * ts, ty * ts
                    sx0 = max(x0 - ox0, 0)
                    sy0 = max(y0 - oy0, 0)
                    sx1 = min(x1 - ox0, tile.shape[1])
                    sy1 = min(y1 - oy0, tile.shape[0])
                    out[
                        oy0 + sy0 - rect.y : oy0 + sy1 - rect.y,
                        ox0 + sx0 - rect.x : ox0 + sx1 - rect.x,
                    ] = tile[sy0:sy1, sx0:sx1]
        return Raster(out, level=level, downsample=float(2**level))


def build_pyramid(raster: Raster, dest: str | os.PathLike, tile_size: int = 256) -> Pyramid:
    """Write ``raster`` as a pyramid directory and return its handle.

    Levels are generated by 2x2 box-filter averaging until the minimum
    dimension is <= tile_size. Edge tiles are stored cropped, not padded.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    rasters = level_stack(raster, tile_size)
    for lvl, r in enumerate(rasters):
        ldir = dest / f"L{lvl}"
        ldir.mkdir(exist_ok=True)
        for ty in range(0, r.height, tile_size):
            for tx in range(0, r.width, tile_size):
                tile = r.data[ty : ty + tile_size, tx : tx + tile_size]
                Image.fromarray(tile).save(ldir / f"{tx // tile_size}_{ty // tile_size}.png")
    manifest = {
        "width": raster.width,
        "height": raster.height,
        "tile_size": tile_size,
        "levels": len(rasters),
    }
    with open(dest / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return Pyramid(dest, raster.width, raster.height, tile_size, len(rasters), raster.channels)


def open_pyramid(path: str | os.PathLike) -> Pyramid:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ImageryError(f"not a pyramid directory (missing {MANIFEST_NAME}): {path}")
    with open(manifest_path) as fh:
        m = json.load(fh)
    try:
        pyr = Pyramid(path, int(m["width"]), int(m["height"]), int(m["tile_size"]), int(m["levels"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ImageryError(f"malformed manifest in {path}: {exc}") from exc
    probe = pyr.read_tile(pyr.levels - 1, 0, 0)
    if probe is not None:
        pyr.channels = 1 if probe.ndim == 2 else probe.shape[2]
    return pyr


def _inverse_matrix(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ImageryError(f"transform must be 3x3, got {m.shape}")
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) <= 1e-12:
        raise ImageryError("singular transform (|det| <= 1e-12)")
    return np.linalg.inv(m)


def resample_patch(
    source: np.ndarray,
    source_origin: tuple[int, int],
    matrix: np.ndarray,
    out_rect: Rect,
    mode: str = "bilinear",
    fill: int = BACKGROUND,
) -> np.ndarray:
    """Warp ``source`` (a patch whose top-left sits at ``source_origin`` in
    global source coordinates) onto the output rectangle ``out_rect``.

    ``matrix`` maps global source coordinates to global output coordinates;
    each output pixel samples matrix^-1(p). Sample coordinates are computed
    in the global frame before subtracting the integer patch origin, so a
    patch-based warp is bitwise identical to a whole-image warp.
    """
    if mode not in ("nearest", "bilinear"):
        raise ImageryError(f"unknown resampling mode {mode!r}")
    inv = _inverse_matrix(matrix)
    xs = np.arange(out_rect.x, out_rect.x + out_rect.w, dtype=np.float64)
    ys = np.arange(out_rect.y, out_rect.y + out_rect.h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    src_x = inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]
    src_y = inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]
    src_x -= source_origin[0]
    src_y -= source_origin[1]
    order = 0 if mode == "nearest" else 1
    coords = np.stack([src_y.ravel(), src_x.ravel()])

    def _sample(plane: np.ndarray) -> np.ndarray:
        vals = map_coordinates(
            plane.astype(np.float64), coords, order=order, mode="constant", cval=float(fill)
        )
        return np.clip(np.rint(vals), 0, 255).astype(np.uint8).reshape(out_rect.h, out_rect.w)

    if source.ndim == 2:
        return _sample(source)
    return np.stack([_sample(source[:, :, c]) for c in range(source.shape[2])], axis=-1)


def resample(
    raster: Raster,
    matrix: np.ndarray,
    out_size: tuple[int, int],
    mode: str = "bilinear",
    fill: int = BACKGROUND,
) -> Raster:
    """Warp a raster through a 3x3 source->output transform.

    Output pixel p takes the value at matrix^-1(p) in the source via the
    requested interpolation; samples outside the source get ``fill``.
    """
    out_w, out_h = out_size
    data = resample_patch(raster.data, (0, 0), matrix, Rect(0, 0, out_w, out_h), mode, fill)
    return Raster(data, level=raster.level, downsample=raster.downsample)
