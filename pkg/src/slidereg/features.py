"""Multi-scale convolutional descriptors on a fixed feature-point grid.

A truncated backbone (see ``models``) maps an input whose sides are
multiples of 32 to three pooled maps at 1/8, 1/16, and 1/32 resolution.
Each spatial position's channel vector is one descriptor; descriptors are
normalized to unit variance (scale only, so constant vectors become zeros).
Feature points live at the centers of the 8x8-pixel grid cells of the input
frame: (4 + 8i, 4 + 8j).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .imagery import Raster
from .models import POOL_NAMES

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

INPUT_MULTIPLE = 32
GRID_STRIDE = 8  # input pixels per pool3 cell

# channel width expected per pooled map
_CHANNELS = {"pool3": 256, "pool4": 512, "pool5": 512}
_STRIDES = {"pool3": 8, "pool4": 16, "pool5": 32}

PROBE_SIZE = 224


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMaps:
    """Normalized pooled maps as (rows, cols, channels) float arrays."""

    f3: np.ndarray
    f4: np.ndarray
    f5: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.f3.shape[0], self.f3.shape[1]


class Extractor:
    """Handle around a loaded model file.

    Calls on one handle are serialized internally (a handle runs one
    inference at a time); open several handles for concurrent extraction.
    """

    def __init__(self, module, path: Path):
        self._module = module
        self._lock = threading.Lock()
        self.path = path

    def infer(self, batch: np.ndarray) -> dict[str, np.ndarray]:
        """Raw pooled maps for a normalized NCHW float32 batch."""
        tensor = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
        with self._lock, torch.inference_mode():
            out = self._module(tensor)
        return {name: out[name].numpy() for name in POOL_NAMES}


def _expected_shape(name: str, h: int, w: int) -> tuple[int, int, int]:
    k = _STRIDES[name]
    return (_CHANNELS[name], h // k, w // k)


def load_extractor(model_path: str | Path) -> Extractor:
    """Load a model file and validate it with a zero-input shape probe."""
    model_path = Path(model_path)
    if not model_path.exists():
        raise FeatureError(f"model file not found: {model_path}")
    try:
        module = torch.jit.load(str(model_path), map_location="cpu")
    except Exception as exc:  # torch raises several unrelated types here
        raise FeatureError(f"cannot load model file {model_path}: {exc}") from exc
    module.eval()
    probe = torch.zeros((1, 3, PROBE_SIZE, PROBE_SIZE), dtype=torch.float32)
    with torch.inference_mode():
        try:
            out = module(probe)
        except Exception as exc:
            raise FeatureError(f"model probe failed on {model_path.name}: {exc}") from exc
    if not isinstance(out, dict):
        raise FeatureError(f"model must return named outputs, got {type(out).__name__}")
    missing = [name for name in POOL_NAMES if name not in out]
    if missing:
        raise FeatureError(
            f"model output {missing[0]!r} is missing (found {sorted(out)})"
        )
    for name in POOL_NAMES:
        got = tuple(out[name].shape[1:])
        want = _expected_shape(name, PROBE_SIZE, PROBE_SIZE)
        if got != want:
            raise FeatureError(f"output {name!r} has shape {got}, expected {want}")
    return Extractor(module, model_path)


def normalize_descriptors(raw: np.ndarray) -> np.ndarray:
    """Scale each channel vector to unit variance; constants become zeros."""
    arr = raw.astype(np.float64)
    std = arr.std(axis=-1, keepdims=True)
    return np.divide(arr, std, out=np.zeros_like(arr), where=std > 0)


def extract(extractor: Extractor, raster: Raster) -> FeatureMaps:
    """Descriptor maps for a raster whose sides are multiples of 32.

    Single-channel input is replicated across the three color channels; the
    network's published input normalization is applied before inference.
    """
    h, w = raster.height, raster.width
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE or h == 0 or w == 0:
        raise FeatureError(f"input dimensions must be positive multiples of 32, got {w}x{h}")
    data = raster.data
    if data.ndim == 2:
        data = np.stack([data] * 3, axis=-1)
    scaled = data.astype(np.float32) / 255.0
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    batch = ((scaled - mean) / std).transpose(2, 0, 1)[None]
    raw = extractor.infer(batch)
    maps = {}
    for name in POOL_NAMES:
        want = _expected_shape(name, h, w)
        got = tuple(raw[name].shape[1:])
        if got != want:
            raise FeatureError(f"output {name!r} has shape {got}, expected {want}")
        maps[name] = normalize_descriptors(raw[name][0].transpose(1, 2, 0))
    return FeatureMaps(maps["pool3"], maps["pool4"], maps["pool5"])


def grid_centers(grid_shape: tuple[int, int], stride: int = GRID_STRIDE) -> np.ndarray:
    """(x, y) centers of the feature grid cells, row-major to match the
    flattened descriptor order."""
    rows, cols = grid_shape
    half = stride / 2.0
    ys, xs = np.mgrid[0:rows, 0:cols]
    return np.stack([half + stride * xs.ravel(), half + stride * ys.ravel()], axis=1)
