"""Single-slice lung scoring: crop, minimum filter, threshold, hole fill, area."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import BadKernel, EmptySlice, MapMismatch

STAGE_NAMES = ("a_original", "b_cropped", "c_filtered", "d_map", "e_filled", "f_lung")


@dataclass(frozen=True)
class PreprocessParams:
    k: int = 3
    t: float = 0.45
    t_bg: float = 0.05
    polarity: str = "bright"    # "bright": tissue >= t; "dark": intensities inverted first
    crop_mode: str = "slice"    # "slice" or "volume" (union bounding box)

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1 or self.k % 2 == 0:
            raise BadKernel(f"k must be an odd integer >= 1, got {self.k!r}")
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"t must lie in (0, 1), got {self.t}")
        if not 0.0 <= self.t_bg < self.t:
            raise ValueError(f"t_bg must satisfy 0 <= t_bg < t, got {self.t_bg}")
        if self.polarity not in ("bright", "dark"):
            raise ValueError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        if self.crop_mode not in ("slice", "volume"):
            raise ValueError(f"crop_mode must be 'slice' or 'volume', got {self.crop_mode!r}")


@dataclass(frozen=True)
class SegMaps:
    map: np.ndarray
    filled: np.ndarray


@dataclass(frozen=True)
class SlicePreproc:
    cropped: np.ndarray
    filtered: np.ndarray
    maps: SegMaps
    area: int
    bbox: Optional[tuple[int, int, int, int]]
    empty: bool = False


def foreground_bbox(img, t_bg):
    """Inclusive (row0, row1, col0, col1) of pixels brighter than ``t_bg``, or None."""
    fg = img > t_bg
    rows = np.flatnonzero(fg.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(fg.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def crop_background(img, t_bg):
    bbox = foreground_bbox(img, t_bg)
    if bbox is None:
        raise EmptySlice(f"no pixel exceeds the background threshold {t_bg}")
    r0, r1, c0, c1 = bbox
    return img[r0:r1 + 1, c0:c1 + 1].copy(), bbox


def min_filter(img, k):
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise BadKernel(f"k must be an odd integer >= 1, got {k!r}")
    return kernels.min_filter(np.asarray(img, dtype=np.float64), int(k))


def segment(img, t):
    """Binary tissue map: 1 where ``img >= t``."""
    return (np.asarray(img) >= t).astype(np.uint8)


def fill_holes(mask):
    return kernels.fill_holes(np.asarray(mask, dtype=bool)).astype(np.uint8)


def lung_area(maps: SegMaps) -> int:
    if maps.map.shape != maps.filled.shape:
        raise MapMismatch(f"map {maps.map.shape} vs filled {maps.filled.shape}")
    return int(maps.filled.sum(dtype=np.int64) - maps.map.sum(dtype=np.int64))


def _empty_result():
    z = np.zeros((0, 0))
    e = np.zeros((0, 0), dtype=np.uint8)
    return SlicePreproc(z, z, SegMaps(e, e), 0, None, empty=True)


def preprocess_slice(img, params: PreprocessParams = PreprocessParams(), bbox=None,
                     strict=False) -> SlicePreproc:
    """Run the full chain on one slice.

    A slice with no foreground yields area 0 and empty stages unless
    ``strict`` is set, in which case :class:`EmptySlice` propagates.
    A precomputed ``bbox`` (volume crop mode) replaces the per-slice crop.
    """
    img = np.asarray(img, dtype=np.float64)
    if params.polarity == "dark":
        img = 1.0 - img
    try:
        if bbox is None:
            cropped, bbox = crop_background(img, params.t_bg)
        else:
            r0, r1, c0, c1 = bbox
            cropped = img[r0:r1 + 1, c0:c1 + 1].copy()
    except EmptySlice:
        if strict:
            raise
        return _empty_result()
    filtered = min_filter(cropped, params.k)
    seg = segment(filtered, params.t)
    maps = SegMaps(seg, fill_holes(seg))
    return SlicePreproc(cropped, filtered, maps, lung_area(maps), bbox)


def volume_bbox(slices, params: PreprocessParams):
    """Union of per-slice foreground boxes across a stack, or None when all slices are blank."""
    stack = np.asarray(slices, dtype=np.float64)
    if params.polarity == "dark":
        stack = 1.0 - stack
    return foreground_bbox(stack.max(axis=0), params.t_bg)


def preprocess_volume(slices, params: PreprocessParams = PreprocessParams()):
    """Preprocess every slice of an (n, h, w) stack; returns a list of SlicePreproc."""
    bbox = None
    if params.crop_mode == "volume":
        bbox = volume_bbox(slices, params)
        if bbox is None:
            return [_empty_result() for _ in slices]
    return [preprocess_slice(s, params, bbox=bbox) for s in slices]


def slice_areas(slices, params: PreprocessParams = PreprocessParams()) -> list[int]:
    return [r.area for r in preprocess_volume(slices, params)]


def dump_stages(out_dir, volume_id, index, original, result: SlicePreproc) -> list[str]:
    """Write one PNG per pipeline stage; returns the written paths."""
    from .volume_io import write_slice

    os.makedirs(out_dir, exist_ok=True)
    if result.empty:
        images = [original]
    else:
        lung = (result.maps.filled - result.maps.map).astype(np.float64)
        images = [original, result.cropped, result.filtered,
                  result.maps.map.astype(np.float64), result.maps.filled.astype(np.float64), lung]
    paths = []
    for name, img in zip(STAGE_NAMES, images):
        p = os.path.join(out_dir, f"{volume_id}_{index:04d}_{name}.png")
        write_slice(p, img, bit_depth=8)
        paths.append(p)
    return paths
