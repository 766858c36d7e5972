"""Volume-level glue: score slices, pick the window, embed the selected slices."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .embed import EmbedderParams, embed_volume
from .preprocess import PreprocessParams, slice_areas
from .select import SliceWindow, apply_window, select_window
from .volume_io import CtVolume


@dataclass(frozen=True)
class Selection:
    id: str
    areas: tuple[int, ...]
    window: SliceWindow

    def as_dict(self) -> dict:
        return {"id": self.id, "s": self.window.s, "e": self.window.e,
                "total_area": self.window.total_area, "areas": list(self.areas)}


def select_volume(volume: CtVolume, params: PreprocessParams = PreprocessParams(),
                  n_c: int = 64) -> Selection:
    areas = slice_areas(volume.slices, params)
    return Selection(volume.id, tuple(areas), select_window(areas, n_c))


def embed_selected(volume: CtVolume, params: PreprocessParams = PreprocessParams(),
                   n_c: int = 64, embedder: EmbedderParams = EmbedderParams()):
    """Returns ``(Selection, embedding matrix of the selected slices)``."""
    sel = select_volume(volume, params, n_c)
    return sel, embed_volume(apply_window(volume, sel.window), embedder)


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map; ``workers > 1`` fans out over processes."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def embed_dataset(volumes: Iterable[CtVolume], params: PreprocessParams = PreprocessParams(),
                  n_c: int = 64, embedder: EmbedderParams = EmbedderParams()):
    """``[(embedding matrix, label), ...]`` for a labelled collection of volumes."""
    out = []
    for vol in volumes:
        _, emb = embed_selected(vol, params, n_c, embedder)
        out.append((emb, vol.label))
    return out


def as_float_dataset(pairs) -> list:
    return [(np.asarray(m, dtype=np.float32), lbl) for m, lbl in pairs]
