"""Fixed random-projection slice embedder and slice-count resampling.

The embedder stands in for a trained 2-D backbone: any (n_slices, dim)
float matrix read from an embedding file can replace its output.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EmptyInput, EmptyVolume
from .volume_io import CtVolume


@dataclass(frozen=True)
class EmbedderParams:
    embed_dim: int = 224
    grid: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.grid < 2:
            raise ValueError(f"grid must be >= 2, got {self.grid}")


@lru_cache(maxsize=8)
def _projection(grid, embed_dim, seed):
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((grid * grid, embed_dim)) / grid
    proj.setflags(write=False)
    return proj


def _bin_edges(n, g):
    start = (np.arange(g) * n) // g
    stop = np.maximum(((np.arange(g) + 1) * n) // g, start + 1)
    return start, stop


def pool_to_grid(img, grid):
    """Average-pool an image onto a ``grid x grid`` lattice of near-equal bins."""
    h, w = img.shape
    r0, r1 = _bin_edges(h, grid)
    c0, c1 = _bin_edges(w, grid)
    out = np.empty((grid, grid))
    for i in range(grid):
        band = img[r0[i]:r1[i]]
        for j in range(grid):
            out[i, j] = band[:, c0[j]:c1[j]].mean()
    return out


def embed_slice(img, params: EmbedderParams = EmbedderParams()) -> np.ndarray:
    pooled = pool_to_grid(np.asarray(img, dtype=np.float64), params.grid).ravel()
    proj = _projection(params.grid, params.embed_dim, params.seed)
    return np.tanh(pooled @ proj).astype(np.float32)


def embed_volume(volume: CtVolume, params: EmbedderParams = EmbedderParams()) -> np.ndarray:
    slices = volume.slices if isinstance(volume, CtVolume) else np.asarray(volume)
    if len(slices) == 0:
        raise EmptyVolume("cannot embed an empty volume")
    # row-by-row keeps each row bit-identical to embed_slice
    return np.stack([embed_slice(s, params) for s in slices])


def resample_index(n, target):
    return (np.arange(target) * n) // target


def resample_slices(matrix, target: int = 100) -> np.ndarray:
    """Uniformly map ``n`` rows onto exactly ``target`` rows, repeating or skipping in order."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise EmptyInput("embedding matrix must have at least one row")
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    return matrix[resample_index(matrix.shape[0], target)]
