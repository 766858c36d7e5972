"""Contiguous slice-window selection maximising total lung area."""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from itertools import accumulate

import numpy as np

from .errors import EmptyInput, WindowOutOfRange
from .volume_io import CtVolume, rename


@dataclass(frozen=True)
class SliceWindow:
    s: int
    e: int          # inclusive
    total_area: int

    def __len__(self):
        return self.e - self.s + 1


def _check(areas, n_c):
    areas = [int(a) for a in areas]
    if not areas:
        raise EmptyInput("areas must be non-empty")
    if n_c < 0:
        raise ValueError(f"n_c must be >= 0, got {n_c}")
    if min(areas) < 0:
        raise ValueError("areas must be non-negative pixel counts")
    return areas


def select_window(areas, n_c: int) -> SliceWindow:
    """Best window with ``e - s <= n_c``; ties go to the smallest s, then smallest e.

    Areas are non-negative, so the best total is reached by some window of
    maximal span. The earliest start achieving it is found by scanning the
    maximal-span sums, and the shortest end by bisecting the prefix sums.
    """
    areas = _check(areas, n_c)
    n = len(areas)
    prefix = [0, *accumulate(areas)]
    span = min(n_c, n - 1)
    # best sum reachable from start s is the window running to min(s + n_c, n - 1)
    reach = [prefix[min(s + span, n - 1) + 1] - prefix[s] for s in range(n)]
    best = max(reach)
    s = reach.index(best)
    e = bisect.bisect_left(prefix, prefix[s] + best, lo=s + 1) - 1
    return SliceWindow(s, e, best)


def select_window_bruteforce(areas, n_c: int) -> SliceWindow:
    """O(n^2) enumeration with the same tie rule; reference for :func:`select_window`."""
    areas = _check(areas, n_c)
    n = len(areas)
    best = None
    for s in range(n):
        total = 0
        for e in range(s, min(s + n_c, n - 1) + 1):
            total += areas[e]
            if best is None or total > best[2]:
                best = (s, e, total)
    return SliceWindow(*best)


def apply_window(volume: CtVolume, window: SliceWindow) -> CtVolume:
    n = len(volume)
    if not 0 <= window.s <= window.e < n:
        raise WindowOutOfRange(f"window ({window.s}, {window.e}) outside 0..{n - 1}")
    sl = slice(window.s, window.e + 1)
    return rename(volume, f"{volume.id}_w{window.s}-{window.e}",
                  np.array(volume.slices[sl]), volume.manifest.slice_paths[sl])
