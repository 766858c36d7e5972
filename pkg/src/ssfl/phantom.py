"""Synthetic chest-like CT volumes with known lung masks.

Each slice is a bright body ellipse holding two dark lung ellipses whose
size follows a bell curve over the slice index. Positive volumes add bright
lesion discs inside the lungs.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import BadSpec
from .volume_io import CtVolume, VolumeManifest

# (cy, cx, ry, rx) in pixel units; pixel centres sit at integer coordinates
Ellipse = tuple[float, float, float, float]

_TISSUE_MARGIN = 3  # body pixels around a full-size lung; keeps k <= 3 areas exact


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 64
    height: int = 64
    n_slices: int = 24
    body: Ellipse = (31.5, 31.5, 25.0, 29.0)
    lungs: tuple[Ellipse, Ellipse] = ((31.5, 19.0, 14.0, 8.0), (31.5, 44.0, 14.0, 8.0))
    min_scale: float = 0.25        # lung scale at the ends of the bell
    peak_shift: float = 0.0        # bell centre offset from the middle slice
    lesion: bool = False
    lesions_per_lung: int = 3
    lesion_radius: tuple[float, float] = (1.5, 3.0)
    background: float = 0.0
    body_level: float = 0.9
    lung_level: float = 0.1
    lesion_level: float = 0.8
    seed: int = 0
    id: str = "phantom"

    @property
    def label(self) -> int:
        return int(self.lesion)


@dataclass(frozen=True)
class PhantomTruth:
    lung_masks: np.ndarray     # (n, h, w) bool, lesion pixels excluded
    lung_counts: tuple[int, ...]
    label: int

    def hole_masks(self, k: int = 1) -> np.ndarray:
        """Lung masks grown by a ``k x k`` square.

        A k x k minimum filter spreads every dark lung pixel over its
        window, so this is the region the lung-area pipeline is expected
        to recover on lesion-free slices.
        """
        r = k // 2
        n, h, w = self.lung_masks.shape
        padded = np.zeros((n, h + 2 * r, w + 2 * r), dtype=bool)
        padded[:, r:r + h, r:r + w] = self.lung_masks
        out = np.zeros_like(self.lung_masks)
        for di in range(k):
            for dj in range(k):
                out |= padded[:, di:di + h, dj:dj + w]
        return out

    def hole_counts(self, k: int = 1) -> list[int]:
        return [int(m.sum()) for m in self.hole_masks(k)]


def scaled_spec(size: int, n_slices: int, base: PhantomSpec = PhantomSpec()) -> PhantomSpec:
    """Square spec of side ``size`` with the base geometry rescaled to fit."""
    f = size / base.width
    g = size / base.height

    def sc(e):
        cy, cx, ry, rx = e
        return (cy + 0.5) * g - 0.5, (cx + 0.5) * f - 0.5, ry * g, rx * f

    return replace(base, width=size, height=size, n_slices=n_slices,
                   body=sc(base.body), lungs=tuple(sc(l) for l in base.lungs))


def ellipse_mask(shape, ellipse: Ellipse) -> np.ndarray:
    cy, cx, ry, rx = ellipse
    if ry <= 0 or rx <= 0:
        return np.zeros(shape, dtype=bool)
    rows, cols = np.ogrid[:shape[0], :shape[1]]
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def bell_scale(spec: PhantomSpec) -> np.ndarray:
    n = spec.n_slices
    idx = np.arange(n)
    peak = (n - 1) / 2 + spec.peak_shift
    sigma = max(n / 4.0, 1.0)
    return spec.min_scale + (1.0 - spec.min_scale) * np.exp(-0.5 * ((idx - peak) / sigma) ** 2)


def _scaled(ellipse: Ellipse, s: float) -> Ellipse:
    cy, cx, ry, rx = ellipse
    return cy, cx, ry * s, rx * s


def validate_spec(spec: PhantomSpec) -> None:
    if spec.width < 8 or spec.height < 8 or spec.n_slices < 1:
        raise BadSpec("phantom needs at least 8x8 pixels and one slice")
    air = (spec.background, spec.lung_level)
    tissue = (spec.body_level, spec.lesion_level)
    if min(abs(a - b) for a in air for b in tissue) <= 0.2:
        raise BadSpec("air and tissue intensity levels must differ by more than 0.2")
    if not all(0.0 <= v <= 1.0 for v in air + tissue):
        raise BadSpec("intensity levels must lie in [0, 1]")
    shape = (spec.height, spec.width)
    body = ellipse_mask(shape, spec.body)
    m = _TISSUE_MARGIN
    padded = np.pad(body, m, constant_values=False)
    # body pixels whose whole (2m+1)^2 neighbourhood is body
    core = np.ones_like(body)
    for di in range(2 * m + 1):
        for dj in range(2 * m + 1):
            core &= padded[di:di + shape[0], dj:dj + shape[1]]
    for lung in spec.lungs:
        lm = ellipse_mask(shape, lung)
        if not lm.any() or np.any(lm & ~core):
            raise BadSpec(f"lung ellipse {lung} is not strictly inside the body")


def _lesion_mask(shape, lung: Ellipse, spec: PhantomSpec, rng) -> np.ndarray:
    cy, cx, ry, rx = lung
    out = np.zeros(shape, dtype=bool)
    rows, cols = np.ogrid[:shape[0], :shape[1]]
    for _ in range(spec.lesions_per_lung):
        rad = np.sqrt(rng.uniform(0.0, 0.49))
        ang = rng.uniform(0.0, 2 * np.pi)
        ly, lx = cy + rad * ry * np.sin(ang), cx + rad * rx * np.cos(ang)
        r = rng.uniform(*spec.lesion_radius)
        out |= (rows - ly) ** 2 + (cols - lx) ** 2 <= r * r
    return out


def generate_phantom(spec: PhantomSpec = PhantomSpec()):
    """Return ``(CtVolume, PhantomTruth)``; deterministic in ``spec``."""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    body = ellipse_mask(shape, spec.body)
    scales = bell_scale(spec)
    slices = np.empty((spec.n_slices, *shape))
    masks = np.zeros((spec.n_slices, *shape), dtype=bool)
    for i, s in enumerate(scales):
        img = np.full(shape, spec.background)
        img[body] = spec.body_level
        lung = np.zeros(shape, dtype=bool)
        lesion = np.zeros(shape, dtype=bool)
        for ell in spec.lungs:
            this = ellipse_mask(shape, _scaled(ell, s))
            lung |= this
            if spec.lesion:
                lesion |= _lesion_mask(shape, _scaled(ell, s), spec, rng) & this
        img[lung] = spec.lung_level
        img[lesion] = spec.lesion_level
        slices[i] = img
        masks[i] = lung & ~lesion
    paths = tuple(f"{spec.id}_{i:04d}.png" for i in range(spec.n_slices))
    manifest = VolumeManifest(spec.id, paths, spec.label)
    truth = PhantomTruth(masks, tuple(int(m.sum()) for m in masks), spec.label)
    return CtVolume(manifest, slices), truth


def jitter_spec(base: PhantomSpec, rng, lesion: bool, vid: str,
                slice_range: Optional[tuple[int, int]] = None) -> PhantomSpec:
    """Randomly perturb geometry; retries until the spec validates."""
    lo, hi = slice_range or (max(1, base.n_slices - 6), base.n_slices + 6)
    for _ in range(100):
        by, bx, bry, brx = base.body
        dy, dx = rng.uniform(-2.0, 2.0, size=2)
        body = (by + dy, bx + dx, bry * rng.uniform(0.92, 1.05), brx * rng.uniform(0.92, 1.05))
        lungs = tuple(
            (ly + dy + rng.uniform(-1, 1), lx + dx + rng.uniform(-1, 1),
             lry * rng.uniform(0.85, 1.05), lrx * rng.uniform(0.85, 1.05))
            for ly, lx, lry, lrx in base.lungs)
        spec = replace(base, body=body, lungs=lungs,
                       n_slices=int(rng.integers(lo, hi + 1)),
                       peak_shift=float(rng.uniform(-1.0, 1.0)),
                       lesion=lesion, seed=int(rng.integers(2**31)), id=vid)
        try:
            validate_spec(spec)
        except BadSpec:
            continue
        return spec
    raise BadSpec("could not draw a valid jittered phantom from the base spec")


def generate_dataset(n_per_class: int, base_spec: PhantomSpec = PhantomSpec(), seed: int = 0,
                     prefix: str = "phantom"):
    """``2 * n_per_class`` phantoms, alternating positive and negative."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(2 * n_per_class):
        spec = jitter_spec(base_spec, rng, lesion=(i % 2 == 0), vid=f"{prefix}_{i:04d}")
        out.append(generate_phantom(spec))
    return out
