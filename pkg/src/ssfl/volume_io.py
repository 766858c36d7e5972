"""Volume ingestion: JSON manifests, PNG slice stacks, and the embedding file format."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    BitDepthUnsupported,
    DimensionMismatch,
    EmptyVolume,
    IoError,
    NotGrayscale,
    ParseError,
)

EMBEDDING_MAGIC = b"SSFLEMB1"
_EMB_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class VolumeManifest:
    id: str
    slice_paths: tuple[str, ...]
    label: Optional[int] = None

    def __post_init__(self):
        if not self.slice_paths:
            raise EmptyVolume(f"volume {self.id!r} has no slices")
        if len(set(self.slice_paths)) != len(self.slice_paths):
            raise ParseError(f"volume {self.id!r} lists duplicate slice paths")
        if self.label is not None and self.label not in (0, 1):
            raise ParseError(f"volume {self.id!r}: label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class CtVolume:
    """An ordered slice stack; ``slices`` has shape (n, height, width), values in [0, 1]."""

    manifest: VolumeManifest
    slices: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.slices.ndim != 3:
            raise DimensionMismatch(f"slices must be (n, h, w), got shape {self.slices.shape}")
        if len(self.slices) != len(self.manifest.slice_paths):
            raise DimensionMismatch(
                f"{len(self.slices)} slices for {len(self.manifest.slice_paths)} paths")

    @property
    def id(self) -> str:
        return self.manifest.id

    @property
    def label(self) -> Optional[int]:
        return self.manifest.label

    def __len__(self):
        return len(self.slices)


def manifest_to_dict(manifest: VolumeManifest) -> dict:
    doc = {"id": manifest.id}
    if manifest.label is not None:
        doc["label"] = manifest.label
    doc["slices"] = list(manifest.slice_paths)
    return doc


def parse_manifest(doc, base_dir: str = "") -> VolumeManifest:
    if not isinstance(doc, dict):
        raise ParseError("manifest must be a JSON object")
    vid = doc.get("id")
    slices = doc.get("slices")
    if not isinstance(vid, str) or not vid:
        raise ParseError("manifest 'id' must be a non-empty string")
    if not isinstance(slices, list) or not all(isinstance(s, str) for s in slices):
        raise ParseError(f"manifest {vid!r}: 'slices' must be a list of strings")
    label = doc.get("label")
    if label is not None and (isinstance(label, bool) or label not in (0, 1)):
        raise ParseError(f"manifest {vid!r}: label must be 0 or 1")
    paths = tuple(s if os.path.isabs(s) else os.path.join(base_dir, s) for s in slices)
    return VolumeManifest(id=vid, slice_paths=paths, label=label)


def load_manifest(path) -> VolumeManifest:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    return parse_manifest(doc, os.path.dirname(os.path.abspath(path)))


def normalize_intensity(raw, bit_depth: int) -> np.ndarray:
    """Map integer pixels onto [0, 1] by dividing by ``2**bit_depth - 1``."""
    if bit_depth not in (8, 16):
        raise BitDepthUnsupported(f"bit depth {bit_depth} (expected 8 or 16)")
    raw = np.asarray(raw)
    top = (1 << bit_depth) - 1
    if raw.size and (raw.min() < 0 or raw.max() > top):
        raise ValueError(f"pixel values outside [0, {top}] for {bit_depth}-bit input")
    return raw.astype(np.float64) / top


def read_slice(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    if mode == "L":
        depth = 8
    elif mode.startswith("I;16") or mode == "I":
        depth = 16
    else:
        raise NotGrayscale(f"{path}: image mode {mode!r} is not single-channel grayscale")
    if arr.ndim != 2:
        raise NotGrayscale(f"{path}: expected a 2-D image, got shape {arr.shape}")
    return normalize_intensity(arr, depth)


def write_slice(path, img: np.ndarray, bit_depth: int = 16) -> None:
    """Write a [0, 1] image as a grayscale PNG (rounded to the nearest level)."""
    top = (1 << bit_depth) - 1
    q = np.rint(np.clip(img, 0.0, 1.0) * top)
    arr = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def load_volume(manifest: VolumeManifest) -> CtVolume:
    slices = []
    for p in manifest.slice_paths:
        img = read_slice(p)
        if slices and img.shape != slices[0].shape:
            raise DimensionMismatch(
                f"volume {manifest.id!r}: {p} is {img.shape[1]}x{img.shape[0]}, "
                f"expected {slices[0].shape[1]}x{slices[0].shape[0]}")
        slices.append(img)
    return CtVolume(manifest, np.stack(slices))


# --------------------------------------------------------------------------
# embedding files

def write_embeddings(matrix, path) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {m.shape}")
    data = np.ascontiguousarray(m, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(_EMB_HEADER.pack(EMBEDDING_MAGIC, m.shape[0], m.shape[1]))
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc


def read_embeddings(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    if len(blob) < _EMB_HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, n, dim = _EMB_HEADER.unpack_from(blob)
    if magic != EMBEDDING_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    body = blob[_EMB_HEADER.size:]
    if len(body) != 4 * n * dim:
        raise ParseError(f"{path}: expected {4 * n * dim} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float32)


# --------------------------------------------------------------------------

class DatasetStats(NamedTuple):
    n_positive: int
    n_negative: int
    n_unlabeled: int
    total: int


def dataset_stats(manifests: Sequence[VolumeManifest]) -> DatasetStats:
    pos = sum(1 for m in manifests if m.label == 1)
    neg = sum(1 for m in manifests if m.label == 0)
    return DatasetStats(pos, neg, len(manifests) - pos - neg, len(manifests))


def rename(volume: CtVolume, new_id: str, slices: np.ndarray, paths) -> CtVolume:
    return CtVolume(replace(volume.manifest, id=new_id, slice_paths=tuple(paths)), slices)
