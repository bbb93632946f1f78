"""Depth map containers, normalization and per-object depth statistics."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import FormatError, ResolutionError, ValidationError
from .geometry import BBox, DepthStats, as_bbox

_HEADER = struct.Struct("<II")


@dataclass
class _Grid:
    values: np.ndarray  # (height, width)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.width, self.height) + \
            np.ascontiguousarray(self.values, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0):
        """Decode one grid at ``offset``; returns (grid, end offset)."""
        if len(data) - offset < _HEADER.size:
            raise FormatError("truncated depth map header", offset)
        w, h = _HEADER.unpack_from(data, offset)
        start = offset + _HEADER.size
        nbytes = 4 * w * h
        if w < 1 or h < 1 or len(data) - start < nbytes:
            raise FormatError(f"bad or truncated depth map {w}x{h}", start)
        vals = np.frombuffer(data, "<f4", w * h, start).reshape(h, w)
        return cls(vals.astype(np.float32)), start + nbytes


class RawDepthMap(_Grid):
    """Monocular-estimator style output: positive values, larger means closer."""

    def __init__(self, values):
        super().__init__(np.asarray(values, dtype=np.float32))
        if self.values.ndim != 2:
            raise ValidationError("depth map must be 2-D")


class NormalizedDepthMap(_Grid):
    """Depth in [0, 1] with 0 for the closest pixel."""

    def __init__(self, values):
        super().__init__(np.asarray(values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValidationError("depth map must be 2-D")


def write_maps(maps: Iterable[_Grid]) -> bytes:
    return b"".join(m.to_bytes() for m in maps)


def read_maps(data: bytes, cls=RawDepthMap) -> list:
    out, off = [], 0
    while off < len(data):
        grid, off = _Grid.from_bytes(data, off)
        out.append(cls(grid.values))
    return out


def normalize_depth_map(raw) -> NormalizedDepthMap:
    """Map raw disparity-like values linearly onto [0, 1], reversing order.

    The largest raw value (closest pixel) becomes 0 and the smallest becomes 1.
    A uniform map has no depth range and maps to all zeros.
    """
    x = np.asarray(getattr(raw, "values", raw), dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("raw depth map contains non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return NormalizedDepthMap(np.zeros_like(x))
    out = 1.0 - (x - lo) / (hi - lo)
    return NormalizedDepthMap(np.clip(out, 0.0, 1.0))


def pixel_mask(width: int, height: int, b: BBox) -> np.ndarray:
    """Pixels whose centers lie inside the half-open box [x1, x2) x [y1, y2)."""
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    cols = (cx >= b.x1) & (cx < b.x2)
    rows = (cy >= b.y1) & (cy < b.y2)
    return rows[:, None] & cols[None, :]


def object_depth_stats(depth_map, b, object_index=None) -> DepthStats:
    values = np.asarray(getattr(depth_map, "values", depth_map), dtype=np.float64)
    b = as_bbox(b)
    h, w = values.shape
    mask = pixel_mask(w, h, b)
    if not mask.any():
        raise ResolutionError(f"box {b.as_tuple()} covers no pixel at {w}x{h}", object_index)
    cx, cy = (b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0
    col = min(int(cx * w), w - 1)
    row = min(int(cy * h), h - 1)
    return DepthStats.from_samples(values[mask], center_value=values[row, col])


def object_depth(depth_map, b) -> float:
    """Scalar object depth: the median of its covered normalized pixels."""
    return object_depth_stats(depth_map, b).median
