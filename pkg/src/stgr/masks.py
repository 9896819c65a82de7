"""Run-length encoded binary masks.

Masks are stored as row-major run lengths whose first run counts zeros
(COCO "uncompressed" layout). Set arithmetic works on the sorted list of
interval boundaries derived from the runs, so no bitmap is materialized
outside of :meth:`Mask.from_bitmap` / :meth:`Mask.to_bitmap`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DegenerateInputError, ParseError, ShapeError


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int


def _bounds_from_runs(runs: np.ndarray) -> np.ndarray:
    cs = np.concatenate(([0], np.cumsum(runs)))
    starts = cs[1:-1:2]
    ends = cs[2::2]
    n = min(len(starts), len(ends))
    starts, ends = starts[:n], ends[:n]
    keep = ends > starts
    starts, ends = starts[keep], ends[keep]
    if len(starts) > 1:
        # a zero-length gap between two set runs joins them
        touching = starts[1:] == ends[:-1]
        if touching.any():
            starts = np.concatenate((starts[:1], starts[1:][~touching]))
            ends = np.concatenate((ends[:-1][~touching], ends[-1:]))
    out = np.empty(2 * len(starts), dtype=np.int64)
    out[0::2] = starts
    out[1::2] = ends
    return out


def _runs_from_bounds(bounds: np.ndarray, total: int) -> np.ndarray:
    if len(bounds) == 0:
        return np.array([total], dtype=np.int64)
    runs = np.diff(np.concatenate(([0], bounds, [total])))
    if runs[-1] == 0:
        runs = runs[:-1]
    return runs.astype(np.int64)


class Mask:
    """Immutable binary mask on an ``height x width`` grid."""

    __slots__ = ("height", "width", "runs", "_bounds")

    def __init__(self, height: int, width: int, runs: Iterable[int]):
        height, width = int(height), int(width)
        if height < 1 or width < 1:
            raise ShapeError(f"grid must be at least 1x1, got {height}x{width}")
        arr = np.asarray(list(runs) if not isinstance(runs, np.ndarray) else runs, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ArgumentError("runs must be a non-empty flat sequence")
        if (arr < 0).any():
            raise ArgumentError("run lengths must be non-negative")
        if int(arr.sum()) != height * width:
            raise ArgumentError(f"runs sum to {int(arr.sum())}, expected {height * width}")
        zero = arr[1:] == 0
        if (zero[1:] & zero[:-1]).any():
            raise ArgumentError("consecutive zero-length runs")
        bounds = _bounds_from_runs(arr)
        canonical = _runs_from_bounds(bounds, height * width)
        canonical.setflags(write=False)
        bounds.setflags(write=False)
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "runs", canonical)
        object.__setattr__(self, "_bounds", bounds)

    def __setattr__(self, name, value):
        raise AttributeError("Mask is immutable")

    # -- construction -----------------------------------------------------
    @classmethod
    def _from_bounds(cls, height: int, width: int, bounds: np.ndarray) -> "Mask":
        return cls(height, width, _runs_from_bounds(np.asarray(bounds, dtype=np.int64), height * width))

    @classmethod
    def empty(cls, height: int, width: int) -> "Mask":
        return cls(height, width, [height * width])

    @classmethod
    def full(cls, height: int, width: int) -> "Mask":
        return cls(height, width, [0, height * width])

    @classmethod
    def from_bitmap(cls, bitmap) -> "Mask":
        bm = np.asarray(bitmap).astype(bool)
        if bm.ndim != 2:
            raise ShapeError(f"bitmap must be 2-D, got shape {bm.shape}")
        flat = bm.ravel()
        padded = np.concatenate(([False], flat, [False]))
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        return cls._from_bounds(bm.shape[0], bm.shape[1], edges)

    def to_bitmap(self) -> np.ndarray:
        flat = np.zeros(self.height * self.width, dtype=bool)
        for s, e in self.intervals():
            flat[s:e] = True
        return flat.reshape(self.height, self.width)

    # -- text form --------------------------------------------------------
    def to_text(self) -> str:
        return " ".join(str(v) for v in (self.height, self.width, *self.runs.tolist()))

    @classmethod
    def from_text(cls, text: str) -> "Mask":
        parts = str(text).split()
        if len(parts) < 3:
            raise ParseError(f"mask text needs 'H W r0 ...', got {text!r}")
        try:
            values = [int(p) for p in parts]
        except ValueError as exc:
            raise ParseError(f"non-integer token in mask text: {exc}") from None
        try:
            return cls(values[0], values[1], values[2:])
        except (ArgumentError, ShapeError) as exc:
            raise ParseError(str(exc)) from None

    # -- inspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def bounds(self) -> np.ndarray:
        """Alternating start/end (exclusive) offsets of set intervals."""
        return self._bounds

    def intervals(self):
        b = self._bounds
        return zip(b[0::2].tolist(), b[1::2].tolist())

    def is_empty(self) -> bool:
        return len(self._bounds) == 0

    def area(self) -> int:
        return mask_area(self)

    def complement(self) -> "Mask":
        total = self.height * self.width
        b = self._bounds
        inner = np.concatenate(([0], b, [total]))
        # drop degenerate [0,0) or [total,total) pieces
        starts, ends = inner[0::2], inner[1::2]
        keep = ends > starts
        out = np.empty(2 * int(keep.sum()), dtype=np.int64)
        out[0::2] = starts[keep]
        out[1::2] = ends[keep]
        return Mask._from_bounds(self.height, self.width, out)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.runs, other.runs)

    def __hash__(self):
        return hash((self.height, self.width, self.runs.tobytes()))

    def __repr__(self):
        return f"Mask({self.height}x{self.width}, area={self.area()}, runs={len(self.runs)})"

    def __and__(self, other: "Mask") -> "Mask":
        return mask_intersect(self, other)

    def __or__(self, other: "Mask") -> "Mask":
        return mask_union(self, other)


def _check_same_grid(a: Mask, b: Mask) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"grid mismatch: {a.shape} vs {b.shape}")


def _segments(a: Mask, b: Mask):
    pts = np.union1d(a.bounds, b.bounds)
    in_a = (np.searchsorted(a.bounds, pts, side="right") & 1).astype(bool)
    in_b = (np.searchsorted(b.bounds, pts, side="right") & 1).astype(bool)
    return pts, in_a, in_b


def _bounds_where(pts: np.ndarray, inside: np.ndarray) -> np.ndarray:
    if len(pts) == 0:
        return pts
    prev = np.concatenate(([False], inside[:-1]))
    return pts[inside != prev]


def intersection_area(a: Mask, b: Mask) -> int:
    _check_same_grid(a, b)
    if a.is_empty() or b.is_empty():
        return 0
    pts, in_a, in_b = _segments(a, b)
    both = (in_a & in_b)[:-1]
    return int(np.diff(pts)[both].sum())


def mask_intersect(a: Mask, b: Mask) -> Mask:
    _check_same_grid(a, b)
    pts, in_a, in_b = _segments(a, b)
    return Mask._from_bounds(a.height, a.width, _bounds_where(pts, in_a & in_b))


def mask_union(a: Mask, b: Mask) -> Mask:
    _check_same_grid(a, b)
    pts, in_a, in_b = _segments(a, b)
    return Mask._from_bounds(a.height, a.width, _bounds_where(pts, in_a | in_b))


def mask_union_all(masks: Sequence[Mask]) -> Mask:
    """Pixel-wise OR of a non-empty list of masks."""
    masks = list(masks)
    if not masks:
        raise ArgumentError("mask_union_all needs at least one mask")
    for m in masks[1:]:
        _check_same_grid(masks[0], m)
    return reduce(mask_union, masks)


def mask_area(a: Mask) -> int:
    b = a.bounds
    return int((b[1::2] - b[0::2]).sum())


def mask_iou(a: Mask, b: Mask) -> float:
    """Exact IoU; two empty masks agree perfectly (1.0), one empty gives 0.0."""
    _check_same_grid(a, b)
    area_a, area_b = mask_area(a), mask_area(b)
    if area_a == 0 and area_b == 0:
        return 1.0
    if area_a == 0 or area_b == 0:
        return 0.0
    inter = intersection_area(a, b)
    return inter / (area_a + area_b - inter)


def iou_matrix(masks: Sequence[Mask]) -> np.ndarray:
    """Symmetric pairwise IoU matrix with unit diagonal for non-empty masks."""
    n = len(masks)
    out = np.zeros((n, n))
    areas = [mask_area(m) for m in masks]
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            _check_same_grid(masks[i], masks[j])
            if areas[i] == 0 or areas[j] == 0:
                v = 1.0 if areas[i] == areas[j] == 0 else 0.0
            else:
                inter = intersection_area(masks[i], masks[j])
                v = inter / (areas[i] + areas[j] - inter)
            out[i, j] = out[j, i] = v
    return out


def mask_bbox(a: Mask) -> BBox:
    if a.is_empty():
        raise DegenerateInputError("bounding box of an empty mask")
    w = a.width
    starts = a.bounds[0::2]
    last = a.bounds[1::2] - 1
    y_min = int(starts[0] // w)
    y_max = int(last[-1] // w)
    if (starts // w != last // w).any():
        # some run wraps a row boundary, so it touches both edge columns
        x_min, x_max = 0, w - 1
    else:
        x_min, x_max = int((starts % w).min()), int((last % w).max())
    return BBox(x_min, y_min, x_max, y_max)


def masked_pool(feature_map, mask: Mask) -> np.ndarray:
    """Average the ``[H, W, d]`` feature vectors under ``mask``."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3 or fm.shape[:2] != mask.shape:
        raise ShapeError(f"feature map {fm.shape} does not match mask grid {mask.shape}")
    if mask.is_empty():
        raise DegenerateInputError("cannot pool over an empty mask")
    flat = fm.reshape(-1, fm.shape[2])
    idx = np.concatenate([np.arange(s, e) for s, e in mask.intervals()])
    return flat[idx].sum(axis=0) / len(idx)


def ellipse_mask(height: int, width: int, cy: float, cx: float, ry: float, rx: float,
                 angle: float = 0.0) -> Mask:
    """Rasterize a (rotated) filled ellipse; used by the phantom generator."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (u / max(rx, 1e-9)) ** 2 + (v / max(ry, 1e-9)) ** 2 <= 1.0
    return Mask.from_bitmap(inside)
