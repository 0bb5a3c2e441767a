"""Region hierarchy construction: part bins, object box and union context area."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


class DegenerateBoxError(ValueError):
    """Raised when a box is too small for the requested operation."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBoxError(f"box extent must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def contains(self, other: "BoundingBox", tol: float = 1e-9) -> bool:
        return (other.x >= self.x - tol and other.y >= self.y - tol
                and other.x2 <= self.x2 + tol and other.y2 <= self.y2 + tol)


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BoundingBox
    confidence: float = 1.0
    identity: Optional[int] = None

    def __post_init__(self):
        if self.frame < 0:
            raise ValueError(f"frame must be >= 0, got {self.frame}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass
class RegionTriplet:
    """Pixel patches for one detection.

    ``context_mask`` marks the patch pixels whose sample point falls inside the
    target sub-rectangle; those pixels are exactly zero in ``context_background``.
    """
    parts: List[np.ndarray]
    semantic: np.ndarray
    context: np.ndarray
    context_background: np.ndarray
    context_mask: np.ndarray = field(repr=False)
    union_box: Optional[BoundingBox] = None


@dataclass(frozen=True)
class RegionConfig:
    grid: Tuple[int, int] = (2, 2)
    part_size: int = 16
    patch_size: int = 32
    pad_fraction: float = 0.1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # x2 - x can differ from w by round-off, which would push identical boxes past 1
    return min(inter / (a.area + b.area - inter), 1.0)


def iou_matrix(a: Sequence[BoundingBox], b: Sequence[BoundingBox]) -> np.ndarray:
    """Vectorised pairwise IoU, shape (len(a), len(b))."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    A = np.array([bx.as_tuple() for bx in a], dtype=np.float64)
    B = np.array([bx.as_tuple() for bx in b], dtype=np.float64)
    ax1, ay1, ax2, ay2 = A[:, 0:1], A[:, 1:2], A[:, 0:1] + A[:, 2:3], A[:, 1:2] + A[:, 3:4]
    bx1, by1, bx2, by2 = B[:, 0], B[:, 1], B[:, 0] + B[:, 2], B[:, 1] + B[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = (A[:, 2:3] * A[:, 3:4]) + (B[:, 2] * B[:, 3]) - inter
    return np.minimum(inter / union, 1.0)


def clamp_box(box: BoundingBox, width: int, height: int, min_size: float = 1.0) -> BoundingBox:
    """Clip a box to the image; a box pushed off-image keeps ``min_size`` pixels at the border."""
    x1 = min(max(box.x, 0.0), width - min_size)
    y1 = min(max(box.y, 0.0), height - min_size)
    x2 = max(min(box.x2, float(width)), x1 + min_size)
    y2 = max(min(box.y2, float(height)), y1 + min_size)
    return BoundingBox(x1, y1, x2 - x1, y2 - y1)


def split_into_bins(box: BoundingBox, grid: Tuple[int, int] = (2, 2)) -> List[BoundingBox]:
    """Tile ``box`` into ``rows x cols`` bins in row-major order.

    Bin sizes come from integer division of the extent; the remainder goes to
    the last row / column so the bins partition the box exactly.
    """
    rows, cols = grid
    if box.w < cols or box.h < rows:
        raise DegenerateBoxError(
            f"box {box.w}x{box.h} is smaller than the {rows}x{cols} grid")
    bw = float(math.floor(box.w / cols))
    bh = float(math.floor(box.h / rows))
    bins = []
    for r in range(rows):
        y = box.y + r * bh
        h = bh if r < rows - 1 else box.h - bh * (rows - 1)
        for c in range(cols):
            x = box.x + c * bw
            w = bw if c < cols - 1 else box.w - bw * (cols - 1)
            bins.append(BoundingBox(x, y, w, h))
    return bins


def compute_union_region(target: BoundingBox, others: Sequence[BoundingBox],
                         pad_fraction: float = 0.1,
                         image_size: Optional[Tuple[int, int]] = None) -> BoundingBox:
    """Smallest box around ``target`` and every overlapping box, padded on each side.

    ``image_size`` is ``(width, height)``; when given the result is clamped to it.
    """
    x1, y1, x2, y2 = target.x, target.y, target.x2, target.y2
    for other in others:
        if iou(target, other) > 0:
            x1, y1 = min(x1, other.x), min(y1, other.y)
            x2, y2 = max(x2, other.x2), max(y2, other.y2)
    w, h = x2 - x1, y2 - y1
    x1 -= pad_fraction * w
    x2 += pad_fraction * w
    y1 -= pad_fraction * h
    y2 += pad_fraction * h
    union = BoundingBox(x1, y1, x2 - x1, y2 - y1)
    if image_size is not None:
        union = clamp_box(union, *image_size)
    return union


def _sample_coords(start: float, extent: float, n: int, limit: int) -> np.ndarray:
    # corner-aligned: first sample on the first pixel, last sample on the last pixel
    if n == 1:
        coords = np.array([start + (extent - 1.0) / 2.0])
    else:
        coords = start + np.arange(n) * ((extent - 1.0) / (n - 1))
    return np.clip(coords, 0.0, limit - 1.0)


def crop_and_resize(image: np.ndarray, box: BoundingBox, out_size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resample of ``box`` to ``out_size = (height, width)``.

    Returns float32 with the channel layout of ``image`` (``HxW`` or ``HxWxC``).
    """
    if image.size == 0:
        raise ValueError("cannot crop from an empty image")
    out_h, out_w = out_size
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"out_size must be positive, got {out_size}")
    img = np.asarray(image, dtype=np.float32)
    H, W = img.shape[:2]
    ys = _sample_coords(box.y, box.h, out_h, H)
    xs = _sample_coords(box.x, box.w, out_w, W)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    if img.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    y0, y1 = y0[:, None], y1[:, None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def _masked_pixel_range(start: float, extent: float, limit: int) -> Tuple[int, int]:
    lo = max(int(math.ceil(start - 1e-9)), 0)
    hi = min(int(math.floor(start + extent - 1.0 + 1e-9)), limit - 1)
    return lo, hi


def build_region_triplet(image: np.ndarray, target: Detection,
                         frame_detections: Sequence[Detection],
                         config: RegionConfig = RegionConfig()) -> RegionTriplet:
    H, W = image.shape[:2]
    box = clamp_box(target.box, W, H)
    others = []
    skipped_self = False
    for det in frame_detections:
        if det.frame != target.frame:
            raise ValueError("frame_detections must all share the target's frame")
        if not skipped_self and det == target:
            skipped_self = True
            continue
        others.append(clamp_box(det.box, W, H))

    bins = split_into_bins(box, config.grid)
    part_hw = (config.part_size, config.part_size)
    patch_hw = (config.patch_size, config.patch_size)
    parts = [crop_and_resize(image, b, part_hw) for b in bins]
    semantic = crop_and_resize(image, box, patch_hw)
    union = compute_union_region(box, others, config.pad_fraction, (W, H))
    context = crop_and_resize(image, union, patch_hw)

    # zero the target in source coordinates before resampling
    mx0, mx1 = _masked_pixel_range(box.x, box.w, W)
    my0, my1 = _masked_pixel_range(box.y, box.h, H)
    masked = np.array(image, dtype=np.float32, copy=True)
    if mx1 >= mx0 and my1 >= my0:
        masked[my0:my1 + 1, mx0:mx1 + 1] = 0
    context_background = crop_and_resize(masked, union, patch_hw)

    ys = _sample_coords(union.y, union.h, config.patch_size, H)
    xs = _sample_coords(union.x, union.w, config.patch_size, W)
    mask = ((ys >= my0) & (ys <= my1))[:, None] & ((xs >= mx0) & (xs <= mx1))[None, :]
    return RegionTriplet(parts=parts, semantic=semantic, context=context,
                         context_background=context_background, context_mask=mask,
                         union_box=union)
