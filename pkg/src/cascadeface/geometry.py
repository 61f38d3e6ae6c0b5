"""Boxes, overlap measures, offset encoding, and bilinear crops.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner in pixels.
Array helpers take ``(N, 4)`` float arrays in the same layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, NumericError

PIXEL_MEAN = 127.5
PIXEL_SCALE = 128.0


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    score: Optional[float] = None

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ContractError(f"box must have positive size, got w={self.w} h={self.h}")

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
    def center(self) -> tuple:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a, score=None) -> "BoundingBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), score)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic as the intersection, so a box
    # has IoU exactly 1 with itself
    area_a = (a.x2 - a.x) * (a.y2 - a.y)
    area_b = (b.x2 - b.x) * (b.y2 - b.y)
    return min(1.0, inter / (area_a + area_b - inter))


def overlap_matrix(a: np.ndarray, b: np.ndarray, mode: str = "union") -> np.ndarray:
    """Pairwise overlap between ``(N,4)`` and ``(M,4)`` boxes.

    ``union`` is IoU; ``min`` is intersection over the smaller area.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a2, b2 = a[:, :2] + a[:, 2:], b[:, :2] + b[:, 2:]
    iw = np.minimum(a2[:, None, 0], b2[None, :, 0]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a2[:, None, 1], b2[None, :, 1]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a2[:, 0] - a[:, 0]) * (a2[:, 1] - a[:, 1])
    area_b = (b2[:, 0] - b[:, 0]) * (b2[:, 1] - b[:, 1])
    if mode == "union":
        denom = area_a[:, None] + area_b[None, :] - inter
    elif mode == "min":
        denom = np.minimum(area_a[:, None], area_b[None, :])
    else:
        raise ValueError(f"unknown overlap mode {mode!r}")
    return np.minimum(inter / denom, 1.0)


def regression_target(p: BoundingBox, gt: BoundingBox) -> np.ndarray:
    """Offsets that move window ``p`` onto ``gt`` (log-space size terms)."""
    return np.array([
        (gt.x - p.x) / p.w,
        (gt.y - p.y) / p.h,
        math.log(gt.w / p.w),
        math.log(gt.h / p.h),
    ])


def apply_regression(box: BoundingBox, offsets) -> BoundingBox:
    """Inverse of :func:`regression_target`."""
    d = np.asarray(offsets, dtype=np.float64)
    if d.shape != (4,) or not np.all(np.isfinite(d)):
        raise NumericError(f"offsets must be 4 finite numbers, got {offsets!r}")
    return BoundingBox(box.x + d[0] * box.w, box.y + d[1] * box.h,
                       box.w * math.exp(d[2]), box.h * math.exp(d[3]), box.score)


def apply_regression_array(boxes: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    d = np.asarray(offsets, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise NumericError("non-finite regression offsets")
    out = np.empty_like(boxes)
    out[:, 0] = boxes[:, 0] + d[:, 0] * boxes[:, 2]
    out[:, 1] = boxes[:, 1] + d[:, 1] * boxes[:, 3]
    # cap the size exponent so a wild prediction cannot overflow
    out[:, 2] = boxes[:, 2] * np.exp(np.clip(d[:, 2], -10, 10))
    out[:, 3] = boxes[:, 3] * np.exp(np.clip(d[:, 3], -10, 10))
    return out


def square(boxes: np.ndarray) -> np.ndarray:
    """Grow the shorter side of each box about its center."""
    boxes = np.asarray(boxes, dtype=np.float64)
    side = np.maximum(boxes[:, 2], boxes[:, 3])
    out = np.empty_like(boxes)
    out[:, 0] = boxes[:, 0] + (boxes[:, 2] - side) / 2.0
    out[:, 1] = boxes[:, 1] + (boxes[:, 3] - side) / 2.0
    out[:, 2] = side
    out[:, 3] = side
    return out


def clip_boxes(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    x1 = np.clip(boxes[:, 0], 0, width)
    y1 = np.clip(boxes[:, 1], 0, height)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, height)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)


def sample_bilinear(image: np.ndarray, boxes: np.ndarray, size):
    """Bilinear samples of an ``(H, W, C)`` float image on a grid per box.

    ``size`` is an int or ``(rows, cols)``. Returns ``(values, inside)`` with
    values ``(B, rows, cols, C)`` and ``inside`` marking output pixels whose
    center falls on the image.
    """
    h, w = image.shape[:2]
    rows, cols = (size, size) if np.isscalar(size) else size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    px = boxes[:, 0:1] + ((np.arange(cols) + 0.5) / cols)[None, :] * boxes[:, 2:3]
    py = boxes[:, 1:2] + ((np.arange(rows) + 0.5) / rows)[None, :] * boxes[:, 3:4]
    in_x = (px >= 0) & (px <= w)
    in_y = (py >= 0) & (py <= h)
    sx = np.clip(px - 0.5, 0, w - 1)
    sy = np.clip(py - 0.5, 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, None, :, None]
    fy = (sy - y0)[:, :, None, None]
    top = image[y0[:, :, None], x0[:, None, :]] * (1 - fx) + image[y0[:, :, None], x1[:, None, :]] * fx
    bot = image[y1[:, :, None], x0[:, None, :]] * (1 - fx) + image[y1[:, :, None], x1[:, None, :]] * fx
    values = top * (1 - fy) + bot * fy
    inside = in_y[:, :, None] & in_x[:, None, :]
    return values, inside


def normalize_pixels(values):
    return (np.asarray(values, dtype=np.float32) - PIXEL_MEAN) / PIXEL_SCALE


def crop_boxes(image: np.ndarray, boxes: np.ndarray, size: int, normalized: bool = False):
    """Crop and resize each box to ``(3, size, size)``.

    ``image`` is ``(H, W, 3)``; raw 0..255 pixels unless ``normalized``.
    Parts of a box outside the image come out as exactly 0 in the normalized
    output. Returns ``(patches (B,3,size,size) float32, valid (B,))`` where
    ``valid`` is false for boxes with no overlap with the image.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w = image.shape[:2]
    valid = ((boxes[:, 0] < w) & (boxes[:, 1] < h) & (boxes[:, 0] + boxes[:, 2] > 0)
             & (boxes[:, 1] + boxes[:, 3] > 0) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0))
    if len(boxes) == 0:
        return np.zeros((0, 3, size, size), np.float32), valid
    src = image.astype(np.float32, copy=False)
    values, inside = sample_bilinear(src, boxes, size)
    if not normalized:
        values = normalize_pixels(values)
    values = np.where(inside[..., None], values, np.float32(0.0)).astype(np.float32)
    return np.ascontiguousarray(values.transpose(0, 3, 1, 2)), valid


def resize_image(image: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinear resize of a raw ``(H, W, 3)`` image to a normalized ``(3, rows, cols)``."""
    h, w = image.shape[:2]
    values, _ = sample_bilinear(image.astype(np.float32, copy=False),
                                np.array([[0.0, 0.0, w, h]]), (rows, cols))
    return np.ascontiguousarray(normalize_pixels(values[0]).transpose(2, 0, 1))


def crop_resize(image: np.ndarray, box: BoundingBox, out_size: int) -> np.ndarray:
    """Single-box crop to a normalized ``(3, out_size, out_size)`` patch."""
    patches, valid = crop_boxes(image, box.as_array()[None], out_size)
    if not valid[0]:
        raise ContractError("box lies entirely outside the image")
    return patches[0]
