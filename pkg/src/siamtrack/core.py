"""Boxes, motion deltas and the geometric helpers shared by every module.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner, in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DEFAULT_EMBEDDING_DIM = 128
DEFAULT_SEARCH_RATIO = 2.0


class InvalidBox(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (math.isfinite(self.x) and math.isfinite(self.y)
                and math.isfinite(self.w) and math.isfinite(self.h)):
            raise InvalidBox(f"non-finite box {self!r}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidBox(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h


class MotionDelta(NamedTuple):
    """Normalized translation plus log scale change between two boxes."""

    dx: float
    dy: float
    dw: float
    dh: float

    @classmethod
    def zero(cls) -> "MotionDelta":
        return cls(0.0, 0.0, 0.0, 0.0)


def iou(a: BBox, b: BBox) -> float:
    if a == b:
        return 1.0
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    # edge rounding can push the ratio a hair past 1
    return min(inter / union, 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for ``(n, 4)`` and ``(m, 4)`` arrays of ``x, y, w, h`` rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]
    ix = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.minimum(inter / union, 1.0)
    out[np.all(a[:, None, :] == b[None, :, :], axis=2)] = 1.0
    return out


def encode_motion(prev: BBox, nxt: BBox) -> MotionDelta:
    """Offset of the top-left corner in units of the previous size, and log size ratios."""
    return MotionDelta(
        (nxt.x - prev.x) / prev.w,
        (nxt.y - prev.y) / prev.h,
        math.log(nxt.w / prev.w),
        math.log(nxt.h / prev.h),
    )


def decode_motion(prev: BBox, m: MotionDelta) -> BBox:
    dx, dy, dw, dh = m
    return BBox(prev.x + dx * prev.w, prev.y + dy * prev.h,
                prev.w * math.exp(dw), prev.h * math.exp(dh))


def search_region(target: BBox, r: float = DEFAULT_SEARCH_RATIO) -> BBox:
    """Target box scaled by ``r`` about its own center."""
    if r < 1:
        raise ValueError(f"search ratio must be >= 1, got {r}")
    return BBox.from_center(target.cx, target.cy, target.w * r, target.h * r)


def check_visibility(v: float) -> float:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"visibility must lie in [0, 1], got {v}")
    return float(v)


def as_embedding(values, dim: int | None = DEFAULT_EMBEDDING_DIM) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"embedding length {arr.shape[0]} != {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains non-finite values")
    return arr
