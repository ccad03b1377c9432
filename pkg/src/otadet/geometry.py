"""Axis-aligned box types, frame conversions, and overlap measures.

Loss-side computations run on normalized center-size boxes; metrics run on
pixel corner boxes. Scalar helpers operate on the box dataclasses; the
``*_matrix`` helpers operate on ``(N, 4)`` ndarrays for batched math.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PIXEL = "pixel"
NORM = "norm"


@dataclass(frozen=True)
class BoxXYXY:
    """Corner-format box; ``frame`` tags pixel vs normalized coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float
    frame: str = PIXEL

    def __post_init__(self) -> None:
        if self.frame not in (PIXEL, NORM):
            raise ValueError(f"unknown box frame {self.frame!r}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box corners: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class BoxCxCyWH:
    """Center-size box normalized to the unit square."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"center outside unit square: ({self.cx}, {self.cy})")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def _check_same_frame(a: BoxXYXY, b: BoxXYXY) -> None:
    if a.frame != b.frame:
        raise ValueError(f"box frame mismatch: {a.frame!r} vs {b.frame!r}")


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Intersection over union in [0, 1]; degenerate boxes yield 0."""
    _check_same_frame(a, b)
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Generalized IoU in [-1, 1]: IoU minus the normalized enclosure slack."""
    _check_same_frame(a, b)
    base = iou(a, b)
    ex = max(a.x2, b.x2) - min(a.x1, b.x1)
    ey = max(a.y2, b.y2) - min(a.y1, b.y1)
    enclosure = ex * ey
    if enclosure <= 0:
        return base
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    return base - (enclosure - union) / enclosure


def to_normalized(box: BoxXYXY, image_size: tuple[int, int]) -> BoxCxCyWH:
    """Pixel corner box to normalized center-size coordinates."""
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"non-positive image size {image_size}")
    return BoxCxCyWH(
        cx=(box.x1 + box.x2) / 2.0 / w,
        cy=(box.y1 + box.y2) / 2.0 / h,
        w=box.width / w,
        h=box.height / h,
    )


def to_pixel(box: BoxCxCyWH, image_size: tuple[int, int]) -> BoxXYXY:
    """Normalized center-size box back to pixel corners."""
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"non-positive image size {image_size}")
    return BoxXYXY(
        x1=(box.cx - box.w / 2.0) * w,
        y1=(box.cy - box.h / 2.0) * h,
        x2=(box.cx + box.w / 2.0) * w,
        y2=(box.cy + box.h / 2.0) * h,
        frame=PIXEL,
    )


def l1(a: BoxCxCyWH, b: BoxCxCyWH) -> float:
    """Componentwise absolute distance between normalized boxes."""
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )


# ---------------------------------------------------------------------------
# ndarray batch helpers (rows are boxes)

def xyxy_array(boxes: Sequence[BoxXYXY]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def cxcywh_array(boxes: Sequence[BoxCxCyWH]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def cxcywh_to_xyxy(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    cx, cy, w, h = arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    x1, y1, x2, y2 = arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes: ``(N, 4) x (M, 4) -> (N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU of corner boxes: ``(N, 4) x (M, 4) -> (N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    base = iou_matrix(a, b)
    ex = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    ey = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    enclosure = ex * ey
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    slack = np.zeros_like(base)
    np.divide(enclosure - union, enclosure, out=slack, where=enclosure > 0)
    return base - slack


def l1_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise L1 distance of center-size boxes: ``(N, 4) x (M, 4) -> (N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)
