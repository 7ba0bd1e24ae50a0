"""Coordinate-space machinery shared by the detectors and the data pipeline.

Conventions: continuous pixel coordinates with the origin at the top-left
corner of the top-left pixel, x to the right and y down; pixel (i, j) covers
[j, j+1) x [i, i+1) and its center is (j + 0.5, i + 0.5). Boxes are half-open.
Images are float32 arrays of shape (height, width, 3) with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, TypeVar

import numpy as np


class Point(NamedTuple):
    x: float
    y: float


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> Point:
        return Point((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    @property
    def valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    def inflate(self, fraction: float) -> "BBox":
        """Grow each side outward by ``fraction`` of the box extent on that axis."""
        mx, my = fraction * self.width, fraction * self.height
        return BBox(self.x1 - mx, self.y1 - my, self.x2 + mx, self.y2 + my)

    def contains(self, p: Sequence[float], margin: float = 0.0) -> bool:
        return (self.x1 - margin <= p[0] <= self.x2 + margin
                and self.y1 - margin <= p[1] <= self.y2 + margin)

    def intersects_frame(self, width: int, height: int) -> bool:
        return self.x1 < width and self.x2 > 0 and self.y1 < height and self.y2 > 0

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


class Translation(NamedTuple):
    dx: int
    dy: int


T = TypeVar("T", Point, BBox)


def as_image(a) -> np.ndarray:
    """Validate an (H, W, 3) array and return it as float32 clamped to [0, 1]."""
    img = np.asarray(a, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return np.clip(img, 0.0, 1.0)


def image_size(img: np.ndarray) -> tuple[int, int]:
    """(width, height) of an image array."""
    return img.shape[1], img.shape[0]


# -- overlap ---------------------------------------------------------------

def iou_detailed(a: BBox, b: BBox) -> tuple[float, bool]:
    """IoU plus a flag telling whether either input box was degenerate."""
    if not (a.valid and b.valid):
        return 0.0, True
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0, False
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union), False


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint or degenerate."""
    return iou_detailed(a, b)[0]


# -- translation -----------------------------------------------------------

def invert(t: Translation) -> Translation:
    return Translation(-t.dx, -t.dy)


def compose(first: Translation, second: Translation) -> Translation:
    return Translation(first.dx + second.dx, first.dy + second.dy)


def apply_translation(obj: T, t: Translation) -> T:
    if isinstance(obj, BBox):
        return BBox(obj.x1 + t.dx, obj.y1 + t.dy, obj.x2 + t.dx, obj.y2 + t.dy)
    return Point(obj[0] + t.dx, obj[1] + t.dy)


def _fill_array(fill, dtype=np.float32) -> np.ndarray:
    f = np.asarray(fill if fill is not None else (0.0, 0.0, 0.0), dtype=dtype)
    if f.shape == ():
        f = np.repeat(f, 3)
    return f


def translate_image(img: np.ndarray, t: Translation, fill) -> np.ndarray:
    """Shift content by (dx, dy) whole pixels; uncovered pixels take ``fill``."""
    h, w = img.shape[:2]
    out = np.empty_like(img)
    out[...] = _fill_array(fill, img.dtype)
    dx, dy = int(t.dx), int(t.dy)
    src_x0, src_x1 = max(0, -dx), min(w, w - dx)
    src_y0, src_y1 = max(0, -dy), min(h, h - dy)
    if src_x0 < src_x1 and src_y0 < src_y1:
        out[src_y0 + dy:src_y1 + dy, src_x0 + dx:src_x1 + dx] = img[src_y0:src_y1, src_x0:src_x1]
    return out


def centering_translation(width: int, height: int, box: BBox) -> Translation:
    """Integer shift moving the box center to the image center (half-up rounding)."""
    cx, cy = box.center
    return Translation(math.floor(width / 2 - cx + 0.5), math.floor(height / 2 - cy + 0.5))


def centralize(img: np.ndarray, box: BBox, fill) -> tuple[np.ndarray, Translation]:
    """Translate ``img`` so ``box`` sits at the image center, padding with ``fill``.

    The output keeps the input dimensions. Apply the returned translation to
    map coordinates into the centralized frame and its inverse to map back.
    """
    w, h = image_size(img)
    t = centering_translation(w, h, box)
    return translate_image(img, t, fill), t


# -- resampling ------------------------------------------------------------

def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill=None) -> np.ndarray:
    """Bilinearly sample ``img`` at continuous coordinates (``xs``, ``ys``).

    Neighbour addressing is edge-clamped. With ``fill`` given, samples whose
    location falls outside the image rectangle take the fill color instead.
    """
    h, w = img.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = (u - x0).astype(np.float32)[..., None]
    fy = (v - y0).astype(np.float32)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    ya, yb = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    a, b = img[ya, xa], img[ya, xb]
    c, d = img[yb, xa], img[yb, xb]
    # lerp form keeps constant regions exactly constant
    top = a + fx * (b - a)
    bottom = c + fx * (d - c)
    out = (top + fy * (bottom - top)).astype(np.float32)
    if fill is not None:
        outside = (xs < 0) | (xs >= w) | (ys < 0) | (ys >= h)
        out[outside] = _fill_array(fill)
    return out


def resize_image(img: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, tuple[float, float]]:
    """Anisotropic bilinear resize to ``size`` = (w, h); returns the image and (sx, sy)."""
    w_out, h_out = int(size[0]), int(size[1])
    if w_out < 1 or h_out < 1:
        raise ValueError(f"resize target {size} must be at least 1x1")
    w, h = image_size(img)
    sx, sy = w_out / w, h_out / h
    if (w_out, h_out) == (w, h):
        return img.copy(), (1.0, 1.0)
    xs = (np.arange(w_out) + 0.5) / sx
    ys = (np.arange(h_out) + 0.5) / sy
    return sample_bilinear(img, xs[None, :], ys[:, None]), (sx, sy)


@dataclass(frozen=True)
class PatchTransform:
    """Axis-aligned map between a frame region and a resampled patch."""

    source_box: BBox
    target_size: tuple[int, int]

    @property
    def scale(self) -> tuple[float, float]:
        b = self.source_box
        return self.target_size[0] / (b.x2 - b.x1), self.target_size[1] / (b.y2 - b.y1)

    def to_patch(self, p: Sequence[float]) -> Point:
        sx, sy = self.scale
        return Point((p[0] - self.source_box.x1) * sx, (p[1] - self.source_box.y1) * sy)

    def to_frame(self, p: Sequence[float]) -> Point:
        sx, sy = self.scale
        return Point(self.source_box.x1 + p[0] / sx, self.source_box.y1 + p[1] / sy)


def crop_resize(img: np.ndarray, box: BBox, size: tuple[int, int],
                fill=None) -> tuple[np.ndarray, PatchTransform]:
    """Resample the region ``box`` into a patch of ``size`` = (w, h).

    Parts of the box outside the image take ``fill`` (edge-clamped when None).
    """
    if not box.valid:
        raise ValueError(f"degenerate crop: {box}")
    pt = PatchTransform(BBox(*map(float, box)), (int(size[0]), int(size[1])))
    sx, sy = pt.scale
    xs = box.x1 + (np.arange(pt.target_size[0]) + 0.5) / sx
    ys = box.y1 + (np.arange(pt.target_size[1]) + 0.5) / sy
    patch = sample_bilinear(img, xs[None, :], ys[:, None], fill)
    return patch, pt


def similarity_matrix(scale: float, degrees: float, center: Sequence[float]) -> np.ndarray:
    """2x3 map p -> c + s * R(theta) (p - c); positive angles turn clockwise on screen."""
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    r = scale * np.array([[c, -s], [s, c]])
    cx, cy = center
    offset = np.array([cx, cy]) - r @ np.array([cx, cy])
    return np.hstack([r, offset[:, None]])


def invert_affine(m: np.ndarray) -> np.ndarray:
    a = m[:, :2]
    inv = np.linalg.inv(a)
    return np.hstack([inv, (-inv @ m[:, 2])[:, None]])


def apply_affine(m: np.ndarray, p: Sequence[float]) -> Point:
    x, y = p
    return Point(m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2])


def warp_affine(img: np.ndarray, m: np.ndarray, fill=None) -> np.ndarray:
    """Warp so that output content at m(p) equals input content at p; same size."""
    w, h = image_size(img)
    inv = invert_affine(m)
    gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    sx = inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]
    sy = inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]
    return sample_bilinear(img, sx, sy, fill)
