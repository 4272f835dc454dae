"""Vector sketches in stroke-5 form, rasterization, and photo edgemaps.

A sketch is a (T, 5) float array of rows (x, y, q1, q2, q3): absolute
coordinates in the unit canvas plus a one-hot pen state. q1 = pen down
(a segment is drawn to the next point), q2 = pen up (end of a polyline),
q3 = end of drawing (final row only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from sketchadapt.errors import InvalidSketch, ShapeError

CANVAS_MARGIN = 0.05  # fraction of the unit canvas kept clear on each side

# 3x3 orthogonal gradient (Sobel) kernels for the edgemap operator
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class VectorSketch:
    """Ordered stroke-5 points with optional category/style labels."""

    points: np.ndarray  # (T, 5) float64
    category_id: int = -1
    style_id: int = -1

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        validate_stroke5(pts)

    @property
    def T(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, VectorSketch):
            return NotImplemented
        return (
            self.category_id == other.category_id
            and self.style_id == other.style_id
            and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True)
class RasterImage:
    """H x W x 3 image with values in [0, 1]."""

    pixels: np.ndarray
    kind: str  # sketch | photo | edgemap

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"expected HxWx3 pixels, got shape {px.shape}")
        if self.kind not in ("sketch", "photo", "edgemap"):
            raise ValueError(f"unknown raster kind {self.kind!r}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.pixels, other.pixels)


def validate_stroke5(points: np.ndarray) -> None:
    """Enforce the stroke-5 invariants; raise InvalidSketch otherwise."""
    if points.ndim != 2 or points.shape[1] != 5:
        raise InvalidSketch(f"expected (T, 5) points, got shape {points.shape}")
    if points.shape[0] == 0:
        raise InvalidSketch("empty point sequence")
    if not np.all(np.isfinite(points)):
        raise InvalidSketch("non-finite coordinates")
    xy = points[:, :2]
    if xy.min() < 0.0 or xy.max() > 1.0:
        raise InvalidSketch("coordinates outside the unit canvas")
    pen = points[:, 2:]
    if not np.array_equal(pen, pen.astype(bool).astype(np.float64)):
        raise InvalidSketch("pen-state bits must be 0 or 1")
    if not np.all(pen.sum(axis=1) == 1.0):
        raise InvalidSketch("pen state must be one-hot at every step")
    q3 = pen[:, 2]
    if q3[-1] != 1.0 or q3[:-1].any():
        raise InvalidSketch("q3 must be set exactly once, at the final point")


def to_stroke5(polylines, t_max: int, category_id: int = -1, style_id: int = -1) -> VectorSketch:
    """Convert source-coordinate polylines to a normalized stroke-5 sketch.

    Coordinates are min-max scaled into the unit canvas with a 5% margin,
    aspect ratio preserved and the drawing centered. Pen state is q1 within
    a polyline, q2 at each polyline's last point, q3 at the global last
    point. Sequences longer than ``t_max`` are shortened by dropping whole
    strokes (shortest first, preferring trailing ones) while that keeps at
    least ``t_max`` points, then trimming the final stroke.
    """
    strokes = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polylines]
    strokes = [s for s in strokes if s.shape[0] > 0]
    if not strokes:
        raise InvalidSketch("no strokes")
    if t_max < 1:
        raise InvalidSketch(f"t_max must be >= 1, got {t_max}")
    strokes = normalize_polylines(strokes)

    total = sum(s.shape[0] for s in strokes)
    while total > t_max and len(strokes) > 1:
        lengths = [s.shape[0] for s in strokes]
        # shortest stroke, later ones first, but never undershoot t_max
        order = sorted(range(len(strokes)), key=lambda i: (lengths[i], -i))
        victim = next((i for i in order if total - lengths[i] >= t_max), None)
        if victim is None:
            break
        del strokes[victim]
        total -= lengths[victim]
    if total > t_max:
        # trim points off the tail until exactly t_max remain
        excess = total - t_max
        while excess > 0:
            take = min(excess, strokes[-1].shape[0])
            if take == strokes[-1].shape[0] and len(strokes) > 1:
                strokes.pop()
            else:
                strokes[-1] = strokes[-1][: strokes[-1].shape[0] - take]
            excess -= take

    rows = []
    for s in strokes:
        pen = np.zeros((s.shape[0], 3))
        pen[:-1, 0] = 1.0  # pen down within the polyline
        pen[-1, 1] = 1.0  # pen up at the polyline end
        rows.append(np.concatenate([s, pen], axis=1))
    pts = np.concatenate(rows, axis=0)
    pts[-1, 2:] = (0.0, 0.0, 1.0)  # global end of drawing
    return VectorSketch(pts, category_id=category_id, style_id=style_id)


def normalize_polylines(strokes: list[np.ndarray]) -> list[np.ndarray]:
    """Min-max scale polylines into the margined unit canvas.

    Aspect ratio is preserved and the drawing is centered; the same rule
    places both sketches and the synthetic photo shapes so that an
    unperturbed sketch lands exactly on its photo's outline.
    """
    allpts = np.concatenate(strokes, axis=0)
    if not np.all(np.isfinite(allpts)):
        raise InvalidSketch("non-finite coordinates")
    lo = allpts.min(axis=0)
    extent = allpts.max(axis=0) - lo
    span = extent.max()
    if span <= 0.0:
        raise InvalidSketch("zero-extent sketch (all points identical)")
    usable = 1.0 - 2.0 * CANVAS_MARGIN
    scale = usable / span
    if not np.isfinite(scale):
        raise InvalidSketch("sketch extent too small to normalize")
    offset = CANVAS_MARGIN + (usable - scale * extent) / 2.0
    return [offset + (s - lo) * scale for s in strokes]


def _to_pixel(v: float, size: int) -> int:
    return min(int(np.floor(v * size)), size - 1)


def _stamp(img: np.ndarray, r: int, c: int, line_width: int) -> None:
    h, w = img.shape[:2]
    lo = -((line_width - 1) // 2)
    hi = line_width // 2
    r0, r1 = max(0, r + lo), min(h, r + hi + 1)
    c0, c1 = max(0, c + lo), min(w, c + hi + 1)
    img[r0:r1, c0:c1] = 0.0


def _draw_segment(img: np.ndarray, p0, p1, line_width: int) -> None:
    """Bresenham line between two pixel coordinates, stamped at line_width."""
    r0, c0 = p0
    r1, c1 = p1
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    while True:
        _stamp(img, r0, c0, line_width)
        if r0 == r1 and c0 == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c0 += sc
        if e2 < dc:
            err += dc
            r0 += sr
    _stamp(img, r1, c1, line_width)


def rasterize(sk: VectorSketch, h: int, w: int, line_width: int = 1) -> RasterImage:
    """Draw a stroke-5 sketch onto a white H x W canvas with black strokes.

    Consecutive pen-down points are joined by line segments; pen-up
    transitions draw nothing. Deterministic integer line drawing, no
    anti-aliasing.
    """
    if h < 16 or w < 16:
        raise ShapeError(f"canvas must be at least 16x16, got {h}x{w}")
    if line_width < 1:
        raise ValueError("line_width must be >= 1")
    img = np.ones((h, w), dtype=np.float32)
    pts = sk.points
    pix = [( _to_pixel(p[1], h), _to_pixel(p[0], w)) for p in pts]
    for t in range(sk.T):
        _stamp(img, *pix[t], line_width)
        if pts[t, 2] == 1.0 and t + 1 < sk.T:
            _draw_segment(img, pix[t], pix[t + 1], line_width)
    return RasterImage(np.repeat(img[:, :, None], 3, axis=2), kind="sketch")


def edgemap(photo: RasterImage) -> RasterImage:
    """Gradient-magnitude edgemap of a photo, max-normalized to [0, 1].

    The photo is grey-scaled with luminance weights, convolved with 3x3
    horizontal and vertical gradient filters under replicate padding, and
    the magnitude map is divided by its maximum (all-zero output for a
    constant input). The single channel is replicated to 3.
    """
    if photo.kind != "photo":
        raise ValueError(f"edgemap expects a photo, got kind {photo.kind!r}")
    grey = photo.pixels.astype(np.float64) @ _LUMA
    gx = ndimage.convolve(grey, _SOBEL_X, mode="nearest")
    gy = ndimage.convolve(grey, _SOBEL_Y, mode="nearest")
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0.0:
        mag /= peak
    return RasterImage(np.repeat(mag[:, :, None].astype(np.float32), 3, axis=2), kind="edgemap")
