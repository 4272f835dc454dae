"""Synthetic sketch/photo pairs from a small shape grammar.

Each pair starts from a per-instance outline (randomized shape parameters).
The photo renders that outline anti-aliased -- closed strokes filled with a
random shade, open strokes drawn as thick lines -- over a smooth random
background texture. The sketch applies a style to the same outline:
coordinate jitter, corner rounding, stroke-order shuffling, and stroke
dropping. Styles are partitioned into seen and held-out sets so test
queries can come from styles never seen in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from sketchadapt.dataio import CategorySplit, SketchDataset, SketchPhotoPair
from sketchadapt.errors import ConfigError
from sketchadapt.strokes import RasterImage, normalize_polylines, rasterize, to_stroke5

SHAPE_NAMES = (
    "circle",
    "square",
    "triangle",
    "star",
    "cross",
    "arrow",
    "spiral",
    "zigzag",
    "house",
    "flower",
)

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SynthConfig:
    categories: tuple[str, ...] = SHAPE_NAMES
    samples_per_category: int = 40
    n_unseen_categories: int = 4
    n_meta_test_categories: int = 0
    n_seen_styles: int = 6
    n_unseen_styles: int = 3
    canvas: int = 64
    t_max: int = 32
    line_width: int = 1
    jitter: float = 1.0  # scales per-style coordinate noise and corner rounding
    drop: float = 1.0  # scales per-style stroke-drop probability
    unseen_style_scale: float = 1.0  # extra severity for held-out styles only
    unseen_photo_shift: float = 0.0  # photo-appearance shift for unseen categories

    def validate(self) -> None:
        unknown = [c for c in self.categories if c not in SHAPE_NAMES]
        if unknown:
            raise ConfigError(f"unknown shape categories: {unknown}")
        if len(set(self.categories)) != len(self.categories):
            raise ConfigError("duplicate categories")
        if len(self.categories) < 6:
            raise ConfigError(f"need at least 6 categories, got {len(self.categories)}")
        reserved = self.n_unseen_categories + self.n_meta_test_categories
        if self.n_unseen_categories < 1 or reserved >= len(self.categories):
            raise ConfigError(
                f"cannot split {len(self.categories)} categories into "
                f"{self.n_unseen_categories} unseen + {self.n_meta_test_categories} meta-test "
                "with at least one meta-train category left"
            )
        if self.samples_per_category < 1:
            raise ConfigError("samples_per_category must be >= 1")
        if self.n_seen_styles < 1 or self.n_unseen_styles < 1:
            raise ConfigError("need at least one seen and one held-out style")
        if self.canvas < 16 or self.canvas % 16:
            raise ConfigError("canvas must be >= 16 and divisible by 16")
        if self.t_max < 4:
            raise ConfigError("t_max must be >= 4")


@dataclass(frozen=True)
class StyleParams:
    jitter: float
    round_iters: int
    shuffle: bool
    drop_p: float


# ------------------------------------------------------------ shape grammar
# Each builder returns a list of (points (N,2), closed) outlines in a unit
# source box; instance-level randomness makes every pair a distinct shape.


def _ellipse(cx, cy, rx, ry, n, phase=0.0):
    th = phase + np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([cx + rx * np.cos(th), cy + ry * np.sin(th)])


def _shape_circle(rng):
    squash = rng.uniform(0.75, 1.0)
    return [(_ellipse(0.5, 0.5, 0.45, 0.45 * squash, 16), True)]


def _shape_square(rng):
    hy = 0.45 * rng.uniform(0.7, 1.0)
    pts = np.array([[0.05, 0.5 - hy], [0.95, 0.5 - hy], [0.95, 0.5 + hy], [0.05, 0.5 + hy]])
    return [(pts, True)]


def _shape_triangle(rng):
    apex = 0.5 + rng.uniform(-0.18, 0.18)
    return [(np.array([[apex, 0.05], [0.95, 0.95], [0.05, 0.95]]), True)]


def _shape_star(rng):
    inner = 0.45 * rng.uniform(0.35, 0.55)
    th = -np.pi / 2 + np.linspace(0.0, 2 * np.pi, 10, endpoint=False)
    r = np.where(np.arange(10) % 2 == 0, 0.45, inner)
    return [(np.column_stack([0.5 + r * np.cos(th), 0.5 + r * np.sin(th)]), True)]


def _shape_cross(rng):
    w = rng.uniform(0.12, 0.2)
    a, b = 0.5 - w, 0.5 + w
    pts = np.array(
        [
            [a, 0.05], [b, 0.05], [b, a], [0.95, a], [0.95, b], [b, b],
            [b, 0.95], [a, 0.95], [a, b], [0.05, b], [0.05, a], [a, a],
        ]
    )
    return [(pts, True)]


def _shape_arrow(rng):
    head = rng.uniform(0.3, 0.45)
    half = rng.uniform(0.1, 0.18)
    x0 = 1.0 - head
    pts = np.array(
        [
            [0.05, 0.5 - half], [x0, 0.5 - half], [x0, 0.1], [0.95, 0.5],
            [x0, 0.9], [x0, 0.5 + half], [0.05, 0.5 + half],
        ]
    )
    return [(pts, True)]


def _shape_spiral(rng):
    turns = rng.uniform(2.0, 3.0)
    th = np.linspace(0.0, turns * 2 * np.pi, 28)
    r = 0.45 * th / th[-1]
    return [(np.column_stack([0.5 + r * np.cos(th), 0.5 + r * np.sin(th)]), False)]


def _shape_zigzag(rng):
    n = int(rng.integers(5, 9))
    xs = np.linspace(0.05, 0.95, n)
    ys = np.where(np.arange(n) % 2 == 0, 0.15, 0.85) + rng.uniform(-0.05, 0.05, size=n)
    return [(np.column_stack([xs, ys]), False)]


def _shape_house(rng):
    roof = rng.uniform(0.3, 0.45)
    body = np.array(
        [[0.05, 0.95], [0.05, roof], [0.5, 0.05], [0.95, roof], [0.95, 0.95]]
    )
    door = np.array([[0.4, 0.95], [0.4, 0.68], [0.6, 0.68], [0.6, 0.95]])
    return [(body, True), (door, False)]


def _shape_flower(rng):
    core_r = rng.uniform(0.1, 0.16)
    parts = [(_ellipse(0.5, 0.5, core_r, core_r, 8), True)]
    n_petals = int(rng.integers(5, 7))
    for k in range(n_petals):
        ang = 2 * np.pi * k / n_petals
        cx = 0.5 + (core_r + 0.16) * np.cos(ang)
        cy = 0.5 + (core_r + 0.16) * np.sin(ang)
        petal = _ellipse(cx, cy, 0.15, 0.09, 4, phase=ang)
        c, s = np.cos(ang), np.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        petal = (petal - [cx, cy]) @ rot.T + [cx, cy]
        parts.append((petal, True))
    return parts


_BUILDERS = {
    "circle": _shape_circle,
    "square": _shape_square,
    "triangle": _shape_triangle,
    "star": _shape_star,
    "cross": _shape_cross,
    "arrow": _shape_arrow,
    "spiral": _shape_spiral,
    "zigzag": _shape_zigzag,
    "house": _shape_house,
    "flower": _shape_flower,
}


# ----------------------------------------------------------------- styling


def _chaikin_round(pts: np.ndarray, closed: bool) -> np.ndarray:
    """One corner-cutting pass, decimated back to roughly the input size."""
    if pts.shape[0] < 4:
        return pts
    if closed:
        nxt = np.roll(pts, -1, axis=0)
        out = np.empty((2 * pts.shape[0], 2))
        out[0::2] = 0.75 * pts + 0.25 * nxt
        out[1::2] = 0.25 * pts + 0.75 * nxt
        return out[::2]
    a, b = pts[:-1], pts[1:]
    mid = np.empty((2 * (pts.shape[0] - 1), 2))
    mid[0::2] = 0.75 * a + 0.25 * b
    mid[1::2] = 0.25 * a + 0.75 * b
    out = np.vstack([pts[:1], mid, pts[-1:]])
    keep = out[::2]
    if not np.array_equal(keep[-1], pts[-1]):
        keep = np.vstack([keep, pts[-1:]])
    return keep


def _apply_style(parts, style: StyleParams, rng, jitter_mult: float, drop_mult: float):
    """Perturb instance outlines into a styled sketch (list of open polylines)."""
    styled = []
    rounding = int(round(style.round_iters * min(jitter_mult, 1.0))) if jitter_mult > 0 else 0
    for pts, closed in parts:
        p = pts
        for _ in range(rounding):
            p = _chaikin_round(p, closed)
        sigma = style.jitter * jitter_mult
        if sigma > 0:
            p = p + rng.normal(0.0, sigma, size=p.shape)
        if closed:
            p = np.vstack([p, p[:1]])
        styled.append(p)

    drop_p = style.drop_p * drop_mult
    if drop_p > 0 and len(styled) > 1:
        keep = [s for s in styled if rng.random() >= drop_p]
        styled = keep if keep else [styled[int(rng.integers(len(styled)))]]
    if style.shuffle and len(styled) > 1:
        styled = [styled[i] for i in rng.permutation(len(styled))]
    return styled


def _make_styles(rng, n_seen: int, n_unseen: int, unseen_scale: float = 1.0) -> list[StyleParams]:
    styles = []
    for _ in range(n_seen):
        styles.append(
            StyleParams(
                jitter=float(rng.uniform(0.003, 0.015)),
                round_iters=int(rng.integers(0, 2)),
                shuffle=bool(rng.random() < 0.5),
                drop_p=float(rng.uniform(0.0, 0.08)),
            )
        )
    for _ in range(n_unseen):
        styles.append(
            StyleParams(
                jitter=float(rng.uniform(0.02, 0.045)) * unseen_scale,
                round_iters=int(rng.integers(1, 3)),
                shuffle=True,
                drop_p=min(float(rng.uniform(0.1, 0.3)) * unseen_scale, 0.5),
            )
        )
    return styles


# ------------------------------------------------------------------ photos


def _render_photo(parts_norm, canvas: int, rng, shift: float = 0.0) -> RasterImage:
    """Anti-aliased filled shape over a smooth background texture.

    ``shift`` > 0 moves the photo appearance away from the training
    distribution (darker, noisier, coarser background; lighter fill),
    modelling a test-gallery domain gap.
    """
    s = _SUPERSAMPLE
    big = canvas * s

    def _mask(selected):
        im = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(im)
        for pts, closed in selected:
            pix = [(float(x) * big, float(y) * big) for x, y in pts]
            if closed and len(pix) >= 3:
                draw.polygon(pix, fill=255)
            else:
                draw.line(pix, fill=255, width=2 * s)
        arr = np.asarray(im, dtype=np.float64) / 255.0
        return arr.reshape(canvas, s, canvas, s).mean(axis=(1, 3))

    fill_mask = _mask([p for p in parts_norm if p[1]])
    line_mask = _mask([p for p in parts_norm if not p[1]])

    noise = rng.normal(size=(canvas, canvas))
    noise = ndimage.gaussian_filter(noise, sigma=canvas / (10.0 + 8.0 * shift), mode="reflect")
    spread = noise.max() - noise.min()
    if spread > 0:
        noise = (noise - noise.min()) / spread - 0.5
    base = rng.uniform(0.65, 0.9) - 0.2 * shift
    bg = np.clip(base + noise * rng.uniform(0.1, 0.3) * (1.0 + shift), 0.0, 1.0)

    fill = rng.uniform(0.08, 0.45) + 0.12 * shift
    # open strokes inside a filled region must stay visible
    line = fill if not any(p[1] for p in parts_norm) else (fill + 0.35 if fill < 0.4 else fill - 0.3)
    tint_bg = rng.uniform(0.93, 1.0, size=3)
    tint_fill = rng.uniform(0.85, 1.0, size=3)
    img = (
        bg[:, :, None] * tint_bg[None, None, :] * (1.0 - fill_mask[:, :, None])
        + fill * tint_fill[None, None, :] * fill_mask[:, :, None]
    )
    img = img * (1.0 - line_mask[:, :, None]) + line * tint_fill[None, None, :] * line_mask[:, :, None]
    img = np.clip(img, 0.0, 1.0)
    # quantize so the PNG round-trip in dataio is exact
    img = np.round(img * 255.0) / 255.0
    return RasterImage(img.astype(np.float32), kind="photo")


# --------------------------------------------------------------- generation


def synth_generate(cfg: SynthConfig, seed: int) -> SketchDataset:
    """Build a deterministic dataset of sketch/photo pairs with a split."""
    cfg.validate()
    rng = np.random.default_rng(seed)

    n_cat = len(cfg.categories)
    perm = rng.permutation(n_cat)
    unseen = tuple(sorted(int(c) for c in perm[: cfg.n_unseen_categories]))
    mt_end = cfg.n_unseen_categories + cfg.n_meta_test_categories
    meta_test = tuple(sorted(int(c) for c in perm[cfg.n_unseen_categories : mt_end]))
    meta_train = tuple(sorted(int(c) for c in perm[mt_end:]))
    split = CategorySplit(meta_train, meta_test, unseen)

    styles = _make_styles(rng, cfg.n_seen_styles, cfg.n_unseen_styles, cfg.unseen_style_scale)
    seen_styles = tuple(range(cfg.n_seen_styles))
    unseen_styles = tuple(range(cfg.n_seen_styles, cfg.n_seen_styles + cfg.n_unseen_styles))

    pairs = []
    for cat_id, name in enumerate(cfg.categories):
        builder = _BUILDERS[name]
        is_unseen = cat_id in unseen
        style_pool = unseen_styles if is_unseen else seen_styles
        photo_shift = cfg.unseen_photo_shift if is_unseen else 0.0
        for _ in range(cfg.samples_per_category):
            parts = builder(rng)
            parts_norm = [
                (p, closed)
                for p, closed in zip(
                    normalize_polylines([p for p, _ in parts]), (c for _, c in parts)
                )
            ]
            photo = _render_photo(parts_norm, cfg.canvas, rng, shift=photo_shift)

            style_id = int(style_pool[int(rng.integers(len(style_pool)))])
            sketch_polys = _apply_style(parts, styles[style_id], rng, cfg.jitter, cfg.drop)
            vec = to_stroke5(sketch_polys, cfg.t_max, category_id=cat_id, style_id=style_id)
            raster = rasterize(vec, cfg.canvas, cfg.canvas, line_width=cfg.line_width)
            pairs.append(SketchPhotoPair(vec, raster, photo, cat_id))

    return SketchDataset(
        pairs=pairs,
        split=split,
        category_names=tuple(cfg.categories),
        canvas=cfg.canvas,
        t_max=cfg.t_max,
        line_width=cfg.line_width,
        seen_styles=seen_styles,
        unseen_styles=unseen_styles,
    )
