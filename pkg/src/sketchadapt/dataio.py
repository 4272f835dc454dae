"""Dataset containers and newline-delimited dataset files.

File layout: one JSON record per line. The first line is a header record
(kind = "header") carrying the category split, canvas settings, and style
partition; every following line is one sketch/photo pair with fields
{category_id, style_id, strokes, stroke5, photo_png}. ``strokes`` holds the
polylines as [[xs], [ys]] lists, ``stroke5`` the normalized five-element
rows actually consumed by the models, and ``photo_png`` a base64 PNG.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from sketchadapt.errors import ParseError
from sketchadapt.strokes import RasterImage, VectorSketch, rasterize, to_stroke5

FORMAT_VERSION = 1


@dataclass(frozen=True)
class CategorySplit:
    meta_train: tuple[int, ...]
    meta_test: tuple[int, ...]
    unseen_test: tuple[int, ...]

    def __post_init__(self):
        sets = [set(self.meta_train), set(self.meta_test), set(self.unseen_test)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ValueError("split category sets must be pairwise disjoint")

    @property
    def all_categories(self) -> tuple[int, ...]:
        return tuple(self.meta_train) + tuple(self.meta_test) + tuple(self.unseen_test)


@dataclass(frozen=True)
class SketchPhotoPair:
    sketch_vec: VectorSketch
    sketch_raster: RasterImage
    photo: RasterImage
    category_id: int

    def __post_init__(self):
        if self.sketch_vec.category_id != self.category_id:
            raise ValueError("sketch and pair category_id disagree")

    @property
    def style_id(self) -> int:
        return self.sketch_vec.style_id


@dataclass
class SketchDataset:
    pairs: list[SketchPhotoPair]
    split: CategorySplit
    category_names: tuple[str, ...]
    canvas: int
    t_max: int
    line_width: int
    seen_styles: tuple[int, ...] = ()
    unseen_styles: tuple[int, ...] = ()
    by_category: dict[int, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        known = set(self.split.all_categories)
        self.by_category = {}
        for i, p in enumerate(self.pairs):
            if p.category_id not in known:
                raise ValueError(f"pair {i} category {p.category_id} not in any split set")
            self.by_category.setdefault(p.category_id, []).append(i)

    def __eq__(self, other):
        if not isinstance(other, SketchDataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.category_names == other.category_names
            and (self.canvas, self.t_max, self.line_width) == (other.canvas, other.t_max, other.line_width)
            and self.seen_styles == other.seen_styles
            and self.unseen_styles == other.unseen_styles
            and self.pairs == other.pairs
        )

    def pairs_of(self, category_id: int) -> list[SketchPhotoPair]:
        return [self.pairs[i] for i in self.by_category.get(category_id, [])]


def _strokes_from_stroke5(points: np.ndarray) -> list:
    """Split stroke-5 rows back into [[xs], [ys]] polylines."""
    polys, cur = [], []
    for row in points:
        cur.append((float(row[0]), float(row[1])))
        if row[3] == 1.0 or row[4] == 1.0:  # pen up or end of drawing
            polys.append([[p[0] for p in cur], [p[1] for p in cur]])
            cur = []
    if cur:
        polys.append([[p[0] for p in cur], [p[1] for p in cur]])
    return polys


def _encode_photo(photo: RasterImage) -> str:
    arr = np.round(photo.pixels * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_photo(payload: str) -> RasterImage:
    raw = base64.b64decode(payload.encode("ascii"))
    arr = np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"), dtype=np.float32) / 255.0
    return RasterImage(arr, kind="photo")


def save_dataset(dataset: SketchDataset, path) -> None:
    header = {
        "kind": "header",
        "format_version": FORMAT_VERSION,
        "canvas": dataset.canvas,
        "t_max": dataset.t_max,
        "line_width": dataset.line_width,
        "category_names": list(dataset.category_names),
        "split": {
            "meta_train": list(dataset.split.meta_train),
            "meta_test": list(dataset.split.meta_test),
            "unseen_test": list(dataset.split.unseen_test),
        },
        "seen_styles": list(dataset.seen_styles),
        "unseen_styles": list(dataset.unseen_styles),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for p in dataset.pairs:
            rec = {
                "category_id": p.category_id,
                "style_id": p.style_id,
                "strokes": _strokes_from_stroke5(p.sketch_vec.points),
                "stroke5": [[float(v) for v in row] for row in p.sketch_vec.points],
                "photo_png": _encode_photo(p.photo),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> SketchDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        return SketchDataset(
            pairs=[],
            split=CategorySplit((), (), ()),
            category_names=(),
            canvas=64,
            t_max=32,
            line_width=1,
        )

    def parse_line(n, raw):
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=n) from exc

    header = parse_line(1, lines[0])
    if header.get("kind") != "header":
        raise ParseError("first record must be the header", line=1)
    try:
        split = CategorySplit(
            tuple(header["split"]["meta_train"]),
            tuple(header["split"]["meta_test"]),
            tuple(header["split"]["unseen_test"]),
        )
        canvas = int(header["canvas"])
        t_max = int(header["t_max"])
        line_width = int(header["line_width"])
        names = tuple(header["category_names"])
        seen_styles = tuple(header.get("seen_styles", ()))
        unseen_styles = tuple(header.get("unseen_styles", ()))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header: {exc!r}", line=1) from exc

    pairs = []
    for n, raw in enumerate(lines[1:], start=2):
        rec = parse_line(n, raw)
        try:
            category_id = int(rec["category_id"])
            style_id = int(rec["style_id"])
            if "stroke5" in rec:
                pts = np.asarray(rec["stroke5"], dtype=np.float64)
                vec = VectorSketch(pts, category_id=category_id, style_id=style_id)
            else:
                polys = [np.column_stack([xs, ys]) for xs, ys in rec["strokes"]]
                vec = to_stroke5(polys, t_max=t_max, category_id=category_id, style_id=style_id)
            photo = _decode_photo(rec["photo_png"])
        except ParseError:
            raise
        except Exception as exc:
            raise ParseError(str(exc), line=n) from exc
        if photo.pixels.shape[:2] != (canvas, canvas):
            raise ParseError(
                f"photo is {photo.pixels.shape[:2]}, header canvas is {canvas}", line=n
            )
        raster = rasterize(vec, canvas, canvas, line_width=line_width)
        pairs.append(SketchPhotoPair(vec, raster, photo, category_id))

    return SketchDataset(
        pairs=pairs,
        split=split,
        category_names=names,
        canvas=canvas,
        t_max=t_max,
        line_width=line_width,
        seen_styles=seen_styles,
        unseen_styles=unseen_styles,
    )
