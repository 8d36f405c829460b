"""COCO-format ingestion, the shorter-side resize rule, and CSV / SVG / JSON export."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .config import ResizeSpec
from .geometry import Box, LabeledBox
from .inference import Detection

logger = logging.getLogger(__name__)


class ParseError(ValueError):
    """Malformed annotation or results file; the message names the offending record."""


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    width: int
    height: int
    file_name: str = ""


@dataclass
class Dataset:
    images: list[ImageInfo]
    annotations: dict[int, list[LabeledBox]]
    categories: dict[int, str]
    annotation_ids: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {im.image_id: im for im in self.images}

    def image(self, image_id: int) -> ImageInfo:
        return self._by_id[image_id]

    def gts(self, image_id: int) -> list[LabeledBox]:
        return self.annotations.get(image_id, [])

    @property
    def n_annotations(self) -> int:
        return sum(len(v) for v in self.annotations.values())

    def scenes(self, resize: Optional[ResizeSpec] = None) -> Iterator[tuple[tuple[int, int], list[LabeledBox]]]:
        """``((width, height), gts)`` per image, rescaled when ``resize`` is given."""
        for im in self.images:
            gts = self.gts(im.image_id)
            if resize is None:
                yield (im.width, im.height), gts
                continue
            nw, nh, scale = resize_dims(im.width, im.height, resize)
            scaled = [
                LabeledBox(g.box.scaled(scale), g.class_id, g.annotation_index, g.is_crowd)
                for g in gts
            ]
            yield (nw, nh), scaled

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images == other.images
            and self.categories == other.categories
            and {k: v for k, v in self.annotations.items() if v}
            == {k: v for k, v in other.annotations.items() if v}
        )


def resize_dims(width: int, height: int, spec: ResizeSpec = ResizeSpec()) -> tuple[int, int, float]:
    """Scale so the shorter side hits ``shorter_target`` unless the longer side would exceed the cap."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    scale = min(spec.shorter_target / min(width, height), spec.longer_cap / max(width, height))
    nw = max(1, math.floor(width * scale + 0.5))
    nh = max(1, math.floor(height * scale + 0.5))
    return nw, nh, scale


def _read_json(path):
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def _require(record: dict, keys: Sequence[str], what: str):
    if not isinstance(record, dict):
        raise ParseError(f"{what}: expected an object, got {type(record).__name__}")
    missing = [k for k in keys if k not in record]
    if missing:
        raise ParseError(f"{what}: missing key(s) {missing}")


def parse_annotations(data: dict, source: str = "<memory>") -> Dataset:
    if not isinstance(data, dict):
        raise ParseError(f"{source}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise ParseError(f"{source}: missing top-level key {key!r}")

    images = []
    seen = set()
    for i, im in enumerate(data["images"]):
        _require(im, ("id", "width", "height"), f"image #{i}")
        if im["id"] in seen:
            raise ParseError(f"image id {im['id']}: duplicate")
        if im["width"] <= 0 or im["height"] <= 0:
            raise ParseError(f"image id {im['id']}: non-positive size")
        seen.add(im["id"])
        images.append(ImageInfo(int(im["id"]), int(im["width"]), int(im["height"]), im.get("file_name", "")))
    by_id = {im.image_id: im for im in images}

    categories = {}
    for i, cat in enumerate(data["categories"]):
        _require(cat, ("id",), f"category #{i}")
        if int(cat["id"]) < 1:
            raise ParseError(f"category id {cat['id']}: ids must be >= 1")
        categories[int(cat["id"])] = str(cat.get("name", cat["id"]))

    annotations: dict[int, list[LabeledBox]] = {im.image_id: [] for im in images}
    ann_ids: dict[int, list[int]] = {im.image_id: [] for im in images}
    n_clipped = 0
    for i, ann in enumerate(data["annotations"]):
        label = f"annotation id {ann.get('id', '#' + str(i))}" if isinstance(ann, dict) else f"annotation #{i}"
        _require(ann, ("image_id", "bbox", "category_id"), label)
        if ann["image_id"] not in by_id:
            raise ParseError(f"{label}: unknown image_id {ann['image_id']}")
        if ann["category_id"] not in categories:
            raise ParseError(f"{label}: unknown category_id {ann['category_id']}")
        bbox = ann["bbox"]
        if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
            raise ParseError(f"{label}: bbox must be [x, y, w, h]")
        try:
            x, y, w, h = (float(v) for v in bbox)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{label}: non-numeric bbox") from exc
        if not all(math.isfinite(v) for v in (x, y, w, h)) or w < 0 or h < 0:
            raise ParseError(f"{label}: invalid bbox {bbox}")
        im = by_id[ann["image_id"]]
        box = Box(x, y, x + w, y + h)
        clipped = box.clipped(im.width, im.height)
        if clipped != box:
            n_clipped += 1
            box = clipped
        gts = annotations[im.image_id]
        gts.append(LabeledBox(box, int(ann["category_id"]), len(gts), bool(ann.get("iscrowd", 0))))
        ann_ids[im.image_id].append(int(ann.get("id", i)))
    if n_clipped:
        logger.warning("%s: clipped %d out-of-bounds boxes", source, n_clipped)
    return Dataset(images, annotations, categories, ann_ids)


def load_annotations(path) -> Dataset:
    """Read a COCO object-detection annotation file."""
    return parse_annotations(_read_json(path), str(path))


def dump_annotations(ds: Dataset) -> dict:
    images = [{"id": im.image_id, "width": im.width, "height": im.height, "file_name": im.file_name}
              for im in ds.images]
    anns = []
    next_id = 1
    for im in ds.images:
        ids = ds.annotation_ids.get(im.image_id, [])
        for k, g in enumerate(ds.gts(im.image_id)):
            ann_id = ids[k] if k < len(ids) else next_id
            next_id = max(next_id, ann_id) + 1
            anns.append({
                "id": ann_id,
                "image_id": im.image_id,
                "category_id": g.class_id,
                "bbox": g.box.to_xywh(),
                "area": g.box.width * g.box.height,
                "iscrowd": int(g.is_crowd),
            })
    cats = [{"id": cid, "name": name} for cid, name in ds.categories.items()]
    return {"images": images, "annotations": anns, "categories": cats}


def save_annotations(ds: Dataset, path) -> None:
    _write_text(path, json.dumps(dump_annotations(ds), indent=1))


def parse_detections(records, source: str = "<memory>") -> dict[int, list[Detection]]:
    if not isinstance(records, list):
        raise ParseError(f"{source}: results must be a JSON array")
    out: dict[int, list[Detection]] = {}
    for i, rec in enumerate(records):
        label = f"result #{i}"
        _require(rec, ("image_id", "category_id", "bbox", "score"), label)
        score = float(rec["score"])
        if not 0.0 <= score <= 1.0:
            raise ParseError(f"{label}: score {score} outside [0, 1]")
        ctr = float(rec.get("centerness", 1.0))
        if not 0.0 <= ctr <= 1.0:
            raise ParseError(f"{label}: centerness {ctr} outside [0, 1]")
        bbox = rec["bbox"]
        if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
            raise ParseError(f"{label}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w < 0 or h < 0 or not all(math.isfinite(v) for v in (x, y, w, h)):
            raise ParseError(f"{label}: invalid bbox {bbox}")
        det = Detection(
            box=Box(x, y, x + w, y + h),
            class_id=int(rec["category_id"]),
            cls_score=score,
            centerness=ctr,
            level_index=rec.get("level"),
            grid_x=rec.get("loc_x"),
            grid_y=rec.get("loc_y"),
            image_id=rec["image_id"],
        )
        out.setdefault(rec["image_id"], []).append(det)
    return out


def load_detections(path) -> dict[int, list[Detection]]:
    """Read a COCO results file; ``score`` is the classification score, fused with ``centerness``."""
    return parse_detections(_read_json(path), str(path))


def dump_detections(dets_by_image) -> list[dict]:
    out = []
    for image_id, dets in dets_by_image.items():
        for d in dets:
            rec = {
                "image_id": image_id,
                "category_id": d.class_id,
                "bbox": d.box.to_xywh(),
                "score": d.cls_score,
                "centerness": d.centerness,
            }
            if d.has_provenance:
                rec.update(level=d.level_index, loc_x=d.grid_x, loc_y=d.grid_y)
            out.append(rec)
    return out


def save_detections(dets_by_image, path) -> None:
    _write_text(path, json.dumps(dump_detections(dets_by_image)))


def _write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def fmt(value) -> str:
    """Fixed formatting for exported numbers: 6 significant digits, ints verbatim."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6g}"
    if hasattr(value, "item"):
        return fmt(value.item())
    return str(value)


def write_csv(rows: Iterable[Sequence], header: Sequence[str], path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
_W, _H, _PAD = 480, 360, 48


def _svg_frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    x1, y1 = _W - _PAD / 2, _H - _PAD
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="#ffffff"/>',
        f'<line x1="{_PAD}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="#000000" stroke-width="1"/>',
        f'<line x1="{_PAD}" y1="{_PAD / 2}" x2="{_PAD}" y2="{y1}" stroke="#000000" stroke-width="1"/>',
    ]
    for k in range(6):
        v = k / 5
        px, py = _sx(v), _sy(v)
        parts.append(f'<text x="{px:.2f}" y="{y1 + 14}" font-family="sans-serif" font-size="10" '
                     f'text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{_PAD - 4}" y="{py + 3:.2f}" font-family="sans-serif" font-size="10" '
                     f'text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 8}" font-family="sans-serif" font-size="12" '
                 f'text-anchor="middle">{_esc(xlabel)}</text>')
    parts.append(f'<text x="12" y="{_H / 2}" font-family="sans-serif" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 12 {_H / 2})">{_esc(ylabel)}</text>')
    parts.append(f'<text x="{_W / 2}" y="16" font-family="sans-serif" font-size="13" '
                 f'text-anchor="middle">{_esc(title)}</text>')
    return parts


def _sx(v: float) -> float:
    return _PAD + min(max(v, 0.0), 1.0) * (_W - 1.5 * _PAD)


def _sy(v: float) -> float:
    return (_H - _PAD) - min(max(v, 0.0), 1.0) * (_H - 1.5 * _PAD)


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_svg(series, path, title: str = "", xlabel: str = "", ylabel: str = "",
              kind: str = "line", diagonal: bool = False) -> None:
    """Self-contained SVG on the unit square.

    ``series`` is a sequence of ``(name, xs, ys)``; ``kind`` is ``"line"`` or
    ``"scatter"``. ``diagonal`` adds the dashed ``y = x`` reference.
    """
    parts = _svg_frame(title, xlabel, ylabel)
    if diagonal:
        parts.append(f'<line x1="{_sx(0):.2f}" y1="{_sy(0):.2f}" x2="{_sx(1):.2f}" y2="{_sy(1):.2f}" '
                     f'stroke="#555555" stroke-width="1" stroke-dasharray="4 3"/>')
    for k, (name, xs, ys) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        pts = [(_sx(float(x)), _sy(float(y))) for x, y in zip(xs, ys)]
        if kind == "line":
            if pts:
                coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
                parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        elif kind == "scatter":
            for x, y in pts:
                parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="{color}" fill-opacity="0.6"/>')
        else:
            raise ValueError(f"unknown plot kind {kind!r}")
        parts.append(f'<text x="{_W - _PAD}" y="{_PAD / 2 + 14 * (k + 1)}" font-family="sans-serif" '
                     f'font-size="11" text-anchor="end" fill="{color}">{_esc(str(name))}</text>')
    parts.append("</svg>")
    _write_text(path, "\n".join(parts) + "\n")
