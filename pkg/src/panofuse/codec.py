"""Bit-exact panoptic interchange: id-encoded PNGs plus a JSON index.

Pixel encoding follows the standard panoptic format: an 8-bit RGB PNG where
``id = R + 256 * G + 256**2 * B`` and id 0 (black) is void.  The JSON index
carries ``categories`` (``{id, name, isthing}``) and ``annotations``
(``{image_id, file_name, segments_info}``); ``segments_info`` entries are
``{id, category_id, area, bbox, iscrowd}`` with COCO-style ``[x, y, w, h]``
boxes.  Category ids equal their index in the ordered category set.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .panoptic import VOID_ID, PanopticMap, SegmentInfo, segment_geometry
from .tensor import CategorySet

__all__ = [
    "CodecError",
    "decode_png",
    "encode_png",
    "load_categories",
    "read_panoptic_dir",
    "save_categories",
    "segments_info_from_map",
    "write_panoptic_dir",
]

_MAX_ID = 1 << 24


class CodecError(ValueError):
    """Raised for malformed panoptic files; carries offending ids if any."""

    def __init__(self, message: str, offending_ids: Sequence[int] = ()) -> None:
        super().__init__(message)
        self.offending_ids = tuple(int(v) for v in offending_ids)


def encode_png(pmap: PanopticMap) -> bytes:
    """Encode a map as PNG bytes; requires every id below 2^24."""
    ids = pmap.ids
    max_id = int(ids.max(initial=0))
    if max_id >= _MAX_ID:
        raise CodecError(
            f"segment id {max_id} does not fit in 24 bits", [max_id]
        )
    rgb = np.empty((*ids.shape, 3), dtype=np.uint8)
    rgb[..., 0] = ids & 0xFF
    rgb[..., 1] = (ids >> 8) & 0xFF
    rgb[..., 2] = (ids >> 16) & 0xFF
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(
    data: bytes,
    segments_info: Iterable[dict],
    void_ids: Sequence[int] = (),
) -> PanopticMap:
    """Decode PNG bytes into a map using the given segment descriptors.

    Pixel ids absent from ``segments_info`` raise a :class:`CodecError`
    listing the offenders.  Ids listed in ``void_ids`` are normalized to 0
    on read (for annotations using a non-zero void convention).  Declared
    segments with no pixels are kept with area 0.
    """
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CodecError(f"not a decodable PNG image: {exc}") from exc
    if img.mode != "RGB":
        raise CodecError(f"expected an 8-bit RGB PNG, got mode {img.mode!r}")
    rgb = np.asarray(img, dtype=np.uint32)
    ids = rgb[..., 0] + (rgb[..., 1] << 8) + (rgb[..., 2] << 16)
    for vid in void_ids:
        ids[ids == vid] = VOID_ID

    info_by_id: dict[int, dict] = {}
    for entry in segments_info:
        sid = int(entry["id"])
        if sid in info_by_id:
            raise CodecError(f"duplicate segment id {sid} in segments_info", [sid])
        info_by_id[sid] = entry

    geometry = segment_geometry(ids)
    unknown = sorted(set(geometry) - set(info_by_id))
    if unknown:
        raise CodecError(
            f"pixel ids missing from segments_info: {unknown}", unknown
        )
    table: dict[int, SegmentInfo] = {}
    for sid, entry in info_by_id.items():
        area, bbox = geometry.get(sid, (0, (0, 0, 0, 0)))
        table[sid] = SegmentInfo(
            category=int(entry["category_id"]),
            area=area,
            bbox=bbox,
            iscrowd=bool(entry.get("iscrowd", 0)),
        )
    return PanopticMap(ids, table)


def segments_info_from_map(pmap: PanopticMap) -> list[dict]:
    return [
        {
            "id": sid,
            "category_id": info.category,
            "area": info.area,
            "bbox": list(info.bbox),
            "iscrowd": int(info.iscrowd),
        }
        for sid, info in sorted(pmap.segments.items())
    ]


def save_categories(path: str | Path, categories: CategorySet) -> None:
    payload = [
        {"id": i, "name": categories.names[i], "isthing": int(categories.is_thing[i])}
        for i in range(categories.total)
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_categories(path: str | Path) -> CategorySet:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise ValueError(f"{path}: expected a non-empty JSON array of categories")
    try:
        rows = sorted(raw, key=lambda r: int(r["id"]))
        ids = [int(r["id"]) for r in rows]
        if ids != list(range(len(rows))):
            raise ValueError(f"category ids must be 0..{len(rows) - 1}, got {ids}")
        names = tuple(str(r["name"]) for r in rows)
        flags = tuple(bool(r["isthing"]) for r in rows)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: bad category entry: {exc}") from exc
    return CategorySet(names, flags)


def write_panoptic_dir(
    out_dir: str | Path,
    items: Sequence[tuple[int, str, PanopticMap]],
    categories: CategorySet,
    json_name: str = "panoptic.json",
) -> Path:
    """Write ``(image_id, file_name, map)`` items as PNGs plus a JSON index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    annotations = []
    for image_id, file_name, pmap in items:
        (out / file_name).write_bytes(encode_png(pmap))
        annotations.append(
            {
                "image_id": int(image_id),
                "file_name": file_name,
                "segments_info": segments_info_from_map(pmap),
            }
        )
    doc = {
        "categories": [
            {"id": i, "name": categories.names[i], "isthing": int(categories.is_thing[i])}
            for i in range(categories.total)
        ],
        "annotations": annotations,
    }
    path = out / json_name
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return path


def read_panoptic_dir(
    dir_path: str | Path,
) -> tuple[CategorySet | None, list[tuple[int, str, PanopticMap]]]:
    """Read a panoptic directory written by :func:`write_panoptic_dir`.

    The directory must contain exactly one ``*.json`` index; PNGs are
    resolved relative to it.
    """
    root = Path(dir_path)
    index_files = sorted(root.glob("*.json"))
    if len(index_files) != 1:
        raise ValueError(
            f"{root}: expected exactly one JSON index, found {len(index_files)}"
        )
    with open(index_files[0], "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    categories = None
    if isinstance(doc, dict) and doc.get("categories"):
        rows = sorted(doc["categories"], key=lambda r: int(r["id"]))
        categories = CategorySet(
            tuple(str(r["name"]) for r in rows),
            tuple(bool(r["isthing"]) for r in rows),
        )
    annotations = doc.get("annotations", []) if isinstance(doc, dict) else []
    items = []
    for ann in annotations:
        png_path = root / ann["file_name"]
        pmap = decode_png(png_path.read_bytes(), ann["segments_info"])
        items.append((int(ann.get("image_id", 0)), str(ann["file_name"]), pmap))
    return categories, items
