"""Panoptic segment maps: a per-pixel segment-id image plus a segment table.

Segment id 0 is reserved for void.  Maps produced by this library use a
fixed id scheme: the (single) segment of stuff category ``k`` gets id
``k + 1`` and the instance in fusion slot ``i`` gets id ``n_stuff + 1 + i``.
Maps read from external annotation files may carry arbitrary ids below
2^32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "VOID_ID",
    "PanopticMap",
    "SegmentInfo",
    "instance_segment_id",
    "segment_geometry",
    "stuff_segment_id",
]

VOID_ID = 0

# Direct bincount-based geometry is used while the per-id histograms stay
# below this many cells; sparse ids fall back to a compaction pass.
_DENSE_CELL_LIMIT = 1 << 26


def stuff_segment_id(category: int) -> int:
    return category + 1


def instance_segment_id(n_stuff: int, slot: int) -> int:
    return n_stuff + 1 + slot


@dataclass(frozen=True, eq=False)
class SegmentInfo:
    """Table entry for one segment: category index, pixel area, tight bbox."""

    category: int
    area: int
    bbox: tuple[int, int, int, int]  # (x, y, width, height) in pixels
    iscrowd: bool = False


def _bounds_from_hist(hist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    present = hist > 0
    lo = present.argmax(axis=1)
    hi = hist.shape[1] - present[:, ::-1].argmax(axis=1)
    return lo, hi


def segment_geometry(
    ids: np.ndarray,
) -> dict[int, tuple[int, tuple[int, int, int, int]]]:
    """Pixel area and tight bbox per nonzero segment id.

    Returns ``{segment_id: (area, (x, y, width, height))}``.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"expected a 2-D id map, got shape {ids.shape}")
    h, w = ids.shape
    max_id = int(ids.max(initial=0))
    if (max_id + 1) * (h + w) <= _DENSE_CELL_LIMIT:
        labels = np.arange(max_id + 1, dtype=np.int64)
        inv = ids.astype(np.int64, copy=False)
    else:
        labels, inv = np.unique(ids, return_inverse=True)
        labels = labels.astype(np.int64)
        inv = inv.reshape(h, w)
    m = len(labels)
    counts = np.bincount(inv.ravel(), minlength=m)
    rows = np.broadcast_to(np.arange(h, dtype=np.int64)[:, None], (h, w))
    cols = np.broadcast_to(np.arange(w, dtype=np.int64)[None, :], (h, w))
    row_hist = np.bincount((inv * h + rows).ravel(), minlength=m * h).reshape(m, h)
    col_hist = np.bincount((inv * w + cols).ravel(), minlength=m * w).reshape(m, w)
    y0, y1 = _bounds_from_hist(row_hist)
    x0, x1 = _bounds_from_hist(col_hist)

    out: dict[int, tuple[int, tuple[int, int, int, int]]] = {}
    for k in range(m):
        sid = int(labels[k])
        if sid == VOID_ID or counts[k] == 0:
            continue
        out[sid] = (
            int(counts[k]),
            (int(x0[k]), int(y0[k]), int(x1[k] - x0[k]), int(y1[k] - y0[k])),
        )
    return out


@dataclass(frozen=True, eq=False)
class PanopticMap:
    """Immutable per-pixel segment-id map with its segment table.

    Invariants (guaranteed by the constructors in this library, checked on
    demand by :meth:`validate` for externally sourced data):

    * every nonzero pixel id appears in the table,
    * table areas equal pixel counts,
    * ids are unique (table keys).
    """

    ids: np.ndarray
    segments: dict[int, SegmentInfo]

    def __post_init__(self) -> None:
        arr = np.asarray(self.ids)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D id map, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"segment ids must be integers, got dtype {arr.dtype}")
        if arr.size and (int(arr.min()) < 0 or int(arr.max()) > 0xFFFFFFFF):
            raise ValueError("segment ids must fit in an unsigned 32-bit range")
        arr = np.ascontiguousarray(arr, dtype=np.uint32)
        view = arr.view()
        view.setflags(write=False)
        object.__setattr__(self, "ids", view)
        object.__setattr__(self, "segments", dict(self.segments))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @classmethod
    def from_ids(
        cls,
        ids: np.ndarray,
        category_of: Mapping[int, int] | Callable[[int], int],
        iscrowd: Mapping[int, bool] | None = None,
    ) -> "PanopticMap":
        """Build a map from raw ids, deriving areas and bboxes from pixels."""
        lookup = category_of.__getitem__ if isinstance(category_of, Mapping) else category_of
        crowd = iscrowd or {}
        table = {
            sid: SegmentInfo(int(lookup(sid)), area, bbox, bool(crowd.get(sid, False)))
            for sid, (area, bbox) in segment_geometry(ids).items()
        }
        return cls(ids, table)

    def to_semantic(self) -> np.ndarray:
        """Per-pixel category index; void pixels map to -1."""
        max_id = int(self.ids.max(initial=0))
        if (max_id + 1) <= (1 << 22):
            lut = np.full(max_id + 1, -1, dtype=np.int64)
            for sid, info in self.segments.items():
                if sid <= max_id:
                    lut[sid] = info.category
            return lut[self.ids]
        labels, inv = np.unique(self.ids, return_inverse=True)
        lut = np.array(
            [self.segments[s].category if s != VOID_ID else -1 for s in labels],
            dtype=np.int64,
        )
        return lut[inv.reshape(self.ids.shape)]

    def validate(self) -> None:
        """Check the pixel/table invariants; raises ValueError on violation."""
        geometry = segment_geometry(self.ids)
        missing = sorted(set(geometry) - set(self.segments))
        if missing:
            raise ValueError(f"pixel ids missing from the segment table: {missing}")
        for sid, info in self.segments.items():
            area = geometry[sid][0] if sid in geometry else 0
            if info.area != area:
                raise ValueError(
                    f"segment {sid}: table area {info.area} != pixel count {area}"
                )
