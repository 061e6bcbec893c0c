"""Combine-heuristic baseline: confidence-ordered pasting plus stuff fill.

This is the classic merging recipe for independent instance and semantic
predictions: paste instance masks in descending score on a single canvas,
dropping any mask that mostly lands on already-claimed pixels, then fill
the remaining pixels with the semantic prediction where it names a stuff
category (thing-predicted leftovers become void), and finally void out
undersized stuff segments.
"""

from __future__ import annotations

import numpy as np

from .panoptic import (
    VOID_ID,
    PanopticMap,
    SegmentInfo,
    instance_segment_id,
    segment_geometry,
    stuff_segment_id,
)
from .pruning import InstanceProposal, PrunedSet, canvas_paste, class_agnostic_nms, score_filter
from .tensor import CategorySet, LogitTensor, channel_argmax

__all__ = ["combine", "run_combine"]


def combine(
    semantic_pred: np.ndarray,
    pruned: PrunedSet,
    categories: CategorySet,
    overlap_threshold: float = 0.5,
    min_stuff_area: int = 0,
) -> PanopticMap:
    """Merge pruned instances with a semantic category map.

    Pasting candidates are the survivors' clipped occupancy masks.  A
    candidate overlapping already-pasted pixels by strictly more than
    ``overlap_threshold`` of its own area is dropped entirely; otherwise its
    non-overlapping part is pasted.  Instances keep the detector category.
    """
    h, w = semantic_pred.shape
    n_stuff = categories.n_stuff
    ids = np.zeros((h, w), dtype=np.uint32)
    canvas = np.zeros((h, w), dtype=bool)
    cat_by_id: dict[int, int] = {}

    for i, (prop, cand) in enumerate(zip(pruned.survivors, pruned.clipped_masks)):
        cand_area = int(cand.sum())
        if cand_area == 0:
            continue
        inter = int(np.count_nonzero(cand & canvas))
        if inter / cand_area > overlap_threshold:
            continue
        keep = cand & ~canvas
        sid = instance_segment_id(n_stuff, i)
        ids[keep] = sid
        canvas |= keep
        cat_by_id[sid] = prop.category

    stuff_fill = ~canvas & (semantic_pred >= 0) & (semantic_pred < n_stuff)
    ids[stuff_fill] = (semantic_pred[stuff_fill] + 1).astype(np.uint32)
    for k in range(n_stuff):
        cat_by_id[stuff_segment_id(k)] = k

    geometry = segment_geometry(ids)
    if min_stuff_area > 0:
        small = [
            sid
            for sid, (area, _) in geometry.items()
            if sid <= n_stuff and area < min_stuff_area
        ]
        if small:
            lut = np.arange(int(ids.max(initial=0)) + 1, dtype=np.uint32)
            lut[small] = VOID_ID
            ids = lut[ids]
            geometry = segment_geometry(ids)

    table = {
        sid: SegmentInfo(cat_by_id[sid], area, bbox)
        for sid, (area, bbox) in geometry.items()
    }
    return PanopticMap(ids, table)


def run_combine(
    x: LogitTensor,
    categories: CategorySet,
    proposals: list[InstanceProposal],
    *,
    nms_iou: float = 0.5,
    min_score: float = 0.6,
    paste_overlap: float = 0.3,
    binarize_threshold: float = 0.5,
    overlap_threshold: float = 0.5,
    min_stuff_area: int = 0,
) -> PanopticMap:
    """Baseline pipeline: semantic argmax, shared pruning, then combine."""
    semantic_pred = channel_argmax(x)
    kept = score_filter(class_agnostic_nms(proposals, nms_iou), min_score)
    pruned = canvas_paste(kept, x.height, x.width, paste_overlap, binarize_threshold)
    return combine(semantic_pred, pruned, categories, overlap_threshold, min_stuff_area)
