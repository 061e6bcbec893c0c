"""Inference-time mask pruning: selects the detections that join fusion.

The pipeline is class-agnostic NMS on boxes, a strict score cut, then
ordered pasting onto one canvas per category with an intersection-over-self
rejection rule.  The survivors and their order define the instance channels
of the fused logit tensor.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import BBox, MaskPatch, bilinear_resize, rasterize_box

__all__ = [
    "InstanceProposal",
    "PrunedSet",
    "binary_candidate",
    "canvas_paste",
    "class_agnostic_nms",
    "load_proposals",
    "save_proposals",
    "score_filter",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class InstanceProposal:
    """One detection: box, global thing-category index, score, mask patch."""

    box: BBox
    category: int
    score: float
    mask: MaskPatch

    def __post_init__(self) -> None:
        if not np.isfinite(self.score) or not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")
        if self.category < 0:
            raise ValueError(f"category index must be non-negative, got {self.category}")


@dataclass(frozen=True, eq=False)
class PrunedSet:
    """Pruning output: survivors in pasting order plus their clipped masks.

    ``survivors[i]`` owns fusion instance slot ``i``.  ``clipped_masks[i]``
    is the image-resolution occupancy actually pasted on the survivor's
    per-category canvas (pairwise disjoint within each category); the full
    mask patch stays available on the proposal itself.
    """

    survivors: tuple[InstanceProposal, ...]
    clipped_masks: tuple[np.ndarray, ...]
    diagnostics: tuple[str, ...] = field(default=())

    @property
    def n_instances(self) -> int:
        return len(self.survivors)


def _descending_score_order(proposals: Sequence[InstanceProposal]) -> list[int]:
    # Stable sort keeps input order for tied scores.
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    return list(np.argsort(-scores, kind="stable"))


def class_agnostic_nms(
    proposals: Sequence[InstanceProposal], iou_threshold: float = 0.5
) -> list[InstanceProposal]:
    """Greedy box NMS by descending score, ignoring categories.

    A box is suppressed when its IoU with an already-kept box strictly
    exceeds ``iou_threshold``.  Output preserves descending-score order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = _descending_score_order(proposals)
    kept: list[InstanceProposal] = []
    for idx in order:
        cand = proposals[idx]
        if all(cand.box.iou(k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def score_filter(
    proposals: Sequence[InstanceProposal], min_score: float = 0.6
) -> list[InstanceProposal]:
    """Keep proposals scoring strictly above ``min_score``, sorted descending."""
    order = _descending_score_order(proposals)
    return [proposals[i] for i in order if proposals[i].score > min_score]


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def binary_candidate(
    proposal: InstanceProposal,
    image_h: int,
    image_w: int,
    binarize_threshold: float = 0.5,
) -> np.ndarray | None:
    """Image-resolution binary occupancy of a proposal's mask.

    The 28x28 patch is bilinear-resized to the rasterized box and kept where
    ``sigmoid(logit) > binarize_threshold``.  Returns None when the box
    rasterizes to an empty region.
    """
    y0, y1, x0, x1 = rasterize_box(proposal.box, image_h, image_w)
    if y1 <= y0 or x1 <= x0:
        return None
    resized = bilinear_resize(proposal.mask.logits, y1 - y0, x1 - x0)
    cand = np.zeros((image_h, image_w), dtype=bool)
    cand[y0:y1, x0:x1] = _stable_sigmoid(resized) > binarize_threshold
    return cand


def canvas_paste(
    proposals: Sequence[InstanceProposal],
    image_h: int,
    image_w: int,
    overlap_threshold: float = 0.3,
    binarize_threshold: float = 0.5,
) -> PrunedSet:
    """Paste binarized masks per category, discarding heavily-overlapped ones.

    Expects proposals already NMS'd and score-filtered, in descending-score
    order.  Each candidate whose intersection with its category canvas
    exceeds ``overlap_threshold`` of its own area is discarded entirely;
    otherwise the non-intersecting part is recorded as the clipped mask and
    added to the canvas.  Proposals with an empty rasterized box or an empty
    binarized mask are discarded and reported in the diagnostics list.
    """
    canvases: dict[int, np.ndarray] = {}
    survivors: list[InstanceProposal] = []
    clipped: list[np.ndarray] = []
    diagnostics: list[str] = []
    for idx, prop in enumerate(proposals):
        y0, y1, x0, x1 = rasterize_box(prop.box, image_h, image_w)
        if y1 <= y0 or x1 <= x0:
            diagnostics.append(f"proposal {idx}: empty rasterized box, discarded")
            continue
        resized = bilinear_resize(prop.mask.logits, y1 - y0, x1 - x0)
        local = _stable_sigmoid(resized) > binarize_threshold
        cand_area = int(np.count_nonzero(local))
        if cand_area == 0:
            diagnostics.append(f"proposal {idx}: empty binarized mask, discarded")
            continue
        canvas = canvases.get(prop.category)
        if canvas is None:
            canvas = canvases[prop.category] = np.zeros((image_h, image_w), dtype=bool)
        window = canvas[y0:y1, x0:x1]
        inter = int(np.count_nonzero(local & window))
        if inter / cand_area > overlap_threshold:
            continue
        keep = np.zeros((image_h, image_w), dtype=bool)
        keep[y0:y1, x0:x1] = local & ~window
        window |= keep[y0:y1, x0:x1]
        keep.setflags(write=False)
        survivors.append(prop)
        clipped.append(keep)
    return PrunedSet(tuple(survivors), tuple(clipped), tuple(diagnostics))


# Proposal interchange format: a JSON array of objects
# {"box": [x0, y0, x1, y1], "category_id": int, "score": float,
#  "mask": [784 floats, row-major]}.


def load_proposals(path: str | Path) -> list[InstanceProposal]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a JSON array of proposals")
    out = []
    for i, entry in enumerate(raw):
        try:
            box = entry["box"]
            if len(box) != 4:
                raise ValueError(f"box must have 4 coordinates, got {len(box)}")
            mask = np.asarray(entry["mask"], dtype=np.float64)
            if mask.size != 28 * 28:
                raise ValueError(f"mask must have 784 values, got {mask.size}")
            out.append(
                InstanceProposal(
                    box=BBox(*[float(v) for v in box]),
                    category=int(entry["category_id"]),
                    score=float(entry["score"]),
                    mask=MaskPatch(mask.reshape(28, 28)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: bad proposal at index {i}: {exc}") from exc
    return out


def save_proposals(path: str | Path, proposals: Sequence[InstanceProposal]) -> None:
    payload = [
        {
            "box": [p.box.x0, p.box.y0, p.box.x1, p.box.y1],
            "category_id": p.category,
            "score": p.score,
            "mask": [float(v) for v in p.mask.logits.ravel()],
        }
        for p in proposals
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
