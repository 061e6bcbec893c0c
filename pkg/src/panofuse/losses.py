"""Training-side losses of the fusion head, with analytic gradients.

Both losses reduce by the mean over contributing pixels so values are
comparable across image sizes, and both are verified against central
finite differences in the test suite.  Target construction fixes the
instance-channel order to the order of the ground-truth boxes and retargets
a seeded random sample of instances to the unknown slot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .panoptic import PanopticMap
from .tensor import BBox, CategorySet, LogitTensor, rasterize_box, resize_coeffs
from .fusion import PanopticLogits

__all__ = [
    "IGNORE_INDEX",
    "RECOMMENDED_LOSS_WEIGHTS",
    "PanopticTarget",
    "build_target",
    "panoptic_ce",
    "roi_ce",
]

log = logging.getLogger(__name__)

IGNORE_INDEX = -1

# Weighting presets that keep the task losses on a similar order of
# magnitude when this head is trained alongside detection losses.  Purely
# documentation: nothing in this library consumes them.
RECOMMENDED_LOSS_WEIGHTS = {
    "coco": {"semantic": 0.2, "semantic_roi": 0.04, "panoptic": 0.1, "other": 1.0},
    "cityscapes": {"semantic": 1.0, "semantic_roi": 0.2, "panoptic": 0.5, "other": 1.0},
    "driving_internal": {"semantic": 1.0, "semantic_roi": 0.2, "panoptic": 0.3, "other": 1.0},
}


@dataclass(frozen=True, eq=False)
class PanopticTarget:
    """Per-pixel target channel index into the fused logits; -1 ignores."""

    channel_index: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.channel_index)
        if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("target must be a 2-D integer array")
        arr = np.ascontiguousarray(arr, dtype=np.int32)
        view = arr.view()
        view.setflags(write=False)
        object.__setattr__(self, "channel_index", view)


def build_target(
    gt_map: PanopticMap,
    instance_ids: Sequence[int],
    categories: CategorySet,
    unknown_rate: float = 0.3,
    seed: int = 0,
) -> PanopticTarget:
    """Target channels from a ground-truth map and an ordered instance list.

    ``instance_ids`` lists the ground-truth segment ids in the order their
    boxes fill instance channels; pixels of the j-th id target channel
    ``n_stuff + j``.  Stuff pixels target their category channel, void
    pixels are ignored, and ``round(unknown_rate * K)`` instances (sampled
    without replacement with a Philox generator keyed by ``seed``) are
    retargeted wholesale to the unknown slot ``n_stuff + K``.
    """
    if not 0.0 <= unknown_rate <= 1.0:
        raise ValueError(f"unknown_rate must be in [0, 1], got {unknown_rate}")
    n_stuff = categories.n_stuff
    ids = [int(v) for v in instance_ids]
    slot_of = {sid: j for j, sid in enumerate(ids)}
    if len(slot_of) != len(ids):
        raise ValueError("instance_ids contains duplicates")

    map_things = [
        sid
        for sid, info in gt_map.segments.items()
        if not categories.is_stuff(info.category) and info.area > 0
    ]
    missing = sorted(set(map_things) - set(ids))
    if missing:
        raise ValueError(f"instances present in the map but not listed: {missing}")

    k = len(ids)
    unknown_slot = n_stuff + k
    n_unknown = int(np.floor(unknown_rate * k + 0.5))
    rng = np.random.Generator(np.random.Philox(seed))
    flagged = set(rng.choice(k, size=n_unknown, replace=False).tolist()) if n_unknown else set()

    max_id = int(gt_map.ids.max(initial=0))
    lut = np.full(max_id + 1, IGNORE_INDEX, dtype=np.int32)
    for sid, info in gt_map.segments.items():
        if sid == 0 or sid > max_id:
            continue
        if categories.is_stuff(info.category):
            lut[sid] = info.category
        else:
            slot = slot_of[sid]
            lut[sid] = unknown_slot if slot in flagged else n_stuff + slot
    return PanopticTarget(lut[gt_map.ids])


def panoptic_ce(
    z: PanopticLogits, target: PanopticTarget
) -> tuple[float, np.ndarray]:
    """Mean pixel-wise cross entropy over the fused logits.

    Returns the loss and the analytic gradient w.r.t. every logit element:
    ``(softmax - onehot) / n_valid`` at contributing pixels, exactly zero at
    ignored pixels.
    """
    data = z.base.data
    idx = target.channel_index
    if idx.shape != data.shape[1:]:
        raise ValueError(f"target shape {idx.shape} != logit plane {data.shape[1:]}")
    valid = idx != IGNORE_INDEX
    if valid.any() and (idx[valid].max() >= data.shape[0] or idx[valid].min() < 0):
        raise ValueError("target channel index out of range")
    n_valid = int(valid.sum())
    if n_valid == 0:
        log.warning("panoptic cross entropy: every pixel is ignored")
        return 0.0, np.zeros_like(data, dtype=np.float64)

    x = data.astype(np.float64)
    x = x - x.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(x).sum(axis=0))
    picked = np.take_along_axis(x, idx[None].clip(min=0), axis=0)[0]
    loss = float(((log_z - picked) * valid).sum() / n_valid)

    grad = np.exp(x - log_z[None])
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, idx[None].clip(min=0), 1.0, axis=0)
    grad -= onehot
    grad *= valid[None] / n_valid
    return loss, grad


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    lo, hi, w = resize_coeffs(n_in, n_out)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - w)
    np.add.at(mat, (rows, hi), w)
    return mat


def roi_ce(
    semantic_logits: LogitTensor,
    gt_box: BBox,
    gt_label_patch: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Cross entropy on the box crop after resizing it to 28x28.

    The crop of each channel is bilinear-resized to 28x28 and scored with
    pixel-wise cross entropy against the 28x28 label patch.  The returned
    gradient is w.r.t. the cropped logits, chained through the (linear)
    resize.
    """
    labels = np.asarray(gt_label_patch)
    if labels.shape != (28, 28) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("label patch must be a 28x28 integer grid")
    c = semantic_logits.channels
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label patch values must lie in [0, {c})")
    y0, y1, x0, x1 = rasterize_box(gt_box, semantic_logits.height, semantic_logits.width)
    if y1 <= y0 or x1 <= x0:
        raise ValueError(f"box {gt_box} rasterizes to an empty region")

    crop = semantic_logits.data[:, y0:y1, x0:x1].astype(np.float64)
    ry = _resize_matrix(y1 - y0, 28)
    rx = _resize_matrix(x1 - x0, 28)
    resized = np.einsum("oi,ciw,wj->coj", ry, crop, rx.T, optimize=True)

    shifted = resized - resized.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    picked = np.take_along_axis(shifted, labels[None], axis=0)[0]
    n_pix = 28 * 28
    loss = float((log_z - picked).sum() / n_pix)

    grad_resized = np.exp(shifted - log_z[None])
    np.put_along_axis(
        grad_resized,
        labels[None],
        np.take_along_axis(grad_resized, labels[None], axis=0) - 1.0,
        axis=0,
    )
    grad_resized /= n_pix
    grad_crop = np.einsum("io,coj,jw->ciw", ry.T, grad_resized, rx, optimize=True)
    return loss, grad_crop
