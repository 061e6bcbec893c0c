"""Parameter-free panoptic fusion head and its inference heuristics.

Fused logits hold the stuff channels verbatim, one channel per surviving
instance (the instance's thing-class logits inside its box plus its resized
mask logits), and optionally a trailing unknown channel whose logit is the
per-pixel gap ``max(thing logits) - max(boxed instance logits)``.  Decoding
is a per-pixel channel argmax; the unknown channel decodes to void.

Decoded segment ids follow the scheme in :mod:`panofuse.panoptic`:
stuff category ``k`` maps to id ``k + 1``, instance slot ``i`` to
``n_stuff + 1 + i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .panoptic import (
    VOID_ID,
    PanopticMap,
    SegmentInfo,
    instance_segment_id,
    segment_geometry,
    stuff_segment_id,
)
from .pruning import (
    InstanceProposal,
    PrunedSet,
    canvas_paste,
    class_agnostic_nms,
    score_filter,
)
from .tensor import (
    BBox,
    CategorySet,
    LogitTensor,
    _argmax_channels,
    _trusted_tensor,
    bilinear_resize,
    rasterize_box,
)

__all__ = [
    "PanopticLogits",
    "assign_instance_classes",
    "build_panoptic_logits",
    "decode",
    "instance_mask_map",
    "instance_semantic_map",
    "run_fusion",
    "suppress_small_stuff",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PanopticLogits:
    """Fused logit tensor plus the survivor bookkeeping that shaped it."""

    base: LogitTensor
    n_inst: int
    unknown_enabled: bool
    survivors: PrunedSet

    @property
    def n_stuff(self) -> int:
        return self.base.channels - self.n_inst - (1 if self.unknown_enabled else 0)


def _box_masked_channel(channel: np.ndarray, box: BBox) -> np.ndarray:
    h, w = channel.shape
    out = np.zeros((h, w), dtype=np.float64)
    y0, y1, x0, x1 = rasterize_box(box, h, w)
    if y1 > y0 and x1 > x0:
        out[y0:y1, x0:x1] = channel[y0:y1, x0:x1]
    return out


def instance_semantic_map(
    x_thing: LogitTensor, proposal: InstanceProposal, categories: CategorySet
) -> np.ndarray:
    """Thing-class logits of the proposal's category, zeroed outside its box."""
    ch = proposal.category - categories.n_stuff
    if not 0 <= ch < x_thing.channels:
        raise ValueError(
            f"category {proposal.category} does not map to a thing channel "
            f"(n_stuff={categories.n_stuff}, thing channels={x_thing.channels})"
        )
    return _box_masked_channel(x_thing.data[ch], proposal.box)


def instance_mask_map(
    proposal: InstanceProposal, image_h: int, image_w: int
) -> np.ndarray:
    """Mask patch bilinear-resized to the box extent, zero elsewhere."""
    out = np.zeros((image_h, image_w), dtype=np.float64)
    y0, y1, x0, x1 = rasterize_box(proposal.box, image_h, image_w)
    if y1 <= y0 or x1 <= x0:
        log.warning("proposal box %s rasterizes to an empty region", proposal.box)
        return out
    out[y0:y1, x0:x1] = bilinear_resize(proposal.mask.logits, y1 - y0, x1 - x0)
    return out


def build_panoptic_logits(
    x: LogitTensor,
    categories: CategorySet,
    pruned: PrunedSet,
    enable_unknown: bool = True,
    workspace: dict | None = None,
) -> PanopticLogits:
    """Assemble the fused logit tensor from semantic logits and survivors.

    Channel layout: ``[0, n_stuff)`` copies the stuff logits, channel
    ``n_stuff + i`` holds survivor ``i``'s boxed thing logits plus its
    resized mask logits, and (when enabled) the last channel holds the
    unknown logit.  With zero survivors the boxed-logit maximum is defined
    as 0 everywhere.

    ``workspace`` is an optional dict a batch loop can pass to reuse the
    (large) fused buffer across same-shaped calls, avoiding repeated page
    allocation; the returned logits then alias the workspace and are only
    valid until the next call with that workspace.
    """
    if x.channels != categories.total:
        raise ValueError(
            f"logit tensor has {x.channels} channels but the category set "
            f"defines {categories.total}"
        )
    n_stuff = categories.n_stuff
    n_inst = pruned.n_instances
    h, w = x.height, x.width
    total = n_stuff + n_inst + (1 if enable_unknown else 0)
    key = ("fused", total, h, w, x.data.dtype)
    if workspace is not None and key in workspace:
        z = workspace[key]
        if n_inst:
            z[n_stuff : n_stuff + n_inst].fill(0.0)
    else:
        z = np.zeros((total, h, w), dtype=x.data.dtype)
        if workspace is not None:
            workspace[key] = z
    z[:n_stuff] = x.data[:n_stuff]

    # Running per-pixel max over the boxed thing-logit maps.  Each map is
    # zero outside its own box, so the stack max at a pixel is the max of
    # the in-box values there, floored at 0 unless every instance's box
    # covers the pixel.
    inside_max = np.full((h, w), -np.inf, dtype=np.float64)
    cover = np.zeros((h, w), dtype=np.uint16)
    for i, prop in enumerate(pruned.survivors):
        ch = prop.category - n_stuff
        if not 0 <= ch < categories.n_thing:
            raise ValueError(f"survivor {i} has non-thing category {prop.category}")
        y0, y1, x0, x1 = rasterize_box(prop.box, h, w)
        if y1 <= y0 or x1 <= x0:
            continue
        boxed = x.data[n_stuff + ch, y0:y1, x0:x1].astype(np.float64)
        resized = bilinear_resize(prop.mask.logits, y1 - y0, x1 - x0)
        filled = boxed + resized
        if not np.isfinite(filled).all():
            raise ValueError(f"survivor {i}: non-finite fused logits")
        z[n_stuff + i, y0:y1, x0:x1] = filled
        np.maximum(inside_max[y0:y1, x0:x1], boxed, out=inside_max[y0:y1, x0:x1])
        cover[y0:y1, x0:x1] += 1

    if enable_unknown:
        if n_inst == 0:
            boxed_max = np.zeros((h, w), dtype=np.float64)
        else:
            boxed_max = np.where(
                cover == n_inst, inside_max, np.maximum(inside_max, 0.0)
            )
        if categories.n_thing > 0:
            thing_max = x.data[n_stuff:].max(axis=0).astype(np.float64)
        else:
            thing_max = np.zeros((h, w), dtype=np.float64)
        z[total - 1] = thing_max - boxed_max
        if not np.isfinite(z[total - 1]).all():
            raise ValueError("non-finite unknown-channel logits")

    # Stuff channels are verbatim copies and the computed channels were just
    # checked, so the full finiteness scan of the public constructor is
    # redundant here.
    return PanopticLogits(
        base=_trusted_tensor(z),
        n_inst=n_inst,
        unknown_enabled=enable_unknown,
        survivors=pruned,
    )


def decode(z: PanopticLogits) -> PanopticMap:
    """Per-pixel channel argmax of the fused logits, mapped to segment ids.

    Stuff channel ``k`` becomes the (single) segment of stuff category ``k``,
    instance channel ``i`` becomes survivor ``i``'s segment, and the unknown
    channel becomes void.  Only segments with at least one pixel enter the
    table.
    """
    n_stuff = z.n_stuff
    arg = _argmax_channels(z.base.data)

    lut = np.zeros(z.base.channels, dtype=np.uint32)
    categories: dict[int, int] = {}
    for k in range(n_stuff):
        sid = stuff_segment_id(k)
        lut[k] = sid
        categories[sid] = k
    for i, prop in enumerate(z.survivors.survivors):
        sid = instance_segment_id(n_stuff, i)
        lut[n_stuff + i] = sid
        categories[sid] = prop.category
    if z.unknown_enabled:
        lut[z.base.channels - 1] = VOID_ID

    ids = lut[arg]
    table = {
        sid: SegmentInfo(categories[sid], area, bbox)
        for sid, (area, bbox) in segment_geometry(ids).items()
    }
    return PanopticMap(ids, table)


def assign_instance_classes(
    pmap: PanopticMap,
    survivors: tuple[InstanceProposal, ...] | list[InstanceProposal],
    semantic_pred: np.ndarray,
    categories: CategorySet,
) -> PanopticMap:
    """Resolve each decoded instance's class against the semantic majority.

    For an instance whose semantic mode over its decoded pixels disagrees
    with the detector class, the mode wins only when it is a stuff category
    and covers a strict majority of the pixels; the instance then merges
    into that stuff category's segment.  Instances decoded to zero pixels
    are absent from the table already and stay dropped.
    """
    if semantic_pred.shape != pmap.ids.shape:
        raise ValueError(
            f"semantic map shape {semantic_pred.shape} != panoptic {pmap.ids.shape}"
        )
    n_stuff = categories.n_stuff
    n_cat = categories.total
    max_id = max(n_stuff + len(survivors), int(pmap.ids.max(initial=0)))
    joint = np.bincount(
        (pmap.ids.astype(np.int64) * n_cat + semantic_pred.astype(np.int64)).ravel(),
        minlength=(max_id + 1) * n_cat,
    ).reshape(max_id + 1, n_cat)
    slot_hists = joint[n_stuff + 1 : n_stuff + 1 + len(survivors)]
    return _apply_class_rules(pmap, tuple(survivors), slot_hists, categories)


def _instance_mode_histograms(
    pmap: PanopticMap, x: LogitTensor, n_stuff: int, n_slots: int, n_cat: int
) -> np.ndarray:
    """Per-slot semantic-argmax histograms over decoded instance pixels only.

    Equivalent to histogramming ``channel_argmax(x)`` under each instance's
    decoded mask, but the argmax is evaluated just at those pixels.
    """
    joint = np.zeros((n_slots, n_cat), dtype=np.int64)
    if n_slots == 0:
        return joint
    idx = np.flatnonzero(pmap.ids.ravel() > n_stuff)
    if idx.size == 0:
        return joint
    flat = x.data.reshape(x.channels, -1)
    if idx.size * 8 > flat.shape[1]:
        # Dense instance coverage: a full argmax pass beats column gathers.
        sem = _argmax_channels(flat).ravel()[idx]
    else:
        sem = _argmax_channels(np.ascontiguousarray(flat[:, idx]))
    slots = pmap.ids.reshape(-1)[idx].astype(np.int64) - (n_stuff + 1)
    return np.bincount(
        slots * n_cat + sem.astype(np.int64), minlength=n_slots * n_cat
    ).reshape(n_slots, n_cat)


def _apply_class_rules(
    pmap: PanopticMap,
    survivors: tuple[InstanceProposal, ...],
    slot_hists: np.ndarray,
    categories: CategorySet,
) -> PanopticMap:
    n_stuff = categories.n_stuff
    max_id = max(n_stuff + len(survivors), int(pmap.ids.max(initial=0)))
    remap: dict[int, int] = {}
    for i, prop in enumerate(survivors):
        hist = slot_hists[i]
        total = int(hist.sum())
        if total == 0:
            continue
        mode = int(np.argmax(hist))  # ties break toward the lower category
        if mode == prop.category:
            continue
        if hist[mode] / total > 0.5 and categories.is_stuff(mode):
            remap[instance_segment_id(n_stuff, i)] = stuff_segment_id(mode)

    if not remap:
        return pmap
    lut = np.arange(max_id + 1, dtype=np.uint32)
    for src, dst in remap.items():
        lut[src] = dst
    ids = lut[pmap.ids]
    table = {}
    for sid, (area, bbox) in segment_geometry(ids).items():
        if sid <= n_stuff:
            table[sid] = SegmentInfo(sid - 1, area, bbox)
        else:
            slot = sid - n_stuff - 1
            table[sid] = SegmentInfo(survivors[slot].category, area, bbox)
    return PanopticMap(ids, table)


def suppress_small_stuff(
    pmap: PanopticMap, min_area: int, categories: CategorySet
) -> PanopticMap:
    """Void out stuff segments smaller than ``min_area``; things untouched."""
    if min_area < 0:
        raise ValueError(f"min_area must be non-negative, got {min_area}")
    doomed = [
        sid
        for sid, info in pmap.segments.items()
        if categories.is_stuff(info.category) and info.area < min_area
    ]
    if not doomed:
        return pmap
    max_id = int(pmap.ids.max(initial=0))
    lut = np.arange(max_id + 1, dtype=np.uint32)
    lut[[sid for sid in doomed if sid <= max_id]] = VOID_ID
    ids = lut[pmap.ids]
    table = {sid: info for sid, info in pmap.segments.items() if sid not in set(doomed)}
    return PanopticMap(ids, table)


def run_fusion(
    x: LogitTensor,
    categories: CategorySet,
    proposals: list[InstanceProposal],
    *,
    nms_iou: float = 0.5,
    min_score: float = 0.6,
    overlap_threshold: float = 0.3,
    binarize_threshold: float = 0.5,
    min_stuff_area: int = 0,
    enable_unknown: bool = True,
    workspace: dict | None = None,
) -> PanopticMap:
    """Full inference pipeline: prune, fuse, decode, reassign, suppress.

    ``workspace`` enables fused-buffer reuse across same-shaped calls in a
    batch loop (see :func:`build_panoptic_logits`); the returned map never
    aliases it.
    """
    kept = score_filter(class_agnostic_nms(proposals, nms_iou), min_score)
    pruned = canvas_paste(
        kept, x.height, x.width, overlap_threshold, binarize_threshold
    )
    z = build_panoptic_logits(x, categories, pruned, enable_unknown, workspace)
    pmap = decode(z)
    # Same result as assign_instance_classes(channel_argmax(x)); the argmax
    # is evaluated only at decoded instance pixels.
    hists = _instance_mode_histograms(
        pmap, x, categories.n_stuff, pruned.n_instances, categories.total
    )
    pmap = _apply_class_rules(pmap, pruned.survivors, hists, categories)
    if min_stuff_area > 0:
        pmap = suppress_small_stuff(pmap, min_stuff_area, categories)
    return pmap
