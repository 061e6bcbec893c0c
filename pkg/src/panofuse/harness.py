"""Synthetic scenes, noisy-input synthesis, brute-force oracles, benchmarks.

Everything here is seed-deterministic and platform-independent: all draws
come from numpy's Philox counter-based generator, and shapes are rasterized
with exact integer/float arithmetic.

Scenes are built so that clean inputs (no noise, no jitter) round-trip the
whole fusion pipeline exactly:

* instance shapes keep both visible-bbox sides at or below ``max_side``
  (default 14), the regime where a 28x28 nearest-neighbor mask patch
  bilinear-resizes back to the exact visible mask;
* pairwise visible-bbox IoU stays at or below 0.45, so class-agnostic NMS
  at 0.5 never suppresses a true instance;
* proposal scores are assigned in decreasing order of ground-truth paint
  order, so fused instance ids line up with ground-truth ids.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .combine import run_combine
from .fusion import run_fusion
from .metrics import ClassReport, EvalReport
from .panoptic import (
    VOID_ID,
    PanopticMap,
    instance_segment_id,
    segment_geometry,
    stuff_segment_id,
)
from .pruning import InstanceProposal
from .tensor import BBox, CategorySet, LogitTensor, MaskPatch

__all__ = [
    "MASK_LOGIT",
    "SceneSpec",
    "ShapeSpec",
    "bench",
    "generate",
    "generate_occlusion_scene",
    "oracle_pq",
    "synthesize_inputs",
]

MASK_LOGIT = 6.0

_MAX_PLACEMENT_ATTEMPTS = 200
_MIN_INSTANCE_AREA = 16
_MAX_BOX_IOU = 0.45


@dataclass(frozen=True)
class ShapeSpec:
    """One ground-truth instance: a rectangle or ellipse in a pixel box."""

    kind: str  # "rect" | "ellipse"
    category: int
    y0: int
    x0: int
    height: int
    width: int

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "category": self.category,
            "y0": self.y0,
            "x0": self.x0,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(d["kind"], int(d["category"]), int(d["y0"]), int(d["x0"]),
                   int(d["height"]), int(d["width"]))


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic description of a synthetic scene."""

    height: int
    width: int
    n_stuff: int
    n_thing: int
    seed: int
    band_rows: tuple[int, ...]  # n_stuff + 1 boundaries, 0 .. height
    band_categories: tuple[int, ...]
    instances: tuple[ShapeSpec, ...]

    def categories(self) -> CategorySet:
        return CategorySet.synthetic(self.n_stuff, self.n_thing)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "n_stuff": self.n_stuff,
            "n_thing": self.n_thing,
            "seed": self.seed,
            "band_rows": list(self.band_rows),
            "band_categories": list(self.band_categories),
            "instances": [inst.to_dict() for inst in self.instances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            height=int(d["height"]),
            width=int(d["width"]),
            n_stuff=int(d["n_stuff"]),
            n_thing=int(d["n_thing"]),
            seed=int(d["seed"]),
            band_rows=tuple(int(v) for v in d["band_rows"]),
            band_categories=tuple(int(v) for v in d["band_categories"]),
            instances=tuple(ShapeSpec.from_dict(e) for e in d["instances"]),
        )


def _shape_mask(inst: ShapeSpec, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    y1 = inst.y0 + inst.height
    x1 = inst.x0 + inst.width
    if inst.kind == "rect":
        mask[inst.y0:y1, inst.x0:x1] = True
        return mask
    cy = inst.y0 + (inst.height - 1) / 2.0
    cx = inst.x0 + (inst.width - 1) / 2.0
    ry = inst.height / 2.0
    rx = inst.width / 2.0
    yy = (np.arange(inst.y0, y1)[:, None] - cy) / ry
    xx = (np.arange(inst.x0, x1)[None, :] - cx) / rx
    mask[inst.y0:y1, inst.x0:x1] = yy * yy + xx * xx <= 1.0
    return mask


def _paint(scene: SceneSpec) -> np.ndarray:
    """Ground-truth id map: stuff bands, then instances in depth order."""
    ids = np.zeros((scene.height, scene.width), dtype=np.uint32)
    for b in range(len(scene.band_categories)):
        r0, r1 = scene.band_rows[b], scene.band_rows[b + 1]
        ids[r0:r1, :] = stuff_segment_id(scene.band_categories[b])
    for j, inst in enumerate(scene.instances):
        mask = _shape_mask(inst, scene.height, scene.width)
        ids[mask] = instance_segment_id(scene.n_stuff, j)
    return ids


def _ground_truth(scene: SceneSpec) -> PanopticMap:
    ids = _paint(scene)
    categories: dict[int, int] = {
        stuff_segment_id(k): k for k in range(scene.n_stuff)
    }
    for j, inst in enumerate(scene.instances):
        categories[instance_segment_id(scene.n_stuff, j)] = inst.category
    return PanopticMap.from_ids(ids, categories)


def generate(
    seed: int,
    dims: tuple[int, int],
    n_stuff: int,
    n_thing: int,
    k_instances: int,
    max_side: int = 14,
) -> tuple[SceneSpec, PanopticMap, np.ndarray]:
    """Generate a scene plus its ground-truth panoptic and semantic maps.

    Deterministic in ``seed``.  Every instance keeps at least 16 visible
    pixels, and visible bounding boxes overlap pairwise by at most IoU 0.45.
    """
    h, w = int(dims[0]), int(dims[1])
    if n_stuff < 1:
        raise ValueError("need at least one stuff category")
    if k_instances < 0:
        raise ValueError("k_instances must be non-negative")
    if k_instances > 0 and n_thing < 1:
        raise ValueError("instances require at least one thing category")
    if h < max(2, n_stuff) or w < 2:
        raise ValueError(f"dims {dims} too small for {n_stuff} stuff bands")
    min_side = 6
    side_cap = min(max_side, h - 2, w - 2)
    if k_instances > 0 and side_cap < min_side:
        raise ValueError(f"dims {dims} too small to place instances")

    rng = np.random.Generator(np.random.Philox(seed))
    if n_stuff == 1:
        cuts: list[int] = []
    else:
        cuts = sorted(int(v) + 1 for v in rng.choice(h - 1, n_stuff - 1, replace=False))
    band_rows = tuple([0] + cuts + [h])
    band_categories = tuple(int(v) for v in rng.permutation(n_stuff))

    instances: tuple[ShapeSpec, ...] = ()
    for _ in range(_MAX_PLACEMENT_ATTEMPTS):
        drawn = []
        for _ in range(k_instances):
            kind = "rect" if rng.integers(2) == 0 else "ellipse"
            cat = n_stuff + int(rng.integers(n_thing))
            ih = int(rng.integers(min_side, side_cap + 1))
            iw = int(rng.integers(min_side, side_cap + 1))
            iy = int(rng.integers(0, h - ih + 1))
            ix = int(rng.integers(0, w - iw + 1))
            drawn.append(ShapeSpec(kind, cat, iy, ix, ih, iw))
        candidate = SceneSpec(h, w, n_stuff, n_thing, seed, band_rows,
                              band_categories, tuple(drawn))
        if _placement_ok(candidate):
            instances = candidate.instances
            break
    else:
        raise ValueError(
            f"could not place {k_instances} instances in {dims} "
            f"after {_MAX_PLACEMENT_ATTEMPTS} attempts"
        )

    scene = SceneSpec(h, w, n_stuff, n_thing, seed, band_rows,
                      band_categories, instances)
    gt = _ground_truth(scene)
    return scene, gt, gt.to_semantic()


def _placement_ok(scene: SceneSpec) -> bool:
    if not scene.instances:
        return True
    ids = _paint(scene)
    geometry = segment_geometry(ids)
    boxes = []
    for j in range(len(scene.instances)):
        sid = instance_segment_id(scene.n_stuff, j)
        if sid not in geometry or geometry[sid][0] < _MIN_INSTANCE_AREA:
            return False
        bx, by, bw, bh = geometry[sid][1]
        boxes.append(BBox(bx, by, bx + bw, by + bh))
    for a in range(len(boxes)):
        for b in range(a + 1, len(boxes)):
            if boxes[a].iou(boxes[b]) > _MAX_BOX_IOU:
                return False
    return True


def synthesize_inputs(
    scene: SceneSpec,
    logit_scale: float = 4.0,
    noise_sigma: float = 0.0,
    box_jitter: float = 0.0,
    seed: int = 0,
    dtype: np.dtype | type = np.float64,
) -> tuple[LogitTensor, list[InstanceProposal]]:
    """Semantic logits and detection proposals for a scene.

    Logits are the one-hot ground-truth category scaled by ``logit_scale``
    plus optional Gaussian noise.  Proposals carry the visible bounding box
    (optionally jittered by ``+-box_jitter`` of its side lengths), a 28x28
    nearest-neighbor rasterization of the visible mask at ``+-6`` logits,
    and scores drawn uniformly from [0.7, 1.0] assigned in descending order.
    """
    if logit_scale <= 0:
        raise ValueError(f"logit_scale must be positive, got {logit_scale}")
    dtype = np.dtype(dtype)
    h, w = scene.height, scene.width
    n_cat = scene.n_stuff + scene.n_thing
    ids = _paint(scene)

    cat_lut = np.zeros(instance_segment_id(scene.n_stuff, len(scene.instances)), dtype=np.int64)
    for k in range(scene.n_stuff):
        cat_lut[stuff_segment_id(k)] = k
    for j, inst in enumerate(scene.instances):
        cat_lut[instance_segment_id(scene.n_stuff, j)] = inst.category
    sem = cat_lut[np.minimum(ids, len(cat_lut) - 1)]

    logits = np.zeros((n_cat, h, w), dtype=dtype)
    flat = logits.reshape(n_cat, -1)
    flat[sem.ravel(), np.arange(h * w)] = logit_scale

    rng = np.random.Generator(np.random.Philox(seed))
    if noise_sigma > 0:
        noise_dtype = np.float32 if dtype == np.float32 else np.float64
        for c in range(n_cat):
            logits[c] += noise_sigma * rng.standard_normal((h, w), dtype=noise_dtype)

    k = len(scene.instances)
    scores = np.sort(rng.uniform(0.7, 1.0, size=k))[::-1] if k else np.empty(0)
    geometry = segment_geometry(ids)
    proposals: list[InstanceProposal] = []
    for j, inst in enumerate(scene.instances):
        sid = instance_segment_id(scene.n_stuff, j)
        bx, by, bw, bh = geometry[sid][1]
        x0, y0, x1, y1 = float(bx), float(by), float(bx + bw), float(by + bh)
        if box_jitter > 0:
            dx = rng.uniform(-1.0, 1.0, size=4)
            x0 += dx[0] * box_jitter * bw
            y0 += dx[1] * box_jitter * bh
            x1 += dx[2] * box_jitter * bw
            y1 += dx[3] * box_jitter * bh
            x1 = max(x1, x0)
            y1 = max(y1, y0)
        box = BBox(x0, y0, x1, y1)
        patch = _rasterize_patch(ids == sid, box)
        proposals.append(
            InstanceProposal(box, inst.category, float(scores[j]), MaskPatch(patch))
        )
    return LogitTensor(logits), proposals


def _rasterize_patch(visible: np.ndarray, box: BBox) -> np.ndarray:
    """Box-relative nearest-neighbor sample of a visible mask, at +-6 logits."""
    from .tensor import rasterize_box

    h, w = visible.shape
    y0, y1, x0, x1 = rasterize_box(box, h, w)
    if y1 <= y0 or x1 <= x0:
        return np.full((28, 28), -MASK_LOGIT)
    ys = y0 + np.minimum(
        ((np.arange(28) + 0.5) * (y1 - y0) / 28).astype(np.intp), y1 - y0 - 1
    )
    xs = x0 + np.minimum(
        ((np.arange(28) + 0.5) * (x1 - x0) / 28).astype(np.intp), x1 - x0 - 1
    )
    return np.where(visible[np.ix_(ys, xs)], MASK_LOGIT, -MASK_LOGIT)


def oracle_pq(
    pred: PanopticMap, gt: PanopticMap, categories: CategorySet
) -> EvalReport:
    """Brute-force PQ/SQ/RQ: pairwise pixel-count IoU with no indexing tricks.

    Semantics match :func:`panofuse.metrics.match_and_score` followed by
    :func:`panofuse.metrics.aggregate`, implemented independently as plain
    loops over segment masks.
    """
    if pred.ids.shape != gt.ids.shape:
        raise ValueError(
            f"prediction shape {pred.ids.shape} != ground truth {gt.ids.shape}"
        )
    gt_void = gt.ids == VOID_ID
    pred_masks = {
        pid: pred.ids == pid for pid, info in pred.segments.items() if info.area > 0
    }

    iou_sum: dict[int, float] = {}
    tp: dict[int, int] = {}
    fp: dict[int, int] = {}
    fn: dict[int, int] = {}

    def bump(d: dict, cat: int, value) -> None:
        d[cat] = d.get(cat, 0) + value

    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for gid in sorted(gt.segments):
        ginfo = gt.segments[gid]
        if ginfo.iscrowd or ginfo.area == 0:
            continue
        gmask = gt.ids == gid
        for pid in sorted(pred_masks):
            pinfo = pred.segments[pid]
            if pinfo.category != ginfo.category or pid in matched_pred:
                continue
            pmask = pred_masks[pid]
            inter = int(np.count_nonzero(pmask & gmask))
            pred_valid = int(np.count_nonzero(pmask & ~gt_void))
            union = pred_valid + ginfo.area - inter
            iou = inter / union if union > 0 else 0.0
            if iou > 0.5:
                matched_pred.add(pid)
                matched_gt.add(gid)
                bump(tp, ginfo.category, 1)
                bump(iou_sum, ginfo.category, iou)
                break

    for gid, ginfo in gt.segments.items():
        if gid in matched_gt or ginfo.iscrowd or ginfo.area == 0:
            continue
        bump(fn, ginfo.category, 1)
    for pid, pmask in pred_masks.items():
        if pid in matched_pred:
            continue
        info = pred.segments[pid]
        void_inter = int(np.count_nonzero(pmask & gt_void))
        if void_inter / info.area > 0.5:
            continue
        bump(fp, info.category, 1)

    per_class: dict[int, ClassReport] = {}
    for cat in sorted(set(tp) | set(fp) | set(fn)):
        t = tp.get(cat, 0)
        f_p = fp.get(cat, 0)
        f_n = fn.get(cat, 0)
        isum = iou_sum.get(cat, 0.0)
        if t + f_p + f_n == 0:
            continue
        denom = t + 0.5 * f_p + 0.5 * f_n
        per_class[cat] = ClassReport(
            iou_sum=isum,
            tp=t,
            fp=f_p,
            fn=f_n,
            pq=isum / denom if denom else 0.0,
            sq=isum / t if t else 0.0,
            rq=t / denom if denom else 0.0,
        )

    def mean(vals: list[float]) -> float:
        return sum(vals) / len(vals) if vals else 0.0

    cats = sorted(per_class)
    things = [c for c in cats if categories.is_thing[c]]
    stuffs = [c for c in cats if not categories.is_thing[c]]
    return EvalReport(
        per_class=per_class,
        pq=mean([per_class[c].pq for c in cats]),
        sq=mean([per_class[c].sq for c in cats]),
        rq=mean([per_class[c].rq for c in cats]),
        pq_th=mean([per_class[c].pq for c in things]),
        pq_st=mean([per_class[c].pq for c in stuffs]),
        miou=None,
        n_images=1,
    )


def generate_occlusion_scene(
    seed: int, dims: tuple[int, int] = (48, 64)
) -> tuple[CategorySet, PanopticMap, LogitTensor, list[InstanceProposal]]:
    """A stacked-object scene where the combine heuristic loses an object.

    A large, high-scoring detection (its mask covering its whole box, the
    way detectors segment occluding surfaces) fully covers a smaller
    object of another category sitting on top of it.  Ground truth keeps
    both objects; clean one-hot semantic logits let the fusion head recover
    the small one while confidence-ordered pasting drops it.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    h, w = dims
    cats = CategorySet.synthetic(2, 2)

    big_h = int(rng.integers(h // 2, h - 4))
    big_w = int(rng.integers(w // 2, w - 4))
    big_y = int(rng.integers(0, h - big_h + 1))
    big_x = int(rng.integers(0, w - big_w + 1))
    # Small object nested fully inside, kept under 40% of the big box so
    # class-agnostic NMS at 0.5 keeps both detections.
    small_h = max(4, min(big_h - 4, int(big_h * 0.55)))
    small_w = max(4, min(big_w - 4, int(big_w * 0.55)))
    while small_h * small_w > 0.4 * big_h * big_w:
        if small_h >= small_w and small_h > 4:
            small_h -= 1
        elif small_w > 4:
            small_w -= 1
        else:
            break
    small_y = big_y + int(rng.integers(1, big_h - small_h))
    small_x = big_x + int(rng.integers(1, big_w - small_w))

    ids = np.zeros((h, w), dtype=np.uint32)
    ids[: h // 2, :] = stuff_segment_id(0)
    ids[h // 2 :, :] = stuff_segment_id(1)
    big_id = instance_segment_id(2, 0)
    small_id = instance_segment_id(2, 1)
    ids[big_y : big_y + big_h, big_x : big_x + big_w] = big_id
    ids[small_y : small_y + small_h, small_x : small_x + small_w] = small_id
    gt = PanopticMap.from_ids(ids, {stuff_segment_id(0): 0, stuff_segment_id(1): 1,
                                    big_id: 2, small_id: 3})

    sem = gt.to_semantic()
    logits = np.zeros((4, h, w), dtype=np.float64)
    flat = logits.reshape(4, -1)
    flat[sem.ravel(), np.arange(h * w)] = 4.0

    full_patch = MaskPatch(np.full((28, 28), MASK_LOGIT))
    proposals = [
        InstanceProposal(
            BBox(big_x, big_y, big_x + big_w, big_y + big_h), 2, 0.95, full_patch
        ),
        InstanceProposal(
            BBox(small_x, small_y, small_x + small_w, small_y + small_h),
            3,
            0.8,
            full_patch,
        ),
    ]
    return cats, gt, LogitTensor(logits), proposals


def bench(
    pipeline: str,
    dims: tuple[int, int],
    n_stuff: int,
    k_instances: int,
    repeats: int,
    n_thing: int = 5,
    seed: int = 0,
    min_stuff_area: int = 2048,
) -> dict:
    """Wall-clock timing of one post-network pipeline, logits to final map.

    Scene synthesis is excluded from the timed region; the run is
    single-threaded.  Reports the mean and min over ``repeats``.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if pipeline not in ("fusion", "combine"):
        raise ValueError(f"unknown pipeline {pipeline!r}")
    h, w = int(dims[0]), int(dims[1])
    max_side = max(8, min(h, w) // 4)
    scene, _, _ = generate(seed, (h, w), n_stuff, n_thing, k_instances,
                           max_side=max_side)
    x, proposals = synthesize_inputs(
        scene, logit_scale=4.0, noise_sigma=1.0, seed=seed + 1, dtype=np.float32
    )
    categories = scene.categories()

    workspace: dict = {}
    times: list[float] = []
    for _ in range(repeats):
        start = time.perf_counter()
        if pipeline == "fusion":
            run_fusion(x, categories, proposals, min_stuff_area=min_stuff_area,
                       workspace=workspace)
        else:
            run_combine(x, categories, proposals, min_stuff_area=min_stuff_area)
        times.append(time.perf_counter() - start)
    return {
        "pipeline": pipeline,
        "height": h,
        "width": w,
        "n_stuff": n_stuff,
        "n_thing": n_thing,
        "k_instances": k_instances,
        "repeats": repeats,
        "mean_s": float(np.mean(times)),
        "min_s": float(min(times)),
        "times_s": [float(t) for t in times],
    }
