"""Panoptic quality (PQ/SQ/RQ) and mean-IoU evaluation.

Matching follows the standard panoptic protocol: candidate pairs share a
category, IoU excludes ground-truth void pixels from both intersection and
union, and pairs with IoU strictly above 0.5 are true positives (which
makes every match unique).  Unmatched predictions lying mostly on
ground-truth void are discarded rather than counted as false positives;
crowd ground-truth segments never match and never count as false
negatives.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .panoptic import VOID_ID, PanopticMap
from .tensor import CategorySet

__all__ = [
    "ClassStats",
    "EvalReport",
    "PQStat",
    "aggregate",
    "match_and_score",
    "miou",
    "miou_from_confusion",
    "semantic_confusion",
]


@dataclass
class ClassStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "ClassStats") -> "ClassStats":
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def participating(self) -> bool:
        return self.tp + self.fp + self.fn > 0


class PQStat:
    """Per-category match counters, mergeable across images."""

    def __init__(self) -> None:
        self.per_cat: defaultdict[int, ClassStats] = defaultdict(ClassStats)

    def __getitem__(self, category: int) -> ClassStats:
        return self.per_cat[category]

    def __iadd__(self, other: "PQStat") -> "PQStat":
        for cat, stats in other.per_cat.items():
            self.per_cat[cat] += stats
        return self


def match_and_score(
    pred: PanopticMap, gt: PanopticMap, categories: CategorySet
) -> PQStat:
    """Segment matching and TP/FP/FN counting for one image pair."""
    if pred.ids.shape != gt.ids.shape:
        raise ValueError(
            f"prediction shape {pred.ids.shape} != ground truth {gt.ids.shape}"
        )
    for name, pmap in (("prediction", pred), ("ground truth", gt)):
        for sid, info in pmap.segments.items():
            if not 0 <= info.category < categories.total:
                raise ValueError(f"{name} segment {sid}: bad category {info.category}")

    # Joint histogram of (pred id, gt id) pixel pairs.
    keys = (pred.ids.astype(np.uint64) << np.uint64(32)) | gt.ids.astype(np.uint64)
    uniq, counts = np.unique(keys, return_counts=True)
    pair_count = {
        (int(k >> np.uint64(32)), int(k & np.uint64(0xFFFFFFFF))): int(c)
        for k, c in zip(uniq, counts)
    }
    pred_void_overlap: dict[int, int] = defaultdict(int)
    for (pid, gid), n in pair_count.items():
        if gid == VOID_ID:
            pred_void_overlap[pid] += n

    stats = PQStat()
    crowd_ids = {sid for sid, info in gt.segments.items() if info.iscrowd}
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for (pid, gid), inter in sorted(pair_count.items()):
        if pid == VOID_ID or gid == VOID_ID or gid in crowd_ids:
            continue
        pinfo = pred.segments[pid]
        ginfo = gt.segments[gid]
        if pinfo.category != ginfo.category:
            continue
        pred_valid_area = pinfo.area - pred_void_overlap.get(pid, 0)
        union = pred_valid_area + ginfo.area - inter
        iou = inter / union
        if iou > 0.5:
            assert pid not in matched_pred and gid not in matched_gt
            matched_pred.add(pid)
            matched_gt.add(gid)
            cat = stats[ginfo.category]
            cat.tp += 1
            cat.iou_sum += iou

    for gid, info in gt.segments.items():
        if gid in matched_gt or gid in crowd_ids or info.area == 0:
            continue
        stats[info.category].fn += 1
    for pid, info in pred.segments.items():
        if pid in matched_pred or info.area == 0:
            continue
        if pred_void_overlap.get(pid, 0) / info.area > 0.5:
            continue  # mostly on ground-truth void: discarded, not an FP
        stats[info.category].fp += 1
    return stats


@dataclass
class ClassReport:
    iou_sum: float
    tp: int
    fp: int
    fn: int
    pq: float
    sq: float
    rq: float


@dataclass
class EvalReport:
    """Aggregated metrics; per-class entries cover participating categories."""

    per_class: dict[int, ClassReport]
    pq: float
    sq: float
    rq: float
    pq_th: float
    pq_st: float
    miou: float | None = None
    n_images: int = 0

    def to_dict(self, categories: CategorySet | None = None) -> dict:
        per_class = []
        for cat in sorted(self.per_class):
            row = self.per_class[cat]
            entry = {
                "index": cat,
                "iou_sum": row.iou_sum,
                "tp": row.tp,
                "fp": row.fp,
                "fn": row.fn,
                "pq": row.pq,
                "sq": row.sq,
                "rq": row.rq,
            }
            if categories is not None:
                entry["name"] = categories.names[cat]
                entry["isthing"] = bool(categories.is_thing[cat])
            per_class.append(entry)
        return {
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "pq_th": self.pq_th,
            "pq_st": self.pq_st,
            "miou": self.miou,
            "n_images": self.n_images,
            "per_class": per_class,
        }


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def aggregate(
    stats: PQStat | Iterable[PQStat],
    categories: CategorySet,
    miou: float | None = None,
    n_images: int = 0,
) -> EvalReport:
    """Fold per-image counters into per-class and aggregate PQ/SQ/RQ.

    Per class: ``sq = iou_sum / tp`` (0 when tp is 0), ``rq = tp / (tp +
    fp/2 + fn/2)``, ``pq = iou_sum / (tp + fp/2 + fn/2)``.  Aggregates are
    unweighted means over categories with any TP/FP/FN; categories silent
    in both prediction and ground truth are excluded.
    """
    total = PQStat()
    if isinstance(stats, PQStat):
        total += stats
    else:
        for s in stats:
            total += s

    per_class: dict[int, ClassReport] = {}
    for cat, s in total.per_cat.items():
        if not s.participating:
            continue
        denom = s.tp + 0.5 * s.fp + 0.5 * s.fn
        sq = s.iou_sum / s.tp if s.tp else 0.0
        rq = s.tp / denom if denom else 0.0
        pq = s.iou_sum / denom if denom else 0.0
        per_class[cat] = ClassReport(s.iou_sum, s.tp, s.fp, s.fn, pq, sq, rq)

    def mean_over(cats: list[int], attr: str) -> float:
        return _mean([getattr(per_class[c], attr) for c in cats])

    cats = sorted(per_class)
    things = [c for c in cats if categories.is_thing[c]]
    stuffs = [c for c in cats if not categories.is_thing[c]]
    return EvalReport(
        per_class=per_class,
        pq=mean_over(cats, "pq"),
        sq=mean_over(cats, "sq"),
        rq=mean_over(cats, "rq"),
        pq_th=mean_over(things, "pq"),
        pq_st=mean_over(stuffs, "pq"),
        miou=miou,
        n_images=n_images,
    )


def semantic_confusion(
    pred_sem: np.ndarray, gt_sem: np.ndarray, n_categories: int
) -> np.ndarray:
    """Confusion counts, ``cm[gt, pred]``; ground-truth void is excluded.

    Shape is ``(C, C + 1)``: the extra prediction column collects pixels the
    prediction left void, which still count against recall.
    """
    if pred_sem.shape != gt_sem.shape:
        raise ValueError(f"shape mismatch: {pred_sem.shape} vs {gt_sem.shape}")
    gt = gt_sem.astype(np.int64).ravel()
    pr = pred_sem.astype(np.int64).ravel()
    valid = (gt >= 0) & (gt < n_categories)
    gt = gt[valid]
    pr = pr[valid]
    pr = np.where((pr < 0) | (pr >= n_categories), n_categories, pr)
    cm = np.bincount(
        gt * (n_categories + 1) + pr, minlength=n_categories * (n_categories + 1)
    )
    return cm.reshape(n_categories, n_categories + 1)


def miou_from_confusion(cm: np.ndarray) -> tuple[dict[int, float], float]:
    """Per-category IoU and the mean over categories present in ground truth."""
    n = cm.shape[0]
    per_class: dict[int, float] = {}
    present: list[float] = []
    for c in range(n):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        denom = tp + fp + fn
        if cm[c].sum() == 0:
            continue
        iou = tp / denom if denom else 0.0
        per_class[c] = iou
        present.append(iou)
    return per_class, _mean(present)


def miou(
    pred_sem: np.ndarray, gt_sem: np.ndarray, categories: CategorySet
) -> tuple[dict[int, float], float]:
    """Single-image convenience wrapper over the confusion-matrix IoU."""
    return miou_from_confusion(semantic_confusion(pred_sem, gt_sem, categories.total))
