"""Logit-level panoptic fusion, a combine baseline, and PQ/mIoU evaluation."""

from .codec import CodecError, decode_png, encode_png
from .combine import combine, run_combine
from .fusion import (
    PanopticLogits,
    assign_instance_classes,
    build_panoptic_logits,
    decode,
    instance_mask_map,
    instance_semantic_map,
    run_fusion,
    suppress_small_stuff,
)
from .harness import SceneSpec, bench, generate, oracle_pq, synthesize_inputs
from .losses import PanopticTarget, build_target, panoptic_ce, roi_ce
from .metrics import EvalReport, PQStat, aggregate, match_and_score, miou
from .panoptic import VOID_ID, PanopticMap, SegmentInfo
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
    MaskPatch,
    average_logit_maps,
    bilinear_resize,
    channel_argmax,
    channel_softmax,
    load_tensor,
    save_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "CategorySet",
    "CodecError",
    "EvalReport",
    "InstanceProposal",
    "LogitTensor",
    "MaskPatch",
    "PQStat",
    "PanopticLogits",
    "PanopticMap",
    "PanopticTarget",
    "PrunedSet",
    "SceneSpec",
    "SegmentInfo",
    "VOID_ID",
    "aggregate",
    "assign_instance_classes",
    "average_logit_maps",
    "bench",
    "bilinear_resize",
    "build_panoptic_logits",
    "build_target",
    "canvas_paste",
    "channel_argmax",
    "channel_softmax",
    "class_agnostic_nms",
    "combine",
    "decode",
    "decode_png",
    "encode_png",
    "generate",
    "instance_mask_map",
    "instance_semantic_map",
    "load_tensor",
    "match_and_score",
    "miou",
    "oracle_pq",
    "panoptic_ce",
    "roi_ce",
    "run_combine",
    "run_fusion",
    "save_tensor",
    "score_filter",
    "suppress_small_stuff",
    "synthesize_inputs",
]
