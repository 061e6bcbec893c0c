"""Command-line front end: fuse, combine, eval, synth, bench, render.

Exit codes: 0 on success, 1 on internal failure, 2 on usage or input
errors.  All subcommands are deterministic given their flags (bench timing
values excepted).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .codec import (
    load_categories,
    read_panoptic_dir,
    save_categories,
    write_panoptic_dir,
)
from .combine import run_combine
from .fusion import run_fusion
from .harness import bench, generate, synthesize_inputs
from .metrics import PQStat, aggregate, match_and_score, miou_from_confusion, semantic_confusion
from .pruning import load_proposals, save_proposals
from .tensor import LogitTensor, load_tensor, save_tensor

STUFF_AREA_PRESETS = {"none": 0, "coco": 4096, "cityscapes": 2048, "driving": 2048}


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        dims = (int(h), int(w))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    if dims[0] < 1 or dims[1] < 1:
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return dims


def _add_threshold_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nms-iou", type=float, default=0.5, help="box NMS IoU threshold")
    p.add_argument("--min-score", type=float, default=0.6,
                   help="strict lower score bound for detections")
    p.add_argument("--overlap", type=float, default=0.3,
                   help="intersection-over-self pruning threshold")
    p.add_argument("--min-stuff-area", type=int, default=None,
                   help="void out stuff segments below this area (overrides preset)")
    p.add_argument("--stuff-area-preset", choices=sorted(STUFF_AREA_PRESETS),
                   default="none", help="named stuff-area threshold preset")


def _resolve_stuff_area(args: argparse.Namespace) -> int:
    if args.min_stuff_area is not None:
        return args.min_stuff_area
    return STUFF_AREA_PRESETS[args.stuff_area_preset]


def _load_inputs(args: argparse.Namespace):
    raw = load_tensor(args.logits)
    if raw.ndim != 3:
        raise ValueError(f"{args.logits}: expected a 3-D logit tensor, got {raw.ndim}-D")
    x = LogitTensor(raw)
    categories = load_categories(args.categories)
    if x.channels != categories.total:
        raise ValueError(
            f"logit tensor has {x.channels} channels but {args.categories} "
            f"defines {categories.total} categories"
        )
    proposals = load_proposals(args.proposals)
    return x, categories, proposals


def _cmd_fuse(args: argparse.Namespace) -> int:
    x, categories, proposals = _load_inputs(args)
    pmap = run_fusion(
        x,
        categories,
        proposals,
        nms_iou=args.nms_iou,
        min_score=args.min_score,
        overlap_threshold=args.overlap,
        min_stuff_area=_resolve_stuff_area(args),
        enable_unknown=args.unknown == "on",
    )
    index = write_panoptic_dir(args.out, [(args.image_id, "panoptic.png", pmap)], categories)
    print(index.parent)
    return 0


def _cmd_combine(args: argparse.Namespace) -> int:
    x, categories, proposals = _load_inputs(args)
    pmap = run_combine(
        x,
        categories,
        proposals,
        nms_iou=args.nms_iou,
        min_score=args.min_score,
        paste_overlap=args.overlap,
        overlap_threshold=args.combine_overlap,
        min_stuff_area=_resolve_stuff_area(args),
    )
    index = write_panoptic_dir(args.out, [(args.image_id, "panoptic.png", pmap)], categories)
    print(index.parent)
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    categories = load_categories(args.categories)
    _, gt_items = read_panoptic_dir(args.gt)
    _, pred_items = read_panoptic_dir(args.pred)
    pred_by_id = {image_id: pmap for image_id, _, pmap in pred_items}

    pairs = []
    for image_id, name, gt_map in gt_items:
        if image_id not in pred_by_id:
            raise ValueError(f"no prediction for image {image_id} ({name})")
        pairs.append((pred_by_id[image_id], gt_map))

    def score(pair):
        pred_map, gt_map = pair
        stats = match_and_score(pred_map, gt_map, categories)
        cm = semantic_confusion(
            pred_map.to_semantic(), gt_map.to_semantic(), categories.total
        )
        return stats, cm

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(score, pairs))
    else:
        results = [score(p) for p in pairs]

    total = PQStat()
    confusion = np.zeros((categories.total, categories.total + 1), dtype=np.int64)
    for stats, cm in results:  # ordered reduce keeps the report deterministic
        total += stats
        confusion += cm
    _, mean_iou = miou_from_confusion(confusion)
    report = aggregate(total, categories, miou=mean_iou, n_images=len(pairs))
    json.dump(report.to_dict(categories), sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    h, w = args.dims
    scene, gt_map, _ = generate(
        args.seed, (h, w), args.stuff, args.things, args.instances
    )
    x, proposals = synthesize_inputs(
        scene,
        logit_scale=args.scale,
        noise_sigma=args.noise,
        box_jitter=args.jitter,
        seed=args.seed + 1,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    categories = scene.categories()
    save_tensor(out / "logits.upst", x.data)
    save_proposals(out / "proposals.json", proposals)
    save_categories(out / "categories.json", categories)
    with open(out / "scene.json", "w", encoding="utf-8") as fh:
        json.dump(scene.to_dict(), fh, indent=2, sort_keys=True)
    write_panoptic_dir(out / "gt", [(args.image_id, "panoptic.png", gt_map)], categories)
    print(out)
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    result = bench(
        args.pipeline,
        args.dims,
        n_stuff=args.stuff,
        k_instances=args.instances,
        repeats=args.repeats,
        n_thing=args.things,
        seed=args.seed,
    )
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _palette_color(sid: int) -> tuple[int, int, int]:
    # splitmix64-style mixing: stable across runs and platforms.
    mask = (1 << 64) - 1
    z = (sid + 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    z ^= z >> 31
    return (40 + z % 216, 40 + (z >> 8) % 216, 40 + (z >> 16) % 216)


def _cmd_render(args: argparse.Namespace) -> int:
    import io

    from PIL import Image

    from .codec import CodecError

    data = Path(args.png).read_bytes()
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except OSError as exc:
        raise CodecError(f"not a decodable PNG image: {exc}") from exc
    if img.mode != "RGB":
        raise CodecError(f"expected an 8-bit RGB PNG, got mode {img.mode!r}")
    rgb = np.asarray(img, dtype=np.uint32)
    ids = rgb[..., 0] + (rgb[..., 1] << 8) + (rgb[..., 2] << 16)

    out = np.zeros((*ids.shape, 3), dtype=np.uint8)
    for sid in np.unique(ids):
        if sid == 0:
            continue
        out[ids == sid] = _palette_color(int(sid))
    Image.fromarray(out, mode="RGB").save(args.out, format="PNG")
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panofuse",
        description="Panoptic fusion, combine baseline, and PQ evaluation tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fuse = sub.add_parser("fuse", help="run the fusion pipeline on one image")
    fuse.add_argument("--logits", required=True, help="raw tensor file with semantic logits")
    fuse.add_argument("--proposals", required=True, help="proposal JSON file")
    fuse.add_argument("--categories", required=True, help="categories JSON file")
    fuse.add_argument("--unknown", choices=["on", "off"], default="on",
                      help="append the unknown channel")
    fuse.add_argument("--image-id", type=int, default=0)
    fuse.add_argument("--out", required=True, help="output directory")
    _add_threshold_flags(fuse)
    fuse.set_defaults(func=_cmd_fuse)

    comb = sub.add_parser("combine", help="run the combine baseline on one image")
    comb.add_argument("--logits", required=True)
    comb.add_argument("--proposals", required=True)
    comb.add_argument("--categories", required=True)
    comb.add_argument("--combine-overlap", type=float, default=0.5,
                      help="overlap-over-self threshold for baseline pasting")
    comb.add_argument("--image-id", type=int, default=0)
    comb.add_argument("--out", required=True)
    _add_threshold_flags(comb)
    comb.set_defaults(func=_cmd_combine)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True, help="prediction directory (PNG + JSON)")
    ev.add_argument("--gt", required=True, help="ground-truth directory (PNG + JSON)")
    ev.add_argument("--categories", required=True)
    ev.add_argument("--jobs", type=int, default=1, help="parallel image scoring")
    ev.set_defaults(func=_cmd_eval)

    synth = sub.add_parser("synth", help="emit a synthetic fixture")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--dims", type=_parse_dims, default=(64, 64), help="HxW")
    synth.add_argument("--stuff", type=int, default=3)
    synth.add_argument("--things", type=int, default=2)
    synth.add_argument("--instances", type=int, default=4)
    synth.add_argument("--scale", type=float, default=4.0, help="one-hot logit scale")
    synth.add_argument("--noise", type=float, default=0.0, help="logit noise sigma")
    synth.add_argument("--jitter", type=float, default=0.0, help="box jitter fraction")
    synth.add_argument("--image-id", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=_cmd_synth)

    bn = sub.add_parser("bench", help="time a post-network pipeline")
    bn.add_argument("--pipeline", choices=["fusion", "combine"], required=True)
    bn.add_argument("--dims", type=_parse_dims, default=(1024, 2048), help="HxW")
    bn.add_argument("--stuff", type=int, default=50)
    bn.add_argument("--things", type=int, default=5)
    bn.add_argument("--instances", type=int, default=30)
    bn.add_argument("--repeats", type=int, default=100)
    bn.add_argument("--seed", type=int, default=0)
    bn.set_defaults(func=_cmd_bench)

    render = sub.add_parser("render", help="colorize an id-encoded panoptic PNG")
    render.add_argument("--png", required=True, help="id-encoded panoptic PNG")
    render.add_argument("--out", required=True, help="output color PNG")
    render.set_defaults(func=_cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"panofuse: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal failure
        print(f"panofuse: internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
