"""Command-line surface for the two-stage pipeline.

Subcommands: sr-train, sr-infer, det-train, det-eval, pipeline-infer,
anchors, model-report, audit. Every command is deterministic under
``--seed`` and exits 2 with a path-naming message on bad inputs.
"""

from __future__ import annotations

import os
import sys

# honor the worker cap before numpy spins up its thread pools
_threads = os.environ.get("B2BDET_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import argparse

import numpy as np

from . import detector as det
from . import nn as N
from . import srgan as sg
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .config import ConfigError, load_run_config
from .data import (
    DatasetError,
    ParseError,
    anchor_kmeans,
    load_dataset,
    make_sr_pairs,
    make_synthetic_dataset,
    read_ppm,
    write_ppm,
)
from .evaluation import detections_from_lines, detections_to_lines, evaluate, GroundTruth, nms, audit_unlabeled
from .rng import Rng


class CliError(RuntimeError):
    pass


def _load_config(args):
    return load_run_config(args.config) if args.config else load_run_config()


def _require_file(path, what):
    if not path or not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")


def _load_detection_dataset(cfg, data_arg):
    src = data_arg or cfg.data.source
    if src == "synthetic":
        samples = make_synthetic_dataset(
            cfg.data.synthetic_n, cfg.data.synthetic_size,
            cfg.data.synthetic_classes, seed=0)
        classes = [f"class_{i}" for i in range(cfg.data.synthetic_classes)]
        return samples, classes
    if not os.path.isdir(src):
        raise CliError(f"dataset directory not found: {src}")
    return load_dataset(src, cfg.detector.n_classes)


def _load_sr_pairs(cfg, data_arg):
    src = data_arg or "synthetic"
    if src == "synthetic":
        lr_size = cfg.srgan.hr_size // cfg.srgan.scale
        n = max(cfg.data.synthetic_n, 2)
        return make_sr_pairs(n, cfg.srgan.hr_size, cfg.srgan.scale, seed=0)
    lr_dir, hr_dir = os.path.join(src, "lr"), os.path.join(src, "hr")
    for d in (lr_dir, hr_dir):
        if not os.path.isdir(d):
            raise CliError(f"sr dataset directory not found: {d}")
    pairs = []
    for name in sorted(os.listdir(lr_dir)):
        if not name.endswith(".ppm"):
            continue
        hr_path = os.path.join(hr_dir, name)
        _require_file(hr_path, "hr image")
        pairs.append((read_ppm(os.path.join(lr_dir, name)), read_ppm(hr_path)))
    if not pairs:
        raise CliError(f"no .ppm pairs under {src}")
    return pairs


def cmd_sr_train(args):
    cfg = _load_config(args)
    pairs = _load_sr_pairs(cfg, args.data)
    out = args.out or "runs/sr"
    sg.sr_train(pairs, cfg.srgan, seed=args.seed, out_dir=out, quiet=not args.verbose)
    print(f"wrote {os.path.join(out, 'sr_final.b2bd')}")
    return 0


def cmd_sr_infer(args):
    cfg = _load_config(args)
    _require_file(args.weights, "weights file")
    _require_file(args.infile, "input image")
    state = sg.make_sr_state(cfg.srgan, seed=args.seed)
    ckpt = load_tensors(args.weights)
    state.load_state_dict(ckpt)
    img = read_ppm(args.infile)
    up = sg.sr_infer(state.generator, img)
    write_ppm(args.out, up)
    print(f"wrote {args.out} ({up.shape[2]}x{up.shape[1]})")
    return 0


def cmd_det_train(args):
    cfg = _load_config(args)
    samples, _ = _load_detection_dataset(cfg, args.data)
    out = args.out or "runs/det"
    det.det_train(samples, cfg.detector, seed=args.seed, out_dir=out,
                  quiet=not args.verbose)
    print(f"wrote {os.path.join(out, 'detector.b2bd')}")
    return 0


def _restore_detector(cfg, weights, seed):
    model = det.DetectorModel(cfg.detector, seed=seed)
    _require_file(weights, "weights file")
    model.load_state_dict(load_tensors(weights))
    return model


def cmd_det_eval(args):
    cfg = _load_config(args)
    if args.img_size and args.img_size % 32:
        raise CliError(f"--img-size {args.img_size} not divisible by 32")
    samples, _ = _load_detection_dataset(cfg, args.data)
    model = _restore_detector(cfg, args.weights, args.seed)
    sizes = (args.img_size,) if args.img_size else cfg.eval.sizes
    conf = args.conf_thres if args.conf_thres is not None else cfg.eval.conf_thres
    iou_thr = args.iou_thres if args.iou_thres is not None else cfg.eval.iou_thres
    report = evaluate(lambda s, sz: model.infer(s, sz, conf), samples,
                      cfg.detector.n_classes, conf, iou_thr, sizes,
                      cfg.eval.score_iou, cfg.eval.audit_floor)
    out = args.out or "eval_report.csv"
    with open(out, "w") as f:
        f.write(report.to_csv())
    for cid in report.per_class:
        with open(os.path.splitext(out)[0] + f"_pr_class{cid}.csv", "w") as f:
            f.write(report.pr_curve_csv(cid))
    print(f"mAP50 {report.map50:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_pipeline_infer(args):
    cfg = _load_config(args)
    if args.img_size and args.img_size % 32:
        raise CliError(f"--img-size {args.img_size} not divisible by 32")
    samples, _ = _load_detection_dataset(cfg, args.data)
    state = sg.make_sr_state(cfg.srgan, seed=args.seed)
    _require_file(args.sr_weights, "sr weights file")
    state.load_state_dict(load_tensors(args.sr_weights))
    model = _restore_detector(cfg, args.weights, args.seed)
    conf = args.conf_thres if args.conf_thres is not None else cfg.eval.conf_thres
    iou_thr = args.iou_thres if args.iou_thres is not None else cfg.eval.iou_thres
    size = args.img_size or cfg.detector.input_size
    scale = cfg.srgan.scale
    all_dets = []
    from .data import Sample

    for s in samples:
        up = sg.sr_infer(state.generator, s.image)
        dets = model.infer(Sample(up, [], s.source_id), size, conf)
        dets = nms(dets, iou_thr, conf, per_class=True)
        for d in dets:  # back to original (pre-super-resolution) coordinates
            x1, y1, x2, y2 = d.bbox
            d.bbox = (x1 / scale, y1 / scale, x2 / scale, y2 / scale)
        all_dets.extend(dets)
    out = args.out or "detections.txt"
    with open(out, "w") as f:
        f.write(detections_to_lines(all_dets))
    print(f"wrote {out} ({len(all_dets)} detections)")
    return 0


def cmd_anchors(args):
    cfg = _load_config(args)
    samples, _ = _load_detection_dataset(cfg, args.data)
    boxes = np.array([[a.bbox[2], a.bbox[3]] for s in samples for a in s.annotations])
    if boxes.size == 0 or boxes.shape[0] < args.k:
        print(f"warning: only {0 if boxes.size == 0 else boxes.shape[0]} boxes, "
              f"need {args.k}; keeping default anchors")
        anchors = cfg.detector.anchors
    else:
        anchors, info = anchor_kmeans(boxes, args.k, args.iters, seed=args.seed)
        if info["fallback"]:
            print("warning: fewer distinct boxes than clusters; quantile initialization used")
    arr = anchors.as_array()
    for s_idx, stride in enumerate((8, 16, 32)):
        pairs = " ".join(f"({w:.1f}, {h:.1f})" for w, h in arr[s_idx])
        print(f"stride {stride}: {pairs}")
    return 0


def cmd_model_report(args):
    cfg = _load_config(args)
    dcfg = cfg.detector
    if args.full_scale:
        from dataclasses import replace

        dcfg = replace(dcfg, width_multiple=1.0, depth_multiple=1.0, input_size=640)
    graph = det.build_detector(dcfg)
    counts = N.count_model(graph, dcfg.input_size, anchors=dcfg.anchors.as_array())
    print(f"input size : {dcfg.input_size}")
    print(f"layers     : {counts['layers']}")
    print(f"params     : {counts['params']:,} ({counts['params'] / 1e6:.2f}M)")
    print(f"flops      : {counts['flops']:,} ({counts['flops'] / 1e9:.2f}B)")
    print("reference  : 27.7M params / 109.5B FLOPs (full-scale targets)")
    if dcfg.width_multiple == 1.0 and dcfg.depth_multiple == 1.0:
        dp = (counts["params"] - 27.7e6) / 27.7e6
        df = (counts["flops"] - 109.5e9) / 109.5e9
        print(f"delta      : params {dp:+.1%}, flops {df:+.1%}")
    return 0


def cmd_audit(args):
    cfg = _load_config(args)
    samples, _ = _load_detection_dataset(cfg, args.data)
    _require_file(args.detections, "detections file")
    with open(args.detections) as f:
        dets = detections_from_lines(f.read())
    gts = []
    for s in samples:
        for a in s.annotations:
            l, t, w, h = a.bbox
            gts.append(GroundTruth(s.source_id, a.category, (l, t, l + w, t + h)))
    floor = args.conf_floor if args.conf_floor is not None else cfg.eval.audit_floor
    audit, summary = audit_unlabeled(dets, gts, floor)
    print(f"total detections : {summary['total']}")
    print(f"matched          : {summary['matched']}")
    print(f"below conf floor : {summary['low_conf']}")
    print(f"unmatched (audit): {summary['audit']}  rate {summary['audit_rate']:.3f}")
    for img in sorted(summary["per_image"]):
        print(f"  image {img}: {summary['per_image'][img]}")
    for cid in sorted(summary["per_class"]):
        print(f"  class {cid}: {summary['per_class'][cid]}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="b2bdet",
                                description="two-stage aerial detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, weights=False):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--verbose", action="store_true")
        if data:
            sp.add_argument("--data", default=None,
                            help="dataset directory or 'synthetic'")
        if weights:
            sp.add_argument("--weights", default=None)

    sp = sub.add_parser("sr-train", help="train the super-resolution stage")
    common(sp)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_sr_train)

    sp = sub.add_parser("sr-infer", help="4x upscale one image")
    common(sp, data=False, weights=True)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sr_infer)

    sp = sub.add_parser("det-train", help="train the detector")
    common(sp)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_det_train)

    sp = sub.add_parser("det-eval", help="evaluate the detector")
    common(sp, weights=True)
    sp.add_argument("--conf-thres", type=float, default=None)
    sp.add_argument("--iou-thres", type=float, default=None)
    sp.add_argument("--img-size", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_det_eval)

    sp = sub.add_parser("pipeline-infer", help="super-resolve then detect")
    common(sp, weights=True)
    sp.add_argument("--sr-weights", default=None)
    sp.add_argument("--conf-thres", type=float, default=None)
    sp.add_argument("--iou-thres", type=float, default=None)
    sp.add_argument("--img-size", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_pipeline_infer)

    sp = sub.add_parser("anchors", help="k-means anchor boxes from a dataset")
    common(sp)
    sp.add_argument("--k", type=int, default=9)
    sp.add_argument("--iters", type=int, default=30)
    sp.set_defaults(func=cmd_anchors)

    sp = sub.add_parser("model-report", help="layers / params / FLOPs")
    common(sp, data=False)
    sp.add_argument("--full-scale", action="store_true",
                    help="report at width=depth=1.0, input 640")
    sp.set_defaults(func=cmd_model_report)

    sp = sub.add_parser("audit", help="find confident detections with no ground truth")
    common(sp)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--conf-floor", type=float, default=None)
    sp.set_defaults(func=cmd_audit)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, DatasetError, ParseError,
            FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
