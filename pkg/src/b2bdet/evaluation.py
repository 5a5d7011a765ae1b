"""Detection post-processing and scoring.

Boxes here are (x1, y1, x2, y2) pixel corners. AP uses all-point
interpolation (area under the precision envelope), greedy confidence-order
matching at a single IoU threshold, and mAP50 averages classes that have
at least one ground-truth box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Detection:
    image_id: str
    class_id: int
    confidence: float
    bbox: tuple  # (x1, y1, x2, y2)

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if x2 < x1 or y2 < y1:
            raise ValueError(f"invalid box {self.bbox}: corners out of order")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class GroundTruth:
    image_id: str
    class_id: int
    bbox: tuple  # (x1, y1, x2, y2)


@dataclass
class ClassResult:
    class_id: int
    ap: float
    n_gt: int
    tp: int
    fp: int
    fn: int
    recall: list = field(default_factory=list)
    precision: list = field(default_factory=list)


@dataclass
class EvalReport:
    per_class: dict  # class_id -> ClassResult
    map50: float
    skipped_classes: list  # classes with zero ground truth
    audit: list = field(default_factory=list)
    audit_summary: dict = field(default_factory=dict)

    def to_csv(self):
        lines = ["class,ap,tp,fp,fn"]
        for cid in sorted(self.per_class):
            r = self.per_class[cid]
            lines.append(f"{cid},{r.ap:.6f},{r.tp},{r.fp},{r.fn}")
        lines.append(f"mAP50,{self.map50:.6f},,,")
        return "\n".join(lines) + "\n"

    def pr_curve_csv(self, class_id):
        r = self.per_class[class_id]
        lines = ["recall,precision"]
        for rc, pr in zip(r.recall, r.precision):
            lines.append(f"{rc:.6f},{pr:.6f}")
        return "\n".join(lines) + "\n"


def iou(a, b):
    """Intersection-over-union of two xyxy boxes; zero-area boxes give 0."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def _sort_key(d):
    # total order so oracle equivalence is exact: confidence desc,
    # then class id asc, then x1 asc
    return (-d.confidence, d.class_id, d.bbox[0], d.bbox[1])


def nms(detections, iou_threshold=0.45, conf_threshold=0.0, per_class=True):
    """Greedy non-maximum suppression.

    Candidates below ``conf_threshold`` are dropped; survivors are kept in
    confidence order, suppressing later boxes (same class when
    ``per_class``) whose IoU with a kept box exceeds ``iou_threshold``.
    """
    if not (0.0 <= iou_threshold <= 1.0 and 0.0 <= conf_threshold <= 1.0):
        raise ValueError("nms thresholds must lie in [0, 1]")
    cands = sorted((d for d in detections if d.confidence >= conf_threshold), key=_sort_key)
    kept = []
    for d in cands:
        suppressed = False
        for kd in kept:
            if per_class and kd.class_id != d.class_id:
                continue
            if iou(kd.bbox, d.bbox) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    return kept


def average_precision(detections, ground_truth, class_id, iou_thr=0.5):
    """All-point interpolated AP for one class.

    Greedy matching in confidence order: each detection claims its
    highest-IoU unmatched ground truth in the same image when that IoU
    reaches ``iou_thr``. Returns (ap, recall_points, precision_points,
    tp, fp). Raises if the class has no ground truth (AP undefined).
    """
    gts = [g for g in ground_truth if g.class_id == class_id]
    if not gts:
        raise ValueError(f"class {class_id} has no ground truth; AP is undefined")
    dets = sorted((d for d in detections if d.class_id == class_id), key=_sort_key)
    gt_by_image = {}
    for g in gts:
        gt_by_image.setdefault(g.image_id, []).append(g)
    matched = {img: [False] * len(lst) for img, lst in gt_by_image.items()}

    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, d in enumerate(dets):
        cands = gt_by_image.get(d.image_id, [])
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(cands):
            if matched[d.image_id][j]:
                continue
            v = iou(d.bbox, g.bbox)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            matched[d.image_id][best_j] = True
            tp[i] = 1
        else:
            fp[i] = 1

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    # precision envelope, then area under the stepwise curve
    r = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    p = np.concatenate([[1.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    ap = 0.0
    for i in range(1, len(r)):
        ap += (r[i] - r[i - 1]) * p[i]
    return float(ap), recall.tolist(), precision.tolist(), int(cum_tp[-1]) if len(dets) else 0, int(cum_fp[-1]) if len(dets) else 0


def audit_unlabeled(detections, ground_truth, conf_floor=0.5, overlap_thr=0.1):
    """High-confidence detections overlapping no ground truth at all.

    Partitions detections into (audit, matched, low_conf):
    confidence < conf_floor -> low_conf; max IoU against any ground truth
    in the same image >= overlap_thr -> matched; otherwise audit.
    Returns (audit_list, summary).
    """
    if not (0.0 <= conf_floor <= 1.0):
        raise ValueError("conf_floor must lie in [0, 1]")
    gt_by_image = {}
    for g in ground_truth:
        gt_by_image.setdefault(g.image_id, []).append(g)
    audit, matched, low_conf = [], 0, 0
    per_image = {}
    per_class = {}
    for d in detections:
        if d.confidence < conf_floor:
            low_conf += 1
            continue
        best = 0.0
        for g in gt_by_image.get(d.image_id, []):
            best = max(best, iou(d.bbox, g.bbox))
        if best >= overlap_thr:
            matched += 1
        else:
            audit.append(d)
            per_image[d.image_id] = per_image.get(d.image_id, 0) + 1
            per_class[d.class_id] = per_class.get(d.class_id, 0) + 1
    summary = {
        "audit": len(audit),
        "matched": matched,
        "low_conf": low_conf,
        "total": len(detections),
        "per_image": per_image,
        "per_class": per_class,
        "audit_rate": len(audit) / max(1, len(detections)),
    }
    return audit, summary


def score_detections(detections, ground_truth, n_classes, iou_thr=0.5, audit_floor=0.5):
    """Build an :class:`EvalReport` from final detections and ground truth."""
    per_class = {}
    skipped = []
    gt_counts = {}
    for g in ground_truth:
        gt_counts[g.class_id] = gt_counts.get(g.class_id, 0) + 1
    aps = []
    for cid in range(n_classes):
        n_gt = gt_counts.get(cid, 0)
        if n_gt == 0:
            skipped.append(cid)
            continue
        ap, rec, prec, tp, fp = average_precision(detections, ground_truth, cid, iou_thr)
        per_class[cid] = ClassResult(cid, ap, n_gt, tp, fp, n_gt - tp, rec, prec)
        aps.append(ap)
    map50 = float(np.mean(aps)) if aps else 0.0
    audit, summary = audit_unlabeled(detections, ground_truth, audit_floor)
    return EvalReport(per_class, map50, skipped, audit, summary)


def evaluate(infer, dataset, n_classes, conf_thr=0.25, iou_thr=0.45,
             input_sizes=(256,), score_iou=0.5, audit_floor=0.5):
    """Multi-scale evaluation of a detector over a dataset.

    ``infer(sample, size)`` must return detections in original image
    coordinates. Per-size detections are concatenated and fused by a single
    final NMS (no box voting), then scored per class at ``score_iou``.
    """
    for s in input_sizes:
        if s % 32:
            raise ValueError(f"input size {s} not divisible by 32")
    if not dataset:
        raise ValueError("evaluate requires a non-empty dataset")
    all_dets = []
    ground_truth = []
    for sample in dataset:
        merged = []
        for size in input_sizes:
            merged.extend(infer(sample, size))
        merged = nms(merged, iou_thr, conf_thr, per_class=True)
        all_dets.extend(merged)
        for a in sample.annotations:
            l, t, w, h = a.bbox
            ground_truth.append(GroundTruth(sample.source_id, a.category, (l, t, l + w, t + h)))
    return score_detections(all_dets, ground_truth, n_classes, score_iou, audit_floor)


def detections_to_lines(detections):
    """One detection per line: image,class,conf,x1,y1,x2,y2."""
    lines = []
    for d in detections:
        x1, y1, x2, y2 = d.bbox
        lines.append(
            f"{d.image_id},{d.class_id},{d.confidence:.6f},{x1:.2f},{y1:.2f},{x2:.2f},{y2:.2f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def detections_from_lines(text):
    dets = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ValueError(f"line {line_no}: expected 7 fields, got {len(parts)}")
        img, cid, conf, x1, y1, x2, y2 = parts
        dets.append(Detection(img, int(cid), float(conf),
                              (float(x1), float(y1), float(x2), float(y2))))
    return dets
