"""Compact aerial detector: graph assembly, target assignment, loss, training.

The default architecture is a three-scale one-stage detector: a Focus stem,
CSP stages with windowed-transformer blocks in the deepest stage, SPP, and a
top-down + bottom-up fusion neck with attention gates after each concat.
Channel widths and block repeats scale with the config's width/depth
multiples.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn as N
from . import tensor as T
from .data import AnchorSet, DatasetError, Sample, letterbox, mixup, mosaic
from .evaluation import Detection, evaluate
from .optim import SGD
from .rng import Rng
from .tensor import Tensor

STRIDES = (8, 16, 32)

DEFAULT_ANCHORS = AnchorSet(np.array(
    [
        [[10, 13], [16, 30], [33, 23]],
        [[30, 61], [62, 45], [59, 119]],
        [[116, 90], [156, 198], [373, 326]],
    ],
    dtype=np.float32,
))


@dataclass
class DetectorConfig:
    n_classes: int = 10
    input_size: int = 640
    width_multiple: float = 1.0
    depth_multiple: float = 1.0
    anchors: AnchorSet = field(default_factory=lambda: DEFAULT_ANCHORS)
    box_weight: float = 0.05
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    lr0: float = 0.0032
    lrf: float = 0.12
    momentum: float = 0.843
    weight_decay: float = 0.00036
    epochs: int = 100
    warmup_epochs: int = 3
    mosaic: float = 1.0
    mixup: float = 0.2
    patience: int = 10
    batch_size: int = 16
    multi_scale: bool = False
    eval_conf: float = 0.05
    eval_iou: float = 0.45

    def validate(self):
        if self.lr0 <= 0:
            raise N.ConfigurationError(f"lr0 must be positive, got {self.lr0}")
        for name in ("mosaic", "mixup"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise N.ConfigurationError(f"{name} probability {v} outside [0, 1]")
        if self.input_size % 32:
            raise N.ConfigurationError(f"input_size {self.input_size} not divisible by 32")
        if self.anchors.as_array().shape != (3, 3, 2):
            raise N.ConfigurationError("anchors must hold 3 scales x 3 (w, h) pairs")
        if self.n_classes < 1:
            raise N.ConfigurationError("n_classes must be >= 1")
        return self


# base channel plan tuned so the width=depth=1.0 model lands at the published
# full-scale footprint (~27.7M params, ~109.5 GFLOPs at 640)
_CH = (80, 160, 256, 448, 640)
_REPEATS = (4, 9, 7, 2)


def default_graph(n_classes=10, width_multiple=1.0, depth_multiple=1.0, ref_size=640):
    """The full detector graph at base (unscaled) channel widths."""
    c1, c2, c3, c4, c5 = _CH
    n1, n2, n3, n4 = _REPEATS
    L = N.LayerSpec
    layers = [
        L("Focus", [-1], dict(out=c1, k=3)),                    # 0: /2
        L("ConvBnAct", [-1], dict(out=c2, k=3, s=2)),           # 1: /4
        L("C3", [-1], dict(out=c2, n=n1)),                      # 2
        L("ConvBnAct", [-1], dict(out=c3, k=3, s=2)),           # 3: /8
        L("C3", [-1], dict(out=c3, n=n2)),                      # 4  (P3 feature)
        L("ConvBnAct", [-1], dict(out=c4, k=3, s=2)),           # 5: /16
        L("C3", [-1], dict(out=c4, n=n3)),                      # 6  (P4 feature)
        L("ConvBnAct", [-1], dict(out=c5, k=3, s=2)),           # 7: /32
        L("C3STR", [-1], dict(out=c5, n=n4, heads=8, window=4)),  # 8
        L("SPP", [-1], dict(out=c5)),                           # 9
        # top-down fusion
        L("ConvBnAct", [-1], dict(out=c4, k=1)),                # 10
        L("Upsample", [-1], dict(factor=2)),                    # 11
        L("Concat", [11, 6], {}),                               # 12
        L("CBAM", [-1], dict(reduction=8)),                     # 13
        L("C3", [-1], dict(out=c4, n=n1, shortcut=False)),      # 14
        L("ConvBnAct", [-1], dict(out=c3, k=1)),                # 15
        L("Upsample", [-1], dict(factor=2)),                    # 16
        L("Concat", [16, 4], {}),                               # 17
        L("CBAM", [-1], dict(reduction=8)),                     # 18
        L("C3", [-1], dict(out=c3, n=n1, shortcut=False)),      # 19: P3 out
        # bottom-up fusion
        L("ConvBnAct", [-1], dict(out=c3, k=3, s=2)),           # 20
        L("Concat", [20, 15], {}),                              # 21
        L("CBAM", [-1], dict(reduction=8)),                     # 22
        L("C3", [-1], dict(out=c4, n=n1, shortcut=False)),      # 23: P4 out
        L("ConvBnAct", [-1], dict(out=c4, k=3, s=2)),           # 24
        L("Concat", [24, 10], {}),                              # 25
        L("CBAM", [-1], dict(reduction=8)),                     # 26
        L("C3", [-1], dict(out=c5, n=n1, shortcut=False)),      # 27: P5 out
        L("Detect", [19, 23, 27], dict(n_classes=n_classes, ref_size=ref_size)),
    ]
    g = N.ModelGraph(layers, width_multiple, depth_multiple)
    g.validate()
    return g


def build_detector(config):
    """Model graph for a config, scaled by its width/depth multiples."""
    config.validate()
    return default_graph(config.n_classes, config.width_multiple,
                         config.depth_multiple, config.input_size)


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

@dataclass
class TargetAssignment:
    """Flat arrays, one entry per (ground truth, matched anchor, cell)."""

    img: np.ndarray      # image index in batch
    scale: np.ndarray    # 0/1/2 for strides 8/16/32
    anchor: np.ndarray   # anchor index within scale
    gj: np.ndarray       # cell row
    gi: np.ndarray       # cell column
    tvals: np.ndarray    # (M, 4) encoded tx, ty, tw, th
    cls: np.ndarray      # class ids
    gt_xywh: np.ndarray  # (M, 4) center-format ground truth, pixels
    skipped_degenerate: int = 0

    def __len__(self):
        return len(self.img)


def _logit(p):
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


def assign_targets(annotations_batch, anchors, input_size, ratio_thr=4.0):
    """Match ground-truth boxes to anchors and cells.

    A box matches an anchor when max(w/aw, aw/w, h/ah, ah/h) < ratio_thr.
    Each match lands in the center cell plus the nearest lateral cell per
    axis. Encodings invert the head decode exactly:
    sigma(tx) = ((cx/stride - gi) + 0.5) / 2, sigma(tw) = sqrt(w/aw) / 2.
    """
    anc = anchors.as_array() if isinstance(anchors, AnchorSet) else np.asarray(anchors, np.float32)
    entries = []
    skipped = 0
    for img_idx, annotations in enumerate(annotations_batch):
        for a in annotations:
            l, t, w, h = a.bbox
            if w <= 0 or h <= 0:
                skipped += 1
                continue
            cx, cy = l + w / 2.0, t + h / 2.0
            for s_idx, stride in enumerate(STRIDES):
                grid = input_size // stride
                gx, gy = cx / stride, cy / stride
                for a_idx in range(anc.shape[1]):
                    aw, ah = anc[s_idx, a_idx]
                    rw, rh = w / aw, h / ah
                    if max(rw, 1.0 / rw, rh, 1.0 / rh) >= ratio_thr:
                        continue
                    gi0, gj0 = int(math.floor(gx)), int(math.floor(gy))
                    cells = [(gi0, gj0)]
                    fx, fy = gx - gi0, gy - gj0
                    if fx < 0.5 and gi0 - 1 >= 0:
                        cells.append((gi0 - 1, gj0))
                    elif fx > 0.5 and gi0 + 1 < grid:
                        cells.append((gi0 + 1, gj0))
                    if fy < 0.5 and gj0 - 1 >= 0:
                        cells.append((gi0, gj0 - 1))
                    elif fy > 0.5 and gj0 + 1 < grid:
                        cells.append((gi0, gj0 + 1))
                    for gi, gj in cells:
                        if not (0 <= gi < grid and 0 <= gj < grid):
                            continue
                        tx = _logit((gx - gi + 0.5) / 2.0)
                        ty = _logit((gy - gj + 0.5) / 2.0)
                        tw = _logit(0.5 * math.sqrt(w / aw))
                        th = _logit(0.5 * math.sqrt(h / ah))
                        entries.append((img_idx, s_idx, a_idx, gj, gi,
                                        (tx, ty, tw, th), a.category, (cx, cy, w, h)))
    if entries:
        img, scale, anchor, gj, gi, tvals, cls, gt = zip(*entries)
        return TargetAssignment(
            np.asarray(img, np.int64), np.asarray(scale, np.int64),
            np.asarray(anchor, np.int64), np.asarray(gj, np.int64),
            np.asarray(gi, np.int64), np.asarray(tvals, np.float64),
            np.asarray(cls, np.int64), np.asarray(gt, np.float64), skipped,
        )
    z = np.zeros(0, np.int64)
    return TargetAssignment(z, z.copy(), z.copy(), z.copy(), z.copy(),
                            np.zeros((0, 4)), z.copy(), np.zeros((0, 4)), skipped)


def decode_tvals(tvals, scale, anchor, gj, gi, anchors, strides=STRIDES):
    """Invert the head decode for encoded targets (float64, no model)."""
    anc = anchors.as_array() if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    sig = 1.0 / (1.0 + np.exp(-np.asarray(tvals, np.float64)))
    stride = np.asarray([strides[s] for s in scale], np.float64)
    aw = np.stack([anc[s, a] for s, a in zip(scale, anchor)]).astype(np.float64)
    cx = (2.0 * sig[:, 0] - 0.5 + gi) * stride
    cy = (2.0 * sig[:, 1] - 0.5 + gj) * stride
    w = (2.0 * sig[:, 2]) ** 2 * aw[:, 0]
    h = (2.0 * sig[:, 3]) ** 2 * aw[:, 1]
    return np.stack([cx, cy, w, h], axis=1)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def ciou(pred_xywh, gt_xywh, eps=1e-7):
    """Complete IoU between predicted boxes (Tensor, center format) and
    ground truth (constant array). Returns a (M,) tensor in [-1, 1]."""
    m = pred_xywh.shape[0]
    px = T.narrow(pred_xywh, 1, 0, 1).reshape(m)
    py = T.narrow(pred_xywh, 1, 1, 1).reshape(m)
    pw = T.narrow(pred_xywh, 1, 2, 1).reshape(m)
    ph = T.narrow(pred_xywh, 1, 3, 1).reshape(m)
    g = np.asarray(gt_xywh, np.float32)
    gx, gy, gw, gh = (Tensor(g[:, i]) for i in range(4))

    px1, px2 = px - pw * 0.5, px + pw * 0.5
    py1, py2 = py - ph * 0.5, py + ph * 0.5
    gx1, gx2 = gx - gw * 0.5, gx + gw * 0.5
    gy1, gy2 = gy - gh * 0.5, gy + gh * 0.5

    iw = T.clamp(T.minimum(px2, gx2) - T.maximum(px1, gx1), lo=0.0)
    ih = T.clamp(T.minimum(py2, gy2) - T.maximum(py1, gy1), lo=0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter + eps
    iou_t = inter / union

    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    chh = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c2 = cw * cw + chh * chh + eps
    rho2 = (px - gx) ** 2 + (py - gy) ** 2
    v = (4.0 / math.pi ** 2) * (T.arctan(gw / gh) - T.arctan(pw / ph)) ** 2
    alpha = Tensor(v.data / (1.0 - iou_t.data + v.data + eps))  # treated as constant
    return iou_t - rho2 / c2 - alpha * v


_OBJ_BALANCE = (4.0, 1.0, 0.4)  # more weight on the small-object scale


def detection_loss(predictions, targets, config):
    """CIoU box loss + IoU-weighted objectness BCE + class BCE.

    ``predictions`` are the raw per-scale head outputs; ``targets`` comes
    from :func:`assign_targets` at the same input size. All terms are
    finite, non-negative scalars; with no assigned targets the box and
    class terms are exactly zero.
    """
    nc = config.n_classes
    anc = config.anchors.as_array()
    box_loss = Tensor(0.0)
    cls_loss = Tensor(0.0)
    obj_loss = Tensor(0.0)
    n_scales_with_targets = 0
    for s_idx, raw in enumerate(predictions):
        n, c, h, w = raw.shape
        na = anc.shape[1]
        if c != na * (5 + nc):
            raise N.ConfigurationError(
                f"scale {s_idx}: head emits {c} channels, expected {na * (5 + nc)}"
            )
        p = raw.reshape(n, na, 5 + nc, h, w).transpose(0, 1, 3, 4, 2).reshape(n * na * h * w, 5 + nc)
        obj_target = np.zeros(n * na * h * w, np.float32)
        mask = targets.scale == s_idx
        if mask.any():
            n_scales_with_targets += 1
            img = targets.img[mask]
            anchor = targets.anchor[mask]
            gj, gi = targets.gj[mask], targets.gi[mask]
            flat = ((img * na + anchor) * h + gj) * w + gi
            sel = T.gather_rows(p, flat)
            m = len(flat)
            stride = STRIDES[s_idx]
            sig = T.sigmoid(T.narrow(sel, 1, 0, 4))
            cell = np.stack([gi, gj], axis=1).astype(np.float32)
            xy = (T.narrow(sig, 1, 0, 2) * 2.0 - 0.5 + Tensor(cell)) * float(stride)
            anc_wh = anc[s_idx][anchor]
            wh = (T.narrow(sig, 1, 2, 2) * 2.0) ** 2 * Tensor(anc_wh)
            pred_xywh = T.concat([xy, wh], axis=1)
            iou_t = ciou(pred_xywh, targets.gt_xywh[mask])
            box_loss = box_loss + (Tensor(1.0) - iou_t).mean()
            np.maximum.at(obj_target, flat, np.clip(iou_t.data, 0.0, 1.0).astype(np.float32))
            if nc > 1:
                onehot = np.zeros((m, nc), np.float32)
                onehot[np.arange(m), targets.cls[mask]] = 1.0
                cls_loss = cls_loss + T.bce_with_logits(T.narrow(sel, 1, 5, nc), onehot)
        p_obj = T.narrow(p, 1, 4, 1).reshape(n * na * h * w)
        obj_loss = obj_loss + T.bce_with_logits(p_obj, obj_target) * _OBJ_BALANCE[s_idx]
    if n_scales_with_targets:
        box_loss = box_loss * (1.0 / n_scales_with_targets)
        cls_loss = cls_loss * (1.0 / n_scales_with_targets)
    total = (box_loss * config.box_weight + obj_loss * config.obj_weight
             + cls_loss * config.cls_weight)
    return {"box": box_loss, "obj": obj_loss, "cls": cls_loss, "total": total}


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def cosine_lr(epoch, config):
    """Cosine decay from lr0 to lr0*lrf with linear warmup from 0.1*lr0."""
    e, total = float(epoch), float(config.epochs)
    if not (0 <= e <= total):
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")

    def base(t):
        return config.lr0 * ((1.0 - config.lrf) / 2.0 * (1.0 + math.cos(math.pi * t / total))
                             + config.lrf)

    warm = float(config.warmup_epochs)
    if warm > 0 and e < warm:
        start = 0.1 * config.lr0
        return start + (e / warm) * (base(warm) - start)
    return base(e)


# ---------------------------------------------------------------------------
# model wrapper and inference
# ---------------------------------------------------------------------------

class DetectorModel:
    """Instantiated detector with decode and letterboxed inference."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.graph = build_detector(config)
        self.net = N.GraphModel(self.graph, Rng(seed).child("detector-init"),
                                anchors=config.anchors.as_array())

    def forward(self, x):
        return self.net(x)

    __call__ = forward

    def decode(self, raw_maps):
        """Raw head maps -> (boxes xyxy, confidences, classes) per image."""
        nc = self.config.n_classes
        anc = self.config.anchors.as_array()
        boxes, confs, classes = [], [], []
        for s_idx, raw in enumerate(raw_maps):
            arr = raw.data if isinstance(raw, Tensor) else raw
            n, c, h, w = arr.shape
            na = anc.shape[1]
            a = arr.reshape(n, na, 5 + nc, h, w).transpose(0, 1, 3, 4, 2)
            sig = 1.0 / (1.0 + np.exp(-a))
            gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            stride = STRIDES[s_idx]
            cx = (sig[..., 0] * 2.0 - 0.5 + gx) * stride
            cy = (sig[..., 1] * 2.0 - 0.5 + gy) * stride
            bw = (sig[..., 2] * 2.0) ** 2 * anc[s_idx, :, 0].reshape(1, na, 1, 1)
            bh = (sig[..., 3] * 2.0) ** 2 * anc[s_idx, :, 1].reshape(1, na, 1, 1)
            obj = sig[..., 4]
            cls = sig[..., 5:]
            conf = obj * cls.max(axis=-1)
            cid = cls.argmax(axis=-1)
            xyxy = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)
            boxes.append(xyxy.reshape(n, -1, 4))
            confs.append(conf.reshape(n, -1))
            classes.append(cid.reshape(n, -1))
        return (np.concatenate(boxes, axis=1), np.concatenate(confs, axis=1),
                np.concatenate(classes, axis=1))

    def infer(self, sample, size=None, conf_thr=0.25):
        """Detections for one sample in original image coordinates.

        Candidates are confidence-filtered only; callers apply NMS after
        merging scales.
        """
        size = size or self.config.input_size
        boxed, tf = letterbox(sample, size)
        x = Tensor(boxed.image[None])
        self.net.eval()
        with T.no_grad():
            raw = self.net(x)
        boxes, confs, classes = self.decode(raw)
        keep = confs[0] >= conf_thr
        out = []
        for box, conf, cid in zip(boxes[0][keep], confs[0][keep], classes[0][keep]):
            x1, y1, x2, y2 = tf.xyxy_to_orig(box)
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                continue
            out.append(Detection(sample.source_id, int(cid), float(min(conf, 1.0)),
                                 (x1, y1, x2, y2)))
        return out

    def state_dict(self):
        return self.net.state_dict()

    def load_state_dict(self, state):
        self.net.load_state_dict(state)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _build_batch(dataset, idxs, size, config, brng):
    imgs, anns = [], []
    n = len(dataset)
    for k, di in enumerate(idxs):
        srng = brng.child("sample", int(k))
        s = dataset[int(di)]
        if srng.random() < config.mosaic:
            partners = [dataset[int(j)] for j in srng.integers(0, n, 3)]
            s2 = mosaic([s] + partners, size, srng.child("mosaic"))
        else:
            s2, _ = letterbox(s, size)
        if srng.random() < config.mixup:
            other, _ = letterbox(dataset[int(srng.integers(0, n))], size)
            s2 = mixup(s2, other, srng.beta(8.0, 8.0))
        imgs.append(s2.image)
        anns.append(s2.annotations)
    return np.stack(imgs), anns


def _jitter_size(base, brng):
    lo = max(32, int(round(base * 0.75 / 32)) * 32)
    hi = int(round(base * 1.25 / 32)) * 32
    steps = (hi - lo) // 32 + 1
    return lo + 32 * int(brng.integers(0, steps))


def metrics_to_lines(metrics):
    lines = ["epoch,lr,box,obj,cls,total,map50"]
    for m in metrics:
        lines.append(
            f"{m['epoch']},{m['lr']:.8f},{m['box']:.6f},{m['obj']:.6f},"
            f"{m['cls']:.6f},{m['total']:.6f},{m['map50']:.6f}"
        )
    return "\n".join(lines) + "\n"


def det_train(dataset, config, seed=0, val=None, out_dir=None, quiet=True):
    """Seeded detector training: momentum SGD, cosine schedule, per-epoch
    validation mAP50 with early stopping. Returns (model, metrics)."""
    config.validate()
    if not dataset:
        raise DatasetError("det_train: empty dataset")
    model = DetectorModel(config, seed)
    opt = SGD(model.net.parameters(), config.lr0, config.momentum, config.weight_decay)
    root = Rng(seed).child("det-train")
    val_set = val if val is not None else dataset
    metrics = []
    best_map, best_epoch = -1.0, -1
    n = len(dataset)
    bs = min(config.batch_size, n)
    n_batches = (n + bs - 1) // bs

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        opt.lr = lr
        model.net.train()
        order = root.child("order", epoch).permutation(n)
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
        for bi in range(n_batches):
            idxs = order[bi * bs : (bi + 1) * bs]
            if len(idxs) == 0:
                continue
            brng = root.child("batch", epoch, bi)
            size = _jitter_size(config.input_size, brng) if config.multi_scale else config.input_size
            images, anns = _build_batch(dataset, idxs, size, config, brng)
            x = Tensor(images)
            targets = assign_targets(anns, config.anchors, size)
            losses = detection_loss(model.forward(x), targets, config)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            for k in sums:
                sums[k] += losses[k].item()
        model.net.eval()
        report = evaluate(
            lambda s, sz: model.infer(s, sz, config.eval_conf),
            val_set, config.n_classes, conf_thr=config.eval_conf,
            iou_thr=config.eval_iou, input_sizes=(config.input_size,),
        )
        rec = {"epoch": epoch, "lr": lr, "map50": report.map50}
        rec.update({k: v / n_batches for k, v in sums.items()})
        metrics.append(rec)
        if not quiet:
            print(f"epoch {epoch:3d} lr {lr:.5f} total {rec['total']:.4f} mAP50 {rec['map50']:.4f}")
        if report.map50 > best_map + 1e-9:
            best_map, best_epoch = report.map50, epoch
        elif epoch - best_epoch >= config.patience:
            break

    if out_dir:
        from .checkpoint import save_tensors

        os.makedirs(out_dir, exist_ok=True)
        save_tensors(os.path.join(out_dir, "detector.b2bd"), model.state_dict())
        with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
            f.write(metrics_to_lines(metrics))
    return model, metrics


def scaling_search(base_config, widths=(0.25, 0.33, 0.5, 0.75, 1.0),
                   depths=(0.25, 0.33, 0.5, 0.75, 1.0), dataset=None, val=None,
                   epochs=None, seed=0):
    """Grid search over (width, depth) multiples.

    Always reports parameter and FLOP counts; when a dataset is given each
    cell is trained briefly and reports its validation mAP50.
    """
    rows = []
    for wm in widths:
        for dm in depths:
            cfg = replace(base_config, width_multiple=wm, depth_multiple=dm)
            counts = N.count_model(build_detector(cfg), cfg.input_size,
                                   anchors=cfg.anchors.as_array())
            row = {"width": wm, "depth": dm,
                   "params": counts["params"], "flops": counts["flops"]}
            if dataset is not None:
                train_cfg = replace(cfg, epochs=epochs or cfg.epochs)
                _, metrics = det_train(dataset, train_cfg, seed=seed, val=val)
                row["map50"] = max(m["map50"] for m in metrics)
            rows.append(row)
    return rows
