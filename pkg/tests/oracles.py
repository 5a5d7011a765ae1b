"""Independent reference implementations used as test oracles.

These deliberately share no code with the production paths: NMS by repeated
global-max selection, AP by brute-force enumeration over recall points, and
dense attention recomputed in plain numpy from a block's weights.
"""

import math

import numpy as np


def iou_xyxy(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_reference(detections, iou_threshold, conf_threshold, per_class):
    """O(n^2) reference: repeatedly take the best remaining candidate and
    erase everything it suppresses."""
    remaining = [d for d in detections if d.confidence >= conf_threshold]
    kept = []
    while remaining:
        best = min(remaining, key=lambda d: (-d.confidence, d.class_id, d.bbox[0], d.bbox[1]))
        kept.append(best)
        nxt = []
        for d in remaining:
            if d is best:
                continue
            if per_class and d.class_id != best.class_id:
                nxt.append(d)
                continue
            if iou_xyxy(best.bbox, d.bbox) <= iou_threshold:
                nxt.append(d)
        remaining = nxt
    return kept


def ap_bruteforce(detections, ground_truth, class_id, iou_thr=0.5):
    """All-point-interpolated AP by explicit enumeration of the PR curve."""
    gts = [g for g in ground_truth if g.class_id == class_id]
    assert gts, "oracle needs at least one ground truth"
    dets = sorted(
        (d for d in detections if d.class_id == class_id),
        key=lambda d: (-d.confidence, d.class_id, d.bbox[0], d.bbox[1]),
    )
    used = set()
    flags = []
    for d in dets:
        best_iou, best_g = 0.0, None
        for gi, g in enumerate(gts):
            if gi in used or g.image_id != d.image_id:
                continue
            v = iou_xyxy(d.bbox, g.bbox)
            if v > best_iou:
                best_iou, best_g = v, gi
        if best_g is not None and best_iou >= iou_thr:
            used.add(best_g)
            flags.append(1)
        else:
            flags.append(0)

    n_gt = len(gts)
    precisions, recalls = [], []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += 1 - f
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)

    # area under the interpolated curve, enumerated point by point
    ap = 0.0
    prev_r = 0.0
    for i in range(len(flags)):
        if flags[i] != 1:
            continue
        r = recalls[i]
        p_interp = max(precisions[j] for j in range(len(flags)) if recalls[j] >= r)
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def transformer_block_dense_reference(block, x):
    """Full-attention forward of a TransformerBlock in plain numpy.

    Valid when the input spatial extent equals the block's window, so
    windowed and global attention coincide.
    """
    n, c, h, w = x.shape
    assert h == block.window and w == block.window
    tok = x.transpose(0, 2, 3, 1).reshape(n, h * w, c).astype(np.float64)

    def ln(z, gamma, beta):
        mu = z.mean(axis=-1, keepdims=True)
        var = z.var(axis=-1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-5) * gamma + beta

    def lin(z, layer):
        y = z @ layer.weight.data.astype(np.float64).T
        if layer.bias is not None:
            y = y + layer.bias.data.astype(np.float64)
        return y

    heads, hd = block.heads, block.head_dim
    y = ln(tok, block.ln1_g.data.astype(np.float64), block.ln1_b.data.astype(np.float64))
    q = lin(y, block.q).reshape(n, h * w, heads, hd).transpose(0, 2, 1, 3)
    k = lin(y, block.k).reshape(n, h * w, heads, hd).transpose(0, 2, 1, 3)
    v = lin(y, block.v).reshape(n, h * w, heads, hd).transpose(0, 2, 1, 3)
    logits = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd)
    logits = logits + block.pos_bias.data.astype(np.float64)[None]
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn = e / e.sum(axis=-1, keepdims=True)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, h * w, c)
    tok = tok + lin(out, block.proj)

    y = ln(tok, block.ln2_g.data.astype(np.float64), block.ln2_b.data.astype(np.float64))
    hmid = lin(y, block.fc1)
    hmid = hmid / (1.0 + np.exp(-hmid))  # silu
    tok = tok + lin(hmid, block.fc2)
    return tok.reshape(n, h, w, c).transpose(0, 3, 1, 2).astype(np.float32)
