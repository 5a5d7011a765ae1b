"""Dataset ingestion, synthetic data generation, and augmentation.

Images are float32 arrays of shape (3, H, W) in [0, 1]. Boxes are
(left, top, width, height) in pixels. The on-disk layout is
``images/*.ppm`` + ``annotations/*.txt`` (same stem) + ``classes.txt``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Rng


class ParseError(ValueError):
    """Malformed annotation text; carries a 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DatasetError(RuntimeError):
    pass


@dataclass
class Annotation:
    bbox: tuple  # (left, top, width, height) pixels
    category: int
    score_flag: int = 1
    truncation: int = 0
    occlusion: int = 0


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    annotations: list
    source_id: str = ""

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]


@dataclass
class AnchorSet:
    """Per-scale prior box sizes, pixels at the reference input size."""

    scales: np.ndarray  # (3, 3, 2), ordered by stride 8, 16, 32
    strides: tuple = (8, 16, 32)

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float32).reshape(3, 3, 2)
        if not (self.scales > 0).all():
            raise ValueError("anchor dimensions must be positive")

    def as_array(self):
        return self.scales


# ---------------------------------------------------------------------------
# portable pixmap io
# ---------------------------------------------------------------------------

def write_ppm(path, image):
    """Write a (3, H, W) float image in [0, 1] as binary P6, maxval 255."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    h, w = img.shape[1], img.shape[2]
    pixels = (img * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path):
    """Read a binary P6 pixmap into a (3, H, W) float32 array in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise DatasetError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":  # comment runs to end of line
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    if raw.size != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
    return img


# ---------------------------------------------------------------------------
# annotation text format
# ---------------------------------------------------------------------------

def parse_visdrone(text, image_size, n_classes=None):
    """Parse 8-field comma-separated annotation lines.

    ``image_size`` is (width, height). Entries with score 0 (ignored
    regions) are dropped, as are out-of-range categories when ``n_classes``
    is given; boxes are clipped to the image. Returns (annotations, stats).
    """
    img_w, img_h = image_size
    annotations = []
    stats = {"ignored_regions": 0, "bad_category": 0, "clipped_away": 0}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip().rstrip(",")
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise ParseError(line_no, f"expected 8 comma-separated fields, got {len(parts)}")
        try:
            left, top, w, h, score, cat, trunc, occ = (int(p) for p in parts)
        except ValueError:
            raise ParseError(line_no, f"non-integer field in {line!r}") from None
        if score == 0:
            stats["ignored_regions"] += 1
            continue
        if n_classes is not None and not (0 <= cat < n_classes):
            stats["bad_category"] += 1
            continue
        x0 = min(max(left, 0), img_w)
        y0 = min(max(top, 0), img_h)
        x1 = min(max(left + w, 0), img_w)
        y1 = min(max(top + h, 0), img_h)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            stats["clipped_away"] += 1
            continue
        annotations.append(Annotation((x0, y0, x1 - x0, y1 - y0), cat, score, trunc, occ))
    return annotations, stats


def serialize_annotations(annotations):
    lines = []
    for a in annotations:
        l, t, w, h = (int(round(v)) for v in a.bbox)
        lines.append(f"{l},{t},{w},{h},{a.score_flag},{a.category},{a.truncation},{a.occlusion}")
    return "\n".join(lines) + ("\n" if lines else "")


def load_dataset(root, n_classes=None):
    """Load ``images/*.ppm`` + ``annotations/*.txt`` + ``classes.txt``."""
    img_dir = os.path.join(root, "images")
    ann_dir = os.path.join(root, "annotations")
    cls_file = os.path.join(root, "classes.txt")
    for p in (img_dir, ann_dir, cls_file):
        if not os.path.exists(p):
            raise DatasetError(f"dataset path missing: {p}")
    with open(cls_file) as f:
        classes = [ln.strip() for ln in f if ln.strip()]
    if n_classes is None:
        n_classes = len(classes)
    samples = []
    for name in sorted(os.listdir(img_dir)):
        if not name.endswith(".ppm"):
            continue
        stem = name[: -len(".ppm")]
        ann_path = os.path.join(ann_dir, stem + ".txt")
        if not os.path.exists(ann_path):
            raise DatasetError(f"missing annotation file: {ann_path}")
        img = read_ppm(os.path.join(img_dir, name))
        with open(ann_path) as f:
            anns, _ = parse_visdrone(f.read(), (img.shape[2], img.shape[1]), n_classes)
        samples.append(Sample(img, anns, stem))
    if not samples:
        raise DatasetError(f"no .ppm images found under {img_dir}")
    return samples, classes


def save_dataset(root, samples, classes):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "annotations"), exist_ok=True)
    with open(os.path.join(root, "classes.txt"), "w") as f:
        for c in classes:
            f.write(c + "\n")
    for s in samples:
        write_ppm(os.path.join(root, "images", s.source_id + ".ppm"), s.image)
        with open(os.path.join(root, "annotations", s.source_id + ".txt"), "w") as f:
            f.write(serialize_annotations(s.annotations))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_PALETTE = np.array(
    [
        (0.92, 0.15, 0.15),
        (0.10, 0.80, 0.20),
        (0.15, 0.25, 0.95),
        (0.95, 0.85, 0.10),
        (0.90, 0.15, 0.90),
        (0.10, 0.85, 0.85),
        (0.95, 0.55, 0.10),
        (0.55, 0.15, 0.85),
    ],
    dtype=np.float32,
)


def _textured_background(size, rng):
    coarse = rng.uniform(0.25, 0.55, (3, max(2, size // 16), max(2, size // 16)))
    bg = resize_bilinear(coarse.astype(np.float32), (size, size))
    bg += rng.normal(0.0, 0.02, bg.shape).astype(np.float32)
    return np.clip(bg, 0.0, 1.0)


def make_synthetic_dataset(n, image_size=256, classes=3, seed=0):
    """Colored rectangles/ellipses on a textured background, exact boxes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    samples = []
    for i in range(n):
        rng = root.child("sample", i)
        img = _textured_background(image_size, rng)
        anns = []
        for _ in range(int(rng.integers(1, 4))):
            cat = int(rng.integers(0, classes))
            color = _PALETTE[cat % len(_PALETTE)] * (0.85 + 0.15 * rng.random())
            w = int(rng.integers(int(0.12 * image_size), int(0.38 * image_size)))
            h = int(rng.integers(int(0.12 * image_size), int(0.38 * image_size)))
            placed = None
            for _attempt in range(8):
                x0 = int(rng.integers(0, image_size - w))
                y0 = int(rng.integers(0, image_size - h))
                ok = True
                for a in anns:
                    al, at, aw, ah = a.bbox
                    ix = max(0, min(x0 + w, al + aw) - max(x0, al))
                    iy = max(0, min(y0 + h, at + ah) - max(y0, at))
                    if ix * iy > 0.2 * min(w * h, aw * ah):
                        ok = False
                        break
                if ok:
                    placed = (x0, y0)
                    break
            if placed is None:
                continue
            x0, y0 = placed
            if cat % 2 == 0:
                mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
            else:
                cx, cy = x0 + w / 2.0, y0 + h / 2.0
                mask = ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
            img[:, mask] = color[:, None]
            anns.append(Annotation((float(x0), float(y0), float(w), float(h)), cat))
        samples.append(Sample(img, anns, f"synthetic_{i:05d}"))
    return samples


def make_sr_pairs(n, hr_size=32, scale=4, seed=0):
    """(LR, HR) image pairs: smooth gradients plus a block, box-downsampled."""
    root = Rng(seed)
    pairs = []
    yy, xx = np.mgrid[0:hr_size, 0:hr_size].astype(np.float32) / (hr_size - 1)
    for i in range(n):
        rng = root.child("pair", i)
        c0 = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        c1 = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        theta = rng.uniform(0.0, 2 * np.pi)
        ramp = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
        hr = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]
        bw = int(rng.integers(hr_size // 4, hr_size // 2))
        bx = int(rng.integers(0, hr_size - bw))
        by = int(rng.integers(0, hr_size - bw))
        hr[:, by : by + bw, bx : bx + bw] = rng.uniform(0.0, 1.0, 3).astype(np.float32)[:, None, None]
        hr = np.clip(hr, 0.0, 1.0).astype(np.float32)
        lr = hr.reshape(3, hr_size // scale, scale, hr_size // scale, scale).mean(axis=(2, 4))
        pairs.append((lr.astype(np.float32), hr))
    return pairs


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def resize_bilinear(image, out_hw):
    """Bilinear resample of a (C, H, W) image, half-pixel-center convention."""
    c, h, w = image.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return image.copy()
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy)[None, :, None] + bot * wy[None, :, None]).astype(np.float32)


@dataclass
class LetterboxTransform:
    """Maps original-image pixel coords to padded network coords and back."""

    sx: float
    sy: float
    pad_x: int
    pad_y: int
    orig_w: int
    orig_h: int
    size: int

    def box_to_net(self, bbox):
        l, t, w, h = bbox
        return (l * self.sx + self.pad_x, t * self.sy + self.pad_y, w * self.sx, h * self.sy)

    def box_to_orig(self, bbox):
        l, t, w, h = bbox
        return ((l - self.pad_x) / self.sx, (t - self.pad_y) / self.sy, w / self.sx, h / self.sy)

    def xyxy_to_orig(self, box):
        x1, y1, x2, y2 = box
        x1 = (x1 - self.pad_x) / self.sx
        x2 = (x2 - self.pad_x) / self.sx
        y1 = (y1 - self.pad_y) / self.sy
        y2 = (y2 - self.pad_y) / self.sy
        x1, x2 = np.clip([x1, x2], 0, self.orig_w)
        y1, y2 = np.clip([y1, y2], 0, self.orig_h)
        return (float(x1), float(y1), float(x2), float(y2))


def letterbox(sample, target, pad_value=0.447):
    """Aspect-preserving resize plus symmetric padding to target x target."""
    if target % 32:
        raise ValueError(f"letterbox target {target} must be divisible by 32")
    h, w = sample.height, sample.width
    scale = min(target / w, target / h)
    new_w = max(1, int(round(w * scale)))
    new_h = max(1, int(round(h * scale)))
    resized = resize_bilinear(sample.image, (new_h, new_w))
    pad_x = (target - new_w) // 2
    pad_y = (target - new_h) // 2
    canvas = np.full((3, target, target), pad_value, np.float32)
    canvas[:, pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    tf = LetterboxTransform(new_w / w, new_h / h, pad_x, pad_y, w, h, target)
    anns = [replace(a, bbox=tf.box_to_net(a.bbox)) for a in sample.annotations]
    return Sample(canvas, anns, sample.source_id), tf


def _clip_box_to_rect(bbox, rect):
    l, t, w, h = bbox
    rx0, ry0, rx1, ry1 = rect
    x0 = max(l, rx0)
    y0 = max(t, ry0)
    x1 = min(l + w, rx1)
    y1 = min(t + h, ry1)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def mosaic(samples, out_size, rng, jitter=0.25, min_area_frac=0.1):
    """Compose four samples on a 2x2 canvas around a jittered center.

    Each quadrant is filled by scaling its sample to cover the region and
    cropping the part adjacent to the center. Boxes are transformed,
    clipped to their quadrant, and dropped below ``min_area_frac`` of
    their scaled area.
    """
    if len(samples) != 4:
        raise ValueError("mosaic requires exactly 4 samples")
    s = out_size
    cx = s // 2 + int(round(s * rng.uniform(-jitter, jitter)))
    cy = s // 2 + int(round(s * rng.uniform(-jitter, jitter)))
    cx = min(max(cx, s // 4), 3 * s // 4)
    cy = min(max(cy, s // 4), 3 * s // 4)
    regions = [  # (x0, y0, x1, y1) per quadrant: TL, TR, BL, BR
        (0, 0, cx, cy),
        (cx, 0, s, cy),
        (0, cy, cx, s),
        (cx, cy, s, s),
    ]
    canvas = np.full((3, s, s), 0.447, np.float32)
    merged = []
    for sample, (rx0, ry0, rx1, ry1) in zip(samples, regions):
        rw, rh = rx1 - rx0, ry1 - ry0
        if rw <= 0 or rh <= 0:
            continue
        scale = max(rw / sample.width, rh / sample.height)
        new_w = max(rw, int(round(sample.width * scale)))
        new_h = max(rh, int(round(sample.height * scale)))
        resized = resize_bilinear(sample.image, (new_h, new_w))
        # crop anchored at the canvas-center corner of the quadrant
        crop_x = (new_w - rw) if rx1 == cx else 0
        crop_y = (new_h - rh) if ry1 == cy else 0
        canvas[:, ry0:ry1, rx0:rx1] = resized[:, crop_y : crop_y + rh, crop_x : crop_x + rw]
        sx = new_w / sample.width
        sy = new_h / sample.height
        for a in sample.annotations:
            l, t, w, h = a.bbox
            moved = (l * sx - crop_x + rx0, t * sy - crop_y + ry0, w * sx, h * sy)
            clipped = _clip_box_to_rect(moved, (rx0, ry0, rx1, ry1))
            if clipped is None:
                continue
            if clipped[2] * clipped[3] < min_area_frac * (w * sx) * (h * sy):
                continue
            merged.append(replace(a, bbox=clipped))
    return Sample(canvas, merged, "mosaic")


def mixup(a, b, lam):
    """Convex image combination with unioned annotations."""
    if a.image.shape != b.image.shape:
        raise DatasetError(
            f"mixup: image dims differ, {a.image.shape} vs {b.image.shape}"
        )
    lam = float(lam)
    img = (lam * a.image + (1.0 - lam) * b.image).astype(np.float32)
    return Sample(img, list(a.annotations) + list(b.annotations), "mixup")


# ---------------------------------------------------------------------------
# anchor clustering
# ---------------------------------------------------------------------------

def _wh_iou(boxes, centroids):
    """IoU of co-centered (w, h) boxes against centroids: (N, K)."""
    b = boxes[:, None, :]
    c = centroids[None, :, :]
    inter = np.minimum(b[..., 0], c[..., 0]) * np.minimum(b[..., 1], c[..., 1])
    union = b[..., 0] * b[..., 1] + c[..., 0] * c[..., 1] - inter
    return inter / np.maximum(union, 1e-12)


def anchor_kmeans(boxes, k=9, iters=30, seed=0):
    """k-means over (w, h) with 1 - IoU distance.

    Returns (AnchorSet, info). ``info['objective']`` is the per-iteration
    mean distance, guaranteed non-increasing: a mean-update step that would
    raise the objective is rolled back and iteration stops. Fewer than k
    distinct boxes falls back to quantile initialization with a warning.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    boxes = boxes[(boxes > 0).all(axis=1)]
    if boxes.shape[0] < k:
        raise DatasetError(f"anchor_kmeans needs at least {k} boxes with positive dims")
    distinct = np.unique(boxes, axis=0)
    info = {"objective": [], "fallback": False}
    rng = Rng(seed).child("anchor-kmeans")
    if distinct.shape[0] < k:
        qs = (np.arange(k) + 0.5) / k
        centroids = np.stack(
            [np.quantile(boxes[:, 0], qs), np.quantile(boxes[:, 1], qs)], axis=1
        )
        info["fallback"] = True
    else:
        pick = rng.choice(distinct.shape[0], k, replace=False)
        centroids = distinct[np.sort(pick)].copy()

    prev_obj = None
    for _ in range(iters):
        d = 1.0 - _wh_iou(boxes, centroids)
        assign = d.argmin(axis=1)
        obj = float(d[np.arange(len(boxes)), assign].mean())
        if prev_obj is not None and obj > prev_obj + 1e-12:
            centroids = prev_centroids  # mean update hurt the IoU objective
            break
        info["objective"].append(obj)
        prev_obj = obj
        prev_centroids = centroids.copy()
        new_centroids = centroids.copy()
        for j in range(k):
            members = boxes[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        if np.allclose(new_centroids, centroids):
            break
        centroids = new_centroids

    order = np.argsort(centroids[:, 0] * centroids[:, 1])
    anchors = centroids[order].reshape(3, 3, 2).astype(np.float32)
    return AnchorSet(anchors), info
