"""Box geometry in (left, top, width, height) pixel coordinates.

Intervals are half-open and continuous: area is ``w * h`` with no +1 pixel
correction. Functions accept a single box (shape (4,)) or a stack (N, 4).
"""

from typing import NamedTuple

import numpy as np

BBOX_CLAMP = 4.0


class Box(NamedTuple):
    l: float
    t: float
    w: float
    h: float
    score: float = 0.0

    def array(self):
        return np.array([self.l, self.t, self.w, self.h], dtype=np.float64)


def as_boxes(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :4]
    elif arr.size == 0:
        arr = arr.reshape(0, 4)
    return arr[:, :4]


def iou_matrix(a, b):
    """Pairwise IoU between (N, 4) and (M, 4) box stacks."""
    a, b = as_boxes(a), as_boxes(b)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    # rounding can push identical boxes a hair above 1
    return np.minimum(out, 1.0)


def iou(a, b):
    a, b = as_boxes(a)[0], as_boxes(b)[0]
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError("iou: boxes must have positive width and height")
    return float(iou_matrix(a, b)[0, 0])


def centers(boxes):
    b = as_boxes(boxes)
    return b[:, 0] + 0.5 * b[:, 2], b[:, 1] + 0.5 * b[:, 3]


def encode(gt, anchor):
    """Regression targets (bx, by, bw, bh) of ``gt`` relative to ``anchor``."""
    g, a = as_boxes(gt), as_boxes(anchor)
    gx, gy = centers(g)
    ax, ay = centers(a)
    out = np.stack([(gx - ax) / a[:, 2], (gy - ay) / a[:, 3],
                    np.log(g[:, 2] / a[:, 2]), np.log(g[:, 3] / a[:, 3])], axis=1)
    return out[0] if np.ndim(gt) == 1 else out


def decode(targets, anchor):
    """Inverse of :func:`encode`; log-scale factors are clamped to [-4, 4]."""
    t = np.asarray(targets, dtype=np.float64)
    single = t.ndim == 1
    t = t.reshape(-1, 4)
    a = as_boxes(anchor)
    ax, ay = centers(a)
    cx = t[:, 0] * a[:, 2] + ax
    cy = t[:, 1] * a[:, 3] + ay
    w = np.exp(np.clip(t[:, 2], -BBOX_CLAMP, BBOX_CLAMP)) * a[:, 2]
    h = np.exp(np.clip(t[:, 3], -BBOX_CLAMP, BBOX_CLAMP)) * a[:, 3]
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, w, h], axis=1)
    return out[0] if single else out


def context_region(r):
    """The [l - w, t, 3w, 3h] region around a box (not clipped)."""
    b = as_boxes(r)
    out = np.stack([b[:, 0] - b[:, 2], b[:, 1], 3 * b[:, 2], 3 * b[:, 3]], axis=1)
    return out[0] if np.ndim(r) == 1 else out


def clip_to_image(r, img_w, img_h):
    """Intersect with [0, img_w] x [0, img_h]; empty intersections come back with w = h = 0."""
    if img_w <= 0 or img_h <= 0:
        raise ValueError("clip_to_image: image size must be positive")
    b = as_boxes(r)
    x1 = np.clip(b[:, 0], 0, img_w)
    y1 = np.clip(b[:, 1], 0, img_h)
    x2 = np.clip(b[:, 0] + b[:, 2], 0, img_w)
    y2 = np.clip(b[:, 1] + b[:, 3], 0, img_h)
    w, h = x2 - x1, y2 - y1
    empty = (w <= 0) | (h <= 0)
    w[empty] = 0.0
    h[empty] = 0.0
    out = np.stack([x1, y1, w, h], axis=1)
    return out[0] if np.ndim(r) == 1 else out


def nms(boxes, scores, threshold):
    """Greedy NMS. Returns kept indices in descending score order.

    Equal scores keep the lower index first.
    """
    b = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(b) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    x1, y1 = b[:, 0], b[:, 1]
    x2, y2 = x1 + b[:, 2], y1 + b[:, 3]
    areas = b[:, 2] * b[:, 3]
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        ovr = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        order = rest[ovr <= threshold]
    return np.array(keep, dtype=np.int64)
