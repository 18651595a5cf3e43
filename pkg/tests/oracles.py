"""Brute-force reference implementations, written independently of the package.

Everything here uses plain Python loops over scalars so that agreement with the
vectorised code is meaningful.
"""

import itertools
import math

import numpy as np


def iou(a, b):
    al, at, aw, ah = (float(v) for v in a[:4])
    bl, bt, bw, bh = (float(v) for v in b[:4])
    iw = max(0.0, min(al + aw, bl + bw) - max(al, bl))
    ih = max(0.0, min(at + ah, bt + bh) - max(at, bt))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def raster_iou(a, b):
    """IoU by counting unit cells of integer boxes."""
    def cells(r):
        l, t, w, h = (int(v) for v in r)
        return {(x, y) for x in range(l, l + w) for y in range(t, t + h)}
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def conv2d(x, w, b, stride=1, pad=0, dilation=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[oc, ic, ky, kx] * xp[i, ic, y * stride + ky * dilation,
                                                              xx * stride + kx * dilation]
                    out[i, oc, y, xx] = acc
    return out


def transposed_conv_scatter(x, k):
    """4x4 stride-2 pad-1 transposed conv of an edge-replicated single-channel map by scatter-add."""
    h, w = x.shape
    xp = np.pad(x, 1, mode="edge")
    full = np.zeros((2 * (h + 2) + 2, 2 * (w + 2) + 2))
    for i in range(h + 2):
        for j in range(w + 2):
            for ky in range(4):
                for kx in range(4):
                    full[2 * i + ky, 2 * j + kx] += xp[i, j] * k[ky, kx]
    # drop the padding ring (2 output cells per input cell) and the transposed-conv pad of 1
    return full[3:3 + 2 * h, 3:3 + 2 * w]


def nms(boxes, scores, thr):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def nms_is_valid(boxes, scores, thr, kept):
    """Exhaustive check: kept set is an antichain and every dropped box is covered by
    a kept box ranked ahead of it."""
    rank = {i: (-scores[i], i) for i in range(len(boxes))}
    for a, b in itertools.combinations(kept, 2):
        if iou(boxes[a], boxes[b]) > thr:
            return False
    for i in set(range(len(boxes))) - set(kept):
        if not any(iou(boxes[i], boxes[k]) > thr and rank[k] < rank[i] for k in kept):
            return False
    return True


def encode(gt, anchor):
    gx, gy = gt[0] + gt[2] / 2, gt[1] + gt[3] / 2
    ax, ay = anchor[0] + anchor[2] / 2, anchor[1] + anchor[3] / 2
    return ((gx - ax) / anchor[2], (gy - ay) / anchor[3],
            math.log(gt[2] / anchor[2]), math.log(gt[3] / anchor[3]))


def label_anchors(anchors, gts, pos=0.5, neg=0.3, force=True):
    """Per-anchor loop labelling; returns (labels, matched gt)."""
    n = len(anchors)
    labels, matched = [0] * n, [-1] * n
    if not len(gts):
        return labels, matched
    table = [[iou(a, g) for g in gts] for a in anchors]
    for i in range(n):
        best_g, best = 0, table[i][0]
        for g in range(1, len(gts)):
            if table[i][g] > best:
                best_g, best = g, table[i][g]
        if best > pos:
            labels[i], matched[i] = 1, best_g
        elif best >= neg:
            labels[i] = -1
    if force:
        for g in range(len(gts)):
            best_a, best = 0, table[0][g]
            for i in range(1, n):
                if table[i][g] > best:
                    best_a, best = i, table[i][g]
            if best > 0 and labels[best_a] != 1:
                labels[best_a], matched[best_a] = 1, g
    return labels, matched


def spatial_suppress(grid):
    h, w, s = grid.shape
    out = np.zeros_like(grid)
    alive = np.zeros(grid.shape, dtype=bool)
    for k in range(s):
        for y in range(h):
            for x in range(w):
                ok = True
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if (dy or dx) and 0 <= y + dy < h and 0 <= x + dx < w:
                            if not grid[y, x, k] > grid[y + dy, x + dx, k]:
                                ok = False
                if ok:
                    out[y, x, k] = grid[y, x, k]
                    alive[y, x, k] = True
    return out, alive


def select_hard(losses, labels, batch, survived):
    """Sort-based selection: batch//4 positives max, negatives fill, ties by index."""
    def ranked(cls):
        idx = [i for i in range(len(losses)) if survived[i] and labels[i] == cls]
        return sorted(idx, key=lambda i: (-losses[i], i))
    pos = ranked(1)[:batch // 4]
    neg = ranked(0)[:batch - len(pos)]
    return sorted(pos + neg)


def roi_pool(fm, region, stride, out=5):
    """Bins from the floor/ceil cell cover with per-bin floor/ceil splits."""
    c, fh, fw = fm.shape
    l, t, w, h = region
    x0 = min(max(math.floor(l / stride), 0), fw)
    y0 = min(max(math.floor(t / stride), 0), fh)
    x1 = min(max(math.ceil((l + w) / stride), 0), fw)
    y1 = min(max(math.ceil((t + h) / stride), 0), fh)
    nx, ny = x1 - x0, y1 - y0
    res = np.zeros((c, out, out))
    for ch in range(c):
        for by in range(out):
            ya, yb = y0 + math.floor(by * ny / out), y0 + math.ceil((by + 1) * ny / out)
            for bx in range(out):
                xa, xb = x0 + math.floor(bx * nx / out), x0 + math.ceil((bx + 1) * nx / out)
                vals = [fm[ch, yy, xx] for yy in range(ya, yb) for xx in range(xa, xb)]
                res[ch, by, bx] = max(vals) if vals else 0.0
    return res


def greedy_match_exhaustive(dets, scores, gts, thr=0.5):
    """Enumerate every one-to-one partial assignment with IoU > thr and keep the
    lexicographically best one in descending-score detection order (which is
    what the greedy-by-score rule produces). Returns tp flags in that order."""
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    table = [[iou(dets[i], g) for g in gts] for i in order]
    best_key, best = None, None

    def rec(i, used, chosen):
        nonlocal best_key, best
        if i == len(order):
            key = tuple(table[k][g] if g is not None else -1.0 for k, g in enumerate(chosen))
            if best_key is None or key > best_key:
                best_key, best = key, list(chosen)
            return
        rec(i + 1, used, chosen + [None])
        for g in range(len(gts)):
            if g not in used and table[i][g] > thr:
                rec(i + 1, used | {g}, chosen + [g])

    rec(0, frozenset(), [])
    tp = [g is not None for g in best]
    return tp, len(gts) - sum(tp)


def average_precision(scores, tp, n_gt):
    """AP by enumerating every distinct threshold and taking the precision envelope."""
    thresholds = sorted(set(scores), reverse=True)
    pts = []
    for th in thresholds:
        sel = [t for s, t in zip(scores, tp) if s >= th]
        pts.append((sum(sel) / n_gt, sum(sel) / len(sel)))
    ap, prev_r = 0.0, 0.0
    for r, _ in pts:
        env = max(p for rr, p in pts if rr >= r)
        ap += (r - prev_r) * env
        prev_r = r
    return ap


def stump_scores(x, thr, left, right):
    return [left if v <= thr else right for v in x]
