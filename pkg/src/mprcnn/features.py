"""Fixed-grid ROI max pooling of face and context regions for the second stage."""

import numpy as np

from .boxes import as_boxes, clip_to_image, context_region

POOL = 5
PARTS = ("face_a", "face_b", "context_a", "context_b")


def region_cells(region, stride, feat_h, feat_w):
    """Feature-cell span [x0, x1) x [y0, y1) covering a pixel region (floor/ceil)."""
    l, t, w, h = (float(v) for v in as_boxes(region)[0])
    x0 = min(max(int(np.floor(l / stride)), 0), feat_w)
    y0 = min(max(int(np.floor(t / stride)), 0), feat_h)
    x1 = min(max(int(np.ceil((l + w) / stride)), 0), feat_w)
    y1 = min(max(int(np.ceil((t + h) / stride)), 0), feat_h)
    return x0, y0, x1, y1


def bin_edges(start, n, out=POOL):
    b = np.arange(out)
    return start + (b * n) // out, start + -(-((b + 1) * n) // out)


def roi_pool(feature, region, stride=1, out=POOL):
    """Max-pool ``region`` (pixel l, t, w, h) of a (C, H, W) or (1, C, H, W) map into (C, out, out).

    Bins follow the floor/ceil split of the covered cells, so neighbouring
    bins may share a cell when the region spans fewer than ``out`` cells.
    """
    fm = feature[0] if feature.ndim == 4 else feature
    c, fh, fw = fm.shape
    x0, y0, x1, y1 = region_cells(region, stride, fh, fw)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"roi_pool: region {tuple(as_boxes(region)[0])} covers no feature cells")
    ys, ye = bin_edges(y0, y1 - y0, out)
    xs, xe = bin_edges(x0, x1 - x0, out)
    rows = np.empty((c, out, x1 - x0), dtype=fm.dtype)
    for i in range(out):
        rows[:, i] = fm[:, ys[i]:ye[i], x0:x1].max(axis=1) if ye[i] > ys[i] else 0
    pooled = np.empty((c, out, out), dtype=fm.dtype)
    for j in range(out):
        a, b = xs[j] - x0, xe[j] - x0
        pooled[:, :, j] = rows[:, :, a:b].max(axis=2) if b > a else 0
    return pooled


def feature_length(channels_a, channels_b, out=POOL):
    return 2 * out * out * (channels_a + channels_b)


def part_slices(channels_a, channels_b, out=POOL):
    """Column ranges of the four sub-vectors in an extracted feature row."""
    sizes = [channels_a, channels_b, channels_a, channels_b]
    out_sl, start = {}, 0
    for name, ch in zip(PARTS, sizes):
        n = ch * out * out
        out_sl[name] = slice(start, start + n)
        start += n
    return out_sl


def part_columns(kind, channels_a, channels_b, out=POOL):
    """Column indices for ``kind`` in {"face", "context", "both"}."""
    sl = part_slices(channels_a, channels_b, out)
    names = {"face": PARTS[:2], "context": PARTS[2:], "both": PARTS}[kind]
    return np.concatenate([np.arange(sl[n].start, sl[n].stop) for n in names])


def extract(proposals, maps, img_w, img_h, out=POOL):
    """Pool face and context regions of each proposal on both maps.

    ``maps`` is ``((map_a, stride_a), (map_b, stride_b))``. Returns
    ``(features (n_kept, D) float32, kept_index)``; proposals whose face region
    falls entirely outside the image are dropped.
    """
    (ma, sa), (mb, sb) = maps
    boxes = as_boxes(proposals)
    face = clip_to_image(boxes, img_w, img_h)
    ctx = clip_to_image(context_region(boxes), img_w, img_h)
    dim = feature_length(ma.shape[1], mb.shape[1], out)
    rows, kept = [], []
    for i in range(len(boxes)):
        if face[i, 2] <= 0 or face[i, 3] <= 0:
            continue
        parts = [roi_pool(ma, face[i], sa, out), roi_pool(mb, face[i], sb, out),
                 roi_pool(ma, ctx[i], sa, out), roi_pool(mb, ctx[i], sb, out)]
        rows.append(np.concatenate([p.reshape(-1) for p in parts]))
        kept.append(i)
    feats = np.asarray(rows, dtype=np.float32).reshape(-1, dim)
    return feats, np.asarray(kept, dtype=np.int64)


def write_feature_dump(path, features, rpn_scores, labels):
    """Flat little-endian float32 matrix [features | rpn_score | label] plus a text header."""
    mat = np.concatenate([np.asarray(features, np.float32),
                          np.asarray(rpn_scores, np.float32)[:, None],
                          np.asarray(labels, np.float32)[:, None]], axis=1)
    mat.astype("<f4").tofile(path)
    with open(path + ".hdr", "w") as f:
        f.write(f"rows {mat.shape[0]}\ncols {mat.shape[1]}\nlabel_col {mat.shape[1] - 1}\n"
                f"score_col {mat.shape[1] - 2}\ndtype float32le\n")


def read_feature_dump(path):
    meta = {}
    with open(path + ".hdr") as f:
        for line in f:
            if line.strip():
                k, v = line.split()
                meta[k] = v
    rows, cols = int(meta["rows"]), int(meta["cols"])
    mat = np.fromfile(path, dtype="<f4")
    if mat.size != rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} values, found {mat.size}")
    mat = mat.reshape(rows, cols).astype(np.float32)
    lc, sc = int(meta["label_col"]), int(meta["score_col"])
    feat_cols = [c for c in range(cols) if c not in (lc, sc)]
    return mat[:, feat_cols], mat[:, sc].astype(np.float64), mat[:, lc].astype(np.int64)
