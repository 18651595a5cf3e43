"""Detection evaluation: one-to-one greedy matching, PR/AP, and recall by box height."""

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .boxes import as_boxes, iou_matrix

MATCH_IOU = 0.5
HEIGHT_BINS = (("small", 8.0, 32.0), ("medium", 32.0, 360.0), ("large", 360.0, 900.0))
BRANCH_NAMES = ("det4", "det16", "det32")


class DetectionsFormatError(ValueError):
    pass


class Detection(NamedTuple):
    image_id: str
    box: tuple      # (l, t, w, h)
    score: float
    branch: int = -1


@dataclass
class EvalReport:
    pr_points: list
    ap: float
    recall_by_bin: dict = field(default_factory=dict)
    counts: tuple = (0, 0, 0)   # (tp, fp, fn) over every detection


# -- detections file ------------------------------------------------------------------

def write_detections(path, dets):
    with open(path, "w") as f:
        for d in dets:
            l, t, w, h = d.box
            line = f"{d.image_id} {l:.4f} {t:.4f} {w:.4f} {h:.4f} {d.score:.8f}"
            if d.branch >= 0:
                line += f" {d.branch}"
            f.write(line + "\n")


def read_detections(path):
    """Parse ``image_id left top width height score [branch]`` lines."""
    dets = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (6, 7):
                raise DetectionsFormatError(f"{path}:{lineno}: expected 6 or 7 fields, got {len(parts)}")
            try:
                box = tuple(float(v) for v in parts[1:5])
                score = float(parts[5])
                branch = int(parts[6]) if len(parts) == 7 else -1
            except ValueError as exc:
                raise DetectionsFormatError(f"{path}:{lineno}: {exc}") from None
            if not 0.0 <= score <= 1.0 or box[2] <= 0 or box[3] <= 0:
                raise DetectionsFormatError(f"{path}:{lineno}: score outside [0,1] or non-positive size")
            dets.append(Detection(parts[0], box, score, branch))
    return dets


def group_by_image(dets):
    out = {}
    for d in dets:
        out.setdefault(d.image_id, []).append(d)
    return out


# -- matching -------------------------------------------------------------------------

def match(boxes, scores, gts, iou_thr=MATCH_IOU):
    """Greedy one-to-one matching in descending score order (stable for ties).

    Returns ``(order, tp, fn)``: ``order`` indexes the detections by descending
    score, ``tp[i]`` flags whether ``order[i]`` consumed a gt, ``fn`` counts
    gts left unmatched.
    """
    boxes = as_boxes(boxes)
    gts = as_boxes(gts)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    if len(gts) == 0 or len(boxes) == 0:
        return order, tp, len(gts)
    iou = iou_matrix(boxes[order], gts)
    free = np.ones(len(gts), dtype=bool)
    for i in range(len(order)):
        cand = np.where(free, iou[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] > iou_thr:
            tp[i] = True
            free[j] = False
    return order, tp, int(free.sum())


# -- precision / recall -----------------------------------------------------------------

def pr_and_ap(scores, tp, n_gt):
    """PR points over every distinct score threshold and all-points-interpolated AP.

    ``scores``/``tp`` are pooled over all images. Tied scores enter together.
    """
    if n_gt <= 0:
        raise ValueError("pr_and_ap: evaluation set contains no ground-truth boxes")
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if len(scores) == 0:
        return [], 0.0
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], tp[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    last = np.r_[s[1:] != s[:-1], True]   # end of each tie group
    rec = ctp[last] / n_gt
    prec = ctp[last] / (ctp[last] + cfp[last])
    points = [(float(r), float(p)) for r, p in zip(rec, prec)]
    mrec = np.r_[0.0, rec]
    mpre = np.r_[prec, 0.0]
    env = np.maximum.accumulate(mpre[::-1])[::-1][:-1]
    # exact summation: zero-width recall steps must not shift AP by rounding
    ap = math.fsum((mrec[1:] - mrec[:-1]) * env)
    return points, min(max(ap, 0.0), 1.0)


def evaluate(dets, gts_by_image, iou_thr=MATCH_IOU, score_thr=0.0):
    """Full report over a detection list and ``{image_id: gt boxes}``."""
    by_image = group_by_image(dets)
    unknown = sorted(set(by_image) - set(gts_by_image))
    if unknown:
        raise DetectionsFormatError(f"detections reference unknown image ids: {unknown[:5]}")
    all_scores, all_tp, fn = [], [], 0
    n_gt = 0
    for image_id in sorted(gts_by_image):
        gts = as_boxes(gts_by_image[image_id])
        n_gt += len(gts)
        ds = by_image.get(image_id, [])
        sc = np.array([d.score for d in ds], dtype=np.float64)
        order, tp, missed = match([d.box for d in ds], sc, gts, iou_thr)
        all_scores.append(sc[order])
        all_tp.append(tp)
        fn += missed
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    points, ap = pr_and_ap(scores, tp, n_gt)
    rec = recall_by_scale(dets, gts_by_image, score_thr=score_thr, iou_thr=iou_thr)
    return EvalReport(points, ap, rec, (int(tp.sum()), int((~tp).sum()), fn))


# -- recall by height ---------------------------------------------------------------------

def height_bin(h, bins=HEIGHT_BINS):
    """Name of the bin holding height ``h``; the first bin is closed, the others (lo, hi]."""
    for k, (name, lo, hi) in enumerate(bins):
        if (lo <= h if k == 0 else lo < h) and h <= hi:
            return name
    return None


def covered(dets_boxes, gts, iou_thr=MATCH_IOU):
    """Per-gt flag: some detection overlaps it with IoU > iou_thr."""
    gts = as_boxes(gts)
    if len(gts) == 0 or len(dets_boxes) == 0:
        return np.zeros(len(gts), dtype=bool)
    return iou_matrix(as_boxes(dets_boxes), gts).max(axis=0) > iou_thr


def recall_by_scale(dets, gts_by_image, bins=HEIGHT_BINS, score_thr=0.0, iou_thr=MATCH_IOU, branch=None):
    """Fraction of gts per height bin covered by a detection scoring >= ``score_thr``.

    Recall is coverage-based (not one-to-one) so the union over branches is
    never below any single branch. With ``branch`` set, only detections from
    that branch count. Empty bins map to None. The "all" entry pools the bins.
    """
    by_image = group_by_image(dets)
    hits = {name: 0 for name, _, _ in bins}
    totals = dict(hits)
    for image_id, gts in gts_by_image.items():
        gts = as_boxes(gts)
        ds = [d for d in by_image.get(image_id, [])
              if d.score >= score_thr and (branch is None or d.branch == branch)]
        flags = covered([d.box for d in ds], gts, iou_thr)
        for g, ok in zip(gts, flags):
            name = height_bin(g[3], bins)
            if name is None:
                continue
            totals[name] += 1
            hits[name] += int(ok)
    out = {name: (hits[name] / totals[name] if totals[name] else None) for name in totals}
    n = sum(totals.values())
    out["all"] = sum(hits.values()) / n if n else None
    return out


def branch_recall_table(dets, gts_by_image, bins=HEIGHT_BINS, score_thr=0.0):
    """Rows (branch name, recall dict) for every branch plus the combined set."""
    rows = [(name, recall_by_scale(dets, gts_by_image, bins, score_thr, branch=b))
            for b, name in enumerate(BRANCH_NAMES)]
    rows.append(("combined", recall_by_scale(dets, gts_by_image, bins, score_thr)))
    return rows


# -- report files -----------------------------------------------------------------------

def fmt(v):
    return "NA" if v is None else f"{v:.4f}"


def write_report(path, report):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["ap", fmt(report.ap)])
        tp, fp, fn = report.counts
        w.writerow(["tp", tp])
        w.writerow(["fp", fp])
        w.writerow(["fn", fn])
        for name, v in report.recall_by_bin.items():
            w.writerow([f"recall_{name}", fmt(v)])
        for r, p in report.pr_points:
            w.writerow(["pr_point", f"{r:.6f};{p:.6f}"])


def read_report(path):
    out = {}
    with open(path, newline="") as f:
        for row in list(csv.reader(f))[1:]:
            if row[0] != "pr_point":
                out[row[0]] = row[1]
    return out


def write_recall_table(path, rows, bins=HEIGHT_BINS, first_cols=("branch",)):
    """CSV with one row per entry ``(labels tuple, recall dict)``; NA marks empty bins."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(first_cols) + [f"recall_{name}" for name, _, _ in bins] + ["recall_all"])
        for labels, rec in rows:
            labels = labels if isinstance(labels, tuple) else (labels,)
            w.writerow(list(labels) + [fmt(rec[name]) for name, _, _ in bins] + [fmt(rec["all"])])


def pr_svg(path, curves, size=320):
    """Minimal SVG plot of one or more PR curves: ``curves`` is [(label, points, ap)]."""
    pad = 40
    span = size - 2 * pad
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>',
             f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">precision</text>']
    for k, (label, points, ap) in enumerate(curves):
        c = colours[k % len(colours)]
        if points:
            xy = " ".join(f"{pad + r * span:.2f},{pad + (1 - p) * span:.2f}" for r, p in points)
            parts.append(f'<polyline points="{xy}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        parts.append(f'<text x="{pad + 6}" y="{pad + 16 + 14 * k}" font-size="11" fill="{c}">'
                     f'{label} AP={ap:.3f}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")

