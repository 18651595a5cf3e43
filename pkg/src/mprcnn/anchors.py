"""Per-branch anchor grids and anchor/ground-truth labelling."""

from dataclasses import dataclass, field

import numpy as np

from .boxes import as_boxes, encode, iou_matrix

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
POS_IOU = 0.5
NEG_IOU = 0.3


@dataclass(frozen=True)
class BranchConfig:
    name: str
    stride: int
    scales: tuple


BRANCHES = (
    BranchConfig("Det-4", 4, (8, 16, 32)),
    BranchConfig("Det-16", 16, (32, 64, 128, 256, 360)),
    BranchConfig("Det-32", 32, (360, 512, 720, 900)),
)
BRANCH_BY_NAME = {b.name: b for b in BRANCHES}


@dataclass
class AnchorSet:
    branch: BranchConfig
    feat_h: int
    feat_w: int
    boxes: np.ndarray  # (feat_h * feat_w * k, 4), row-major over (y, x, scale)

    def __len__(self):
        return len(self.boxes)

    @property
    def num_scales(self):
        return len(self.branch.scales)


@dataclass
class AnchorLabels:
    label: np.ndarray                 # int8: POSITIVE / NEGATIVE / IGNORE
    matched_gt: np.ndarray            # int64, -1 where not positive
    reg_target: np.ndarray            # (n, 4), zeros where not positive
    forced: np.ndarray = field(default=None)  # bool, positives created by the best-anchor rule

    def split(self, sizes):
        out, start = [], 0
        for s in sizes:
            sl = slice(start, start + s)
            out.append(AnchorLabels(self.label[sl], self.matched_gt[sl], self.reg_target[sl],
                                    self.forced[sl]))
            start += s
        return out


def generate(branch, feat_h, feat_w):
    if feat_h < 1 or feat_w < 1:
        raise ValueError(f"anchor grid must be at least 1x1, got {feat_h}x{feat_w}")
    s = branch.stride
    ys, xs = np.meshgrid((np.arange(feat_h) + 0.5) * s, (np.arange(feat_w) + 0.5) * s, indexing="ij")
    sides = np.asarray(branch.scales, dtype=np.float64)
    cx = np.repeat(xs.reshape(-1), len(sides))
    cy = np.repeat(ys.reshape(-1), len(sides))
    side = np.tile(sides, feat_h * feat_w)
    boxes = np.stack([cx - side / 2, cy - side / 2, side, side], axis=1)
    return AnchorSet(branch, feat_h, feat_w, boxes)


def label_boxes(anchors, gts, force_best=True, pos_iou=POS_IOU, neg_iou=NEG_IOU):
    """Label an (n, 4) anchor stack against ground-truth boxes.

    Positive when max IoU > ``pos_iou``, negative when max IoU < ``neg_iou``,
    ignored in between (threshold values themselves are ignored). With
    ``force_best`` the highest-IoU anchor of every gt becomes positive too.
    """
    anchors = as_boxes(anchors)
    gts = as_boxes(gts)
    n = len(anchors)
    label = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    forced = np.zeros(n, dtype=bool)
    if len(gts) == 0 or n == 0:
        return AnchorLabels(label, matched, targets, forced)
    ious = iou_matrix(anchors, gts)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    label[(best >= neg_iou) & (best <= pos_iou)] = IGNORE
    pos = best > pos_iou
    label[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    if force_best:
        for g in range(len(gts)):
            col = ious[:, g]
            if col.max() <= 0:
                continue
            a = int(col.argmax())
            if label[a] != POSITIVE:
                label[a] = POSITIVE
                matched[a] = g
                forced[a] = True
    pos = label == POSITIVE
    targets[pos] = encode(gts[matched[pos]], anchors[pos])
    return AnchorLabels(label, matched, targets, forced)


def label(anchor_set, gts, force_best=True):
    return label_boxes(anchor_set.boxes, gts, force_best=force_best)


def label_branches(anchor_sets, gts, force_best=True):
    """Label several branches jointly, so the best-anchor rule picks one anchor
    per gt across all branches rather than one per branch."""
    stacked = np.concatenate([a.boxes for a in anchor_sets], axis=0)
    joint = label_boxes(stacked, gts, force_best=force_best)
    return joint.split([len(a) for a in anchor_sets])
