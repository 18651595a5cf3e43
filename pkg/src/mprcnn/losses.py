"""Per-branch classification + box-regression loss and its gradient."""

import logging

import numpy as np

from .layers import softmax_pair

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def cross_entropy(probs, labels):
    """-log p(true class) per sample, with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, PROB_FLOOR))


def smooth_l1(pred, gt):
    """Smooth-L1 (transition at 1) summed over the four coordinates, per sample."""
    x = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    per = np.where(x < 1, 0.5 * x * x, x - 0.5)
    return per.sum(axis=-1)


def branch_loss(probs, labels, pred_targets, gt_targets, selection, lam=1.0):
    """Mean over selected samples of CE + lam * [label == 1] * smooth-L1."""
    selection = np.asarray(selection, dtype=bool)
    n_sel = int(selection.sum())
    if n_sel == 0:
        log.warning("branch_loss: empty selection, branch contributes 0")
        return 0.0
    labels = np.asarray(labels, dtype=np.int64)
    ce = cross_entropy(np.asarray(probs)[selection], labels[selection])
    pos = selection & (labels == 1)
    reg = smooth_l1(np.asarray(pred_targets)[pos], np.asarray(gt_targets)[pos])
    return float((ce.sum() + lam * reg.sum()) / n_sel)


def branch_loss_and_grad(logits, labels, pred_targets, gt_targets, selection, lam=1.0):
    """Same loss as :func:`branch_loss`, taking raw 2-way logits, plus gradients.

    Returns ``(loss, dlogits, dpred)`` with gradients shaped like the inputs.
    """
    logits = np.asarray(logits)
    selection = np.asarray(selection, dtype=bool)
    dlogits = np.zeros_like(logits)
    dpred = np.zeros_like(pred_targets)
    n_sel = int(selection.sum())
    if n_sel == 0:
        log.warning("branch_loss: empty selection, branch contributes 0")
        return 0.0, dlogits, dpred
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.flatnonzero(selection)
    y = labels[idx]
    z = logits[idx].astype(np.float64)
    probs = softmax_pair(z)
    ce = cross_entropy(probs, y)
    g = probs.copy()
    g[np.arange(len(y)), y] -= 1.0
    dlogits[idx] = (g / n_sel).astype(dlogits.dtype)

    pos_idx = idx[y == 1]
    diff = pred_targets[pos_idx].astype(np.float64) - np.asarray(gt_targets)[pos_idx]
    reg = smooth_l1(pred_targets[pos_idx], np.asarray(gt_targets)[pos_idx])
    dreg = np.where(np.abs(diff) < 1, diff, np.sign(diff))
    dpred[pos_idx] = (lam * dreg / n_sel).astype(dpred.dtype)
    loss = (ce.sum() + lam * reg.sum()) / n_sel
    return float(loss), dlogits, dpred


def total_loss(branch_losses, alphas=(1.0, 1.0, 1.0)):
    return float(sum(a * l for a, l in zip(alphas, branch_losses)))
