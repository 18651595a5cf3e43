"""Online hard example mining for one detection branch.

Step 1 keeps an anchor's loss only if it beats all of its 8 spatial
neighbours in the same scale slice; step 2 ranks the survivors and takes a
1:3 positive:negative batch.
"""

import logging

import numpy as np

from .anchors import IGNORE, NEGATIVE, POSITIVE

log = logging.getLogger(__name__)


def spatial_suppress(losses, exempt=None):
    """Non-maximum suppression of a (H, W, S) loss grid over 8-neighbourhoods.

    Returns ``(suppressed_losses, survived)``. Ties suppress both sides; border
    neighbours that do not exist never suppress. ``exempt`` marks anchors that
    always survive.
    """
    losses = np.asarray(losses, dtype=np.float64)
    h, w, _ = losses.shape
    padded = np.pad(losses, ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    survived = np.ones(losses.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            survived &= losses > nb
    if exempt is not None:
        survived |= np.asarray(exempt, dtype=bool).reshape(losses.shape)
    return np.where(survived, losses, 0.0), survived


def _ranked(idx, losses):
    # descending loss, ascending anchor index on ties
    return idx[np.lexsort((idx, -losses[idx]))]


def select_hard(losses, labels, batch=256, survived=None, fallback_losses=None):
    """Pick up to ``batch`` anchors: at most batch/4 positives, negatives fill the rest.

    ``losses`` are post-suppression losses (flattened anchor order), ``survived``
    the mask from :func:`spatial_suppress` (defaults to all). When the surviving
    pool cannot fill the batch and ``fallback_losses`` (pre-suppression) is
    given, the shortfall is taken from suppressed anchors ranked by those.
    Returns a boolean selection mask.
    """
    if batch <= 0:
        raise ValueError("select_hard: batch must be positive")
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    n = len(losses)
    survived = np.ones(n, dtype=bool) if survived is None else np.asarray(survived, bool).reshape(-1)
    pos_quota = batch // 4

    pos_pool = np.flatnonzero(survived & (labels == POSITIVE))
    neg_pool = np.flatnonzero(survived & (labels == NEGATIVE))
    pos = _ranked(pos_pool, losses)[:pos_quota]
    neg = _ranked(neg_pool, losses)[:batch - len(pos)]
    chosen = [pos, neg]
    short = batch - len(pos) - len(neg)

    if short > 0 and fallback_losses is not None:
        fb = np.asarray(fallback_losses, dtype=np.float64).reshape(-1)
        extra_neg = _ranked(np.flatnonzero(~survived & (labels == NEGATIVE)), fb)[:short]
        short -= len(extra_neg)
        extra_pos = _ranked(np.flatnonzero(~survived & (labels == POSITIVE)), fb)
        extra_pos = extra_pos[:max(0, min(short, pos_quota - len(pos)))]
        short -= len(extra_pos)
        chosen += [extra_neg, extra_pos]
        log.debug("select_hard: filled %d from suppressed anchors", len(extra_neg) + len(extra_pos))
    if short > 0:
        log.warning("select_hard: only %d candidates for a batch of %d", batch - short, batch)

    mask = np.zeros(n, dtype=bool)
    for c in chosen:
        mask[c] = True
    return mask


def random_select(labels, batch, rng):
    """Uniform 1:3 sampling used when mining is switched off."""
    labels = np.asarray(labels).reshape(-1)
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    pos = rng.permutation(pos)[:batch // 4]
    neg = rng.permutation(neg)[:batch - len(pos)]
    mask = np.zeros(len(labels), dtype=bool)
    mask[pos] = True
    mask[neg] = True
    return mask


def mine_branch(anchor_losses, labels, grid_shape, batch=256, forced=None, fallback=True):
    """Full OHEM pass for one branch. ``anchor_losses`` are per-anchor CE values in
    anchor order; ignored anchors are zeroed before suppression."""
    h, w, s = grid_shape
    raw = np.where(np.asarray(labels) == IGNORE, 0.0, anchor_losses)
    grid = raw.reshape(h, w, s)
    exempt = None if forced is None else np.asarray(forced).reshape(h, w, s)
    sup, survived = spatial_suppress(grid, exempt=exempt)
    return select_hard(sup.reshape(-1), labels, batch, survived.reshape(-1),
                       fallback_losses=raw if fallback else None)
