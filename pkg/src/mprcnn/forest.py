"""Cascaded RealBoost forest of depth-limited trees with hard-negative bootstrapping.

Each sample starts from an additive score ``F0 = 0.5 * logit(rpn_score)``
(or 0 when initialisation is off); trees add real-valued leaf scores and the
probability of the positive class is ``sigmoid(2 F)``. Splits minimise the
RealBoost normaliser ``sum_leaves sqrt(W+ W-)`` over quantile-binned features,
leaves take ``0.5 * log((W+ + eps) / (W- + eps))``.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

MAGIC = b"MPBF"
VERSION = 1
LEAF_CLIP = 4.0
PROB_CLIP = 1e-6


class ForestError(ValueError):
    pass


@dataclass
class Tree:
    feature: np.ndarray    # int32, -1 on leaves
    threshold: np.ndarray  # float32; x <= threshold goes left
    left: np.ndarray       # int32 child index, -1 on leaves
    right: np.ndarray
    value: np.ndarray      # float32 leaf scores

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, X):
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[node]
            node = np.where(active, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X):
        return self.value[self.apply(X)].astype(np.float64)


@dataclass
class ForestModel:
    trees: list
    n_features: int
    init_from_rpn: bool = True
    cascade_log: list = field(default_factory=list)


@dataclass
class ForestConfig:
    stages: tuple = (64, 128, 256, 512, 1024, 1536)
    final_trees: int = 2048
    divisor: int = 8
    max_depth: int = 5
    n_bins: int = 32
    mine_per_stage: int = 1250
    min_leaf: int = 1
    init_from_rpn: bool = True
    shrinkage: float = 1.0

    def schedule(self):
        stages = [max(1, s // self.divisor) for s in self.stages]
        return stages, max(1, self.final_trees // self.divisor)


# -- scoring ---------------------------------------------------------------------

def initial_score(rpn_scores, enabled=True):
    p = np.clip(np.asarray(rpn_scores, dtype=np.float64), PROB_CLIP, 1 - PROB_CLIP)
    if not enabled:
        return np.zeros_like(p)
    return 0.5 * np.log(p / (1 - p))


def score(model, features, rpn_scores):
    """Additive score F per row: F0(rpn_score) + sum of tree outputs."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float32))
    if X.shape[1] != model.n_features:
        raise ForestError(f"feature length {X.shape[1]} != model's {model.n_features}")
    F = initial_score(np.atleast_1d(rpn_scores), model.init_from_rpn)
    for tree in model.trees:
        F = F + tree.predict(X)
    return F


def probability(F):
    return 1.0 / (1.0 + np.exp(-2.0 * np.asarray(F, dtype=np.float64)))


def nll(F, y01):
    """Negative log-likelihood of labels in {0, 1} under p = sigmoid(2F), exactly summed."""
    ys = 2.0 * np.asarray(y01, dtype=np.float64) - 1.0
    return math.fsum(np.logaddexp(0.0, -2.0 * ys * F))


# -- training --------------------------------------------------------------------

def quantile_edges(X, n_bins):
    """Per-feature candidate thresholds (sorted unique data values), padded with +inf."""
    n, d = X.shape
    qs = np.linspace(0, 1, n_bins + 1)[1:-1]
    edges = np.full((d, n_bins - 1), np.inf, dtype=np.float32)
    counts = np.zeros(d, dtype=np.int64)
    q = np.quantile(X, qs, axis=0, method="lower").T.astype(np.float32)
    for f in range(d):
        u = np.unique(q[f])
        edges[f, :len(u)] = u
        counts[f] = len(u)
    return edges, counts


def bin_features(X, edges):
    Xb = np.empty(X.shape, dtype=np.uint8)
    for f in range(X.shape[1]):
        Xb[:, f] = np.searchsorted(edges[f], X[:, f], side="left")
    return Xb


@njit(cache=True)
def _histogram(Xb, idx, wpos, wneg, n_bins):
    d = Xb.shape[1]
    hist = np.zeros((2, d, n_bins))
    for i in idx:
        wp = wpos[i]
        wn = wneg[i]
        row = Xb[i]
        for f in range(d):
            b = row[f]
            hist[0, f, b] += wp
            hist[1, f, b] += wn
    return hist


def _best_split(hist, n_edges):
    """Minimise sqrt(W+_L W-_L) + sqrt(W+_R W-_R). Returns (feature, bin, z) or None."""
    cp = np.cumsum(hist[0], axis=1)[:, :-1]
    cn = np.cumsum(hist[1], axis=1)[:, :-1]
    tp, tn = hist[0].sum(axis=1, keepdims=True), hist[1].sum(axis=1, keepdims=True)
    z = np.sqrt(cp * cn) + np.sqrt(np.maximum(tp - cp, 0) * np.maximum(tn - cn, 0))
    valid = np.arange(z.shape[1])[None, :] < n_edges[:, None]
    valid &= ((cp + cn) > 0) & ((tp - cp + tn - cn) > 0)
    z = np.where(valid, z, np.inf)
    flat = int(np.argmin(z))
    f, b = divmod(flat, z.shape[1])
    if not np.isfinite(z[f, b]):
        return None
    return f, b, float(z[f, b])


def _leaf_value(wp, wn, eps):
    return float(np.clip(0.5 * np.log((wp + eps) / (wn + eps)), -LEAF_CLIP, LEAF_CLIP))


def fit_tree(X, Xb, edges, n_edges, y01, F, max_depth=5, n_bins=32, min_leaf=1, shrinkage=1.0):
    """Grow one RealBoost tree on the current scores ``F`` and return it.

    Leaf scores are afterwards shrunk (halved, ultimately zeroed) wherever they
    would raise the logistic NLL of the samples in that leaf, which keeps the
    training NLL non-increasing tree by tree.
    """
    ys = 2.0 * y01 - 1.0
    w = np.exp(-ys * F)
    w /= w.sum()
    wpos = np.where(y01 == 1, w, 0.0)
    wneg = np.where(y01 == 1, 0.0, w)
    eps = 0.5 / len(y01)
    feature, threshold, left, right, value = [], [], [], [], []
    leaf_members = []

    def grow(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        wp, wn = float(wpos[idx].sum()), float(wneg[idx].sum())
        split = None
        if depth < max_depth and len(idx) >= 2 * min_leaf and wp > 0 and wn > 0:
            hist = _histogram(Xb, idx, wpos, wneg, n_bins)
            split = _best_split(hist, n_edges)
            if split is not None and split[2] >= np.sqrt(wp * wn) * (1 - 1e-12):
                split = None
        if split is None:
            value[node] = _leaf_value(wp, wn, eps) * shrinkage
            leaf_members.append((node, idx))
            return node
        f, b, _ = split
        go_left = Xb[idx, f] <= b
        feature[node] = f
        threshold[node] = edges[f, b]
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y01)), 0)
    value = np.asarray(value, dtype=np.float32)
    for node, idx in leaf_members:
        value[node] = _safeguard(value[node], F[idx], ys[idx])
    return Tree(np.asarray(feature, np.int32), np.asarray(threshold, np.float32),
                np.asarray(left, np.int32), np.asarray(right, np.int32), value)


def _safeguard(h, F, ys, max_halvings=30):
    base = math.fsum(np.logaddexp(0.0, -2.0 * ys * F))
    h = np.float32(h)
    for _ in range(max_halvings):
        if h == 0:
            break
        new = math.fsum(np.logaddexp(0.0, -2.0 * ys * (F + np.float64(h))))
        if new < base - 1e-12 * max(1.0, base):
            return h
        h = np.float32(h / 2)
    return np.float32(0.0)


def fit_forest(X, y01, F0, n_trees, cfg, nll_log=None):
    """Boost ``n_trees`` trees from initial scores ``F0``. Returns (trees, final F)."""
    X = np.asarray(X, dtype=np.float32)
    y01 = np.asarray(y01, dtype=np.int64)
    if len(np.unique(y01)) < 2:
        raise ForestError(f"single-class training set ({len(y01)} samples of class {y01[:1]})")
    edges, n_edges = quantile_edges(X, cfg.n_bins)
    Xb = bin_features(X, edges)
    F = np.asarray(F0, dtype=np.float64).copy()
    trees = []
    if nll_log is not None:
        nll_log.append(nll(F, y01))
    for _ in range(n_trees):
        tree = fit_tree(X, Xb, edges, n_edges, y01, F, cfg.max_depth, cfg.n_bins, cfg.min_leaf,
                        cfg.shrinkage)
        F = F + tree.predict(X)
        trees.append(tree)
        if nll_log is not None:
            nll_log.append(nll(F, y01))
    return trees, F


def train_forest(pos_X, pos_scores, neg_X, neg_scores, pool_X, pool_scores, cfg=None):
    """Bootstrapped cascade: one fresh forest per stage, each followed by mining the
    highest-scoring negatives from the pool; a final forest is trained on the last set."""
    cfg = cfg or ForestConfig()
    stages, final = cfg.schedule()
    X = np.concatenate([pos_X, neg_X]).astype(np.float32)
    s = np.concatenate([pos_scores, neg_scores]).astype(np.float64)
    y = np.concatenate([np.ones(len(pos_X), np.int64), np.zeros(len(neg_X), np.int64)])
    pool_X = np.asarray(pool_X, dtype=np.float32)
    pool_s = np.asarray(pool_scores, dtype=np.float64)
    remaining = np.arange(len(pool_X))
    cascade_log = []
    for si, n_trees in enumerate(stages):
        curve = []
        trees, _ = fit_forest(X, y, initial_score(s, cfg.init_from_rpn), n_trees, cfg, curve)
        entry = {"stage": si + 1, "trees": n_trees, "train_size": int(len(y)),
                 "positives": int(y.sum()), "nll": curve, "mined": 0, "mined_max_prob": None}
        if len(remaining) and cfg.mine_per_stage > 0:
            stage_model = ForestModel(trees, X.shape[1], cfg.init_from_rpn)
            prob = probability(score(stage_model, pool_X[remaining], pool_s[remaining]))
            order = np.lexsort((remaining, -prob))[:cfg.mine_per_stage]
            picked = remaining[order]
            X = np.concatenate([X, pool_X[picked]])
            s = np.concatenate([s, pool_s[picked]])
            y = np.concatenate([y, np.zeros(len(picked), np.int64)])
            remaining = np.setdiff1d(remaining, picked)
            entry["mined"] = int(len(picked))
            entry["mined_max_prob"] = float(prob[order[0]])
        cascade_log.append(entry)
        log.info("stage %d: %d trees on %d samples, mined %d", si + 1, n_trees, entry["train_size"],
                 entry["mined"])
    curve = []
    trees, _ = fit_forest(X, y, initial_score(s, cfg.init_from_rpn), final, cfg, curve)
    cascade_log.append({"stage": "final", "trees": final, "train_size": int(len(y)),
                        "positives": int(y.sum()), "nll": curve})
    return ForestModel(trees, X.shape[1], cfg.init_from_rpn, cascade_log)


# -- file format --------------------------------------------------------------------

def save_forest(path, model):
    """Versioned little-endian binary: header, trees as preorder node records, JSON log."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIBI", VERSION, model.n_features, int(model.init_from_rpn), len(model.trees)))
        for tree in model.trees:
            order = _preorder(tree)
            f.write(struct.pack("<I", len(order)))
            for n in order:
                leaf = tree.feature[n] < 0
                f.write(struct.pack("<ifBf", -1 if leaf else int(tree.feature[n]),
                                    0.0 if leaf else float(tree.threshold[n]), int(leaf),
                                    float(tree.value[n]) if leaf else 0.0))
        blob = json.dumps(model.cascade_log, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def _preorder(tree):
    out, stack = [], [0]
    while stack:
        n = stack.pop()
        out.append(n)
        if tree.feature[n] >= 0:
            stack.append(int(tree.right[n]))
            stack.append(int(tree.left[n]))
    return out


def load_forest(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ForestError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, n_features, init, n_trees = struct.unpack_from("<IIBI", data, 4)
        if version != VERSION:
            raise ForestError(f"{path}: unsupported version {version}")
        pos = 4 + struct.calcsize("<IIBI")
        rec = struct.calcsize("<ifBf")
        trees = []
        for _ in range(n_trees):
            (n_nodes,) = struct.unpack_from("<I", data, pos)
            pos += 4
            recs = [struct.unpack_from("<ifBf", data, pos + i * rec) for i in range(n_nodes)]
            pos += n_nodes * rec
            trees.append(_tree_from_preorder(recs))
        (blen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        cascade_log = json.loads(data[pos:pos + blen].decode("utf-8"))
    except struct.error as exc:
        raise ForestError(f"{path}: truncated forest file ({exc})") from exc
    return ForestModel(trees, n_features, bool(init), cascade_log)


def _tree_from_preorder(recs):
    n = len(recs)
    feature = np.array([r[0] for r in recs], dtype=np.int32)
    threshold = np.array([r[1] for r in recs], dtype=np.float32)
    value = np.array([r[3] for r in recs], dtype=np.float32)
    left = np.full(n, -1, dtype=np.int32)
    right = np.full(n, -1, dtype=np.int32)

    def build(i):
        if recs[i][2]:
            return i + 1
        left[i] = i + 1
        nxt = build(i + 1)
        right[i] = nxt
        return build(nxt)

    if build(0) != n:
        raise ForestError("malformed tree: preorder record count mismatch")
    return Tree(feature, threshold, left, right, value)
